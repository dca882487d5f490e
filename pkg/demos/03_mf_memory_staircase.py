"""Sequential Mono-Forward training leaves a staircase in resident memory.

Layers are trained one after another. At each handover the next layer's
input features are cached and a fresh optimizer state is allocated, while the
previous state is dropped (the allocator rarely hands that back to the OS, so
RSS steps up rather than down). Segmenting the sampled RSS trace into
plateaus shows the steps; the phase markers say which layer owned each stretch.
"""
from forwardbench.core import make_rng
from forwardbench.data import DataSplits
from forwardbench.models import MlpSpec
from forwardbench.telemetry import MIB, Telemetry, memory_plateaus, plateau_shifts
from forwardbench.trainers import TrainConfig, train_mf

from _sample import blobs

rng, centers = make_rng(0), make_rng(1).standard_normal((10, 784))
data = DataSplits(*(blobs(n, 784, 10, rng, centers, spread=2.0) for n in (10_000, 1000, 1000)))

tel = Telemetry(period_ms=20)
res = train_mf(MlpSpec((784, 1000, 1000, 1000, 10)), data,
               TrainConfig("mf", lr=1e-3, batch_size=128, max_epochs=2), telemetry=tel)

opt_bytes = 2 * (1000 * 1000 + 1000 + 1000 * 10) * 4
plateaus = memory_plateaus(res.samples, tolerance_bytes=opt_bytes)


def layer_at(t):
    return max((p.get("active_layer", "-") for p in tel.phases if p["t_s"] <= t), default="-", key=str)


print("phase markers:")
for p in tel.phases:
    print(f"  t={p['t_s']:6.2f}s  {p['phase']:<10} layer {p.get('active_layer', '-')}")
print(f"plateaus (tolerance {opt_bytes / MIB:.1f} MiB, one hidden layer's AdamW moments):")
for p in plateaus:
    print(f"  {p.t_start:6.2f}-{p.t_end:6.2f}s  {p.level / MIB:7.1f} MiB  (layer {layer_at(p.t_start)})")
print("shifts (MiB):", [round(s / MIB, 1) for s in plateau_shifts(plateaus)])
print(f"test acc {res.test_acc:.3f}")

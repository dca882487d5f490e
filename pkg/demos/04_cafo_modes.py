"""Cascaded Forward in its two modes on the MNIST sample.

Rand keeps the convolutional blocks at their random initialisation and only
fits one linear predictor per block. DFA first shapes the blocks with direct
feedback alignment (fixed random matrices carry the output error straight to
each block), then fits the predictors on the now-frozen blocks.
"""
from forwardbench.models import CascadeSpec, ConvBlockSpec
from forwardbench.trainers import TrainConfig, train_cafo_dfa, train_cafo_rand

from _sample import mnist_sample_splits

data = mnist_sample_splits()
spec = CascadeSpec((1, 28, 28), 10, (ConvBlockSpec(1, 8), ConvBlockSpec(8, 16)))
for name, fn, extras in (("rand", train_cafo_rand, {}), ("dfa", train_cafo_dfa, {"dfa_epochs": 3})):
    res = fn(spec, data, TrainConfig(f"cafo_{name}", lr=3e-3, batch_size=64, max_epochs=8, extras=extras))
    phases = sorted({p["phase"] for p in res.phases})
    print(f"cafo_{name:<4} test acc {res.test_acc:.3f}  time {res.metrics.time_s:6.1f} s  phases {phases}")

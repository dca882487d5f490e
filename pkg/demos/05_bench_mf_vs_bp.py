"""The full protocol, end to end, at desk scale: search, repeat over seeds, compare.

Both algorithms get the same random-search budget, the same early-stopping
rule and the same seeds; only the trainer differs. The last line is the
comparison row a results table would carry.
"""
import tempfile
from pathlib import Path

from forwardbench.bench import ExperimentConfig, compare, render_report, run_experiment

from _sample import mnist_sample_splits

out = Path(tempfile.mkdtemp(prefix="forwardbench-demo-"))
data = mnist_sample_splits()  # one fixed split; seeds vary initialisation and batch order
results = {}
for algo in ("bp", "mf"):
    space = {"lr": {"log": [1e-4, 1e-2]}, "batch_size": {"choice": [32, 64, 128]}}
    if algo == "mf":
        space["layer_epochs"] = {"int": [2, 6]}
    cfg = ExperimentConfig.from_dict({
        "dataset": {"name": "mnist"}, "model": {"hidden": [1000, 1000]},
        "train": {"algorithm": algo, "max_epochs": 6},
        "search": {"n_trials": 4, "space": space, "reuse_best": True},
        "stop": {"patience": 3},
        "run": {"seeds": [0, 1, 2], "output": str(out / algo)},
    })
    results[algo] = run_experiment(cfg, data_loader=lambda seed: data)
    agg = results[algo].aggregate["test_acc"]
    print(f"{algo}: test acc {100 * agg.mean:.2f} +/- {100 * agg.std:.2f} %")

row = compare(results["mf"].summary(), results["bp"].summary(), "MNIST (5k sample)", "MLP 2x1000")
print(render_report([row], "markdown"))
print(f"artifacts under {out}")

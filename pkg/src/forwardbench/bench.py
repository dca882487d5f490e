"""Experiment runner, BP-relative comparison rows and report rendering.

An experiment is one algorithm on one dataset/architecture, tuned and
trained once per seed. ``compare`` turns two aggregated experiments into a
row of deltas against the BP baseline: accuracy as a percentage-point
difference, time/energy/memory as relative percent changes.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

from .core import derive_seed, make_rng
from .data import DatasetSpec, DataSplits, load_raw, data_root, prepare_splits
from .models import (
    CascadeSpec,
    ConvBlockSpec,
    DenseBlockSpec,
    MlpSpec,
    default_cafo_blocks,
    save_checkpoint,
    spec_to_dict,
)
from .search import EarlyStopPolicy, SearchSpace, random_search
from .telemetry import PowerModel, RaplPowerReader, Telemetry, export_csv
from .trainers import TRAINERS, RunResult, TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration."""


# -- configuration ----------------------------------------------------------------

SECTIONS = {
    "dataset": {"name", "root", "subset", "val_fraction", "normalization", "test_subset"},
    "model": {"kind", "hidden", "activation", "blocks"},
    "train": {"algorithm", "lr", "batch_size", "max_epochs", "weight_decay", "extras"},
    "search": {"n_trials", "space", "reuse_best", "workers"},
    "stop": {"patience", "min_delta"},
    "telemetry": {"period_ms", "power_w", "power_source", "carbon_intensity"},
    "run": {"seeds", "repeat", "output"},
}


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec
    model: dict
    train: TrainConfig
    n_trials: int = 30
    space: dict = field(default_factory=dict)
    reuse_best: bool = False
    workers: int = 1
    seeds: tuple = (0,)
    telemetry: dict = field(default_factory=dict)
    output: Path = Path("runs")
    raw: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.seeds) < 1:
            raise ConfigError("at least one seed (repeat >= 1) is required")
        if self.n_trials < 0:
            raise ConfigError("search.n_trials must be >= 0")

    @property
    def algorithm(self) -> str:
        return self.train.algorithm

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        for section, body in d.items():
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
            unknown = set(body) - SECTIONS[section]
            if unknown:
                raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
        ds = dict(d.get("dataset", {}))
        if "name" not in ds:
            raise ConfigError("dataset.name is required")
        try:
            dataset = DatasetSpec(**ds)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        tr = dict(d.get("train", {}))
        stop = d.get("stop", {})
        try:
            train = TrainConfig(
                algorithm=tr.get("algorithm", "bp"),
                lr=float(tr.get("lr", 1e-3)),
                batch_size=int(tr.get("batch_size", 64)),
                max_epochs=int(tr.get("max_epochs", 20)),
                weight_decay=float(tr.get("weight_decay", 0.0)),
                early_stop=EarlyStopPolicy(int(stop.get("patience", 10)), float(stop.get("min_delta", 0.0)),
                                           int(tr.get("max_epochs", 20))),
                extras=dict(tr.get("extras", {})),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        run = d.get("run", {})
        if "seeds" in run:
            seeds = tuple(int(s) for s in run["seeds"])
        else:
            repeat = int(run.get("repeat", 1))
            if repeat < 1:
                raise ConfigError("run.repeat must be >= 1")
            seeds = tuple(range(repeat))
        out = Path(run.get("output", "runs"))
        if base_dir is not None and not out.is_absolute():
            out = base_dir / out
        search = d.get("search", {})
        return cls(dataset, dict(d.get("model", {})), train, int(search.get("n_trials", 30)),
                   dict(search.get("space", {})), bool(search.get("reuse_best", False)),
                   int(search.get("workers", 1)), seeds, dict(d.get("telemetry", {})), out, d)

    def config_hash(self) -> str:
        """SHA-256 of the canonical config, output location excluded."""
        body = {k: v for k, v in self.raw.items()}
        if "run" in body:
            body["run"] = {k: v for k, v in body["run"].items() if k != "output"}
        return hashlib.sha256(json.dumps(body, sort_keys=True, default=str).encode()).hexdigest()[:16]


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return ExperimentConfig.from_dict(raw)


def build_model_spec(config: ExperimentConfig):
    """MLP widths (input, *hidden, classes) or a block cascade, from ``[model]``."""
    m = config.model
    ds = config.dataset
    kind = m.get("kind", "cascade" if config.algorithm.startswith("cafo") else "mlp")
    if kind == "mlp":
        if config.algorithm.startswith("cafo"):
            raise ConfigError("CaFo needs model.kind = 'cascade'")
        hidden = tuple(m.get("hidden", (1000, 1000)))
        return MlpSpec((int(np.prod(ds.image_shape)), *hidden, ds.num_classes), m.get("activation", "relu"))
    if kind != "cascade":
        raise ConfigError(f"unknown model.kind {kind!r}")
    if config.algorithm in ("ff", "mf"):
        raise ConfigError(f"{config.algorithm} trains MLPs only")
    if "blocks" in m:
        blocks = []
        for b in m["blocks"]:
            b = dict(b)
            blocks.append(DenseBlockSpec(**b) if b.pop("type", "conv") == "dense" else ConvBlockSpec(**b))
        blocks = tuple(blocks)
    else:
        blocks = default_cafo_blocks(ds.image_shape[0])
    return CascadeSpec(ds.image_shape, ds.num_classes, blocks)


def make_telemetry(settings: dict) -> Telemetry:
    source = settings.get("power_source", "constant")
    reader = RaplPowerReader() if source == "rapl" else None
    power = PowerModel("sampled" if reader is not None else "constant",
                       float(settings.get("power_w", 30.0)), float(settings.get("carbon_intensity", 400.0)), reader)
    period = settings.get("period_ms", 100)
    return Telemetry(period_ms=float(period) if period else None, power=power)


# -- aggregates -----------------------------------------------------------------------

@dataclass(frozen=True)
class Aggregate:
    mean: float
    std: float
    n: int

    @classmethod
    def of(cls, values) -> "Aggregate":
        v = np.asarray([x for x in values if x is not None], dtype=np.float64)
        if v.size == 0:
            return cls(float("nan"), float("nan"), 0)
        return cls(float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0, int(v.size))

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "n": self.n}


METRIC_KEYS = ("time_s", "energy_wh", "peak_mem_mib", "gflops", "co2e_g")


def aggregate_runs(results: list) -> dict:
    ok = [r for r in results if r.status == "ok"]
    agg = {"test_acc": Aggregate.of([r.test_acc for r in ok]),
           "best_val_acc": Aggregate.of([r.best_val_acc for r in ok])}
    for k in METRIC_KEYS:
        agg[k] = Aggregate.of([getattr(r.metrics, k) for r in ok])
    return agg


# -- experiment runner ---------------------------------------------------------------

def run_record(result: RunResult, config_hash: str, seed: int) -> dict:
    return {
        "config_hash": config_hash,
        "seed": seed,
        "algorithm": result.algorithm,
        "status": result.status,
        "diagnostic": result.diagnostic,
        "params": _jsonable(result.hyperparams),
        "epochs": result.epochs,
        "best_epoch": result.best_epoch,
        "best_val_acc": _finite_or_none(result.best_val_acc),
        "curves": {"train_loss": [float(x) for x in result.train_loss],
                   "val_acc": [float(x) for x in result.val_acc]},
        "test_acc": _finite_or_none(result.test_acc),
        "metrics": result.metrics.to_dict(),
        "phases": result.phases,
        "log": _jsonable(result.logs),
    }


def _finite_or_none(x):
    return float(x) if x is not None and math.isfinite(x) else None


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    runs: list  # RunResult per seed, failed seeds included
    aggregate: dict
    records: list
    output: Path | None = None

    def summary(self, dataset: str | None = None, architecture: str | None = None) -> "Summary":
        return Summary.from_aggregate(self.aggregate, dataset or self.config.dataset.name,
                                      architecture or build_model_spec(self.config).label(), self.config.algorithm)


def default_data_loader(config: ExperimentConfig):
    """Load the official split once, then subsample/split/normalize per seed."""
    train_raw, test_raw = load_raw(config.dataset.name, data_root(config.dataset.root))

    def load(seed: int) -> DataSplits:
        return prepare_splits(train_raw, test_raw, config.dataset, seed).flat().astype(np.float32)

    return load


def tune(config: ExperimentConfig, spec, data: DataSplits, seed: int, trainer=None, ledger_path=None):
    """Random search for one seed; every trial trains with that seed."""
    trainer = trainer or TRAINERS[config.algorithm]
    space = SearchSpace.default(config.algorithm).with_overrides(config.space)

    def train_fn(params, trial_seed):
        res = trainer(spec, data, config.train.with_params(params, trial_seed), None)
        res.hyperparams = params
        return res

    return random_search(space, config.n_trials, train_fn, make_rng(derive_seed(seed, 100)),
                         ledger_path=ledger_path, workers=config.workers, trial_seed=seed)


def run_experiment(config: ExperimentConfig, data_loader=None, trainer=None, write: bool = True) -> ExperimentResult:
    """Tune and final-train once per seed; persist artifacts; aggregate over completed seeds.

    ``data_loader(seed) -> DataSplits`` and ``trainer`` default to the real
    dataset and the configured algorithm; tests substitute both.
    """
    spec = build_model_spec(config)
    loader = data_loader or default_data_loader(config)
    trainer = trainer or TRAINERS[config.algorithm]
    chash = config.config_hash()
    out = Path(config.output)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        (out / "trials.jsonl").write_text("")
    runs, records = [], []
    for seed in config.seeds:
        seed_dir = out / f"seed_{seed}"
        if write:
            seed_dir.mkdir(parents=True, exist_ok=True)
        data = loader(seed)
        try:
            result = _run_seed(config, spec, data, seed, trainer, seed_dir if write else None)
        except Exception as exc:  # noqa: BLE001 - a failed seed is recorded, the rest continue
            log.warning("seed %d failed: %s", seed, exc)
            result = getattr(exc, "partial", None) or RunResult(config.algorithm, None)
            result.status = "failed"
            result.diagnostic = f"{type(exc).__name__}: {exc}"
        runs.append(result)
        rec = run_record(result, chash, seed)
        records.append(rec)
        if write:
            _write_json(seed_dir / "run.json", rec)
            if result.samples:
                export_csv(result.samples, seed_dir / "samples.csv")
            if result.status == "ok" and result.params is not None:
                save_checkpoint(seed_dir / "checkpoint.fwdb", spec, result.params,
                                {"algorithm": config.algorithm, "seed": seed, "config_hash": chash})
            ledger = seed_dir / "trials.jsonl"
            if ledger.exists():
                with open(out / "trials.jsonl", "a") as fh:
                    for line in ledger.read_text().splitlines():
                        fh.write(json.dumps({"seed": seed, **json.loads(line)}, sort_keys=True) + "\n")
    completed = [r for r in runs if r.status == "ok"]
    if not completed:
        raise RuntimeError("every seed failed: " + "; ".join(str(r.diagnostic) for r in runs))
    if len(completed) < len(runs):
        log.warning("aggregating over %d of %d seeds", len(completed), len(runs))
    agg = aggregate_runs(runs)
    result = ExperimentResult(config, runs, agg, records, out if write else None)
    if write:
        _write_json(out / "run.json", experiment_record(result, spec))
        first = next(r for r in runs if r.status == "ok")
        if first.samples:
            export_csv(first.samples, out / "samples.csv")
    return result


def _run_seed(config, spec, data, seed, trainer, seed_dir):
    if config.n_trials > 0:
        ledger = seed_dir / "trials.jsonl" if seed_dir is not None else None
        if ledger is not None:
            ledger.write_text("")
        search = tune(config, spec, data, seed, trainer, ledger)
        if search.best.status != "ok":
            raise RuntimeError("every search trial failed")
        params = search.best.params
        if config.reuse_best:
            # the best trial already trained with this seed: rerunning would repeat it exactly
            result = search.best.result
            result.hyperparams = params
            return result
    else:
        params = {}
    result = trainer(spec, data, config.train.with_params(params, seed), make_telemetry(config.telemetry))
    result.hyperparams = params
    return result


def experiment_record(result: ExperimentResult, spec) -> dict:
    """Top-level run.json: the first completed seed's record plus mean test accuracy and metrics."""
    agg = result.aggregate
    first = next(rec for rec, r in zip(result.records, result.runs) if r.status == "ok")
    return {
        **first,
        "test_acc": agg["test_acc"].mean,
        "metrics": {k: agg[k].mean for k in METRIC_KEYS},
        "seeds": list(result.config.seeds),
        "dataset": result.config.dataset.name,
        "architecture": spec.label(),
        "model": spec_to_dict(spec),
        "aggregate": {k: v.to_dict() for k, v in agg.items()},
        "runs": result.records,
    }


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


# -- comparison --------------------------------------------------------------------------

@dataclass(frozen=True)
class Summary:
    """Mean accuracy (percent) and efficiency metrics of one experiment."""

    accuracy: float
    time_s: float
    energy_wh: float
    peak_mem_mib: float | None
    dataset: str = ""
    architecture: str = ""
    algorithm: str = ""

    @classmethod
    def from_aggregate(cls, agg: dict, dataset="", architecture="", algorithm="") -> "Summary":
        return cls(100.0 * agg["test_acc"].mean, agg["time_s"].mean, agg["energy_wh"].mean,
                   agg["peak_mem_mib"].mean if agg["peak_mem_mib"].n else None, dataset, architecture, algorithm)

    @classmethod
    def from_run_dir(cls, path) -> "Summary":
        rec = json.loads((Path(path) / "run.json").read_text())
        m = rec["metrics"]
        if rec.get("test_acc") is None:
            raise ValueError(f"{path}: run has no test accuracy")
        return cls(100.0 * rec["test_acc"], m["time_s"], m["energy_wh"], m.get("peak_mem_mib"),
                   rec.get("dataset", ""), rec.get("architecture", ""), rec.get("algorithm", ""))


@dataclass(frozen=True)
class ComparisonRow:
    dataset: str
    architecture: str
    d_acc: float  # percentage points
    d_time: float | None  # relative percent; None = undefined (zero baseline)
    d_energy: float | None
    d_mem: float | None

    def to_dict(self) -> dict:
        return {"dataset": self.dataset, "architecture": self.architecture, "d_acc": self.d_acc,
                "d_time": self.d_time, "d_energy": self.d_energy, "d_mem": self.d_mem}

    @classmethod
    def from_dict(cls, d: dict) -> "ComparisonRow":
        return cls(d["dataset"], d["architecture"], d["d_acc"], d.get("d_time"), d.get("d_energy"), d.get("d_mem"))


def relative_delta(alt, base) -> float | None:
    """``100 * (alt - base) / base``; ``None`` when the baseline is zero or absent."""
    if alt is None or base is None or base == 0:
        return None
    return 100.0 * (alt - base) / base


def compare(alt: Summary, baseline: Summary, dataset: str | None = None,
            architecture: str | None = None) -> ComparisonRow:
    """Deltas of ``alt`` against the BP ``baseline``; positive ΔAcc and negative ΔX favor ``alt``."""
    return ComparisonRow(
        dataset if dataset is not None else (alt.dataset or baseline.dataset),
        architecture if architecture is not None else (alt.architecture or baseline.architecture),
        alt.accuracy - baseline.accuracy,
        relative_delta(alt.time_s, baseline.time_s),
        relative_delta(alt.energy_wh, baseline.energy_wh),
        relative_delta(alt.peak_mem_mib, baseline.peak_mem_mib),
    )


# -- report ------------------------------------------------------------------------------

REPORT_COLUMNS = ("Dataset", "Architecture", "ΔAcc (pp)", "ΔTime (%)", "ΔEnergy (%)", "ΔMem (%)")
REPORT_FORMATS = ("csv", "json", "markdown")


def round_half_away(x: float, places: int = 2) -> float:
    """Round half away from zero on the decimal representation (-33.805 -> -33.81)."""
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP))


def format_delta(x) -> str:
    if x is None:
        return "undefined"
    r = round_half_away(x)
    return f"{r:+.2f}" if r != 0 else "0.00"


def _cells(row: ComparisonRow) -> list:
    return [row.dataset, row.architecture] + [format_delta(v) for v in (row.d_acc, row.d_time, row.d_energy, row.d_mem)]


def _best_indices(rows: list) -> dict:
    """Per delta column, the rows holding the most favorable rounded value."""
    best = {}
    for col, attr, sign in ((2, "d_acc", 1), (3, "d_time", -1), (4, "d_energy", -1), (5, "d_mem", -1)):
        vals = [(i, sign * round_half_away(getattr(r, attr))) for i, r in enumerate(rows) if getattr(r, attr) is not None]
        if vals:
            top = max(v for _, v in vals)
            best[col] = {i for i, v in vals if v == top}
    return best


def render_report(rows: list, fmt: str) -> str:
    """Render rows as csv, json or markdown with fixed column order and 2-decimal deltas."""
    if not fmt:
        raise ValueError("report format must be one of " + ", ".join(REPORT_FORMATS))
    fmt = {"md": "markdown"}.get(fmt, fmt)
    if fmt not in REPORT_FORMATS:
        raise ValueError(f"unknown report format {fmt!r}")
    if not rows:
        raise ValueError("a report needs at least one row")
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow(_cells(r))
        return buf.getvalue()
    if fmt == "json":
        return json.dumps([dict(zip(REPORT_COLUMNS, _cells(r))) for r in rows], indent=2, ensure_ascii=False) + "\n"
    best = _best_indices(rows) if len(rows) > 1 else {}
    lines = ["| " + " | ".join(REPORT_COLUMNS) + " |", "|" + "---|" * 2 + "---:|" * 4]
    for i, r in enumerate(rows):
        cells = _cells(r)
        for col, winners in best.items():
            if i in winners:
                cells[col] = f"**{cells[col]}**"
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def load_rows(directory) -> list:
    """Comparison rows from every ``*.json`` file in ``directory`` (object or list), by file name."""
    rows = []
    for path in sorted(Path(directory).glob("*.json")):
        obj = json.loads(path.read_text())
        for d in obj if isinstance(obj, list) else [obj]:
            rows.append(ComparisonRow.from_dict(d))
    return rows

"""``forwardbench`` command line: train, tune, bench, compare, report, verify.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import bench

log = logging.getLogger("forwardbench")


def _load(args) -> bench.ExperimentConfig:
    cfg = bench.load_config(args.config)
    if getattr(args, "out", None):
        cfg = replace(cfg, output=Path(args.out))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if getattr(args, "algorithm", None):
        cfg = replace(cfg, train=replace(cfg.train, algorithm=args.algorithm))
    return cfg


def cmd_train(args) -> int:
    """One algorithm, one config, no search: the configured hyperparameters as given."""
    cfg = replace(_load(args), n_trials=0)
    cfg = replace(cfg, seeds=cfg.seeds[:1])
    res = bench.run_experiment(cfg)
    r = res.runs[0]
    print(f"{cfg.algorithm}: best val acc {r.best_val_acc:.4f} (epoch {r.best_epoch + 1}), "
          f"test acc {r.test_acc:.4f} -> {cfg.output / 'run.json'}")
    return 0


def cmd_tune(args) -> int:
    """Random search only; the best trial's parameters go to best.json."""
    cfg = _load(args)
    if cfg.n_trials < 1:
        raise bench.ConfigError("tune needs search.n_trials >= 1")
    spec = bench.build_model_spec(cfg)
    seed = cfg.seeds[0]
    data = bench.default_data_loader(cfg)(seed)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    ledger = out / "trials.jsonl"
    ledger.write_text("")
    search = bench.tune(cfg, spec, data, seed, ledger_path=ledger)
    best = search.best.record()
    (out / "best.json").write_text(json.dumps(best, indent=2, sort_keys=True) + "\n")
    print(f"best trial {best['trial_id']}: val acc {best['val_acc']} params {best['params']}")
    return 0 if search.best.status == "ok" else 1


def cmd_bench(args) -> int:
    cfg = _load(args)
    res = bench.run_experiment(cfg)
    agg = res.aggregate["test_acc"]
    print(f"{cfg.algorithm}: test acc {agg.mean:.4f} ± {agg.std:.4f} over {agg.n} seed(s) -> {cfg.output / 'run.json'}")
    return 0


def cmd_compare(args) -> int:
    alt = bench.Summary.from_run_dir(args.alt)
    base = bench.Summary.from_run_dir(args.baseline)
    row = bench.compare(alt, base, args.dataset, args.architecture)
    text = json.dumps(row.to_dict(), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_report(args) -> int:
    rows = bench.load_rows(args.directory)
    if not rows:
        raise bench.ConfigError(f"no comparison rows in {args.directory}")
    doc = bench.render_report(rows, args.format)
    if args.out:
        Path(args.out).write_text(doc)
    else:
        sys.stdout.write(doc)
    return 0


def cmd_verify(args) -> int:
    from .gradcheck import run_all

    failed = 0
    for r in run_all():
        status = "PASS" if r.ok else "FAIL"
        failed += not r.ok
        print(f"{status}  {r.name:<40} rel err {r.rel_error:.2e} (tol {r.tol:.0e})")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="forwardbench", description="Fair BP vs BP-free training benchmark.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, seed=True):
        sp.add_argument("--config", required=True, help="experiment TOML file")
        sp.add_argument("--out", help="output directory (overrides run.output)")
        if seed:
            sp.add_argument("--seed", type=int, help="run a single seed")
        return sp

    t = with_config(sub.add_parser("train", help="train one algorithm with the configured hyperparameters"))
    t.add_argument("--algorithm", choices=bench.TRAINERS.keys())
    t.set_defaults(fn=cmd_train)
    with_config(sub.add_parser("tune", help="hyperparameter search only")).set_defaults(fn=cmd_tune)
    with_config(sub.add_parser("bench", help="search, repeat over seeds, measure")).set_defaults(fn=cmd_bench)

    c = sub.add_parser("compare", help="delta row of an alternative run directory against a BP run directory")
    c.add_argument("alt")
    c.add_argument("baseline")
    c.add_argument("--dataset")
    c.add_argument("--architecture")
    c.add_argument("--out")
    c.set_defaults(fn=cmd_compare)

    r = sub.add_parser("report", help="render a directory of comparison rows")
    r.add_argument("directory")
    r.add_argument("--format", default="markdown", choices=("csv", "json", "markdown", "md"))
    r.add_argument("--out")
    r.set_defaults(fn=cmd_report)

    sub.add_parser("verify", help="run the finite-difference gradient checks").set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit 1
        print(f"error: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line experiment runner.

    lapobench <subcommand> --config exp.yaml [--out DIR] [--seeds 0,1,2] [--threads N]
    lapobench diff A.json B.json

Exit status: 0 when every configured gate passes, 1 when a gate fails (the
failing report path is printed), 2 for a malformed config or bad arguments.
Per-seed artifacts live in ``<out>/seed_<s>/``; merged CSVs are written in
sorted seed order so reruns are byte-identical apart from wallclock columns.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import audit as audit_mod
from . import oracle, pipeline
from .config import ConfigError, ExperimentConfig, load_config
from .envlib import TransitionSet, sample_transitions
from .objective import TrainConfig, load_models, save_models, train, write_trace_csv

log = logging.getLogger("lapobench")

SUBCOMMANDS = ("gen-data", "train", "audit", "oracle-certify", "pipeline", "counterexample", "report")
FLOAT_TOL = 1e-9


def _seed_dir(cfg: ExperimentConfig, seed: int) -> Path:
    d = cfg.out / f"seed_{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_json(path: Path, payload) -> None:
    text = payload if isinstance(payload, str) else json.dumps(payload, indent=2, sort_keys=True)
    path.write_text(text + "\n")


def _train_config(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    return TrainConfig(**{**cfg.train.to_dict(), "seed": seed})


# -- per-seed flows; each returns (gate passed, report path, csv rows) ----------

def _gen_data(cfg, seed):
    data = sample_transitions(cfg.env, cfg.data["n"], seed, labeled=cfg.data["labeled"])
    path = _seed_dir(cfg, seed) / "transitions.bin"
    data.save(path)
    return True, path, []


def _train(cfg, seed):
    d = _seed_dir(cfg, seed)
    if cfg.data["path"]:
        data = TransitionSet.load(cfg.data["path"])
    else:
        data = sample_transitions(cfg.env, cfg.data["n"], seed, labeled=False)
    result = train(data.action_free(), _train_config(cfg, seed))
    save_models(d / "model", result)
    write_trace_csv(d / "trace.csv", result.trace)
    summary = {"seed": seed, **{k: v for k, v in result.final.items() if k != "wallclock_ms"}}
    _write_json(d / "train_summary.json", summary)
    gate = cfg.gates["loss"]
    return gate is None or result.final["total"] <= gate, d / "train_summary.json", []


def _audit(cfg, seed):
    d = _seed_dir(cfg, seed)
    ckpt = Path(cfg.audit["checkpoint"]) if cfg.audit["checkpoint"] else d / "model"
    if not (ckpt / "idm.json").exists():
        raise FileNotFoundError(f"no checkpoint at {ckpt}; run 'train' first or set audit.checkpoint")
    idm, _ = load_models(ckpt)
    final_loss = None
    if (d / "train_summary.json").exists():
        final_loss = json.loads((d / "train_summary.json").read_text()).get("total")
    thresholds = audit_mod.Thresholds(cfg.audit["determinism"], cfg.audit["disentanglement"])
    labeled = sample_transitions(cfg.env, max(10 * cfg.env.k, 40), pipeline.subseed(seed, 40), labeled=True)
    rep = audit_mod.audit(cfg.env, idm, cfg.audit["samples"], seed, thresholds, labeled,
                          final_loss=final_loss, beta=cfg.train.beta)
    path = d / "audit.json"
    _write_json(path, rep.to_json())
    return rep.all_pass, path, [rep.summary_row(seed)]


def _certify(cfg, seed):
    c = cfg.certify
    rep = oracle.certify_zero_loss(cfg.env, c["k_hat"], c["n"], seed, c["resolution"])
    path = _seed_dir(cfg, seed) / "certification.json"
    _write_json(path, rep.to_json())
    return rep.passed, path, []


def _pipeline(cfg, seed):
    p = cfg.pipeline
    res = pipeline.run_pipeline(cfg.env, p["N"], p["N_a"], cfg.train, cfg.policy, seed,
                                audit_samples=p["audit_samples"], baseline=p["baseline"])
    path = _seed_dir(cfg, seed) / "pipeline.json"
    _write_json(path, res.to_json())
    gate = cfg.gates["divergence"]
    ok = gate is None or all(v <= gate for v in res.divergence.values())
    return ok, path, res.csv_rows()


def _counterexample(cfg, seed):
    c = cfg.counterexample
    rep = pipeline.run_counterexample(c["name"], seed, c["n"], cfg.train, cfg.continuous, c["env"],
                                      cfg.audit["samples"])
    path = _seed_dir(cfg, seed) / "counterexample.json"
    _write_json(path, rep.to_json())
    row = {"name": rep.name, "env": rep.env, "seed": seed, "reconstruction": repr(rep.reconstruction),
           "demonstrated": int(rep.demonstrated)}
    return rep.demonstrated, path, [row]


FLOWS = {"gen-data": _gen_data, "train": _train, "audit": _audit, "oracle-certify": _certify,
         "pipeline": _pipeline, "counterexample": _counterexample}
MERGED_CSV = {"audit": ("audit_summary.csv", audit_mod.SUMMARY_COLUMNS),
              "pipeline": ("pipeline.csv", pipeline.RESULT_COLUMNS),
              "counterexample": ("counterexample.csv", ("name", "env", "seed", "reconstruction", "demonstrated"))}


def _run_one(args):
    sub, cfg, seed = args
    return seed, FLOWS[sub](cfg, seed)


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def run(sub: str, cfg: ExperimentConfig, threads: int = 1) -> int:
    cfg.out.mkdir(parents=True, exist_ok=True)
    if sub == "report":
        return report(cfg.out)
    jobs = [(sub, cfg, s) for s in sorted(cfg.seeds)]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = dict(pool.map(_run_one, jobs))
    else:
        results = dict(map(_run_one, jobs))
    failed = []
    rows = []
    for seed in sorted(results):
        ok, path, seed_rows = results[seed]
        rows.extend(seed_rows)
        print(f"seed {seed}: {'pass' if ok else 'FAIL'} -> {path}")
        if not ok:
            failed.append(path)
    if sub in MERGED_CSV:
        name, columns = MERGED_CSV[sub]
        _write_csv(cfg.out / name, columns, rows)
    for path in failed:
        print(f"gate failed: {path}", file=sys.stderr)
    return 1 if failed else 0


def report(out: Path) -> int:
    """Merge per-seed artifacts under ``out`` into CSV tables and plot series."""
    out = Path(out)
    rep_dir = out / "report"
    rep_dir.mkdir(parents=True, exist_ok=True)
    seed_dirs = sorted((p for p in out.glob("seed_*") if p.is_dir()), key=lambda p: int(p.name[5:]))
    loss_rows, div_rows, merged = [], [], []
    for d in seed_dirs:
        seed = int(d.name[5:])
        if (d / "trace.csv").exists():
            with open(d / "trace.csv") as fh:
                for row in csv.DictReader(fh):
                    loss_rows.append({"seed": seed, "step": row["step"], "reconstruction": row["reconstruction"],
                                      "entropy": row["entropy"], "total": row["total"]})
        for name in ("train_summary.json", "audit.json", "certification.json", "pipeline.json",
                     "counterexample.json"):
            if (d / name).exists():
                flat = _flatten(json.loads((d / name).read_text()))
                merged.extend({"seed": seed, "source": name, "key": k, "value": v} for k, v in flat)
        if (d / "pipeline.json").exists():
            res = pipeline.PipelineResult.from_dict(json.loads((d / "pipeline.json").read_text()))
            div_rows.extend(res.csv_rows())
    _write_csv(rep_dir / "merged.csv", ("seed", "source", "key", "value"), merged)
    _write_csv(rep_dir / "plot_loss.csv", ("seed", "step", "reconstruction", "entropy", "total"), loss_rows)
    _write_csv(rep_dir / "plot_divergence.csv", pipeline.RESULT_COLUMNS, div_rows)
    print(f"report written to {rep_dir}")
    return 0


def _flatten(obj, prefix: str = ""):
    if isinstance(obj, dict):
        for k in sorted(obj, key=str):
            yield from _flatten(obj[k], f"{prefix}.{k}" if prefix else str(k))
    elif isinstance(obj, list) and obj and all(isinstance(v, (dict, list)) for v in obj):
        for i, v in enumerate(obj):
            yield from _flatten(v, f"{prefix}[{i}]")
    else:
        yield prefix, repr(obj) if isinstance(obj, float) else json.dumps(obj)


# -- report diff ---------------------------------------------------------------

def _kind(data: dict) -> str:
    if "verdicts" in data and "determinism_score" in data:
        return "audit"
    if "divergence" in data and "baseline_divergence" in data:
        return "pipeline"
    raise ValueError("not an audit report or pipeline result")


def _diff(a, b, path: str, out: list[str]) -> None:
    if isinstance(a, dict) and isinstance(b, dict):
        for k in sorted(set(a) | set(b), key=str):
            p = f"{path}.{k}" if path else str(k)
            if k not in a or k not in b:
                out.append(f"{p}: {a.get(k, '<missing>')!r} != {b.get(k, '<missing>')!r}")
            else:
                _diff(a[k], b[k], p, out)
    elif isinstance(a, list) and isinstance(b, list) and len(a) == len(b):
        for i, (x, y) in enumerate(zip(a, b)):
            _diff(x, y, f"{path}[{i}]", out)
    elif isinstance(a, bool) or isinstance(b, bool):
        if a != b:
            out.append(f"{path}: {a!r} -> {b!r}")
    elif isinstance(a, (int, float)) and isinstance(b, (int, float)):
        both_nan = isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b)
        if not both_nan and not abs(a - b) <= FLOAT_TOL:
            out.append(f"{path}: {a!r} -> {b!r}")
    elif a != b:
        out.append(f"{path}: {a!r} -> {b!r}")


def diff_reports(a_path, b_path) -> list[str]:
    """Field-wise differences between two reports of the same kind; floats within 1e-9 are equal."""
    a = json.loads(Path(a_path).read_text())
    b = json.loads(Path(b_path).read_text())
    ka, kb = _kind(a), _kind(b)
    if ka != kb:
        raise ValueError(f"schema mismatch: {a_path} is an {ka!r} report but {b_path} is a {kb!r} report")
    out: list[str] = []
    _diff(a, b, "", out)
    return out


# -- entry point ---------------------------------------------------------------

def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--seeds expects comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lapobench", description=__doc__.split("\n\n")[0])
    subs = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = subs.add_parser(name)
        p.add_argument("--config", required=name != "report", help="YAML experiment config")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--seeds", type=_parse_seeds, help="comma-separated seeds (overrides the config)")
        p.add_argument("--threads", type=int, default=1, help="seeds run in parallel processes")
    d = subs.add_parser("diff", help="compare two audit or pipeline reports")
    d.add_argument("a", help="first report JSON")
    d.add_argument("b", help="second report JSON")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "diff":
        try:
            lines = diff_reports(args.a, args.b)
        except (ValueError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        for line in lines:
            print(line)
        return 0
    if args.command == "report" and not args.config:
        if not args.out:
            print("error: report needs --out or --config", file=sys.stderr)
            return 2
        return report(Path(args.out))
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config, args.seeds, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return run(args.command, cfg, args.threads)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

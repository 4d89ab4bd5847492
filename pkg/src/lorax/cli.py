"""``lorax`` command line: inspect, similarity, transfer, atc, synth-bench, synth-pair."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import re
import sys
import warnings
from pathlib import Path

import numpy as np

from . import synthbench
from .adapters import AdapterBundle
from .errors import EmptyTransfer, LoraxError
from .numerics import svd
from .similarity import PairingRules, build_similarity_report
from .tensor_store import parse_module_key, read_bundle, write_bundle
from .transfer import MODES, TransferConfig, materialize_bundle, transfer_bundle
from .transport import build_cost_matrix, solve_min_cost_flow

log = logging.getLogger("lorax")


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1) + "\n")


def cmd_inspect(args) -> int:
    bundle = read_bundle(args.model, skip_unsupported=args.skip_unsupported)
    print(f"{args.model}: {len(bundle)} tensors")
    for key, e in bundle.items():
        mk = parse_module_key(key)
        line = f"{key:<60} {e.dtype:<4} {'x'.join(map(str, e.shape)):<12} {mk.short_name()}"
        if args.svd and len(e.shape) == 2:
            s = svd(bundle.matrix(key)).sigma[: args.top]
            line += "  sigma: " + ", ".join(f"{x:.4f}" for x in s)
        print(line)
    if bundle.metadata:
        print("metadata:", json.dumps(bundle.metadata))
    return 0


def _rules(args, candidates):
    return PairingRules(candidates=candidates, rank_limit=args.rank, allow_dim_mapping=args.allow_dim_mapping,
                        weighted=getattr(args, "weighted", False), jobs=args.jobs)


def cmd_similarity(args) -> int:
    source, target = read_bundle(args.source), read_bundle(args.target)
    report = build_similarity_report(source, target, _rules(args, args.candidates))
    valid = [p for p in report.pairs if p.valid]
    if not valid:
        log.warning("pairing rules left no valid module pair; report is empty of scores")
    sides = ("left", "right") if args.side == "both" else (args.side,)
    for p in valid:
        vals = "  ".join(f"{s}={p.score.side(s):.4f}" for s in sides)
        print(f"{p.source_key.raw} -> {p.target_key.raw}  {vals}")
    print(f"{len(valid)} valid / {len(report.pairs)} scored pairs")
    if args.out:
        out = Path(args.out)
        _write_json(out, report.to_json())
        with open(out.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["source_key", "target_key", "left", "right", "valid", "invalid_reason"])
            for p in report.pairs:
                w.writerow([p.source_key.raw, p.target_key.raw, repr(p.score.left), repr(p.score.right),
                            p.valid, p.invalid_reason or ""])
    return 0


def _filter_blocks(path):
    if not path:
        return ()
    lines = Path(path).read_text().splitlines()
    return tuple(ln.strip() for ln in lines if ln.strip() and not ln.startswith("#"))


def cmd_transfer(args) -> int:
    source = read_bundle(args.source_model)
    adapter = AdapterBundle.from_tensor_bundle(read_bundle(args.source_adapter))
    target = read_bundle(args.target_model)
    config = TransferConfig(mode=args.mode, rank=args.rank, threshold=args.threshold,
                            filter_blocks=_filter_blocks(args.filter_blocks),
                            strict_paper_formula=args.strict_paper_formula, jobs=args.jobs)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", EmptyTransfer)
        moved, report = transfer_bundle(source, adapter, target, config)
    for w in caught:
        log.warning("%s", w.message)
    counts = {}
    for rec in report.modules:
        counts[rec.action] = counts.get(rec.action, 0) + 1
        print(f"{rec.target_key:<50} {rec.action:<12} src={rec.source_key} "
              f"left={_fmt(rec.left)} right={_fmt(rec.right)} ratio={_fmt(rec.frobenius_ratio)}")
    print("summary:", ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    if args.out:
        write_bundle(moved.to_tensor_bundle(dtype=args.dtype), args.out)
        _write_json(args.report or str(args.out) + ".report.json", report.to_json())
    if args.verify:
        before = materialize_bundle(adapter, source)
        after = materialize_bundle(moved, target)
        worst = 0.0
        for k, d in after.items():
            if k in before and before[k].shape == d.shape:
                worst = max(worst, float(np.linalg.norm(d - before[k]) / max(1.0, np.linalg.norm(before[k]))))
        print(f"verify: max relative materialization difference {worst:.3e}")
        if worst > args.verify_tol:
            print(f"verify failed: {worst:.3e} > {args.verify_tol:.1e}", file=sys.stderr)
            return 3
    return 0


def _fmt(x):
    return "-" if x is None else f"{x:.4f}"


def cmd_atc(args) -> int:
    source, target = read_bundle(args.source_model), read_bundle(args.target_model)
    report = build_similarity_report(source, target, _rules(args, "all"))
    if not any(p.valid for p in report.pairs):
        log.warning("every module pair is invalid; ATC is 1 by construction")
    sides = ("left", "right") if args.side == "both" else (args.side,)
    results = []
    for side in sides:
        cost = build_cost_matrix(report, side)
        plan = solve_min_cost_flow(cost)
        print(f"ATC[{side}] = {plan.atc:.6f}  (S={cost.s}, T={cost.t}, pivots={plan.iterations})")
        results.append(plan.to_json(side, args.include_plan))
    if args.out:
        _write_json(args.out, results[0] if len(results) == 1 else results)
    return 0


_PI_TERM = re.compile(r"^(?:(\d*\.?\d+)\*?)?pi(?:/(\d*\.?\d+))?$")


def _angle(tok: str) -> float:
    tok = tok.strip().lower().replace(" ", "")
    m = _PI_TERM.match(tok)
    if m:
        return float(m.group(1) or 1.0) * math.pi / float(m.group(2) or 1.0)
    return float(tok)


def _theta_grid(text) -> list[float]:
    """``"9"`` -> 9 evenly spaced points on [0, pi/2]; otherwise a comma list such as ``0,pi/8,0.5``."""
    text = str(text).strip()
    if text.isdigit() and int(text) > 1:
        return synthbench.default_theta_grid(int(text))
    return [_angle(t) for t in text.split(",") if t.strip()]


def cmd_synth_bench(args) -> int:
    spec = synthbench.SynthSpec()
    if args.spec:
        spec = synthbench.SynthSpec.from_json(json.loads(Path(args.spec).read_text()))
    spec.validate()
    thetas = _theta_grid(args.theta_grid)
    seeds = list(range(args.seed0, args.seed0 + args.seeds))
    rows = synthbench.run_sweep(spec, thetas, seeds, tuple(args.modes.split(",")), args.steps, args.lr, args.jobs)
    summary = synthbench.summarize(rows)
    for k, v in summary.items():
        print(f"{k}: {v}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep.csv").write_text(synthbench.rows_to_csv(rows))
        _write_json(out / "summary.json", summary)
    return 0


def cmd_synth_pair(args) -> int:
    spec = synthbench.SynthSpec(m=args.m, n=args.n, r=args.r, alignment_angle=_theta_grid(args.theta)[0],
                                modules=args.modules, seed=args.seed, noise=args.noise)
    source, target = synthbench.gen_model_pair(spec)
    tasks = synthbench.make_tasks(source, spec)
    adapter = synthbench.fit_lorax(source, tasks, spec.r, args.steps, args.lr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_bundle(source, out / "source.safetensors")
    write_bundle(target, out / "target.safetensors")
    write_bundle(adapter.to_tensor_bundle(), out / "adapter.safetensors")
    print(f"wrote source/target models and a rank-{spec.r} adapter to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lorax", description=__doc__)
    p.add_argument("--config", help="JSON file whose entries override command-line flags")
    p.add_argument("--log-level", default=os.environ.get("LORAX_LOG", "WARNING"))
    p.add_argument("--jobs", type=int, default=None, help="worker threads (default: all cores)")
    # --jobs is also accepted after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("inspect", parents=[common], help="list tensors of a bundle")
    s.add_argument("model")
    s.add_argument("--svd", action="store_true", help="print leading singular values")
    s.add_argument("--top", type=int, default=5)
    s.add_argument("--skip-unsupported", action="store_true", help="ignore conv kernels and other dtypes")
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("similarity", parents=[common], help="subspace similarity between two models")
    s.add_argument("source")
    s.add_argument("target")
    s.add_argument("--rank", type=int, default=None)
    s.add_argument("--side", choices=("left", "right", "both"), default="both")
    s.add_argument("--candidates", choices=("positional", "group", "all"), default="group")
    s.add_argument("--allow-dim-mapping", action="store_true")
    s.add_argument("--weighted", action="store_true")
    s.add_argument("--out", help="report JSON path; a .csv with the same stem is written next to it")
    s.set_defaults(func=cmd_similarity)

    s = sub.add_parser("transfer", parents=[common], help="transfer an adapter to a new base model")
    s.add_argument("source_model")
    s.add_argument("source_adapter")
    s.add_argument("target_model")
    s.add_argument("--mode", choices=MODES, default="project")
    s.add_argument("--rank", type=int, default=None)
    s.add_argument("--threshold", type=float, default=0.4)
    s.add_argument("--filter-blocks", help="file with one key prefix per line to exclude")
    s.add_argument("--strict-paper-formula", action="store_true")
    s.add_argument("--dtype", choices=("F16", "F32"), default="F32")
    s.add_argument("--out")
    s.add_argument("--report", help="report JSON path (default: <out>.report.json)")
    s.add_argument("--verify", action="store_true", help="compare materialized updates before/after")
    s.add_argument("--verify-tol", type=float, default=1e-6)
    s.set_defaults(func=cmd_transfer)

    s = sub.add_parser("atc", parents=[common], help="adapter transferability cost between two models")
    s.add_argument("source_model")
    s.add_argument("target_model")
    s.add_argument("--side", choices=("left", "right", "both"), default="both")
    s.add_argument("--rank", type=int, default=None)
    s.add_argument("--allow-dim-mapping", action="store_true")
    s.add_argument("--include-plan", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_atc)

    s = sub.add_parser("synth-bench", parents=[common], help="synthetic transfer sweep over alignment angles")
    s.add_argument("--spec", help="JSON SynthSpec")
    s.add_argument("--theta-grid", default="9", help="point count over [0, pi/2] or a comma list (pi allowed)")
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--seed0", type=int, default=0)
    s.add_argument("--modes", default="project,copy_sigma")
    s.add_argument("--steps", type=int, default=500)
    s.add_argument("--lr", type=float, default=0.1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_synth_bench)

    s = sub.add_parser("synth-pair", parents=[common], help="write a synthetic source/target pair and a fitted adapter")
    s.add_argument("--m", type=int, default=64)
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--r", type=int, default=8)
    s.add_argument("--theta", default="0")
    s.add_argument("--modules", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--steps", type=int, default=500)
    s.add_argument("--lr", type=float, default=0.1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_pair)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        overrides = json.loads(Path(args.config).read_text())
        for k, v in overrides.items():
            setattr(args, k.replace("-", "_"), v)
    logging.basicConfig(level=str(args.log_level).upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except LoraxError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface.

Every subcommand writes its outputs under the output directory (``--out``, or
the ``MASKSPARSITY_OUT`` environment variable when set). Failures print one
JSON error record on stderr; a bad configuration key exits with 2 and an
invariant violation (bad mask, mismatched checkpoint, broken plan) with 3.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint as ckpt
from . import schemas
from .checkpoint import CheckpointError
from .compute import ShapeError
from .data import DataFormatError
from .mask import MaskError, load_mask, save_mask, threshold_mask, uniform_mask
from .model import GraphError
from .pipeline import (TEMPLATES, ConfigKeyError, PlanError, StageError, apply_overrides, build_plan,
                       run_pipeline, template)
from .prune import apply_surgery, equivalence_check, report
from .sparsity import GammaSnapshot, gamma_histogram, histogram_records

EXIT_CONFIG = 2
EXIT_INVARIANT = 3
INVARIANT_ERRORS = (PlanError, StageError, MaskError, GraphError, CheckpointError, ShapeError,
                    DataFormatError, FileNotFoundError)


@dataclass
class CliConfig:
    subcommand: str
    config: str | None = None
    overrides: list[str] = field(default_factory=list)
    out: Path = Path("runs")
    seed: int | None = None
    threads: int = 1


def _write_json(path: Path, doc, schema: str | None = None) -> Path:
    if schema:
        schemas.validate(schema, doc)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def _write_csv(path: Path, rows: list[dict]) -> Path:
    with open(path, "w", newline="") as fh:
        if rows:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return path


def _plan_doc(args) -> dict:
    if args.config:
        doc = json.loads(Path(args.config).read_text())
        if "template" in doc:
            doc = {**template(doc["template"], doc.get("seed", 0)), **doc}
            doc.pop("template")
    else:
        doc = template(args.template or "masksparsity-desk", args.seed or 0)
    if args.seed is not None:
        doc["seed"] = args.seed
        if args.config is None:
            doc["run_id"] = f"{args.template or 'masksparsity-desk'}-s{args.seed}"
    return apply_overrides(doc, args.set or [])


def cmd_pipeline(args, out: Path, only: list[str] | None = None) -> dict:
    doc = _plan_doc(args)
    plan = build_plan(doc)
    result = run_pipeline(plan, out_dir=out, only=only, figures=not args.no_figures)
    run_dir = out / plan.run_id
    schemas.validate_jsonl("metrics", (run_dir / "metrics.jsonl").read_text()
                           if (run_dir / "metrics.jsonl").exists() else "")
    finals = {sid: r.final_top1 for sid, r in result.records.items()}
    return {"run_dir": str(run_dir), "final_top1": finals}


def cmd_stage(args, out: Path) -> dict:
    return cmd_pipeline(args, out, only=[args.name])


def cmd_mask(args, out: Path) -> dict:
    graph = ckpt.load_model(args.model)
    if args.theta is not None:
        mask = threshold_mask(graph, args.theta)
    elif args.ratio is not None:
        mask = uniform_mask(graph, args.ratio)
    else:
        mask = load_mask(args.import_path, graph, imported=True)
    path = out / "mask.json"
    doc = mask.to_dict(graph)
    schemas.validate("mask", doc)
    save_mask(mask, path, graph)
    return {"mask": str(path), "prune_fraction": round(mask.prune_fraction(), 6),
            "warnings": [w["message"] for w in mask.warnings]}


def cmd_prune(args, out: Path) -> dict:
    graph = ckpt.load_model(args.model)
    mask = load_mask(args.mask, graph)
    pruned = apply_surgery(graph, mask)
    hw = tuple(args.input_hw)
    rep = report(graph, pruned, hw)
    ckpt.save_model(pruned, out / "checkpoint", {"kind": "prune", "source": str(args.model)})
    _write_json(out / "report.json", rep.to_dict(), "report")
    return {"checkpoint": str(out / "checkpoint"), "summary": rep.summary()}


def cmd_report(args, out: Path) -> dict:
    before, after = ckpt.load_model(args.before), ckpt.load_model(args.after)
    rep = report(before, after, tuple(args.input_hw))
    doc = rep.to_dict()
    _write_json(out / "report.json", doc, "report")
    _write_csv(out / "report.csv", doc["per_layer"])
    if not args.no_figures:
        _report_figure(doc, out / "report.png")
    return {"report": str(out / "report.json"), "summary": rep.summary()}


def _report_figure(doc: dict, path: Path) -> None:
    from . import plotting  # noqa: F401  (selects the Agg backend)
    import matplotlib.pyplot as plt

    rows = doc["per_layer"]
    fig, ax = plt.subplots(figsize=(max(4, 0.25 * len(rows)), 3.5))
    x = np.arange(len(rows))
    ax.bar(x, [r["total"] for r in rows], color="lightgray", label="total")
    ax.bar(x, [r["kept"] for r in rows], color="tab:blue", label="kept")
    ax.set_xticks(x, [r["layer"] for r in rows], rotation=90, fontsize=6)
    ax.set_ylabel("channels")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_hist(args, out: Path) -> dict:
    if args.model:
        snap = GammaSnapshot.take(ckpt.load_model(args.model), args.stage or Path(args.model).parent.name, 0)
    else:
        records = [json.loads(line) for line in Path(args.snapshot).read_text().splitlines() if line.strip()]
        snap = GammaSnapshot.from_records(records)
    hist = gamma_histogram(snap, args.bins, (args.range[0], args.range[1]))
    recs = histogram_records(snap, hist)
    with open(out / "hist.jsonl", "w") as fh:
        for r in recs + snap.records():
            schemas.validate("hist", r)
            fh.write(json.dumps(r) + "\n")
    rows = [{"bin_low": f"{lo:.6g}", "bin_high": f"{hi:.6g}", "count": int(c)}
            for lo, hi, c in zip(hist.edges[:-1], hist.edges[1:], hist.counts[:-1])]
    rows.append({"bin_low": f"{hist.edges[-1]:.6g}", "bin_high": "inf", "count": int(hist.counts[-1])})
    _write_csv(out / "hist.csv", rows)
    if not args.no_figures:
        from .plotting import histogram_figure

        histogram_figure(hist, out / "hist.png", snap.stage)
    values = snap.all_values()
    below = float(np.mean(values < args.theta)) if values.size else 0.0
    return {"hist": str(out / "hist.jsonl"), "channels": int(values.size),
            "below_theta_fraction": round(below, 6)}


def cmd_verify(args, out: Path) -> dict:
    from .gradcheck import run_checks

    eq, eq_ok = None, None
    if args.model:
        graph = ckpt.load_model(args.model)
        mask = load_mask(args.mask, graph) if args.mask else threshold_mask(graph, args.theta)
        rng = np.random.default_rng(args.seed or 0)
        hw = tuple(args.input_hw)
        probe = rng.standard_normal((args.probes, graph.in_channels, *hw)).astype(np.float32)
        eq = equivalence_check(graph, mask, probe)
        eq_ok = eq < args.tolerance
    checks = [r.to_dict() for r in run_checks(args.instances, args.seed or 0)] if not args.skip_grad else []
    doc = {"equivalence_max_abs": eq, "equivalence_ok": eq_ok, "gradient_checks": checks,
           "ok": eq_ok is not False and all(c["ok"] for c in checks)}
    _write_json(out / "verify.json", doc, "verify")
    if not doc["ok"]:
        raise InvariantFailure("verification failed", doc)
    return doc


class InvariantFailure(RuntimeError):
    def __init__(self, message: str, detail: dict | None = None):
        super().__init__(message)
        self.detail = detail or {}


COMMANDS = {"pipeline": cmd_pipeline, "stage": cmd_stage, "mask": cmd_mask, "prune": cmd_prune,
            "report": cmd_report, "hist": cmd_hist, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="runs", help="output directory (MASKSPARSITY_OUT wins)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=1, help="BLAS threads; 1 keeps runs byte-identical")
    common.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    common.add_argument("-v", "--verbose", action="store_true")

    planned = argparse.ArgumentParser(add_help=False)
    planned.add_argument("--config", help="plan JSON file")
    planned.add_argument("--template", choices=TEMPLATES)
    planned.add_argument("--set", action="append", metavar="KEY=VALUE",
                         help="override an existing plan key, e.g. defaults.epochs=5")

    hw = argparse.ArgumentParser(add_help=False)
    hw.add_argument("--input-hw", type=int, nargs=2, default=[32, 32], metavar=("H", "W"))

    ap = argparse.ArgumentParser(prog="masksparsity", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="subcommand", required=True)
    sub.add_parser("pipeline", parents=[common, planned], help="run every stage of a plan")
    p = sub.add_parser("stage", parents=[common, planned], help="run one stage; prerequisites load from --out")
    p.add_argument("name")

    p = sub.add_parser("mask", parents=[common], help="generate a pruning mask from a checkpoint")
    p.add_argument("--model", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--theta", type=float)
    g.add_argument("--ratio", type=float)
    g.add_argument("--import", dest="import_path")

    p = sub.add_parser("prune", parents=[common, hw], help="remove masked channels")
    p.add_argument("--model", required=True)
    p.add_argument("--mask", required=True)

    p = sub.add_parser("report", parents=[common, hw], help="FLOPs/params before and after")
    p.add_argument("--before", required=True)
    p.add_argument("--after", required=True)

    p = sub.add_parser("hist", parents=[common], help="|gamma| histogram data")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--model")
    src.add_argument("--snapshot", help="gammas.jsonl written by a pipeline stage")
    p.add_argument("--bins", type=int, default=100)
    p.add_argument("--range", type=float, nargs=2, default=[0.0, 1.0], metavar=("LO", "HI"))
    p.add_argument("--theta", type=float, default=1e-2, help="reported sub-threshold mass")
    p.add_argument("--stage", default=None)

    p = sub.add_parser("verify", parents=[common, hw], help="surgery equivalence and gradient checks")
    p.add_argument("--model")
    p.add_argument("--mask")
    p.add_argument("--theta", type=float, default=1e-2)
    p.add_argument("--probes", type=int, default=8)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--skip-grad", action="store_true")
    return ap


def _fail(code: int, error: str, message: str, **extra) -> int:
    record = {"error": error, "exit_code": code, "message": message, **extra}
    print(json.dumps(record, sort_keys=True, default=str), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(os.environ.get("MASKSPARSITY_OUT") or args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        with threadpool_limits(limits=args.threads):
            result = COMMANDS[args.subcommand](args, out)
    except ConfigKeyError as exc:
        return _fail(EXIT_CONFIG, "config_key", str(exc), key=exc.key)
    except InvariantFailure as exc:
        return _fail(EXIT_INVARIANT, "verification", str(exc), detail=exc.detail)
    except INVARIANT_ERRORS as exc:
        extra = {"stage": exc.stage} if isinstance(exc, StageError) else {}
        return _fail(EXIT_INVARIANT, type(exc).__name__, str(exc), **extra)
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Analyst command line: simulate, extract, enroll, attribute, match.

Exit codes: 0 success, 1 analysis error, 2 usage error. Threshold and seed
defaults can be overridden through QF_* environment variables (see
``_env_float``/``_env_int`` call sites). Every write is atomic; workspace
mutations take the workspace lock.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__
from .attribution import attribute
from .discovery import DiscoveryConfig, enroll_attack
from .errors import InvalidInputError
from .extraction import downscale, downscale_log, extract_trace
from .fingerprint import Fingerprint, match_fingerprint
from .simulator import (
    ADAPTIVE_KINDS,
    FAMILIES,
    SyntheticAttackSpec,
    embed_in_log,
    make_benign_log,
    make_clean_image,
    simulate,
)
from .storage import (
    atomic_write_json,
    load_image,
    load_labels,
    load_query_log,
    load_trace,
    save_image,
    save_labels,
    save_query_log,
    save_trace,
)
from .workspace import Workspace


def _env_float(name: str, default: float) -> float:
    raw = os.environ.get(name)
    return float(raw) if raw else default


def _env_int(name: str, default: int) -> int:
    raw = os.environ.get(name)
    return int(raw) if raw else default


def _discovery_config_from_env() -> DiscoveryConfig:
    cfg = DiscoveryConfig()
    return DiscoveryConfig(
        tau_segment=_env_float("QF_TAU_SEGMENT", cfg.tau_segment),
        tau_merge=_env_float("QF_TAU_MERGE", cfg.tau_merge),
        gain_threshold=_env_float("QF_GAIN_THRESHOLD", cfg.gain_threshold),
        binarize_factor=_env_float("QF_BINARIZE_FACTOR", cfg.binarize_factor),
    )


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="queryforensics",
        description="Forensic attribution of query-based black-box attack traces.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="initialize a workspace directory")
    p.add_argument("--workspace", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic attack query log")
    p.add_argument("--family", required=True, choices=FAMILIES)
    p.add_argument("--norm", default="l2", choices=("l2", "linf"))
    p.add_argument("--adaptive", default="none", choices=ADAPTIVE_KINDS)
    p.add_argument("--adaptive-param", type=float, default=None)
    p.add_argument("--seed", type=int, default=_env_int("QF_SEED", 0))
    p.add_argument("--max-queries", type=int, default=1000)
    p.add_argument("--size", type=int, default=32, help="spatial side length")
    p.add_argument("--benign", type=int, default=0,
                   help="mix in this many benign queries")
    p.add_argument("--downscale", type=int, default=None,
                   help="store queries down-scaled to this side length")
    p.add_argument("--out", required=True, help="output query-log directory")

    p = sub.add_parser("extract", help="extract an attack trace from a query log")
    p.add_argument("log_path")
    p.add_argument("adv_path", help="raw u8 image file (dims from the log manifest)")
    p.add_argument("--r", type=float, default=_env_float("QF_EXTRACT_R", 0.5))
    p.add_argument("--downscale", type=int, default=None)
    p.add_argument("--out", required=True, help="output trace directory")

    p = sub.add_parser("attribute", help="attribute a trace to an enrolled attack")
    p.add_argument("trace_path")
    p.add_argument("--workspace", required=True)
    p.add_argument("--topk", type=int, default=3)
    p.add_argument("--out", default=None, help="write the JSON report here")

    p = sub.add_parser("enroll", help="enroll a trace as a new attack")
    p.add_argument("trace_path")
    p.add_argument("--workspace", required=True)
    p.add_argument("--id", required=True, dest="attack_id")
    p.add_argument("--incident", default=None)

    p = sub.add_parser("match", help="match a fingerprint against the database")
    p.add_argument("fingerprint_path")
    p.add_argument("--workspace", required=True)
    p.add_argument("--out", default=None)
    return parser


def _cmd_init(args) -> int:
    ws = Workspace.init(args.workspace)
    print(f"workspace ready at {ws.root}")
    return 0


def _cmd_simulate(args) -> int:
    spec = SyntheticAttackSpec(
        family=args.family, norm=args.norm, adaptive=args.adaptive,
        adaptive_param=args.adaptive_param, seed=args.seed,
        max_queries=args.max_queries)
    clean = make_clean_image(dims=(args.size, args.size, 3), seed=args.seed + 7919)
    labeled = simulate(spec, clean)

    if args.benign > 0:
        benign = make_benign_log(args.benign, dims=clean.dims, seed=args.seed + 104729)
        log, trace_indices = embed_in_log(labeled.trace, benign, seed=args.seed)
    else:
        log, trace_indices = embed_in_log(labeled.trace, make_benign_log(0), seed=args.seed)

    out = Path(args.out)
    if args.downscale:
        log = downscale_log(log, args.downscale)
    save_query_log(log, out)
    adv = log.images[trace_indices[-1]]
    save_image(adv, out / "adv.u8")
    save_labels(out, {
        "family": spec.family,
        "norm": spec.norm,
        "adaptive": spec.adaptive,
        "seed": spec.seed,
        "labels": labeled.labels,
        "trace_indices": trace_indices,
    })
    print(f"wrote {len(log)} queries ({len(labeled.trace)} attack) to {out}")
    return 0


def _cmd_extract(args) -> int:
    if not (0.0 < args.r < 1.0):
        raise UsageError("--r must lie in (0, 1)")
    log = load_query_log(args.log_path)
    adv = load_image(args.adv_path, log.dims)
    if args.downscale:
        log = downscale_log(log, args.downscale)
        adv = downscale(adv, args.downscale)
    trace = extract_trace(log, adv, r=args.r)
    if len(trace) == 1:
        print("warning: adversarial example matches nothing in the log; "
              "trace contains only the adversarial example", file=sys.stderr)
    out = Path(args.out)
    save_trace(trace, out)

    report = {"members": trace.source_indices or [], "trace_length": len(trace),
              "precision": None, "recall": None}
    labels = load_labels(args.log_path)
    if labels and labels.get("trace_indices"):
        truth = set(labels["trace_indices"])
        got = set(trace.source_indices or [])
        if got:
            report["precision"] = len(got & truth) / len(got)
        report["recall"] = len(got & truth) / len(truth)
        print(f"precision={report['precision']} recall={report['recall']:.4f}")
    atomic_write_json(out / "extract_report.json", report)
    print(f"extracted {len(trace)} queries to {out}")
    return 0


def _cmd_attribute(args) -> int:
    pdb, adb = Workspace(args.workspace).load()
    if adb.size == 0:
        raise AnalysisError("no attacks enrolled yet")
    trace = load_trace(args.trace_path)
    report = attribute(trace, adb, pdb)
    payload = report.to_json(topk=args.topk)
    if args.out:
        atomic_write_json(Path(args.out), payload)
    else:
        print(json.dumps(payload, indent=1))
    print(report.to_text())
    return 0


def _cmd_enroll(args) -> int:
    ws = Workspace(args.workspace)
    cfg = _discovery_config_from_env()
    trace = load_trace(args.trace_path)
    with ws.lock():
        pdb, adb = ws.load()
        new_pdb, new_adb, fp = enroll_attack(
            trace, pdb, adb, cfg, args.attack_id,
            incident_id=args.incident or f"{args.attack_id}-000")
        ws.save(new_pdb, new_adb)
        path = ws.save_fingerprint(fp)
    added = [p for p in new_pdb.ids if p not in pdb.ids]
    print(f"enrolled {args.attack_id}: +{len(added)} procedures {added}, "
          f"fingerprint at {path}")
    return 0


def _cmd_match(args) -> int:
    ws = Workspace(args.workspace)
    fp = Fingerprint.load(args.fingerprint_path)
    db = ws.load_fingerprints()
    if len(db) == 0:
        raise AnalysisError("fingerprint database is empty")
    ranking = match_fingerprint(fp, db)
    payload = {"incident_id": fp.incident_id,
               "ranking": [{"attack_id": a, "similarity": s} for a, s in ranking]}
    if args.out:
        atomic_write_json(Path(args.out), payload)
    print(json.dumps(payload, indent=1))
    return 0


class UsageError(Exception):
    pass


class AnalysisError(Exception):
    pass


_COMMANDS = {
    "init": _cmd_init,
    "simulate": _cmd_simulate,
    "extract": _cmd_extract,
    "attribute": _cmd_attribute,
    "enroll": _cmd_enroll,
    "match": _cmd_match,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        parser.exit(2, f"usage error: {exc}\n")
    except (InvalidInputError, AnalysisError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``decompose run | validate | gluing-check``.

Exit codes: 0 pass, 1 hard failure, 2 configuration or input error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .infinity import GluedManifold, GluingError, validate_gluing_data
from .report import emit_report
from .scenarios import ConfigError, build_scenario, load_scenario, run_decomposition

OUT_DIR_ENV = "DECOMPOSE_OUT_DIR"
EXIT_PASS, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="decompose", description="Profile decompositions of bounded H^{1,2} sequences.")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and write its report")
    run.add_argument("config", type=Path)
    run.add_argument("--out", type=Path, default=None, help=f"output directory (default: ${OUT_DIR_ENV} or config)")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--grid-res", type=int, default=None)
    run.add_argument("--kmax", type=int, default=None)
    run.add_argument("--glued", action="store_true", help="also write glued-manifold documents")

    val = sub.add_parser("validate", help="check a scenario config without running it")
    val.add_argument("config", type=Path)

    glue = sub.add_parser("gluing-check", help="re-validate a serialized glued manifold")
    glue.add_argument("glued", type=Path)
    glue.add_argument("--tol", type=float, default=1e-6)
    return ap


def _overrides(cfg, args):
    update = {}
    if args.seed is not None:
        update["seed"] = args.seed
    params = {}
    if args.grid_res is not None:
        params["grid_res"] = args.grid_res
    if args.kmax is not None:
        params["k_max"] = args.kmax
    doc = cfg.model_dump(mode="json")
    doc.update(update)
    doc["params"].update(params)
    if args.glued:
        doc["output"]["glued"] = True
    return type(cfg).model_validate(doc)


def _run(args) -> int:
    cfg = _overrides(load_scenario(args.config), args)
    out = args.out or os.environ.get(OUT_DIR_ENV) or cfg.output.dir
    rf = run_decomposition(cfg)
    paths = emit_report(rf, out)
    for name, v in sorted(rf.verdicts.items()):
        print(f"{name}: {'pass' if v['pass'] else 'FAIL'} ({v['value']:.3g})")
    if rf.error:
        print(f"error: {rf.error}", file=sys.stderr)
    for d in rf.payload.get("diagnostics", []):
        print(f"warning: {d}", file=sys.stderr)
    print(f"status: {rf.status}; report written to {paths['report']}")
    return rf.exit_code


def _validate(args) -> int:
    cfg = load_scenario(args.config)
    scn = build_scenario(cfg)
    print(f"{cfg.name}: valid ({len(scn.net)} net points, k_max={cfg.params.k_max})")
    return EXIT_PASS


def _gluing_check(args) -> int:
    try:
        doc = json.loads(Path(args.glued).read_text())
        manifold = GluedManifold.from_json(doc)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"error: cannot load {args.glued}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report = validate_gluing_data(manifold.data, tol=args.tol)
    for cond, r in report.residuals.items():
        print(f"{cond}: {r:.3g}")
    if report.ok:
        print("gluing data valid")
        return EXIT_PASS
    for f in report.failures:
        print(f"violated {f['condition']}: {f['message']}", file=sys.stderr)
    return EXIT_FAILURE


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    handlers = {"run": _run, "validate": _validate, "gluing-check": _gluing_check}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GluingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())

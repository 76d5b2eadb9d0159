"""Report files: JSON serialization, CSV traces and glued-manifold documents."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

REPORT_FORMAT = "decomposition-report/1"
TRACE_COLUMNS = ("k", "stage", "lp_residual", "h12_residual")
OVERLAP_COLUMNS = ("k", "pair", "inner")


def to_jsonable(obj: Any) -> Any:
    """Plain JSON types; non-finite floats become ``None``."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def serialize_decomposition(report) -> dict:
    """JSON payload of a ``DecompositionReport``."""
    net = report.bubbles[0].system.net if report.bubbles else None
    bubbles = []
    for b in report.bubbles:
        tail = b.system.tail()
        bubbles.append(
            {
                "index": b.index,
                "core": [[k, int(c)] for k, c in sorted(b.core.items())],
                "core_tail_points": [net.centers[b.core[k]].tolist() for k in tail],
                "retained": list(b.system.retained),
                "h12_sq": b.h12_sq,
                "lp_p": b.lp_p,
                "equivalent_norm": b.equivalent_norm,
                "weak_residual": b.weak_residual,
                "diagnostics": b.diagnostics,
            }
        )
    return to_jsonable(
        {
            "weak_limit": report.weak_limit_info,
            "bubbles": bubbles,
            "stages": report.stages,
            "traces": report.traces,
            "initial_mass": report.initial_mass,
            "eps_stop": report.eps_stop,
            "diagnostics": report.diagnostics,
            "p": report.p,
            "k_max": report.k_max,
            "energy": report.energy,
            "decoupling": report.decoupling,
        }
    )


@dataclass
class ReportFile:
    """A serialized run: config echo and hash, payload, verdicts and timing.

    Everything except ``timing`` is a pure function of config and seed.
    """

    config: dict
    config_hash: str
    seed: int
    payload: dict
    verdicts: dict
    status: str
    error: str | None
    timing: dict
    artifacts: Any = None

    def to_dict(self) -> dict:
        return to_jsonable(
            {
                "format": REPORT_FORMAT,
                "config": self.config,
                "config_hash": self.config_hash,
                "seed": self.seed,
                "status": self.status,
                "error": self.error,
                "verdicts": self.verdicts,
                "payload": self.payload,
                "timing": self.timing,
            }
        )

    def deterministic_bytes(self) -> bytes:
        """Canonical encoding of the report without the timing section."""
        doc = self.to_dict()
        doc.pop("timing")
        return dumps(doc).encode()

    @property
    def exit_code(self) -> int:
        return 0 if self.status == "pass" else 1


def dumps(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=1, allow_nan=False) + "\n"


def report_schema() -> dict:
    text = resources.files("profiledecomp").joinpath("schemas/report.schema.json").read_text()
    return json.loads(text)


def validate_report(doc: dict) -> None:
    jsonschema.validate(doc, report_schema())


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write {path}: {exc.strerror}") from None


def emit_report(rf: ReportFile, out_dir, glued: bool | None = None) -> dict[str, Path]:
    """Write ``report.json``, ``traces.csv``, ``overlaps.csv`` and optional glued documents."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot create {out}: {exc.strerror}") from None
    paths = {"report": out / "report.json", "traces": out / "traces.csv", "overlaps": out / "overlaps.csv"}
    _write(paths["report"], dumps(rf.to_dict()))

    rows = sorted(rf.payload.get("traces", []), key=lambda t: (t["stage"], t["k"]))
    _write(paths["traces"], _csv(TRACE_COLUMNS, [[t[c] for c in TRACE_COLUMNS] for t in rows]))

    pair_rows = []
    for pair, trace in sorted(rf.payload.get("decoupling", {}).get("pair_traces", {}).items()):
        pair_rows.extend([t["k"], pair, t["inner"]] for t in trace)
    _write(paths["overlaps"], _csv(OVERLAP_COLUMNS, pair_rows))

    glued = rf.config.get("output", {}).get("glued", False) if glued is None else glued
    report = getattr(rf.artifacts, "report", None)
    if glued and report is not None:
        for b in report.bubbles:
            key = f"glued_{b.index}"
            paths[key] = out / f"{key}.json"
            _write(paths[key], dumps(to_jsonable(b.manifold.to_json())))
    return paths


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, float) else v for v in r])
    return buf.getvalue()

"""Scenario configuration, sequence generators and end-to-end runs."""

from __future__ import annotations

import hashlib
import json
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .covering import Ball, CoverError, DiscreteNet, PartitionOfUnity, build_net, build_partition_of_unity
from .decomposition import (
    DecompositionReport,
    ExtractionError,
    ExtractionParams,
    exponent_interval,
    extract_profiles,
    sobolev_exponent,
    vanishing_test,
    verify_decoupling,
    verify_energy_identities,
    _coarse,
)
from .funcspace import Bump, FunctionSequence, Integrator, ManifoldFunction, Oscillation, SumFunction
from .geometry import GeometryError, HyperbolicModel, ManifoldModel, NumericalError, build_model
from .infinity import GluingError
from .report import ReportFile, serialize_decomposition

LATTICE_TOL = 1e-9
MAX_EXTENT = {"euclidean": 1e4, "perturbed-euclidean": 1e4, "hyperbolic": 12.0}

# Pass thresholds of the per-run verdicts.
THRESHOLDS = {
    "energy-p2": 0.02,
    "energy-p3": 0.02,
    "plancherel": -0.01,
    "brezis-lieb": 0.03,
    "decoupling": 0.01,
    "cocompact-identity": 1e-8,
    "cocompact-transitions": 1e-12,
    "cocompact-isometry": 0.01,
}


class ConfigError(ValueError):
    """Invalid scenario configuration; ``line`` points into the source when known."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class _FieldError(ValueError):
    """Cross-field validation error that remembers which field it is about."""

    def __init__(self, message: str, *loc):
        super().__init__(message)
        self.loc = loc


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PerturbationSpec(_Strict):
    center: list[float] | None = None
    radius: float = Field(gt=0)
    amplitude: float = Field(gt=0)


class ManifoldSpec(_Strict):
    kind: Literal["euclidean", "hyperbolic", "perturbed-euclidean"]
    dimension: int = Field(default=2, ge=2, le=3)
    perturbation: PerturbationSpec | None = None


class NetSpec(_Strict):
    rho: float = Field(default=0.8, gt=0)
    rho_hat: float = Field(default=0.72, gt=0)
    policy: Literal["greedy", "lattice"] = "lattice"
    lattice_origin: list[float] | None = None
    margin: float | None = Field(default=None, ge=0)


class BumpSpec(_Strict):
    center: list[float]
    radius: float = Field(gt=0)
    amplitude: float = 1.0
    power: int = Field(default=4, ge=2)
    velocity: list[float] | None = None


class SequenceSpec(_Strict):
    kind: Literal["fixed", "runaway-bump", "multi-bump", "spreading", "oscillating", "lattice-cocompact"]
    bumps: list[BumpSpec] = Field(min_length=1)
    growth: float = Field(default=1.0, gt=0)
    frequency: float = Field(default=0.25, gt=0)
    direction: list[float] | None = None
    translation: list[int] | None = None


class ParamsSpec(_Strict):
    p: float
    k_max: int = Field(default=48, ge=8)
    i_max: int = Field(default=12, ge=1)
    max_profiles: int = Field(default=4, ge=1)
    grid_res: int = Field(default=64, ge=8)
    eps_stop: float | None = Field(default=None, gt=0)
    eps_stop_fraction: float = Field(default=1e-3, gt=0)
    dictionary_size: int = Field(default=16, ge=1)
    weak_tol: float = Field(default=1e-3, gt=0)
    transition_tol: float = Field(default=1e-6, gt=0)
    metric_tol: float = Field(default=1e-6, gt=0)
    compat_tol: float = Field(default=1e-6, gt=0)
    gluing_tol: float = Field(default=1e-8, gt=0)
    divergence_factor: float = Field(default=4.0, gt=0)
    dominance: float = Field(default=0.5, gt=0, le=1)
    n_candidates: int = Field(default=4, ge=1)


class OutputSpec(_Strict):
    dir: str = "out"
    glued: bool = False


class ScenarioConfig(_Strict):
    name: str
    description: str = ""
    seed: int = 0
    manifold: ManifoldSpec
    net: NetSpec = NetSpec()
    sequence: SequenceSpec
    params: ParamsSpec
    output: OutputSpec = OutputSpec()

    @model_validator(mode="after")
    def _check(self) -> "ScenarioConfig":
        N = self.manifold.dimension
        p = self.params.p
        if not 2.0 < p < sobolev_exponent(N):
            raise _FieldError(f"p={p:g} must lie in the open interval {exponent_interval(N)} for N={N}", "params", "p")
        if self.manifold.kind == "perturbed-euclidean" and self.manifold.perturbation is None:
            raise _FieldError("a perturbed-euclidean manifold needs a perturbation", "manifold", "kind")
        if self.manifold.kind != "perturbed-euclidean" and self.manifold.perturbation is not None:
            raise _FieldError(f"a {self.manifold.kind} manifold takes no perturbation", "manifold", "perturbation")
        if not self.net.rho / 2 < self.net.rho_hat < self.net.rho:
            raise _FieldError("net spacing must satisfy rho/2 < rho_hat < rho", "net", "rho_hat")
        for b in self.sequence.bumps:
            if len(b.center) != N or (b.velocity is not None and len(b.velocity) != N):
                raise _FieldError(f"bump centers and velocities need {N} coordinates", "sequence", "bumps")
        return self


def _locate(text: str, loc: tuple) -> int | None:
    """Line of the innermost key of a validation error location."""
    pos = 0
    found = False
    for key in loc:
        if not isinstance(key, str):
            continue
        m = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, pos)
        if m is None:
            break
        pos = m.start()
        found = True
    return text.count("\n", 0, pos) + 1 if found else None


def parse_scenario(text: str) -> ScenarioConfig:
    """Validate a JSON scenario document, raising ``ConfigError`` with a line number."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg}", exc.lineno) from None
    try:
        return ScenarioConfig.model_validate(raw)
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = tuple(err["loc"])
        cause = err.get("ctx", {}).get("error")
        if not loc and isinstance(cause, _FieldError):
            loc = cause.loc
        where = ".".join(str(x) for x in loc) or "<root>"
        msg = err["msg"].removeprefix("Value error, ")
        raise ConfigError(f"{where}: {msg}", _locate(text, loc)) from None


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_scenario(text)


def dump_scenario(cfg: ScenarioConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def config_hash(cfg: ScenarioConfig) -> str:
    blob = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def scenario_schema() -> dict:
    return ScenarioConfig.model_json_schema()


@dataclass
class Scenario:
    """Everything built from a config: model, net, partition, quadrature and sequence."""

    config: ScenarioConfig
    model: ManifoldModel
    net: DiscreteNet
    pu: PartitionOfUnity
    integ: Integrator
    seq: FunctionSequence
    params: ExtractionParams
    translation: np.ndarray | None = None
    profile: ManifoldFunction | None = None


def _place(model: ManifoldModel, coords) -> np.ndarray:
    """Model point of a configured centre.

    Euclidean-type models take coordinates directly; the hyperbolic model takes
    normal coordinates at its origin.
    """
    v = np.asarray(coords, dtype=float)
    if isinstance(model, HyperbolicModel):
        o = model.origin()
        return model.exp(o, model.canonical_frame(o), v)[0]
    return v


def _is_lattice_vector(v: np.ndarray, spacing: float) -> bool:
    q = v / spacing
    return bool(np.all(np.abs(q - np.round(q)) < LATTICE_TOL))


def _sequence(cfg: ScenarioConfig, model: ManifoldModel):
    """Generator ``k -> u_k``, the balls its supports sweep and cocompact data."""
    spec = cfg.sequence
    N = cfg.manifold.dimension
    K = cfg.params.k_max
    bumps = spec.bumps
    vel = [np.zeros(N) if b.velocity is None else np.asarray(b.velocity, dtype=float) for b in bumps]
    moving = [bool(np.any(v != 0)) for v in vel]
    kind = spec.kind
    euclidean_type = cfg.manifold.kind != "hyperbolic"
    if kind != "fixed" and not euclidean_type:
        raise ConfigError(f"sequence kind {kind!r} needs a euclidean-type manifold")
    if kind == "fixed" and any(moving):
        raise ConfigError("fixed sequences take no velocities")
    if kind == "runaway-bump" and sum(moving) != 1:
        raise ConfigError("runaway-bump sequences need exactly one moving bump")
    if kind == "multi-bump" and sum(moving) < 2:
        raise ConfigError("multi-bump sequences need at least two moving bumps")
    if kind in ("spreading", "oscillating", "lattice-cocompact") and any(moving):
        raise ConfigError(f"{kind} sequences take no velocities")
    if kind in ("runaway-bump", "multi-bump") and cfg.net.policy == "lattice":
        for v in vel:
            if not _is_lattice_vector(v, cfg.net.rho_hat):
                raise ConfigError("velocities must be lattice vectors (multiples of rho_hat)")

    translation = None
    profile_fn = None
    if kind == "lattice-cocompact":
        if cfg.net.policy != "lattice" or cfg.manifold.kind != "euclidean":
            raise ConfigError("lattice-cocompact sequences need a euclidean manifold with a lattice net")
        if spec.translation is None or len(spec.translation) != N or not any(spec.translation):
            raise ConfigError(f"lattice-cocompact sequences need a nonzero integer translation of length {N}")
        translation = np.asarray(spec.translation, dtype=float) * cfg.net.rho_hat

    centers = [_place(model, b.center) for b in bumps]
    extent = MAX_EXTENT[cfg.manifold.kind]
    for b, v in zip(bumps, vel):
        step = translation if translation is not None else v
        far = np.linalg.norm(np.asarray(b.center, dtype=float) + K * step) + b.radius
        if np.linalg.norm(b.center) + b.radius > extent or far > extent:
            raise ConfigError(f"bump schedule leaves the chart-constructible range |x| < {extent:g}")

    def shapes(k: int) -> list[ManifoldFunction]:
        out = []
        for b, c, v in zip(bumps, centers, vel):
            if kind == "spreading":
                scale = float(k) ** spec.growth
                amp = b.amplitude * scale ** (-N / 2)
                out.append(Bump(model, c, b.radius * scale, amp, b.power))
                continue
            step = v if translation is None else translation
            centre = c + step * k if np.any(step != 0) else c
            out.append(Bump(model, centre, b.radius, b.amplitude, b.power))
        return out

    def generator(k: int) -> ManifoldFunction:
        terms = shapes(k)
        if kind == "oscillating":
            d = np.zeros(N) if spec.direction is None else np.asarray(spec.direction, dtype=float)
            if spec.direction is None:
                d[0] = 1.0
            terms = terms + [Oscillation(terms[0], spec.frequency * k, d)]
        if len(terms) == 1:
            return terms[0]
        return SumFunction(terms, [1.0] * len(terms))

    if translation is not None:
        base = [Bump(model, c, b.radius, b.amplitude, b.power) for b, c in zip(bumps, centers)]
        profile_fn = base[0] if len(base) == 1 else SumFunction(base, [1.0] * len(base))

    margin = cfg.net.margin if cfg.net.margin is not None else 2 * cfg.net.rho
    region = []
    for k in (range(1, K + 1) if kind != "spreading" else [K]):
        for f in shapes(k):
            region.append(Ball(f.center, f.radius + margin))
    return generator, region, translation, profile_fn


def build_scenario(cfg: ScenarioConfig) -> Scenario:
    """Construct the model, net, partition, integrator and sequence of a config."""
    m = cfg.manifold
    try:
        model = build_model(m.kind, m.dimension, m.perturbation.model_dump() if m.perturbation else None)
        generator, region, translation, profile_fn = _sequence(cfg, model)
        net = build_net(
            model,
            region,
            cfg.net.rho,
            cfg.net.rho_hat,
            seed=cfg.seed,
            policy=cfg.net.policy,
            lattice_origin=cfg.net.lattice_origin,
        )
    except (GeometryError, CoverError) as exc:
        raise ConfigError(str(exc)) from None
    pu = build_partition_of_unity(model, net)
    integ = Integrator(net, pu, cfg.params.grid_res)
    seq = FunctionSequence(generator, cfg.params.k_max, cfg.sequence.model_dump(mode="json"))
    params = ExtractionParams(rho=cfg.net.rho, rho_hat=cfg.net.rho_hat, seed=cfg.seed, **cfg.params.model_dump())
    return Scenario(cfg, model, net, pu, integ, seq, params, translation, profile_fn)


def cocompact_check(scn: Scenario, report: DecompositionReport) -> dict:
    """Compare ``W_k`` with the translated profile and the limit charts with the flat model."""
    if len(report.bubbles) != 1:
        return {"pass": False, "reason": f"expected one bubble, found {len(report.bubbles)}"}
    b = report.bubbles[0]
    ts = b.system
    nodes = _coarse(scn.integ.grid).nodes
    dev = 0.0
    for k in ts.retained:
        W, u = b.W(k), scn.seq[k]
        X = np.vstack([ts.chart(k, i).forward(nodes) for i in range(ts.size)])
        dev = max(dev, float(np.max(np.abs(W(X) - u(X)))))
    K = ts.retained[-1]
    y0 = ts.point(K, 0)
    origin = np.zeros(scn.model.dimension)
    iso = 0.0
    for i in range(1, ts.size):
        lattice = float(np.linalg.norm(ts.point(K, i) - y0))
        glued = b.manifold.chart_graph_distance((0, origin), (i, origin))
        iso = max(iso, abs(glued - lattice) / lattice)
    osc = float(b.diagnostics["transition_oscillation"])
    flat = float(b.diagnostics["metric_flatness"])
    ok = (
        dev < THRESHOLDS["cocompact-identity"]
        and osc < THRESHOLDS["cocompact-transitions"]
        and iso < THRESHOLDS["cocompact-isometry"]
        and flat < THRESHOLDS["cocompact-identity"]
    )
    return {
        "pass": bool(ok),
        "max_deviation": dev,
        "transition_oscillation": osc,
        "metric_flatness": flat,
        "chart_distance_error": iso,
    }


def _verdict(ok: bool, value: float, threshold: float) -> dict:
    return {"pass": bool(ok), "value": float(value), "threshold": float(threshold)}


def compute_verdicts(report: DecompositionReport, cocompact: dict | None) -> dict:
    e, d = report.energy, report.decoupling
    bubbles = e.get("bubbles", [])
    p2 = max((b["p2_discrepancy"] for b in bubbles), default=0.0)
    p3 = max((b["p3_discrepancy"] for b in bubbles), default=0.0)
    out = {
        "energy-p2": _verdict(p2 <= THRESHOLDS["energy-p2"], p2, THRESHOLDS["energy-p2"]),
        "energy-p3": _verdict(p3 <= THRESHOLDS["energy-p3"], p3, THRESHOLDS["energy-p3"]),
        "plancherel": _verdict(
            e["plancherel_slack_relative"] >= THRESHOLDS["plancherel"],
            e["plancherel_slack_relative"],
            THRESHOLDS["plancherel"],
        ),
        "brezis-lieb": _verdict(
            e["brezis_lieb_relative"] <= THRESHOLDS["brezis-lieb"], e["brezis_lieb_relative"], THRESHOLDS["brezis-lieb"]
        ),
    }
    at_k = [t["lp_residual"] for t in report.traces if t["k"] == report.k_max]
    rises = max((b - a for a, b in zip(at_k[:-1], at_k[1:])), default=0.0)
    out["residual-trace"] = _verdict(rises <= 1e-12 * max(at_k[0], 1.0), rises, 0.0)
    if len(report.bubbles) >= 2:
        out["decoupling"] = _verdict(
            d["off_diagonal_relative"] <= THRESHOLDS["decoupling"], d["off_diagonal_relative"], THRESHOLDS["decoupling"]
        )
    if report.bubbles:
        out["probes-monotone"] = _verdict(d["probes_monotone"], float(d["probes_monotone"]), 1.0)
    if cocompact is not None:
        out["cocompact-identity"] = _verdict(
            cocompact["pass"], cocompact.get("max_deviation", float("inf")), THRESHOLDS["cocompact-identity"]
        )
    return out


def spotlight_summary(scn: Scenario, eps: float) -> dict:
    p = scn.params.p
    vanishing, trace, c_max = vanishing_test(scn.integ, scn.seq, p, eps)
    K = scn.seq.k_max
    return {
        "vanishing": vanishing,
        "eps": eps,
        "sup_local_mass": trace.tolist(),
        "mass_spread": float((trace.max() - trace.min()) / trace.max()) if trace.max() > 0 else 0.0,
        "embedding_constant": c_max,
        "lp_first": scn.integ.lp_norm(scn.seq[1], p),
        "lp_last": scn.integ.lp_norm(scn.seq[K], p),
    }


@dataclass
class RunArtifacts:
    """In-memory objects of a run, kept alongside the serialized report."""

    scenario: Scenario
    report: DecompositionReport | None = None
    extras: dict = field(default_factory=dict)


def run_decomposition(cfg: ScenarioConfig) -> ReportFile:
    """Build the scenario, extract profiles and verify the energy identities.

    Extraction and numerical failures are recorded in the report with status
    ``"error"``; a run whose verdicts all pass has status ``"pass"``.
    """
    t0 = time.perf_counter()
    scn = build_scenario(cfg)
    art = RunArtifacts(scn)
    payload: dict = {}
    verdicts: dict = {}
    error = None
    try:
        report = extract_profiles(scn.seq, scn.integ, scn.params)
        art.report = report
        verify_energy_identities(report, scn.seq, scn.integ)
        verify_decoupling(report, scn.integ)
        cocompact = cocompact_check(scn, report) if scn.translation is not None else None
        payload = serialize_decomposition(report)
        payload["spotlight"] = spotlight_summary(scn, report.eps_stop)
        if cocompact is not None:
            payload["cocompact"] = cocompact
        verdicts = compute_verdicts(report, cocompact)
        status = "pass" if all(v["pass"] for v in verdicts.values()) else "fail"
    except (ExtractionError, NumericalError, GluingError, GeometryError) as exc:
        status = "error"
        error = f"{type(exc).__name__}: {exc}"
    timing = {"seconds": time.perf_counter() - t0}
    return ReportFile(
        config=cfg.model_dump(mode="json"),
        config_hash=config_hash(cfg),
        seed=cfg.seed,
        payload=payload,
        verdicts=verdicts,
        status=status,
        error=error,
        timing=timing,
        artifacts=art,
    )

"""Directive-conformity evaluation: task success rate, scalar motion
features, least-squares reference lines, the latent-command sweep, and the
modifier directive error (MDE).

MDE compares a reference line y = a*x + b, fitted to labeled reference
motions over normalized directive levels x in {0, 0.5, 1}, against a line
y = c*x + d fitted to features of motions generated while sweeping one
latent dimension over {-2, -1, 0, 1, 2} (mapped to the same x axis):

    MDE = sqrt(((a - c) / a)^2 + ((b - d) / b)^2)

Lower is better; identical lines give 0. The normalization by (a, b) makes
the metric asymmetric on purpose, matching its definition.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import inference as inf
from .dataset import Normalization
from .model import SeqCVAE
from .simworld import (
    Demonstration,
    ScenarioConfig,
    detect_wipe_cycles,
    gripper_transitions,
    success_predicate,
    synthesize_demo,
)


class FeatureError(ValueError):
    pass


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class FeatureExtractor:
    kind: str  # cycle_time | min_torque_joint4 | final_q2 | time_to_place
    cycles: int = 3

    def __post_init__(self):
        if self.kind not in ("cycle_time", "min_torque_joint4", "final_q2", "time_to_place"):
            raise FeatureError(f"unknown feature kind {self.kind!r}")


def extractor_for(task: str, directive: str) -> FeatureExtractor:
    table = {
        ("wiping", "temporal"): "cycle_time",
        ("wiping", "physical"): "min_torque_joint4",
        ("pick_and_place", "temporal"): "time_to_place",
        ("pick_and_place", "spatial"): "final_q2",
    }
    try:
        return FeatureExtractor(table[(task, directive)])
    except KeyError:
        raise FeatureError(f"no feature defined for task {task!r}, directive {directive!r}") from None


def extract_feature(trace: Demonstration, extractor: FeatureExtractor, config: ScenarioConfig) -> float:
    """Task-relevant scalar feature of one executed trace."""
    if extractor.kind == "final_q2":
        return float(trace.q[-1, config.joint("joint2")])
    if extractor.kind == "time_to_place":
        events = gripper_transitions(
            trace.q[:, config.joint("gripper")], config.gripper_open, config.gripper_closed
        )
        opens = [i for i, kind in events if kind == "open"]
        if not opens:
            raise FeatureError("no placement event (gripper never re-opened)")
        return float(opens[0] * trace.dt)
    cycles = detect_wipe_cycles(trace.q[:, config.joint("wipe")], trace.dt)
    if len(cycles) < extractor.cycles:
        raise FeatureError(f"insufficient cycles: found {len(cycles)}, need {extractor.cycles}")
    head = cycles[: extractor.cycles]
    if extractor.kind == "cycle_time":
        return float(np.mean([(e - s) * trace.dt for s, e in head]))
    contact = config.joint("joint4")
    return float(np.mean([trace.tau[s:e, contact].min() for s, e in head]))


def fit_line(xs, ys) -> tuple[float, float]:
    """Ordinary least squares slope and intercept."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.size < 2:
        raise ValueError(f"need matching x/y with at least 2 points, got {xs.shape} {ys.shape}")
    if np.all(xs == xs[0]):
        raise ValueError("degenerate fit: all x values identical")
    mx, my = xs.mean(), ys.mean()
    slope = float(np.sum((xs - mx) * (ys - my)) / np.sum((xs - mx) ** 2))
    return slope, float(my - slope * mx)


def latent_to_x(z_value: float) -> float:
    """Map a latent command in [-2, 2] onto the normalized directive axis."""
    if not -2.0 <= z_value <= 2.0:
        raise ValueError(f"latent command {z_value} outside [-2, 2]")
    return (z_value + 2.0) / 4.0


@dataclass(frozen=True)
class ReferenceLine:
    slope: float
    intercept: float

    def require_usable(self) -> "ReferenceLine":
        if self.slope == 0.0 or self.intercept == 0.0:
            raise ValueError("MDE undefined: reference slope and intercept must be nonzero")
        return self


def mde(reference: ReferenceLine, generated: tuple[float, float]) -> float:
    reference.require_usable()
    c, d = generated
    a, b = reference.slope, reference.intercept
    return float(np.sqrt(((a - c) / a) ** 2 + ((b - d) / b) ** 2))


# --- protocol ----------------------------------------------------------------


@dataclass
class TsrResult:
    successes: int
    total: int
    outcomes: list[tuple[bool, str | None]] = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return self.successes / self.total if self.total else 0.0

    def __str__(self) -> str:
        return f"{100.0 * self.ratio:.1f}% [{self.successes}/{self.total}]"


def tsr(outcomes: list[tuple[bool, str | None]]) -> TsrResult:
    if not outcomes:
        raise ValueError("tsr needs at least one trial")
    return TsrResult(sum(1 for ok, _ in outcomes if ok), len(outcomes), list(outcomes))


@dataclass
class MdeReport:
    directive: str
    latent_dim: int
    reference: ReferenceLine
    generated: tuple[float, float]
    mde: float
    points: list[dict]
    reference_points: list[dict]
    x_flipped: bool
    tsr: TsrResult
    failures: list[dict]

    def to_dict(self) -> dict:
        return {
            "directive": self.directive,
            "latent_dim": self.latent_dim,
            "reference": {"slope": self.reference.slope, "intercept": self.reference.intercept},
            "generated": {"slope": self.generated[0], "intercept": self.generated[1]},
            "mde": self.mde,
            "points": self.points,
            "reference_points": self.reference_points,
            "x_flipped": self.x_flipped,
            "tsr": {"successes": self.tsr.successes, "total": self.tsr.total, "text": str(self.tsr)},
            "failures": self.failures,
        }


def synthesize_reference(
    scenario: ScenarioConfig,
    directive: str,
    trials_per_level: int = 4,
    seed: int = 0,
    levels: tuple[float, ...] = (0.0, 0.5, 1.0),
) -> tuple[ReferenceLine, list[dict]]:
    """Fit the reference line from synthesized labeled demonstrations.

    Each level gets ``trials_per_level`` demos (distinct seeds); the feature
    is averaged per level and the three means are fitted by least squares.
    Other directives are held at their moderate label 0.5.
    """
    extractor = extractor_for(scenario.task, directive)
    points = []
    means = []
    for li, level in enumerate(levels):
        feats = []
        for trial in range(trials_per_level):
            labels = {name: 0.5 for name in scenario.directive_params}
            labels[directive] = level
            demo = synthesize_demo(scenario, labels, seed=seed * 10_000 + li * 100 + trial)
            feats.append(extract_feature(demo, extractor, scenario))
        means.append(float(np.mean(feats)))
        points.append({"x": level, "y": means[-1], "trials": feats})
    slope, intercept = fit_line(list(levels), means)
    return ReferenceLine(slope, intercept).require_usable(), points


def probe_direction(model: SeqCVAE, latent_dim: int) -> bool:
    """True when the trained predictor maps increasing z to decreasing labels,
    in which case the x axis is flipped for that dimension."""
    if latent_dim >= model.config.latent.constrained:
        return False
    grid = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
    curve = model.predictor_curve(latent_dim, grid)
    return bool(curve[-1] < curve[0])


def run_mde_protocol(
    model: SeqCVAE,
    normalization: Normalization,
    scenario: ScenarioConfig,
    directive: str,
    latent_dim: int,
    reference: ReferenceLine,
    reference_points: list[dict] | None = None,
    command_values: tuple[float, ...] = (-2.0, -1.0, 0.0, 1.0, 2.0),
    engine: inf.EngineConfig | None = None,
    probe: bool = True,
) -> MdeReport:
    """Sweep one latent dimension online, fit the generated feature line,
    and score it against the reference. Failed runs are excluded from the fit."""
    extractor = extractor_for(scenario.task, directive)
    engine = engine or inf.EngineConfig(ticks=500)
    flipped = probe and probe_direction(model, latent_dim)
    zdim = model.config.latent.total

    points: list[dict] = []
    failures: list[dict] = []
    outcomes: list[tuple[bool, str | None]] = []
    for z_val in command_values:
        z = np.zeros(zdim)
        z[latent_dim] = z_val
        run_engine = inf.EngineConfig(
            command_update_stride=engine.command_update_stride,
            ticks=engine.ticks,
            scheme=engine.scheme,
            initial_command=z,
            follower_lag=engine.follower_lag,
            follower_noise=engine.follower_noise,
            seed=engine.seed,
        )
        result = inf.run_online(model, normalization, scenario, run_engine)
        ok, reason = success_predicate(result.trace, scenario)
        outcomes.append((ok, reason))
        x = latent_to_x(z_val)
        if flipped:
            x = 1.0 - x
        if not ok:
            failures.append({"z": z_val, "reason": reason})
            continue
        try:
            y = extract_feature(result.trace, extractor, scenario)
        except FeatureError as err:
            outcomes[-1] = (False, str(err))
            failures.append({"z": z_val, "reason": str(err)})
            continue
        points.append({"z": z_val, "x": x, "y": y})

    xs = [p["x"] for p in points]
    if len(set(xs)) < 2:
        raise ProtocolError(
            f"{directive}/dim{latent_dim}: fewer than 2 successful sweep points ({len(points)})"
        )
    generated = fit_line(xs, [p["y"] for p in points])
    return MdeReport(
        directive=directive,
        latent_dim=latent_dim,
        reference=reference,
        generated=generated,
        mde=mde(reference, generated),
        points=points,
        reference_points=reference_points or [],
        x_flipped=flipped,
        tsr=tsr(outcomes),
        failures=failures,
    )


def weight_ablation(
    model: SeqCVAE,
    normalization: Normalization,
    scenario: ScenarioConfig,
    schemes: list[inf.WeightScheme],
    seeds: list[int],
    switch_tick: int = 150,
    switch_dim: int = 1,
    switch_value: float = 2.0,
    engine: inf.EngineConfig | None = None,
) -> list[dict]:
    """TSR and commanded-trajectory jerk per weighting scheme, with a mid-run
    latent switch, paired across seeds."""
    engine = engine or inf.EngineConfig(ticks=500, follower_noise=0.005)
    rows = []
    zdim = model.config.latent.total
    for scheme in schemes:
        outcomes = []
        jerks = []
        for seed in seeds:
            z_target = np.zeros(zdim)
            z_target[switch_dim] = switch_value
            run_engine = inf.EngineConfig(
                command_update_stride=engine.command_update_stride,
                ticks=engine.ticks,
                scheme=scheme,
                follower_lag=engine.follower_lag,
                follower_noise=engine.follower_noise,
                seed=seed,
            )
            result = inf.run_online(
                model, normalization, scenario, run_engine, schedule=[(switch_tick, z_target)]
            )
            outcomes.append(success_predicate(result.trace, scenario))
            jerks.append(inf.command_jerk(result.commands, scenario.joints))
        rows.append(
            {
                "scheme": scheme.label(),
                "tsr": tsr(outcomes),
                "jerk_per_seed": jerks,
                "mean_jerk": float(np.mean(jerks)),
            }
        )
    return rows


def trace_from_events(events: list[dict], dt: float) -> Demonstration:
    """Rebuild an executed trace from an engine event log (state records)."""
    states = [e["payload"] for e in events if e["kind"] == "state"]
    if not states:
        raise ValueError("event log contains no state records")
    q = np.array([s["q"] for s in states])
    dq = np.array([s["dq"] for s in states])
    tau = np.array([s["tau"] for s in states])
    return Demonstration(q=q, dq=dq, tau=tau, dt=dt, labels={}, meta={"source": "event-log"})


def write_reports(path, reports: list[MdeReport], extra: dict | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(
            {"reports": [r.to_dict() for r in reports], **(extra or {})},
            fh,
            indent=2,
            sort_keys=True,
        )

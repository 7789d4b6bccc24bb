"""Deterministic kinematic arm simulator and demonstration synthesizer.

Replaces teleoperated data collection with scripted trajectories whose
temporal / physical / spatial characteristics are exact, known functions of
the weak labels. That makes directive-conformity claims testable: the
ground-truth label-to-feature relationship is available in closed form.

Two tasks are provided. Wiping: approach, then continuous periodic wiping
on a designated joint with a pressed contact torque. Pick-and-place:
reach, grasp, transport, place, release, with the placement angle and the
completion time controlled by labels.

Joint naming: the reported joint names ("wipe", "joint2", "joint4",
"gripper") map to internal indices through ``ScenarioConfig.joint_map``,
so a 3-joint desk arm and an 8-joint arm expose the same surface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

VALID_LABELS = (0.0, 0.5, 1.0)


class ScenarioError(ValueError):
    """Invalid scenario configuration or label assignment."""


class DivergenceError(RuntimeError):
    """A commanded state contained NaN/Inf; carries the surviving partial trace."""

    def __init__(self, tick: int, partial: "Demonstration"):
        self.tick = tick
        self.partial = partial
        super().__init__(f"non-finite command at tick {tick}; trace truncated to {partial.length} states")


@dataclass(frozen=True)
class RobotState:
    """Per-tick joint angles [rad], angular velocities [rad/s], torques [N m]."""

    q: np.ndarray
    dq: np.ndarray
    tau: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.dq, self.tau])


@dataclass(frozen=True)
class DirectiveMap:
    """Linear map from a weak label y in [0, 1] to a physical parameter."""

    lo: float  # parameter at y = 0
    hi: float  # parameter at y = 1

    def __post_init__(self):
        if self.lo == self.hi:
            raise ScenarioError(f"directive map must be monotone, got lo == hi == {self.lo}")

    def value(self, y: float) -> float:
        return self.lo + (self.hi - self.lo) * y


def wiping_directives() -> dict[str, DirectiveMap]:
    # cycle period [s] and contact torque floor [N m]; stronger press = more negative
    return {"temporal": DirectiveMap(4.0, 1.0), "physical": DirectiveMap(-0.5, -2.5)}


def pick_and_place_directives() -> dict[str, DirectiveMap]:
    # core motion time [s] and final "joint2" placement angle [rad]
    return {"temporal": DirectiveMap(4.0, 1.0), "spatial": DirectiveMap(0.6, -0.6)}


@dataclass
class ScenarioConfig:
    task: str = "wiping"  # "wiping" | "pick_and_place"
    joints: int = 3
    dt: float = 0.002
    duration_ticks: int = 0  # 0 = auto-size for the slowest label
    noise_scale: float = 0.01
    seed: int = 0
    directive_params: dict[str, DirectiveMap] = field(default_factory=dict)
    joint_map: dict[str, int] = field(default_factory=dict)
    # wiping geometry
    wipe_midline: float = 0.8
    wipe_amplitude: float = 0.4
    torque_ripple: float = 0.3
    # pick-and-place geometry
    gripper_open: float = 0.5
    gripper_closed: float = 0.05
    noise_corr_time: float = 0.1

    def __post_init__(self):
        if self.task not in ("wiping", "pick_and_place"):
            raise ScenarioError(f"unknown task {self.task!r}")
        if self.dt <= 0:
            raise ScenarioError("dt must be positive")
        if self.joints < 3:
            raise ScenarioError("need at least 3 joints (wipe, joint2, joint4/gripper)")
        if not self.directive_params:
            self.directive_params = (
                wiping_directives() if self.task == "wiping" else pick_and_place_directives()
            )
        if not self.joint_map:
            if self.joints >= 8:
                self.joint_map = {"wipe": 0, "joint2": 1, "joint4": 3, "gripper": 7}
            else:
                self.joint_map = {"wipe": 0, "joint2": 1, "joint4": 2, "gripper": 2}
        if self.duration_ticks == 0:
            self.duration_ticks = self._auto_duration()
        if self.duration_ticks < 2:
            raise ScenarioError("duration too short")

    def _auto_duration(self) -> int:
        tm = self.directive_params["temporal"]
        slowest = max(tm.lo, tm.hi)
        if self.task == "wiping":
            horizon = _approach_time(slowest) + 3.4 * slowest + 0.4
        else:
            horizon = slowest + 0.8
        return int(math.ceil(horizon / self.dt))

    @property
    def directive_names(self) -> list[str]:
        return sorted(self.directive_params)

    def joint(self, name: str) -> int:
        idx = self.joint_map[name]
        if not 0 <= idx < self.joints:
            raise ScenarioError(f"joint_map[{name!r}]={idx} outside 0..{self.joints - 1}")
        return idx


@dataclass
class Demonstration:
    """A time series of robot states plus per-directive weak labels."""

    q: np.ndarray  # (T, J)
    dq: np.ndarray
    tau: np.ndarray
    dt: float
    labels: dict[str, float]
    meta: dict

    @property
    def length(self) -> int:
        return self.q.shape[0]

    @property
    def joints(self) -> int:
        return self.q.shape[1]

    def state(self, t: int) -> RobotState:
        return RobotState(self.q[t].copy(), self.dq[t].copy(), self.tau[t].copy())

    def as_matrix(self) -> np.ndarray:
        """All states as a (T, 3J) matrix with channel layout [q | dq | tau]."""
        return np.concatenate([self.q, self.dq, self.tau], axis=1)

    @staticmethod
    def from_matrix(states: np.ndarray, dt: float, labels: dict[str, float], meta: dict) -> "Demonstration":
        j = states.shape[1] // 3
        return Demonstration(
            q=states[:, :j].copy(),
            dq=states[:, j : 2 * j].copy(),
            tau=states[:, 2 * j :].copy(),
            dt=dt,
            labels=dict(labels),
            meta=dict(meta),
        )


def _approach_time(period: float) -> float:
    return 0.6 + 0.3 * period


def _smoothstep(t: np.ndarray, t0: float, t1: float) -> np.ndarray:
    """Cosine ease from 0 at t0 to 1 at t1, clamped outside."""
    x = np.clip((t - t0) / max(t1 - t0, 1e-9), 0.0, 1.0)
    return 0.5 * (1.0 - np.cos(np.pi * x))


def _filtered_noise(rng: np.random.Generator, n: int, scale: float, rho: float) -> np.ndarray:
    """Stationary first-order low-pass noise with std ``scale``."""
    if scale <= 0.0:
        return np.zeros(n)
    eps = rng.normal(size=n) * (scale * math.sqrt(1.0 - rho * rho))
    out = np.empty(n)
    acc = 0.0
    for i in range(n):
        acc = rho * acc + eps[i]
        out[i] = acc
    return out


def _validate_labels(config: ScenarioConfig, labels: dict[str, float]) -> None:
    expected = set(config.directive_params)
    if set(labels) != expected:
        raise ScenarioError(f"labels must cover exactly {sorted(expected)}, got {sorted(labels)}")
    for name, y in labels.items():
        if y not in VALID_LABELS:
            raise ScenarioError(f"label {name}={y} not in {VALID_LABELS}")


def synthesize_demo(config: ScenarioConfig, labels: dict[str, float], seed: int) -> Demonstration:
    """Generate one noisy labeled demonstration.

    Velocities are exact finite differences of the (noisy) angle series, so
    the state channels stay mutually consistent.
    """
    _validate_labels(config, labels)
    rng = np.random.default_rng(seed)
    if config.task == "wiping":
        q, tau = _wiping_trajectories(config, labels)
    else:
        q, tau = _pick_and_place_trajectories(config, labels)

    rho = math.exp(-config.dt / config.noise_corr_time)
    for j in range(config.joints):
        q[:, j] += _filtered_noise(rng, q.shape[0], config.noise_scale, rho)
        tau[:, j] += _filtered_noise(rng, q.shape[0], config.noise_scale, rho)

    dq = np.zeros_like(q)
    dq[1:] = np.diff(q, axis=0) / config.dt
    return Demonstration(
        q=q,
        dq=dq,
        tau=tau,
        dt=config.dt,
        labels=dict(labels),
        meta={"task": config.task, "seed": seed, "joints": config.joints},
    )


def _wiping_trajectories(config: ScenarioConfig, labels: dict[str, float]) -> tuple[np.ndarray, np.ndarray]:
    period = config.directive_params["temporal"].value(labels["temporal"])
    floor = config.directive_params["physical"].value(labels["physical"])
    T = config.duration_ticks
    t = np.arange(T) * config.dt
    t_app = _approach_time(period)
    if T * config.dt < t_app + 3.0 * period + 0.2:
        raise ScenarioError(
            f"duration {T * config.dt:.2f}s too short for 3 wipe cycles of period {period:.2f}s"
        )

    ramp = _smoothstep(t, 0.0, t_app)
    phase = np.maximum(t - t_app, 0.0) / period
    wipe = config.joint("wipe")
    elbow = config.joint("joint2")
    contact = config.joint("joint4")

    q = np.zeros((T, config.joints))
    carrier = ramp * config.wipe_midline
    q[:, wipe] = carrier + config.wipe_amplitude * np.sin(2.0 * np.pi * phase)
    q[:, elbow] = ramp * 0.45
    if contact != elbow:
        q[:, contact] = ramp * -0.35
    for j in range(config.joints):
        if j not in (wipe, elbow, contact):
            q[:, j] = ramp * 0.1 * (j + 1)

    tau = np.zeros_like(q)
    contact_ramp = _smoothstep(t, t_app - 0.2, t_app)
    ripple = config.torque_ripple * 0.5 * (1.0 - np.cos(2.0 * np.pi * phase))
    tau[:, contact] = contact_ramp * floor + ripple * (t >= t_app)
    tau[:, wipe] += -0.3 * (q[:, wipe] - carrier)
    tau[:, elbow] += -0.2 * q[:, elbow]
    return q, tau


def _pick_and_place_trajectories(config: ScenarioConfig, labels: dict[str, float]) -> tuple[np.ndarray, np.ndarray]:
    motion_time = config.directive_params["temporal"].value(labels["temporal"])
    final_angle = config.directive_params["spatial"].value(labels["spatial"])
    T = config.duration_ticks
    t = np.arange(T) * config.dt
    if T * config.dt < motion_time + 0.2:
        raise ScenarioError(f"duration {T * config.dt:.2f}s too short for motion time {motion_time:.2f}s")

    # phase boundaries as fractions of the core motion time
    t_reach = 0.35 * motion_time
    t_grasped = 0.45 * motion_time
    t_transported = 0.80 * motion_time
    t_placed = 0.90 * motion_time
    t_released = motion_time

    shoulder = config.joint("wipe")
    elbow = config.joint("joint2")
    grip = config.joint("gripper")

    q = np.zeros((T, config.joints))
    q[:, shoulder] = 0.5 * _smoothstep(t, 0.0, t_reach) + 0.5 * _smoothstep(t, t_grasped, t_transported)
    q[:, elbow] = 0.3 * _smoothstep(t, 0.0, t_reach) + (final_angle - 0.3) * _smoothstep(
        t, t_grasped, t_transported
    )
    q[:, grip] = (
        config.gripper_open
        - (config.gripper_open - config.gripper_closed) * _smoothstep(t, t_reach, t_grasped)
        + (config.gripper_open - config.gripper_closed) * _smoothstep(t, t_placed, t_released)
    )
    for j in range(config.joints):
        if j not in (shoulder, elbow, grip):
            q[:, j] = 0.1 * (j + 1) * _smoothstep(t, 0.0, t_reach)

    tau = np.zeros_like(q)
    tau[:, shoulder] = -0.15 * q[:, shoulder]
    tau[:, elbow] = -0.15 * q[:, elbow]
    closed = _smoothstep(t, t_reach, t_grasped) - _smoothstep(t, t_placed, t_released)
    tau[:, grip] = -0.4 * closed
    return q, tau


# --- follower simulation ------------------------------------------------------


class SimFollower:
    """First-order lag follower: executed state tracks the commanded state.

    lag=1 reproduces the command exactly. Optional filtered process noise on
    the executed angles makes repeated online trials distinct per seed.
    """

    def __init__(self, config: ScenarioConfig, lag: float = 1.0, noise_scale: float = 0.0, seed: int = 0):
        if not 0.0 < lag <= 1.0:
            raise ScenarioError(f"lag must be in (0, 1], got {lag}")
        self.config = config
        self.lag = lag
        self.noise_scale = noise_scale
        self._rho = math.exp(-config.dt / config.noise_corr_time)
        self._rng = np.random.default_rng(seed)
        self.reset()

    def reset(self) -> RobotState:
        j = self.config.joints
        self.q = np.zeros(j)
        self.dq = np.zeros(j)
        self.tau = np.zeros(j)
        self._q_clean = np.zeros(j)
        self._noise = np.zeros(j)
        self.tick = 0
        return self.state()

    def state(self) -> RobotState:
        return RobotState(self.q.copy(), self.dq.copy(), self.tau.copy())

    def step(self, q_cmd: np.ndarray, tau_cmd: np.ndarray) -> RobotState:
        if not (np.all(np.isfinite(q_cmd)) and np.all(np.isfinite(tau_cmd))):
            raise ValueError(f"non-finite command at tick {self.tick}")
        self._q_clean = self._q_clean + self.lag * (q_cmd - self._q_clean)
        if self.noise_scale > 0.0:
            step = self._rng.normal(size=self.q.shape) * self.noise_scale * math.sqrt(1 - self._rho**2)
            self._noise = self._rho * self._noise + step
        q_new = self._q_clean + self._noise
        self.dq = (q_new - self.q) / self.config.dt
        self.q = q_new
        self.tau = self.tau + self.lag * (tau_cmd - self.tau)
        self.tick += 1
        return self.state()


def rollout(commanded: np.ndarray, config: ScenarioConfig, lag: float = 1.0) -> Demonstration:
    """Execute a (T, 3J) or (T, J) commanded sequence through the lag follower.

    The returned trace has T+1 states; state 0 is the initial (zero) state and
    state t responds to command t-1, so with lag=1 the executed angles from
    tick 1 onward equal the commanded angles exactly. A non-finite command at
    index k raises :class:`DivergenceError` whose partial trace keeps the k+1
    states that precede its effect.
    """
    commanded = np.asarray(commanded, dtype=np.float64)
    j = config.joints
    if commanded.ndim != 2 or commanded.shape[1] not in (j, 3 * j):
        raise ScenarioError(f"commanded states must have {j} or {3 * j} columns, got {commanded.shape}")
    q_cmd = commanded[:, :j]
    tau_cmd = commanded[:, 2 * j : 3 * j] if commanded.shape[1] == 3 * j else np.zeros_like(q_cmd)

    follower = SimFollower(config, lag=lag)
    qs = [follower.q.copy()]
    taus = [follower.tau.copy()]
    for k in range(commanded.shape[0]):
        try:
            st = follower.step(q_cmd[k], tau_cmd[k])
        except ValueError:
            partial = _trace_from_arrays(np.array(qs), np.array(taus), config.dt)
            raise DivergenceError(k, partial) from None
        qs.append(st.q)
        taus.append(st.tau)
    return _trace_from_arrays(np.array(qs), np.array(taus), config.dt)


def _trace_from_arrays(q: np.ndarray, tau: np.ndarray, dt: float) -> Demonstration:
    dq = np.zeros_like(q)
    if q.shape[0] > 1:
        dq[1:] = np.diff(q, axis=0) / dt
    return Demonstration(q=q, dq=dq, tau=tau, dt=dt, labels={}, meta={"source": "rollout"})


# --- motion analysis ----------------------------------------------------------


def detect_wipe_cycles(q: np.ndarray, dt: float, min_swing_frac: float = 0.35) -> list[tuple[int, int]]:
    """Find full wipe cycles from velocity zero-crossings of one joint's angle.

    An extreme is a smoothed-velocity sign change; consecutive same-direction
    extremes are merged to the more extreme one, and an extreme only counts
    when the position swing since the previous accepted extreme is a real
    fraction of the oscillation amplitude. A cycle spans alternate extremes
    (peak to peak), so its duration is one full period.
    """
    n = q.shape[0]
    if n < 5:
        return []
    win = max(1, int(round(0.05 / dt)))
    kernel = np.ones(win) / win
    qs = np.convolve(q, kernel, mode="same") if win > 1 else q
    v = np.gradient(qs, dt)

    lo, hi = np.percentile(qs, [5.0, 95.0])
    amp = (hi - lo) / 2.0
    if amp < 0.02:
        return []
    swing_min = min_swing_frac * amp

    extremes: list[tuple[int, int]] = []  # (index, kind) kind=+1 peak, -1 trough
    anchor = qs[0]
    sign = np.sign(v)
    prev_sign = 0
    for i in range(n):
        s = sign[i]
        if s == 0:
            continue
        if prev_sign != 0 and s != prev_sign:
            kind = 1 if prev_sign > 0 else -1
            idx = i - 1
            if extremes and extremes[-1][1] == kind:
                last_idx, _ = extremes[-1]
                if (kind == 1 and qs[idx] > qs[last_idx]) or (kind == -1 and qs[idx] < qs[last_idx]):
                    extremes[-1] = (idx, kind)
            else:
                ref = qs[extremes[-1][0]] if extremes else anchor
                if abs(qs[idx] - ref) >= swing_min:
                    extremes.append((idx, kind))
        prev_sign = s

    cycles = []
    for k in range(0, len(extremes) - 2, 2):
        cycles.append((extremes[k][0], extremes[k + 2][0]))
    return cycles


def gripper_transitions(q_grip: np.ndarray, open_level: float, closed_level: float) -> list[tuple[int, str]]:
    """Close/open events from the gripper angle crossing the midpoint with hysteresis."""
    mid = 0.5 * (open_level + closed_level)
    band = 0.1 * abs(open_level - closed_level)
    events: list[tuple[int, str]] = []
    state = "open" if q_grip[0] > mid else "closed"
    for i in range(1, q_grip.shape[0]):
        if state == "open" and q_grip[i] < mid - band:
            state = "closed"
            events.append((i, "close"))
        elif state == "closed" and q_grip[i] > mid + band:
            state = "open"
            events.append((i, "open"))
    return events


def success_predicate(trace: Demonstration, config: ScenarioConfig) -> tuple[bool, str | None]:
    """Task success plus a failure reason for unsuccessful traces."""
    if trace.length == 0:
        return False, "empty trace"
    if not np.all(np.isfinite(trace.q)) or trace.meta.get("diverged"):
        return False, "divergence"
    if config.task == "wiping":
        return _wiping_success(trace, config)
    return _pick_and_place_success(trace, config)


def _wiping_success(trace: Demonstration, config: ScenarioConfig) -> tuple[bool, str | None]:
    wipe = config.joint("wipe")
    contact = config.joint("joint4")
    cycles = detect_wipe_cycles(trace.q[:, wipe], trace.dt)
    if len(cycles) < 3:
        return False, "premature stop"
    start, end = cycles[0][0], cycles[2][1]
    # stall: the wiping joint must keep moving until the third cycle completes
    win = max(1, int(round(0.4 / trace.dt)))
    speed = np.abs(trace.dq[start:end, wipe])
    rolling = np.convolve(speed, np.ones(win) / win, mode="valid")
    if rolling.size and rolling.min() < 0.02:
        return False, "premature stop"
    if np.max(trace.tau[start:end, contact]) > -0.05:
        return False, "lifted off surface"
    return True, None


def _pick_and_place_success(trace: Demonstration, config: ScenarioConfig) -> tuple[bool, str | None]:
    grip = config.joint("gripper")
    elbow = config.joint("joint2")
    events = gripper_transitions(trace.q[:, grip], config.gripper_open, config.gripper_closed)
    kinds = [kind for _, kind in events]
    if kinds[:1] != ["close"]:
        return False, "missed grasp"
    if len(kinds) < 2 or kinds[1] != "open":
        return False, "no release"
    if len(kinds) > 2:
        return False, "unintended gripper actuation"
    spatial = config.directive_params["spatial"]
    lo, hi = sorted((spatial.lo, spatial.hi))
    final = trace.q[-1, elbow]
    if not (lo - 0.15 <= final <= hi + 0.15):
        return False, "misplaced"
    return True, None


def label_grid(levels: dict[str, list[float]], seeds: list[int]) -> list[tuple[dict[str, float], int]]:
    """Cartesian product of per-directive label levels crossed with seeds."""
    names = sorted(levels)
    combos: list[dict[str, float]] = [{}]
    for name in names:
        combos = [{**c, name: y} for c in combos for y in levels[name]]
    return [(dict(c), s) for c in combos for s in seeds]

"""Online motion generation: chunk decoding, age-weighted blending, and the
command-tick control loop.

Every command tick (one model step = ``command_update_stride`` control
ticks), the engine reads the executed state, decodes a fresh W-step chunk
from (state, latent command), pushes it into the chunk buffer, and emits
the next commanded state as the age-weighted average over overlapping
chunks. Latent commands arrive through a last-writer-wins mailbox and take
effect at the next regeneration.

Blending indexes ages literally: at tick t the usable contributions are
chunks generated at ticks t+1-i for ages i in [1, min(t, W-1)]; each
contributes its relative step i (its prediction for time t+1). The chunk
generated at tick 0 therefore only serves the special-cased very first
command. A worked table lives in docs/chunk_blending.md.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field

import numpy as np

from ._kernels import single_thread_blas
from .dataset import Normalization
from .model import SeqCVAE
from .simworld import Demonstration, ScenarioConfig, SimFollower


class BlendError(ValueError):
    pass


@dataclass(frozen=True)
class WeightScheme:
    """Age-weighting for the chunk average; ``none`` disables averaging."""

    kind: str = "inverse_log"  # none | inverse | exponential | inverse_log
    m: float = 0.05  # decay rate for the exponential scheme

    def __post_init__(self):
        if self.kind not in ("none", "inverse", "exponential", "inverse_log"):
            raise ValueError(f"unknown weight scheme {self.kind!r}")
        if self.kind == "exponential" and self.m <= 0:
            raise ValueError("exponential scheme needs m > 0")

    def label(self) -> str:
        return f"exponential(m={self.m})" if self.kind == "exponential" else self.kind


def weight(scheme: WeightScheme, age: int) -> float:
    """w_i for a chunk of age i >= 1 command ticks."""
    if age < 1:
        raise BlendError(f"chunk ages start at 1, got {age}")
    if scheme.kind == "inverse_log":
        return 1.0 / math.log(age + 1)
    if scheme.kind == "inverse":
        return 1.0 / (age + 1)
    if scheme.kind == "exponential":
        return math.exp(-scheme.m * age)
    return 1.0


@dataclass
class ChunkBuffer:
    """Ring of the most recent predicted chunks, keyed by generation tick."""

    window: int  # W; entries older than W-1 ticks are evicted
    entries: dict[int, np.ndarray] = field(default_factory=dict)

    def push(self, gen_tick: int, chunk: np.ndarray) -> None:
        self.entries[gen_tick] = chunk
        # at blend tick t == gen_tick the usable ages are 1..W-1, i.e. ticks >= t-W+2
        horizon = gen_tick - self.window + 2
        for g in [g for g in self.entries if g < horizon]:
            del self.entries[g]

    def __len__(self) -> int:
        return len(self.entries)


def blend(buffer: ChunkBuffer, t: int, scheme: WeightScheme) -> np.ndarray:
    """Next commanded state from the buffered chunks at command tick t."""
    if not buffer.entries:
        raise BlendError("blend on empty buffer")
    newest = buffer.entries.get(t)
    if newest is None:
        raise BlendError(f"buffer is missing the chunk generated at tick {t}")
    if t == 0 or scheme.kind == "none":
        return newest[1].copy()
    acc = None
    total = 0.0
    for age in range(1, min(t, buffer.window - 1) + 1):
        chunk = buffer.entries.get(t + 1 - age)
        if chunk is None:
            continue
        w = weight(scheme, age)
        contrib = w * chunk[age]
        acc = contrib if acc is None else acc + contrib
        total += w
    if acc is None:
        return newest[1].copy()
    return acc / total


class LatentMailbox:
    """Atomic last-writer-wins mailbox for latent commands and scheme changes."""

    def __init__(self, size: int):
        self.size = size
        self._lock = threading.Lock()
        self._values: np.ndarray | None = None
        self._scheme: WeightScheme | None = None
        self._reset = False

    def write(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.size,):
            raise ValueError(f"latent command must have {self.size} dims, got {values.shape}")
        with self._lock:
            self._values = values.copy()
        return values

    def write_dim(self, dim: int, value: float, current: np.ndarray) -> np.ndarray:
        if not 0 <= dim < self.size:
            raise IndexError(f"latent dim {dim} out of range 0..{self.size - 1}")
        with self._lock:
            base = self._values if self._values is not None else np.asarray(current, dtype=np.float64)
            vals = base.copy()
            vals[dim] = value
            self._values = vals
        return vals.copy()

    def write_scheme(self, scheme: WeightScheme) -> None:
        with self._lock:
            self._scheme = scheme

    def request_reset(self) -> None:
        with self._lock:
            self._reset = True

    def take(self) -> tuple[np.ndarray | None, WeightScheme | None, bool]:
        with self._lock:
            out = (self._values, self._scheme, self._reset)
            self._values, self._scheme, self._reset = None, None, False
        return out

    def peek(self) -> np.ndarray | None:
        with self._lock:
            return None if self._values is None else self._values.copy()


@dataclass
class EngineConfig:
    command_update_stride: int = 20  # control ticks per chunk regeneration
    ticks: int = 400  # command ticks per run
    scheme: WeightScheme = field(default_factory=WeightScheme)
    initial_command: np.ndarray | None = None
    follower_lag: float = 1.0
    follower_noise: float = 0.0
    seed: int = 0
    log_chunks: bool = False

    def __post_init__(self):
        if self.command_update_stride < 1:
            raise ValueError("command_update_stride must be >= 1")
        if self.ticks < 1:
            raise ValueError("ticks must be >= 1")


@dataclass
class RunResult:
    trace: Demonstration  # executed states at control resolution
    commands: np.ndarray  # (ticks, D) blended commanded states
    events: list[dict]
    diverged: bool
    latent_log: list[tuple[int, np.ndarray]]


def run_online(
    model: SeqCVAE,
    normalization: Normalization,
    scenario: ScenarioConfig,
    engine: EngineConfig,
    schedule: list[tuple[int, np.ndarray]] | None = None,
    mailbox: LatentMailbox | None = None,
    on_tick=None,
) -> RunResult:
    """Drive the follower with blended model chunks.

    ``schedule`` holds (tick, latent values) pairs applied at the first
    regeneration at or after their tick; ``mailbox`` carries live commands.
    Both funnel through the same last-writer-wins slot, and every applied
    change lands in the event log.
    """
    zdim = model.config.latent.total
    scheme = engine.scheme
    z_cmd = (
        np.asarray(engine.initial_command, dtype=np.float64).copy()
        if engine.initial_command is not None
        else np.zeros(zdim)
    )
    if z_cmd.shape != (zdim,):
        raise ValueError(f"initial command must have {zdim} dims")
    schedule = sorted(schedule or [], key=lambda item: item[0])
    sched_i = 0

    follower = SimFollower(
        scenario, lag=engine.follower_lag, noise_scale=engine.follower_noise, seed=engine.seed
    )
    j = scenario.joints
    buffer = ChunkBuffer(window=model.config.window)
    events: list[dict] = []
    latent_log: list[tuple[int, np.ndarray]] = []
    commands = np.zeros((engine.ticks, 3 * j))
    qs = [follower.q.copy()]
    taus = [follower.tau.copy()]
    diverged = False

    def log_event(tick: int, kind: str, payload: dict) -> None:
        events.append({"tick": tick, "kind": kind, "payload": payload})

    log_event(0, "latent_update", {"values": z_cmd.tolist(), "source": "initial"})
    latent_log.append((0, z_cmd.copy()))
    prev_cmd = None

    with single_thread_blas():
        for t in range(engine.ticks):
            while sched_i < len(schedule) and schedule[sched_i][0] <= t:
                z_new = np.asarray(schedule[sched_i][1], dtype=np.float64)
                if z_new.shape != (zdim,):
                    raise ValueError(f"scheduled command at tick {schedule[sched_i][0]} has wrong size")
                z_cmd = z_new.copy()
                sched_i += 1
                log_event(t, "latent_update", {"values": z_cmd.tolist(), "source": "schedule"})
                latent_log.append((t, z_cmd.copy()))
            if mailbox is not None:
                values, new_scheme, want_reset = mailbox.take()
                if want_reset:
                    follower.reset()
                    buffer.entries.clear()
                    prev_cmd = None
                    log_event(t, "reset", {})
                if new_scheme is not None:
                    scheme = new_scheme
                    log_event(t, "scheme", {"scheme": scheme.label()})
                if values is not None:
                    z_cmd = values.copy()
                    log_event(t, "latent_update", {"values": z_cmd.tolist(), "source": "mailbox"})
                    latent_log.append((t, z_cmd.copy()))

            state = follower.state()
            norm_state = normalization.apply(state.as_vector())
            chunk = normalization.invert(model.decode_chunk(z_cmd, norm_state))
            buffer.push(t, chunk)
            cmd = blend(buffer, t, scheme)
            commands[t] = cmd
            if engine.log_chunks:
                log_event(t, "chunk", {"chunk": chunk.tolist()})

            base = prev_cmd if prev_cmd is not None else state.as_vector()
            try:
                for k in range(1, engine.command_update_stride + 1):
                    frac = k / engine.command_update_stride
                    target = base + frac * (cmd - base)
                    st = follower.step(target[:j], target[2 * j : 3 * j])
                    qs.append(st.q)
                    taus.append(st.tau)
            except ValueError:
                diverged = True
                log_event(t, "error", {"message": "divergence: non-finite command"})
                break
            prev_cmd = cmd
            log_event(
                t,
                "state",
                {
                    "q": st.q.tolist(),
                    "dq": st.dq.tolist(),
                    "tau": st.tau.tolist(),
                    "cmd_q": cmd[:j].tolist(),
                    "z": z_cmd.tolist(),
                    "scheme": scheme.label(),
                },
            )
            if on_tick is not None:
                on_tick(t, st, z_cmd, scheme)

    q = np.array(qs)
    dq = np.zeros_like(q)
    if q.shape[0] > 1:
        dq[1:] = np.diff(q, axis=0) / scenario.dt
    trace = Demonstration(
        q=q,
        dq=dq,
        tau=np.array(taus),
        dt=scenario.dt,
        labels={},
        meta={"source": "online", "diverged": diverged, "task": scenario.task},
    )
    ticks_run = len(qs[1:]) // engine.command_update_stride
    return RunResult(
        trace=trace,
        commands=commands[:ticks_run],
        events=events,
        diverged=diverged,
        latent_log=latent_log,
    )


def command_jerk(commands: np.ndarray, joints: int) -> float:
    """Mean squared second difference of the commanded joint angles."""
    q = commands[:, :joints]
    if q.shape[0] < 3:
        return 0.0
    dd = q[2:] - 2.0 * q[1:-1] + q[:-2]
    return float(np.mean(dd * dd))


def write_event_log(path, events: list[dict], meta: dict | None = None) -> None:
    """JSON-lines event log; optional leading meta record for replay."""
    with open(path, "w") as fh:
        if meta is not None:
            fh.write(json.dumps({"tick": 0, "kind": "meta", "payload": meta}, sort_keys=True) + "\n")
        for ev in events:
            fh.write(json.dumps(ev, sort_keys=True) + "\n")


def read_event_log(path) -> tuple[dict | None, list[dict]]:
    meta = None
    events = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if record["kind"] == "meta":
                meta = record["payload"]
            else:
                events.append(record)
    return meta, events

"""FastAPI service: pipeline REST endpoints plus the live directive loop.

The live loop runs in a dedicated engine thread (single owner of the model,
buffer, and simulated follower). WebSocket sessions talk to it only through
the atomic latent-command mailbox and receive immutable state snapshots via
per-client queues. The first client holds the controller role; later ones
are viewers and inherit control in connection order when the controller
leaves. Wire schema: docs/protocol.md.
"""

from __future__ import annotations

import asyncio
import contextlib
import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from .. import __version__
from .. import inference as inf
from .. import pipeline
from .. import simworld as sw
from ..configio import ConfigError
from ..container import CorruptFileError, VersionMismatchError
from ..dataset import DatasetError
from ..model import load_checkpoint
from .schemas import (
    AblateRequest,
    AblateResponse,
    EvalRequest,
    EvalResponse,
    HealthResponse,
    SessionInfo,
    SynthRequest,
    SynthResponse,
    TrainRequest,
    TrainResponse,
    WireMessage,
)


@dataclass
class LiveOptions:
    checkpoint_path: str
    task: str = "wiping"
    ticks: int = 1500
    command_update_stride: int = 20
    scheme: str = "inverse_log"
    exponential_m: float = 0.05
    speed: float = 1.0  # wall-clock pacing factor; 0 = as fast as possible
    follower_noise: float = 0.0
    seed: int = 0


@dataclass
class ReplayOptions:
    log_path: str
    speed: float = 1.0


@dataclass
class _Client:
    queue: asyncio.Queue
    loop: asyncio.AbstractEventLoop
    role: str


class ClientHub:
    """Connected-socket registry; broadcast is callable from the engine thread."""

    def __init__(self):
        self._lock = threading.Lock()
        self._clients: dict[int, _Client] = {}
        self._next_id = 0

    def add(self, loop: asyncio.AbstractEventLoop) -> tuple[int, _Client]:
        with self._lock:
            cid = self._next_id
            self._next_id += 1
            role = "controller" if not any(c.role == "controller" for c in self._clients.values()) else "viewer"
            client = _Client(queue=asyncio.Queue(maxsize=256), loop=loop, role=role)
            self._clients[cid] = client
            return cid, client

    def remove(self, cid: int) -> _Client | None:
        """Drop a client; if the controller left, promote the oldest viewer."""
        with self._lock:
            gone = self._clients.pop(cid, None)
            promoted = None
            if gone and gone.role == "controller" and self._clients:
                new_id = min(self._clients)
                self._clients[new_id].role = "controller"
                promoted = self._clients[new_id]
        if promoted is not None:
            self._offer(promoted, {"type": "hello", "tick": 0, "payload": {"role": "controller", "promoted": True}})
        return gone

    def role_of(self, cid: int) -> str:
        with self._lock:
            client = self._clients.get(cid)
            return client.role if client else "viewer"

    def count(self) -> int:
        with self._lock:
            return len(self._clients)

    def broadcast(self, message: dict) -> None:
        with self._lock:
            clients = list(self._clients.values())
        for client in clients:
            self._offer(client, message)

    @staticmethod
    def _offer(client: _Client, message: dict) -> None:
        def put():
            if client.queue.full():
                with contextlib.suppress(asyncio.QueueEmpty):
                    client.queue.get_nowait()  # drop the oldest frame
            client.queue.put_nowait(message)

        client.loop.call_soon_threadsafe(put)


class _Restart(Exception):
    pass


class _Stop(Exception):
    pass


class LiveSession(threading.Thread):
    """Engine thread: repeatedly runs the online loop against the simulator."""

    def __init__(self, options: LiveOptions):
        super().__init__(daemon=True, name="modmotion-engine")
        self.options = options
        self.model, self.normalization, self.meta = load_checkpoint(options.checkpoint_path)
        if self.normalization is None:
            raise ValueError(f"{options.checkpoint_path}: checkpoint has no normalization stats")
        self.scenario = sw.ScenarioConfig(task=options.task, noise_scale=0.0)
        self.spec = self.model.config.latent
        self.mailbox = inf.LatentMailbox(self.spec.total)
        self.hub = ClientHub()
        self.scheme = (
            inf.WeightScheme("exponential", options.exponential_m)
            if options.scheme == "exponential"
            else inf.WeightScheme(options.scheme)
        )
        self.tick = 0
        self.running = False
        self.z_cmd = np.zeros(self.spec.total)
        self.tsr_successes = 0
        self.tsr_total = 0
        self.last_reason: str | None = None
        self._reset_evt = threading.Event()
        self._stop_evt = threading.Event()
        self._last_z: np.ndarray | None = None

    # --- engine side ------------------------------------------------------

    def run(self) -> None:
        while not self._stop_evt.is_set():
            self._reset_evt.clear()
            self.tick = 0
            self.running = True
            self._last_z = None
            engine = inf.EngineConfig(
                command_update_stride=self.options.command_update_stride,
                ticks=self.options.ticks,
                scheme=self.scheme,
                initial_command=self.mailbox.peek(),
                follower_noise=self.options.follower_noise,
                seed=self.options.seed,
            )
            try:
                result = inf.run_online(
                    self.model, self.normalization, self.scenario, engine,
                    mailbox=self.mailbox, on_tick=self._on_tick,
                )
            except _Restart:
                self.hub.broadcast({"type": "reset", "tick": 0, "payload": {}})
                continue
            except _Stop:
                break
            self.running = False
            ok, reason = sw.success_predicate(result.trace, self.scenario)
            self.tsr_successes += int(ok)
            self.tsr_total += 1
            self.last_reason = reason
            self.hub.broadcast(
                {
                    "type": "metrics",
                    "tick": self.tick,
                    "payload": {
                        "tsr": f"{100.0 * self.tsr_successes / self.tsr_total:.1f}% "
                        f"[{self.tsr_successes}/{self.tsr_total}]",
                        "successes": self.tsr_successes,
                        "trials": self.tsr_total,
                        "last_run_success": ok,
                        "last_run_reason": reason,
                        "finished": True,
                    },
                }
            )
            # idle until a reset or shutdown
            while not self._stop_evt.is_set() and not self._reset_evt.wait(timeout=0.2):
                pass

    def _on_tick(self, t, state, z_cmd, scheme) -> None:
        if self._stop_evt.is_set():
            raise _Stop()
        if self._reset_evt.is_set():
            raise _Restart()
        self.tick = t
        self.scheme = scheme
        if self._last_z is None or not np.array_equal(self._last_z, z_cmd):
            self._last_z = z_cmd.copy()
            self.z_cmd = z_cmd.copy()
            self.hub.broadcast(
                {"type": "latent_update", "tick": t, "payload": {"values": z_cmd.tolist()}}
            )
        self.hub.broadcast(
            {
                "type": "state",
                "tick": t,
                "payload": {
                    "q": state.q.tolist(),
                    "dq": state.dq.tolist(),
                    "tau": state.tau.tolist(),
                    "z": z_cmd.tolist(),
                    "scheme": scheme.label(),
                },
            }
        )
        if self.options.speed > 0:
            time.sleep(self.scenario.dt * self.options.command_update_stride / self.options.speed)

    # --- client side ------------------------------------------------------

    def hello_payload(self, role: str) -> dict:
        return {
            "role": role,
            "mode": "live",
            "latent": self.spec.to_dict(),
            "scheme": self.scheme.label(),
            "z": self.z_cmd.tolist(),
            "task": self.scenario.task,
            "joints": self.scenario.joints,
            "model_dt": self.scenario.dt * self.options.command_update_stride,
            "checkpoint_fingerprint": self.meta.get("fingerprint"),
        }

    def set_latent(self, payload: dict) -> None:
        if "values" in payload:
            self.mailbox.write(np.asarray(payload["values"], dtype=np.float64))
        else:
            self.mailbox.write_dim(int(payload["dim"]), float(payload["value"]), current=self.z_cmd)

    def set_scheme(self, payload: dict) -> None:
        kind = payload["kind"]
        scheme = (
            inf.WeightScheme("exponential", float(payload.get("m", self.options.exponential_m)))
            if kind == "exponential"
            else inf.WeightScheme(kind)
        )
        self.mailbox.write_scheme(scheme)

    def reset(self) -> None:
        self._reset_evt.set()

    def stop(self) -> None:
        self._stop_evt.set()
        self._reset_evt.set()

    def info(self) -> SessionInfo:
        return SessionInfo(
            mode="live",
            checkpoint=self.options.checkpoint_path,
            latent=self.spec.to_dict(),
            scheme=self.scheme.label(),
            tick=self.tick,
            running=self.running,
            clients=self.hub.count(),
        )


class ReplaySession(threading.Thread):
    """Streams a recorded event log over the same wire schema."""

    def __init__(self, options: ReplayOptions):
        super().__init__(daemon=True, name="modmotion-replay")
        self.options = options
        self.meta, self.events = inf.read_event_log(options.log_path)
        self.meta = self.meta or {}
        self.hub = ClientHub()
        self.tick = 0
        self.running = False
        self._reset_evt = threading.Event()
        self._stop_evt = threading.Event()
        self.model_dt = float(self.meta.get("model_dt", 0.04))

    _WIRE_KIND = {"state": "state", "latent_update": "latent_update", "error": "error", "scheme": "metrics"}

    def run(self) -> None:
        while not self._stop_evt.is_set():
            # playback is pointless with nobody listening; wait for a client
            while not self._stop_evt.is_set() and self.hub.count() == 0:
                time.sleep(0.02)
            self._reset_evt.clear()
            self.running = True
            for event in self.events:
                if self._stop_evt.is_set():
                    return
                if self._reset_evt.is_set():
                    break
                wire_type = self._WIRE_KIND.get(event["kind"])
                if wire_type is None:
                    continue  # chunk records are not streamed
                self.tick = event["tick"]
                self.hub.broadcast({"type": wire_type, "tick": event["tick"], "payload": event["payload"]})
                if event["kind"] == "state" and self.options.speed > 0:
                    time.sleep(self.model_dt / self.options.speed)
            else:
                self.running = False
                self.hub.broadcast({"type": "metrics", "tick": self.tick, "payload": {"finished": True}})
                while not self._stop_evt.is_set() and not self._reset_evt.wait(timeout=0.2):
                    pass
                continue
            self.hub.broadcast({"type": "reset", "tick": 0, "payload": {}})

    def hello_payload(self, role: str) -> dict:
        latent = self.meta.get("latent")
        if latent is None:
            first = next((e for e in self.events if e["kind"] == "latent_update"), None)
            n = len(first["payload"]["values"]) if first else 1
            latent = {"constrained": 0, "unconstrained": n, "directive_names": []}
        return {
            "role": role,
            "mode": "replay",
            "latent": latent,
            "scheme": self.meta.get("scheme", "inverse_log"),
            "z": [],
            "task": self.meta.get("task", "wiping"),
            "joints": self.meta.get("joints", 3),
            "model_dt": self.model_dt,
            "log_path": self.options.log_path,
        }

    def set_latent(self, payload: dict) -> None:
        raise ValueError("replay session does not accept latent commands")

    def set_scheme(self, payload: dict) -> None:
        raise ValueError("replay session does not accept scheme changes")

    def reset(self) -> None:
        self._reset_evt.set()

    def stop(self) -> None:
        self._stop_evt.set()
        self._reset_evt.set()

    def info(self) -> SessionInfo:
        return SessionInfo(
            mode="replay",
            checkpoint=None,
            latent=self.hello_payload("viewer")["latent"],
            scheme=self.meta.get("scheme", "inverse_log"),
            tick=self.tick,
            running=self.running,
            clients=self.hub.count(),
        )


def create_app(
    live: LiveOptions | None = None,
    replay: ReplayOptions | None = None,
    frontend_dir: str | None = None,
) -> FastAPI:
    session: LiveSession | ReplaySession | None = None
    if live and replay:
        raise ValueError("configure either a live session or a replay session, not both")
    if live:
        session = LiveSession(live)
    elif replay:
        session = ReplaySession(replay)

    @contextlib.asynccontextmanager
    async def lifespan(_app: FastAPI):
        if session is not None:
            session.start()
        yield
        if session is not None:
            session.stop()

    app = FastAPI(title="modmotion", version=__version__, lifespan=lifespan)
    app.state.session = session

    @app.exception_handler(ValueError)
    async def _value_error(request, exc):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    for exc_type in (
        ConfigError,
        DatasetError,
        CorruptFileError,
        VersionMismatchError,
        sw.ScenarioError,
        FileNotFoundError,
    ):
        app.add_exception_handler(exc_type, _value_error)

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(status="ok", version=__version__, live_session=session is not None)

    @app.post("/synth", response_model=SynthResponse)
    def synth_endpoint(req: SynthRequest):
        return pipeline.synth(req)

    @app.post("/train", response_model=TrainResponse)
    def train_endpoint(req: TrainRequest):
        return pipeline.train(req)

    @app.post("/eval", response_model=EvalResponse)
    def eval_endpoint(req: EvalRequest):
        return pipeline.evaluate(req)

    @app.post("/ablate", response_model=AblateResponse)
    def ablate_endpoint(req: AblateRequest):
        return pipeline.ablate(req)

    @app.get("/session", response_model=SessionInfo)
    def session_endpoint():
        if session is None:
            raise ValueError("no live or replay session configured; start with `modmotion serve`")
        return session.info()

    @app.websocket("/ws")
    async def websocket_endpoint(ws: WebSocket):
        await ws.accept()
        if session is None:
            await ws.send_text(
                WireMessage(type="error", payload={"message": "no live session on this server"}).model_dump_json()
            )
            await ws.close()
            return
        loop = asyncio.get_running_loop()
        cid, client = session.hub.add(loop)
        await ws.send_text(
            WireMessage(type="hello", tick=session.tick, payload=session.hello_payload(client.role)).model_dump_json()
        )

        async def sender():
            while True:
                message = await client.queue.get()
                await ws.send_text(json.dumps(message))

        send_task = asyncio.create_task(sender())
        try:
            while True:
                raw = await ws.receive_text()
                try:
                    msg = WireMessage.model_validate_json(raw)
                except Exception as err:
                    await ws.send_text(
                        WireMessage(type="error", payload={"message": f"malformed message: {err}"}).model_dump_json()
                    )
                    continue
                try:
                    if msg.type == "set_latent":
                        if session.hub.role_of(cid) != "controller":
                            raise ValueError("viewers cannot send latent commands")
                        session.set_latent(msg.payload)
                    elif msg.type == "set_scheme":
                        if session.hub.role_of(cid) != "controller":
                            raise ValueError("viewers cannot change the weighting scheme")
                        session.set_scheme(msg.payload)
                    elif msg.type == "reset":
                        session.reset()
                    else:
                        raise ValueError(f"unsupported inbound message type {msg.type!r}")
                except (ValueError, IndexError, KeyError) as err:
                    await ws.send_text(
                        WireMessage(type="error", tick=session.tick, payload={"message": str(err)}).model_dump_json()
                    )
        except WebSocketDisconnect:
            pass
        finally:
            send_task.cancel()
            session.hub.remove(cid)

    ui_dir = Path(frontend_dir) if frontend_dir else Path(__file__).resolve().parents[3] / "frontend" / "dist"
    if ui_dir.is_dir():
        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app

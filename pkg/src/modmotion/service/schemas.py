"""Request/response models for the pipeline API and the live wire protocol."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field


class ScenarioParams(BaseModel):
    task: Literal["wiping", "pick_and_place"] = "wiping"
    joints: int = 3
    dt: float = 0.002
    duration_ticks: int = 0
    noise_scale: float = 0.01


class DatasetParams(BaseModel):
    window: int = 50
    hop: int = 12
    stride: int = 20
    train_fraction: float = 0.8


class SynthRequest(BaseModel):
    scenario: ScenarioParams = Field(default_factory=ScenarioParams)
    levels: dict[str, list[float]] = Field(
        default_factory=lambda: {"temporal": [0.0, 0.5, 1.0], "physical": [0.0, 0.5, 1.0]}
    )
    seeds: list[int] = Field(default_factory=lambda: [0, 1])
    dataset: DatasetParams = Field(default_factory=DatasetParams)
    seed: int = 0
    out_path: str


class SynthResponse(BaseModel):
    demos: int
    windows: int
    label_histogram: dict[str, dict[str, int]]
    out_path: str
    sha256: str


class ModelParams(BaseModel):
    hidden_dim: int = 64
    encoder_layers: int = 3
    decoder_layers: int = 3
    window: int = 50
    constrained: list[str] = Field(default_factory=lambda: ["physical", "temporal"])
    unconstrained: int = 1
    predictor_input: Literal["mu", "sample"] = "mu"


class TrainParams(BaseModel):
    epochs: int = 150
    batch_size: int = 32
    learning_rate: float = 1e-3
    clip_norm: float = 1.0
    alpha: float = 1.0
    beta: float = 0.3
    gamma: float = 2.5
    eval_every: int = 10
    seed: int = 0
    strict_sequence_mse: bool = False


class TrainRequest(BaseModel):
    dataset_path: str
    model: ModelParams = Field(default_factory=ModelParams)
    train: TrainParams = Field(default_factory=TrainParams)
    out_path: str
    history_path: Optional[str] = None


class TrainResponse(BaseModel):
    epochs: int
    final: dict
    fingerprint: str
    out_path: str
    history_path: Optional[str]
    predictor_error: Optional[float]
    wall_seconds: float


class EvalRequest(BaseModel):
    checkpoint_path: str
    task: Literal["wiping", "pick_and_place"] = "wiping"
    directives: Optional[list[str]] = None  # default: the checkpoint's constrained names
    command_values: list[float] = Field(default_factory=lambda: [-2.0, -1.0, 0.0, 1.0, 2.0])
    reference: Literal["synthesized", "paper"] = "synthesized"
    reference_lines: Optional[dict[str, list[float]]] = None  # "task.directive" -> [slope, intercept]
    trials_per_level: int = 4
    ticks: int = 500
    all_dims: bool = False  # sweep every latent dim per directive (baseline-style evaluation)
    seed: int = 0
    out_dir: Optional[str] = None


class EvalResponse(BaseModel):
    reports: list[dict]
    tsr: dict
    files: list[str]


class AblateRequest(BaseModel):
    checkpoint_path: str
    task: Literal["wiping", "pick_and_place"] = "wiping"
    schemes: list[str] = Field(default_factory=lambda: ["none", "inverse", "exponential", "inverse_log"])
    exponential_m: float = 0.05
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    switch_directive: str = "temporal"
    switch_value: float = 2.0
    switch_tick: int = 150
    ticks: int = 500
    follower_noise: float = 0.005
    out_path: Optional[str] = None


class AblateResponse(BaseModel):
    rows: list[dict]
    out_path: Optional[str]


class HealthResponse(BaseModel):
    status: str
    version: str
    live_session: bool


class SessionInfo(BaseModel):
    mode: Literal["live", "replay"]
    checkpoint: Optional[str]
    latent: dict
    scheme: str
    tick: int
    running: bool
    clients: int


# --- live wire protocol -------------------------------------------------------

WireType = Literal[
    "hello", "state", "latent_update", "set_latent", "set_scheme", "metrics", "reset", "error"
]


class WireMessage(BaseModel):
    """One JSON frame on the live WebSocket, either direction."""

    type: WireType
    tick: int = 0
    payload: dict = Field(default_factory=dict)

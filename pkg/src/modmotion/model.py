"""Sequence CVAE: recurrent encoder/decoder over action windows with a
partitioned latent space and one weak-label predictor head per constrained
latent dimension.

Latent layout is positional and stable: dimension s < S is the constrained
latent for ``latent.directive_names[s]``; dimensions >= S are unconstrained.
Downstream code addresses latents only through :class:`LatentSpec`.

Conditioning: the window's first state is concatenated to every encoder
step input; the decoder gets [previous predicted state | condition | z] at
every step and rolls out autoregressively (no teacher forcing by default,
matching online usage).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .container import MAGIC_CHECKPOINT, read_container, write_container
from .dataset import Normalization


@dataclass(frozen=True)
class LatentSpec:
    constrained: int  # S
    unconstrained: int  # N
    directive_names: tuple[str, ...]

    def __post_init__(self):
        if self.constrained < 0 or self.unconstrained < 0 or self.constrained + self.unconstrained < 1:
            raise ValueError("latent space needs S >= 0, N >= 0, S + N >= 1")
        if len(self.directive_names) != self.constrained:
            raise ValueError(
                f"{self.constrained} constrained dims need {self.constrained} names, "
                f"got {list(self.directive_names)}"
            )

    @property
    def total(self) -> int:
        return self.constrained + self.unconstrained

    def dim_of(self, directive: str) -> int:
        return self.directive_names.index(directive)

    def to_dict(self) -> dict:
        return {
            "constrained": self.constrained,
            "unconstrained": self.unconstrained,
            "directive_names": list(self.directive_names),
        }

    @staticmethod
    def from_dict(d: dict) -> "LatentSpec":
        return LatentSpec(d["constrained"], d["unconstrained"], tuple(d["directive_names"]))


@dataclass(frozen=True)
class LatentCommand:
    """A full latent vector supplied at inference, with its provenance."""

    values: np.ndarray
    provenance: str = "commanded"  # "commanded" | "sampled"

    @staticmethod
    def neutral(spec: LatentSpec) -> "LatentCommand":
        return LatentCommand(np.zeros(spec.total))

    def with_dim(self, dim: int, value: float) -> "LatentCommand":
        if not 0 <= dim < self.values.shape[0]:
            raise IndexError(f"latent dim {dim} out of range 0..{self.values.shape[0] - 1}")
        vals = self.values.copy()
        vals[dim] = value
        return LatentCommand(vals, self.provenance)


@dataclass
class ModelConfig:
    state_dim: int
    window: int = 50
    hidden_dim: int = 64  # paper setting 256; desk default keeps CPU training fast
    encoder_layers: int = 3
    decoder_layers: int = 3
    latent: LatentSpec = field(default_factory=lambda: LatentSpec(2, 1, ("physical", "temporal")))
    predictor_hidden: tuple[int, ...] = (3, 3)
    teacher_forcing: bool = False
    predictor_input: str = "mu"  # "mu" | "sample"; mu gives the label heads a noise-free input

    def __post_init__(self):
        for name in ("state_dim", "window", "hidden_dim", "encoder_layers", "decoder_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return {
            "state_dim": self.state_dim,
            "window": self.window,
            "hidden_dim": self.hidden_dim,
            "encoder_layers": self.encoder_layers,
            "decoder_layers": self.decoder_layers,
            "latent": self.latent.to_dict(),
            "predictor_hidden": list(self.predictor_hidden),
            "teacher_forcing": self.teacher_forcing,
            "predictor_input": self.predictor_input,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(
            state_dim=d["state_dim"],
            window=d["window"],
            hidden_dim=d["hidden_dim"],
            encoder_layers=d["encoder_layers"],
            decoder_layers=d["decoder_layers"],
            latent=LatentSpec.from_dict(d["latent"]),
            predictor_hidden=tuple(d["predictor_hidden"]),
            teacher_forcing=d["teacher_forcing"],
            predictor_input=d["predictor_input"],
        )


class SeqCVAE:
    """Parameters plus forward passes; training mutates params via the optimizer."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        self.config = config
        self.params: dict[str, ad.Tensor] = {}
        rng = rng or np.random.default_rng(0)
        D = config.state_dim
        H = config.hidden_dim
        Z = config.latent.total

        def lstm_params(prefix: str, layers: int, first_in: int):
            for layer in range(layers):
                isz = first_in if layer == 0 else H
                self.params[f"{prefix}{layer}_w"] = ad.init_uniform((isz + H, 4 * H), isz + H, rng, f"{prefix}{layer}_w")
                self.params[f"{prefix}{layer}_b"] = ad.init_uniform((4 * H,), isz + H, rng, f"{prefix}{layer}_b")

        lstm_params("enc", config.encoder_layers, 2 * D)
        self.params["mu_w"] = ad.init_uniform((H, Z), H, rng, "mu_w")
        self.params["mu_b"] = ad.init_uniform((Z,), H, rng, "mu_b")
        self.params["logvar_w"] = ad.init_uniform((H, Z), H, rng, "logvar_w")
        self.params["logvar_b"] = ad.init_uniform((Z,), H, rng, "logvar_b")
        lstm_params("dec", config.decoder_layers, 2 * D + Z)
        self.params["out_w"] = ad.init_uniform((H, D), H, rng, "out_w")
        self.params["out_b"] = ad.init_uniform((D,), H, rng, "out_b")
        for s in range(config.latent.constrained):
            widths = (1, *config.predictor_hidden, 1)
            for li in range(len(widths) - 1):
                self.params[f"pred{s}_{li}_w"] = ad.init_uniform(
                    (widths[li], widths[li + 1]), widths[li], rng, f"pred{s}_{li}_w"
                )
                self.params[f"pred{s}_{li}_b"] = ad.init_uniform(
                    (widths[li + 1],), widths[li], rng, f"pred{s}_{li}_b"
                )

    # --- forward passes -------------------------------------------------

    def _run_lstm(self, prefix: str, layers: int, step_inputs) -> ad.Tensor:
        """Run a stacked LSTM over a sequence; returns the top hidden state per step."""
        H = self.config.hidden_dim
        outputs = []
        states = None
        for x in step_inputs:
            if states is None:
                bsz = x.data.shape[0]
                zero = lambda: ad.Tensor(np.zeros((bsz, H)))
                states = [(zero(), zero()) for _ in range(layers)]
            inp = x
            for layer in range(layers):
                h, c = ad.lstm_cell(
                    inp,
                    states[layer][0],
                    states[layer][1],
                    self.params[f"{prefix}{layer}_w"],
                    self.params[f"{prefix}{layer}_b"],
                )
                states[layer] = (h, c)
                inp = h
            outputs.append(inp)
        return outputs

    def encode(self, windows: np.ndarray, cond: np.ndarray) -> tuple[ad.Tensor, ad.Tensor]:
        """Posterior parameters for a batch of (W, D) windows conditioned on their first state."""
        windows = np.asarray(windows, dtype=np.float64)
        cond = np.asarray(cond, dtype=np.float64)
        if windows.ndim != 3 or windows.shape[1:] != (self.config.window, self.config.state_dim):
            raise ad.ShapeMismatch("encode", windows.shape, (self.config.window, self.config.state_dim))
        if cond.shape != (windows.shape[0], self.config.state_dim):
            raise ad.ShapeMismatch("encode", cond.shape, (windows.shape[0], self.config.state_dim))
        if not np.array_equal(windows[:, 0, :], cond):
            raise ValueError("encode: condition must equal window row 0")
        steps = [
            ad.Tensor(np.concatenate([windows[:, j, :], cond], axis=1))
            for j in range(self.config.window)
        ]
        h_final = self._run_lstm("enc", self.config.encoder_layers, steps)[-1]
        mu = ad.add(ad.matmul(h_final, self.params["mu_w"]), self.params["mu_b"])
        logvar = ad.add(ad.matmul(h_final, self.params["logvar_w"]), self.params["logvar_b"])
        return mu, logvar

    def reparameterize(self, mu: ad.Tensor, logvar: ad.Tensor, noise: np.ndarray) -> ad.Tensor:
        if noise.shape != mu.data.shape:
            raise ad.ShapeMismatch("reparameterize", noise.shape, mu.data.shape)
        std = ad.exp(ad.scale(logvar, 0.5))
        return ad.add(mu, ad.mul(std, ad.Tensor(noise)))

    def decode(
        self,
        z: ad.Tensor,
        cond: np.ndarray,
        targets: np.ndarray | None = None,
    ) -> list[ad.Tensor]:
        """Roll out W predicted states. With ``teacher_forcing`` and targets,
        each step consumes the previous target row instead of its own output."""
        cond = np.asarray(cond, dtype=np.float64)
        if z.data.ndim != 2 or z.data.shape[1] != self.config.latent.total:
            raise ad.ShapeMismatch("decode", z.data.shape, (cond.shape[0], self.config.latent.total))
        if cond.shape != (z.data.shape[0], self.config.state_dim):
            raise ad.ShapeMismatch("decode", cond.shape, (z.data.shape[0], self.config.state_dim))
        H = self.config.hidden_dim
        bsz = cond.shape[0]
        cond_t = ad.Tensor(cond)
        zero = lambda: ad.Tensor(np.zeros((bsz, H)))
        states = [(zero(), zero()) for _ in range(self.config.decoder_layers)]
        prev = cond_t
        outputs: list[ad.Tensor] = []
        use_tf = self.config.teacher_forcing and targets is not None
        for j in range(self.config.window):
            inp = ad.concat([prev, cond_t, z], axis=1)
            for layer in range(self.config.decoder_layers):
                h, c = ad.lstm_cell(
                    inp, states[layer][0], states[layer][1],
                    self.params[f"dec{layer}_w"], self.params[f"dec{layer}_b"],
                )
                states[layer] = (h, c)
                inp = h
            out = ad.add(ad.matmul(inp, self.params["out_w"]), self.params["out_b"])
            outputs.append(out)
            prev = ad.Tensor(targets[:, j, :]) if use_tf else out
        return outputs

    def predict_label(self, z: ad.Tensor, s: int) -> ad.Tensor:
        """Logit of directive s's weak label from its constrained latent coordinate."""
        if not 0 <= s < self.config.latent.constrained:
            raise IndexError(f"predictor index {s} out of range 0..{self.config.latent.constrained - 1}")
        x = ad.slice_axis(z, 1, s, s + 1)
        n_layers = len(self.config.predictor_hidden) + 1
        for li in range(n_layers):
            x = ad.add(ad.matmul(x, self.params[f"pred{s}_{li}_w"]), self.params[f"pred{s}_{li}_b"])
            if li < n_layers - 1:
                x = ad.relu(x)
        return x

    # --- inference helpers ------------------------------------------------

    def decode_chunk(self, z_values: np.ndarray, state: np.ndarray) -> np.ndarray:
        """(W, D) chunk for one normalized state and latent command; no recording."""
        z = ad.Tensor(np.asarray(z_values, dtype=np.float64).reshape(1, -1))
        outs = self.decode(z, np.asarray(state, dtype=np.float64).reshape(1, -1))
        return np.stack([o.data[0] for o in outs])

    def predictor_curve(self, s: int, z_grid: np.ndarray) -> np.ndarray:
        """sigma(logit) over a grid of values of constrained coordinate s."""
        Z = self.config.latent.total
        zs = np.zeros((z_grid.shape[0], Z))
        zs[:, s] = z_grid
        logit = self.predict_label(ad.Tensor(zs), s)
        return 1.0 / (1.0 + np.exp(-logit.data[:, 0]))


# --- checkpoints -----------------------------------------------------------


def save_checkpoint(
    path,
    model: SeqCVAE,
    normalization: Normalization | None = None,
    adam: "ad.Adam | None" = None,
    meta: dict | None = None,
) -> str:
    """Write a self-describing checkpoint; returns the config fingerprint."""
    names = sorted(model.params)
    manifest = []
    blobs = []
    offset = 0
    for name in names:
        arr = model.params[name].data
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.reshape(-1))
        offset += arr.size
    adam_header = None
    if adam is not None:
        state = adam.state_dict()
        moments = []
        for name in names:
            for kind in ("first_moment", "second_moment"):
                arr = state[kind][name]
                moments.append({"name": name, "kind": kind, "offset": offset})
                blobs.append(arr.reshape(-1))
                offset += arr.size
        adam_header = {
            "step_count": state["step_count"],
            "learning_rate": state["learning_rate"],
            "beta1": state["beta1"],
            "beta2": state["beta2"],
            "epsilon": state["epsilon"],
            "clip_norm": state["clip_norm"],
            "moments": moments,
        }
    config = model.config.to_dict()
    fingerprint = ad.config_fingerprint(config)
    header = [
        {
            "kind": "modmotion-checkpoint",
            "model_config": config,
            "fingerprint": fingerprint,
            "init": "uniform(+-1/sqrt(fan_in)) for weights and biases",
            "normalization": normalization.to_dict() if normalization else None,
            "params": manifest,
            "adam": adam_header,
            "meta": meta or {},
        }
    ]
    write_container(path, MAGIC_CHECKPOINT, header, np.concatenate(blobs))
    return fingerprint


def load_checkpoint(path) -> tuple[SeqCVAE, Normalization | None, dict]:
    header, block = read_container(path, MAGIC_CHECKPOINT)
    top = header[0]
    config = ModelConfig.from_dict(top["model_config"])
    model = SeqCVAE(config)
    for entry in top["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape))
        model.params[entry["name"]].data = block[entry["offset"] : entry["offset"] + size].reshape(shape).copy()
    norm = Normalization.from_dict(top["normalization"]) if top["normalization"] else None
    meta = {"fingerprint": top["fingerprint"], "adam": top["adam"], **top["meta"]}
    return model, norm, meta


def load_adam(path, model: SeqCVAE, adam: "ad.Adam") -> None:
    """Restore optimizer state saved alongside a checkpoint."""
    header, block = read_container(path, MAGIC_CHECKPOINT)
    top = header[0]
    if top["adam"] is None:
        raise ValueError(f"{path}: checkpoint carries no optimizer state")
    state = {
        "step_count": top["adam"]["step_count"],
        "learning_rate": top["adam"]["learning_rate"],
        "beta1": top["adam"]["beta1"],
        "beta2": top["adam"]["beta2"],
        "epsilon": top["adam"]["epsilon"],
        "clip_norm": top["adam"]["clip_norm"],
        "first_moment": {},
        "second_moment": {},
    }
    shapes = {e["name"]: tuple(e["shape"]) for e in top["params"]}
    for entry in top["adam"]["moments"]:
        shape = shapes[entry["name"]]
        size = int(np.prod(shape))
        state[entry["kind"]][entry["name"]] = block[entry["offset"] : entry["offset"] + size].reshape(shape)
    adam.load_state_dict(state)

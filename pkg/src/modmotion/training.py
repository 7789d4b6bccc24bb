"""Composite training objective and the optimization loop.

Total objective: alpha * reconstruction + beta * KL + gamma * weak-label
prediction. gamma = 0 is the baseline mode: no supervision reaches the
predictor heads, which therefore stay at their initialization.

Reconstruction averages the squared error over every element of the window
by default (scale independent of the state dimension); the strict variant
that sums over state channels and averages over window steps only is kept
behind ``strict_sequence_mse`` for fidelity experiments.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from ._kernels import single_thread_blas
from .dataset import DatasetBundle
from .model import ModelConfig, SeqCVAE, save_checkpoint


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, components: dict):
        self.epoch = epoch
        self.batch = batch
        self.components = components
        super().__init__(f"non-finite loss at epoch {epoch} batch {batch}: {components}")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.3
    gamma: float = 2.5  # paper-tuned proposed weights; gamma=0 switches to baseline

    def __post_init__(self):
        if self.alpha <= 0 or self.beta < 0 or self.gamma < 0:
            raise ValueError(f"invalid loss weights {self}")

    @property
    def baseline(self) -> bool:
        return self.gamma == 0.0


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 32
    seed: int = 0
    eval_every: int = 10
    learning_rate: float = 1e-3
    clip_norm: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    strict_sequence_mse: bool = False
    kl_warmup_epochs: int = 0
    checkpoint_every: int = 0  # 0 = final checkpoint only

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size, learning_rate must be positive")


# --- loss terms --------------------------------------------------------------


def reconstruction_loss(outputs: list[ad.Tensor], targets: np.ndarray, strict: bool = False) -> ad.Tensor:
    """Mean squared error between predicted and target windows.

    Default: mean over batch, window steps, and state channels. Strict mode
    follows the per-step squared-vector-error reading (sum over channels,
    mean over steps and batch).
    """
    bsz, width, dim = targets.shape
    if len(outputs) != width or outputs[0].data.shape != (bsz, dim):
        raise ad.ShapeMismatch("reconstruction_loss", (len(outputs), *outputs[0].data.shape), targets.shape)
    acc = None
    for j, out in enumerate(outputs):
        diff = ad.sub(out, ad.Tensor(targets[:, j, :]))
        sq = ad.tsum(ad.mul(diff, diff))
        acc = sq if acc is None else ad.add(acc, sq)
    denom = bsz * width * (1 if strict else dim)
    return ad.scale(acc, 1.0 / denom)


def kl_loss(mu: ad.Tensor, logvar: ad.Tensor) -> ad.Tensor:
    """KL(q || N(0, I)) summed over latent dims, averaged over the batch:
    0.5 * sum(mu^2 + exp(logvar) - 1 - logvar)."""
    if mu.data.shape != logvar.data.shape:
        raise ad.ShapeMismatch("kl_loss", mu.data.shape, logvar.data.shape)
    term = ad.sub(ad.sub(ad.add(ad.mul(mu, mu), ad.exp(logvar)), ad.Tensor(np.ones_like(mu.data))), logvar)
    if term.data.ndim == 2:
        per_item = ad.tsum(term, axis=1)
        return ad.scale(ad.mean(per_item), 0.5)
    return ad.scale(ad.tsum(term), 0.5)


def bce_loss(y, logit: ad.Tensor) -> ad.Tensor:
    """Binary cross-entropy against sigmoid(logit) in the stable logit form,
    supporting soft targets: y*softplus(-l) + (1-y)*softplus(l)."""
    y_arr = np.asarray(y, dtype=np.float64)
    if np.any(y_arr < 0) or np.any(y_arr > 1):
        raise ValueError(f"targets must lie in [0, 1], got {y_arr}")
    y_t = ad.Tensor(np.broadcast_to(y_arr, logit.data.shape).copy())
    pos = ad.mul(y_t, ad.softplus(ad.scale(logit, -1.0)))
    neg = ad.mul(ad.Tensor(1.0 - y_t.data), ad.softplus(logit))
    return ad.mean(ad.add(pos, neg))


def modifier_loss(labels: np.ndarray, logits: list[ad.Tensor]) -> ad.Tensor:
    """Sum of per-directive BCE terms; labels is (batch, S) ordered like the heads."""
    if labels.ndim != 2 or labels.shape[1] != len(logits):
        raise ad.ShapeMismatch("modifier_loss", labels.shape, (len(logits),))
    if not logits:
        return ad.Tensor(0.0)
    acc = None
    for s, logit in enumerate(logits):
        term = bce_loss(labels[:, s : s + 1], logit)
        acc = term if acc is None else ad.add(acc, term)
    return acc


def total_loss(rec: ad.Tensor, kl: ad.Tensor, modi: ad.Tensor, weights: LossWeights) -> ad.Tensor:
    return ad.add(ad.add(ad.scale(rec, weights.alpha), ad.scale(kl, weights.beta)), ad.scale(modi, weights.gamma))


# --- training loop ------------------------------------------------------------


@dataclass
class TrainResult:
    model: SeqCVAE
    history: list[dict]
    checkpoint_path: str | None
    fingerprint: str | None
    wall_seconds: float


def _batch_losses(
    model: SeqCVAE,
    seqs: np.ndarray,
    labels: np.ndarray,
    weights: LossWeights,
    noise: np.ndarray | None,
    strict_mse: bool,
    kl_scale: float = 1.0,
):
    cond = seqs[:, 0, :]
    mu, logvar = model.encode(seqs, cond)
    z = model.reparameterize(mu, logvar, noise) if noise is not None else mu
    outputs = model.decode(z, cond, targets=seqs)
    rec = reconstruction_loss(outputs, seqs, strict=strict_mse)
    kl = kl_loss(mu, logvar)
    if weights.gamma > 0.0:
        head_in = z if model.config.predictor_input == "sample" else mu
        logits = [model.predict_label(head_in, s) for s in range(model.config.latent.constrained)]
        modi = modifier_loss(labels, logits)
    else:
        modi = ad.Tensor(0.0)
    total = total_loss(rec, ad.scale(kl, kl_scale) if kl_scale != 1.0 else kl, modi, weights)
    return rec, kl, modi, total


def _prepare(bundle: DatasetBundle, latent_names: tuple[str, ...], split: str):
    windows = bundle.split_windows(split)
    if not windows:
        return None, None
    norm = bundle.normalization
    seqs = np.stack([norm.apply(w.sequence) for w in windows])
    labels = np.array([[w.labels[name] for name in latent_names] for w in windows])
    return seqs, labels


def train(
    bundle: DatasetBundle,
    model_config: ModelConfig,
    train_config: TrainConfig,
    checkpoint_path: str | None = None,
    history_path: str | None = None,
    log=None,
) -> TrainResult:
    """Run the optimization loop; deterministic for a fixed seed."""
    t0 = time.perf_counter()
    seeds = np.random.SeedSequence(train_config.seed).spawn(3)
    model = SeqCVAE(model_config, rng=np.random.default_rng(seeds[0]))
    opt = ad.Adam(
        model.params,
        learning_rate=train_config.learning_rate,
        clip_norm=train_config.clip_norm,
    )
    shuffle_rng = np.random.default_rng(seeds[1])
    noise_rng = np.random.default_rng(seeds[2])
    names = model_config.latent.directive_names

    train_seqs, train_labels = _prepare(bundle, names, "train")
    val_seqs, val_labels = _prepare(bundle, names, "val")
    if train_seqs is None:
        raise ValueError("bundle has no train split")

    history: list[dict] = []
    n = train_seqs.shape[0]
    weights = train_config.weights
    with single_thread_blas():
        _run_epochs(
            model, opt, shuffle_rng, noise_rng, train_seqs, train_labels, val_seqs, val_labels,
            train_config, weights, n, history, log, checkpoint_path, bundle,
        )

    fingerprint = None
    if checkpoint_path:
        fingerprint = save_checkpoint(
            checkpoint_path,
            model,
            normalization=bundle.normalization,
            adam=opt,
            meta={
                "epochs": train_config.epochs,
                "seed": train_config.seed,
                "train_config": _config_dict(train_config),
                "final": history[-1],
            },
        )
    if history_path:
        write_history(history_path, history)
    return TrainResult(
        model=model,
        history=history,
        checkpoint_path=checkpoint_path,
        fingerprint=fingerprint,
        wall_seconds=time.perf_counter() - t0,
    )


def _run_epochs(
    model, opt, shuffle_rng, noise_rng, train_seqs, train_labels, val_seqs, val_labels,
    train_config, weights, n, history, log, checkpoint_path, bundle,
):
    for epoch in range(1, train_config.epochs + 1):
        if train_config.kl_warmup_epochs > 0:
            kl_scale = min(1.0, epoch / train_config.kl_warmup_epochs)
        else:
            kl_scale = 1.0
        order = shuffle_rng.permutation(n)
        sums = np.zeros(4)
        batches = 0
        for lo in range(0, n, train_config.batch_size):
            idx = order[lo : lo + train_config.batch_size]
            seqs = train_seqs[idx]
            labels = train_labels[idx]
            noise = noise_rng.normal(size=(seqs.shape[0], model.config.latent.total))
            opt.zero_grad()
            with ad.Graph() as graph:
                rec, kl, modi, total = _batch_losses(
                    model, seqs, labels, weights, noise, train_config.strict_sequence_mse, kl_scale
                )
            components = {
                "rec": rec.item(),
                "kl": kl.item(),
                "modi": modi.item(),
                "total": total.item(),
            }
            if not all(np.isfinite(v) for v in components.values()):
                raise TrainingDiverged(epoch, batches, components)
            graph.backward(total)
            opt.step()
            sums += np.array([components["rec"], components["kl"], components["modi"], components["total"]])
            batches += 1
        row = {
            "epoch": epoch,
            "split": "train",
            "rec": sums[0] / batches,
            "kl": sums[1] / batches,
            "modi": sums[2] / batches,
            "total": sums[3] / batches,
        }
        history.append(row)
        if log:
            log(row)
        if val_seqs is not None and (epoch % train_config.eval_every == 0 or epoch == train_config.epochs):
            history.append({"epoch": epoch, "split": "val", **evaluate(model, val_seqs, val_labels, train_config)})
        if (
            checkpoint_path
            and train_config.checkpoint_every
            and epoch % train_config.checkpoint_every == 0
            and epoch < train_config.epochs
        ):
            save_checkpoint(
                f"{checkpoint_path}.epoch{epoch:04d}",
                model,
                normalization=bundle.normalization,
                meta={"epoch": epoch, "train_config": _config_dict(train_config)},
            )


def evaluate(model: SeqCVAE, seqs: np.ndarray, labels: np.ndarray, train_config: TrainConfig) -> dict:
    """Forward-only loss components with z = mu (no sampling)."""
    rec, kl, modi, total = _batch_losses(
        model, seqs, labels, train_config.weights, None, train_config.strict_sequence_mse
    )
    return {"rec": rec.item(), "kl": kl.item(), "modi": modi.item(), "total": total.item()}


def predictor_error(model: SeqCVAE, seqs: np.ndarray, labels: np.ndarray) -> float:
    """Mean |sigma(logit) - y| over held-out windows and directives, using z = mu."""
    cond = seqs[:, 0, :]
    mu, _ = model.encode(seqs, cond)
    errors = []
    for s in range(model.config.latent.constrained):
        logit = model.predict_label(mu, s)
        prob = 1.0 / (1.0 + np.exp(-logit.data[:, 0]))
        errors.append(np.abs(prob - labels[:, s]))
    return float(np.mean(errors))


def write_history(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "split", "rec", "kl", "modi", "total"])
        writer.writeheader()
        for row in history:
            writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})


def _config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["weights"] = asdict(cfg.weights)
    return d


def write_divergence_snapshot(path, err: TrainingDiverged, extra: dict | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(
            {"epoch": err.epoch, "batch": err.batch, "components": err.components, **(extra or {})},
            fh,
            indent=2,
            sort_keys=True,
        )

"""Demonstrations to training data: downsampling, windowing, normalization, persistence.

State vectors use the channel layout [q | dq | tau] (D = 3J). Splits are
assigned per source demonstration, never per window, so no demonstration
leaks across the train/validation boundary. Normalization statistics come
from the train split only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .container import MAGIC_DATASET, read_container, write_container
from .simworld import Demonstration

STD_FLOOR = 1e-9


class DatasetError(ValueError):
    pass


@dataclass
class ActionWindow:
    """A width-W slice of a demonstration plus its conditioning state."""

    sequence: np.ndarray  # (W, D)
    labels: dict[str, float]
    demo_index: int
    start: int
    split: str = "train"

    @property
    def condition(self) -> np.ndarray:
        return self.sequence[0]


@dataclass
class Normalization:
    mean: np.ndarray  # (D,)
    std: np.ndarray  # (D,)
    flagged: list[int] = field(default_factory=list)  # near-constant channels left unscaled

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def invert(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "flagged": self.flagged}

    @staticmethod
    def from_dict(d: dict) -> "Normalization":
        return Normalization(np.asarray(d["mean"]), np.asarray(d["std"]), list(d["flagged"]))


@dataclass
class DatasetBundle:
    windows: list[ActionWindow]
    demo_count: int
    directive_names: list[str]
    dt: float  # post-downsample step
    normalization: Normalization | None = None
    meta: dict = field(default_factory=dict)

    @property
    def window_size(self) -> int:
        return self.windows[0].sequence.shape[0]

    @property
    def state_dim(self) -> int:
        return self.windows[0].sequence.shape[1]

    def split_windows(self, split: str) -> list[ActionWindow]:
        return [w for w in self.windows if w.split == split]

    def labels_vector(self, w: ActionWindow) -> np.ndarray:
        return np.array([w.labels[name] for name in self.directive_names])


def downsample(demo: Demonstration, stride: int) -> Demonstration:
    """Keep every stride-th state; dt scales by the stride.

    Velocity/torque channels keep their recorded per-tick values; they are
    feature channels at the coarser rate, not re-derived differences.
    """
    if stride < 1:
        raise DatasetError(f"stride must be >= 1, got {stride}")
    if stride >= demo.length:
        raise DatasetError(f"stride {stride} >= demonstration length {demo.length}")
    if stride == 1:
        return demo
    return Demonstration(
        q=demo.q[::stride].copy(),
        dq=demo.dq[::stride].copy(),
        tau=demo.tau[::stride].copy(),
        dt=demo.dt * stride,
        labels=dict(demo.labels),
        meta={**demo.meta, "downsample_stride": stride},
    )


def window(demo: Demonstration, width: int, hop: int = 1) -> list[ActionWindow]:
    """Sliding windows at offsets 0, hop, 2*hop, ..., each inheriting the demo labels."""
    if hop < 1:
        raise DatasetError(f"hop must be >= 1, got {hop}")
    states = demo.as_matrix()
    T = states.shape[0]
    if T < width:
        raise DatasetError(f"demonstration has {T} states, need at least window width {width}")
    return [
        ActionWindow(sequence=states[s : s + width].copy(), labels=dict(demo.labels), demo_index=-1, start=s)
        for s in range(0, T - width + 1, hop)
    ]


def build_bundle(
    demos: list[Demonstration],
    width: int,
    hop: int = 1,
    stride: int = 1,
    train_fraction: float = 0.8,
    seed: int = 0,
) -> DatasetBundle:
    """Downsample, window, split per demo, and compute train-split normalization."""
    if not demos:
        raise DatasetError("no demonstrations")
    directive_names = sorted(demos[0].labels)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(demos))
    n_train = max(1, int(round(train_fraction * len(demos))))
    split_of = {int(d): ("train" if rank < n_train else "val") for rank, d in enumerate(order)}

    windows: list[ActionWindow] = []
    dt = None
    for i, demo in enumerate(demos):
        if sorted(demo.labels) != directive_names:
            raise DatasetError(f"demo {i} labels {sorted(demo.labels)} != {directive_names}")
        ds = downsample(demo, stride)
        dt = ds.dt
        for w in window(ds, width, hop):
            w.demo_index = i
            w.split = split_of[i]
            windows.append(w)
    bundle = DatasetBundle(
        windows=windows,
        demo_count=len(demos),
        directive_names=directive_names,
        dt=dt,
        meta={"width": width, "hop": hop, "stride": stride, "train_fraction": train_fraction, "seed": seed},
    )
    bundle.normalization = compute_normalization(bundle)
    return bundle


def compute_normalization(bundle: DatasetBundle) -> Normalization:
    train = bundle.split_windows("train")
    if not train:
        raise DatasetError("empty train split")
    stacked = np.concatenate([w.sequence for w in train], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    flagged = [int(i) for i in np.nonzero(std <= STD_FLOOR)[0]]
    for i in flagged:
        mean[i] = 0.0
        std[i] = 1.0
    return Normalization(mean=mean, std=std, flagged=flagged)


def save(bundle: DatasetBundle, path) -> None:
    header = [
        {
            "kind": "modmotion-dataset",
            "window": bundle.window_size,
            "state_dim": bundle.state_dim,
            "count": len(bundle.windows),
            "demo_count": bundle.demo_count,
            "directive_names": bundle.directive_names,
            "dt": bundle.dt,
            "normalization": bundle.normalization.to_dict() if bundle.normalization else None,
            "meta": bundle.meta,
        }
    ]
    for w in bundle.windows:
        header.append(
            {"demo": w.demo_index, "start": w.start, "labels": w.labels, "split": w.split}
        )
    block = np.concatenate([w.sequence.reshape(-1) for w in bundle.windows])
    write_container(path, MAGIC_DATASET, header, block)


def load(path) -> DatasetBundle:
    header, block = read_container(path, MAGIC_DATASET)
    top = header[0]
    W, D, count = top["window"], top["state_dim"], top["count"]
    if len(header) != count + 1 or block.size != count * W * D:
        raise DatasetError(f"{path}: window count does not match data block")
    data = block.reshape(count, W, D)
    windows = [
        ActionWindow(
            sequence=data[i].copy(),
            labels={k: float(v) for k, v in line["labels"].items()},
            demo_index=int(line["demo"]),
            start=int(line["start"]),
            split=line["split"],
        )
        for i, line in enumerate(header[1:])
    ]
    norm = Normalization.from_dict(top["normalization"]) if top["normalization"] else None
    return DatasetBundle(
        windows=windows,
        demo_count=int(top["demo_count"]),
        directive_names=list(top["directive_names"]),
        dt=float(top["dt"]),
        normalization=norm,
        meta=dict(top["meta"]),
    )

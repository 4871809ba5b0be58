"""Deterministic mini-batch SGD with momentum, checkpoints and segmentation."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .model import MlpSpec, loss, forward, mean_grad

CKPT_MAGIC = b"ASTK"
CKPT_VERSION = 1


class TrainingDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 32
    epochs: int = 20
    init_seed: int = 0
    order_seed: int = 1
    lr_schedule: str = "constant"
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 10
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr_schedule not in ("constant", "step"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")

    def lr_at_epoch(self, epoch: int) -> float:
        if self.lr_schedule == "step":
            return self.lr * self.lr_decay_factor ** (epoch // self.lr_decay_every)
        return self.lr


@dataclass
class Trajectory:
    steps: list[int]
    checkpoints: list[np.ndarray]
    lrs: np.ndarray
    spec: MlpSpec | None = None
    losses: list[float] = field(default_factory=list)

    @property
    def total_steps(self) -> int:
        return int(self.lrs.size)

    @property
    def final(self) -> np.ndarray:
        return self.checkpoints[-1]


@dataclass(frozen=True)
class Segment:
    index: int
    start: int
    stop: int
    mean_lr: float
    mean_params: np.ndarray

    @property
    def steps(self) -> int:
        return self.stop - self.start

    @property
    def damping(self) -> float:
        """Damping implied by the truncated unrolled series, ``1/(η̄K)``."""
        return 1.0 / (self.mean_lr * self.steps)


def init_params(spec: MlpSpec, seed: int) -> np.ndarray:
    """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` per layer, bias included."""
    rng = np.random.default_rng(seed)
    blocks = []
    for out_dim, cols in spec.shapes:
        bound = 1.0 / np.sqrt(cols - 1)
        blocks.append(rng.uniform(-bound, bound, size=(out_dim, cols)))
    return spec.flatten(blocks)


def train(spec: MlpSpec, dataset: Dataset, config: TrainConfig, mask=None) -> Trajectory:
    """Train with SGD + momentum and coupled weight decay.

    Masked-out examples are never read. Each epoch shuffles the included
    indices with the batch-order generator; the last batch may be short.
    Checkpoints are taken every ``checkpoint_every`` steps (0 means at epoch
    boundaries), plus the initial and final parameters.
    """
    if mask is None:
        idx = np.arange(len(dataset))
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (len(dataset),):
            raise ValueError("mask length must match the dataset")
        idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ValueError("empty effective dataset")
    x_all, t_all = dataset.x, dataset.t
    theta = init_params(spec, config.init_seed)
    buf = np.zeros_like(theta)
    order_rng = np.random.default_rng(config.order_seed)
    steps, ckpts, lrs, losses = [0], [theta.copy()], [], []
    step = 0
    for epoch in range(config.epochs):
        lr = config.lr_at_epoch(epoch)
        perm = idx[order_rng.permutation(idx.size)]
        for b in range(0, perm.size, config.batch_size):
            batch = perm[b : b + config.batch_size]
            xb, tb = x_all[batch], t_all[batch]
            g = mean_grad(spec, theta, xb, tb)
            buf = config.momentum * buf + g + config.weight_decay * theta
            theta = theta - lr * buf
            step += 1
            lrs.append(lr)
            if not np.all(np.isfinite(theta)):
                raise TrainingDivergence(f"non-finite parameters at step {step} (epoch {epoch})")
            if config.checkpoint_every and step % config.checkpoint_every == 0:
                steps.append(step)
                ckpts.append(theta.copy())
        if not config.checkpoint_every and steps[-1] != step:
            steps.append(step)
            ckpts.append(theta.copy())
        out, _ = forward(spec, theta, x_all[idx])
        ep_loss = float(np.mean(loss(spec, out, t_all[idx])))
        if not np.isfinite(ep_loss):
            raise TrainingDivergence(f"training loss became non-finite in epoch {epoch}")
        losses.append(ep_loss)
    if steps[-1] != step:
        steps.append(step)
        ckpts.append(theta.copy())
    return Trajectory(steps, ckpts, np.asarray(lrs, dtype=np.float64), spec, losses)


def segment_bounds(total_steps: int, n_segments: int) -> list[tuple[int, int]]:
    """Contiguous near-equal spans of ``[0, T)``; leftovers go to the earliest."""
    base, extra = divmod(total_steps, n_segments)
    bounds, start = [], 0
    for i in range(n_segments):
        stop = start + base + (1 if i < extra else 0)
        bounds.append((start, stop))
        start = stop
    return bounds


def segment_trajectory(traj: Trajectory, n_segments: int) -> list[Segment]:
    """Split a trajectory into segments with mean lr and averaged weights.

    A checkpoint at step ``k`` belongs to the span containing ``k``; the final
    checkpoint (step ``T``) belongs to the last span.
    """
    if n_segments < 1:
        raise ValueError("need at least one segment")
    if n_segments > len(traj.checkpoints) or n_segments > traj.total_steps:
        raise ValueError(
            f"{n_segments} segments requested but the trajectory has "
            f"{len(traj.checkpoints)} checkpoints over {traj.total_steps} steps"
        )
    steps = np.asarray(traj.steps)
    segs = []
    bounds = segment_bounds(traj.total_steps, n_segments)
    for i, (a, b) in enumerate(bounds):
        last = i == len(bounds) - 1
        sel = np.flatnonzero((steps >= a) & ((steps <= b) if last else (steps < b)))
        if sel.size == 0:
            raise ValueError(f"segment {i} over steps [{a}, {b}) holds no checkpoint")
        theta_bar = np.mean([traj.checkpoints[j] for j in sel], axis=0)
        segs.append(Segment(i, a, b, float(np.mean(traj.lrs[a:b])), theta_bar))
    return segs


def save_checkpoint(path, spec: MlpSpec, step: int, params: np.ndarray) -> None:
    """Write one checkpoint in the little-endian ``ASTK`` layout."""
    params = np.asarray(params, dtype="<f8")
    head = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, spec.n_layers)
    for rows, cols in spec.shapes:
        head += struct.pack("<II", rows, cols)
    head += struct.pack("<Q", step)
    Path(path).write_bytes(head + params.tobytes())


def load_checkpoint(path) -> tuple[list[tuple[int, int]], int, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not an ASTK checkpoint")
    version, n_layers = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    shapes = []
    for _ in range(n_layers):
        shapes.append(struct.unpack_from("<II", raw, off))
        off += 8
    (step,) = struct.unpack_from("<Q", raw, off)
    off += 8
    params = np.frombuffer(raw, dtype="<f8", offset=off).astype(np.float64)
    if params.size != sum(r * c for r, c in shapes):
        raise ValueError(f"{path}: truncated checkpoint")
    return shapes, step, params


def save_trajectory(traj: Trajectory, directory) -> list[Path]:
    """Write one ``ASTK`` file per checkpoint plus ``lrs.csv`` (step,lr)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for step, params in zip(traj.steps, traj.checkpoints):
        p = directory / f"ckpt_{step:08d}.astk"
        save_checkpoint(p, traj.spec, step, params)
        paths.append(p)
    with (directory / "lrs.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "lr"])
        for k, lr in enumerate(traj.lrs):
            w.writerow([k, repr(float(lr))])
    return paths


def load_trajectory(directory, spec: MlpSpec | None = None) -> Trajectory:
    directory = Path(directory)
    files = sorted(directory.glob("ckpt_*.astk"))
    if not files:
        raise FileNotFoundError(f"no checkpoints in {directory}")
    steps, ckpts = [], []
    for f in files:
        shapes, step, params = load_checkpoint(f)
        if spec is not None and tuple(map(tuple, shapes)) != spec.shapes:
            raise ValueError(f"{f}: layer shapes {shapes} do not match the model")
        steps.append(step)
        ckpts.append(params)
    with (directory / "lrs.csv").open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    lrs = np.array([float(r["lr"]) for r in rows])
    return Trajectory(steps, ckpts, lrs, spec)

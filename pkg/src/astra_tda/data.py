"""Dataset ingestion, seeded synthesis, standardization and splits."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import CLASSIFICATION, REGRESSION, Example

log = logging.getLogger(__name__)


@dataclass
class Standardization:
    mean: np.ndarray
    std: np.ndarray
    target_mean: float = 0.0
    target_std: float = 1.0

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def invert(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean

    def invert_target(self, t: np.ndarray) -> np.ndarray:
        return t * self.target_std + self.target_mean

    def to_json(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "target_mean": self.target_mean,
            "target_std": self.target_std,
        }


@dataclass
class Dataset:
    """Homogeneous feature matrix plus targets.

    Targets are floats for regression and integer class indices for
    classification.
    """

    x: np.ndarray
    t: np.ndarray
    task: str = REGRESSION
    n_classes: int | None = None
    stats: Standardization | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            raise ValueError("features must be a 2-D array")
        if self.task == CLASSIFICATION:
            self.t = np.asarray(self.t, dtype=np.int64)
            if self.n_classes is None:
                self.n_classes = int(self.t.max()) + 1 if self.t.size else 0
            if self.t.size and (self.t.min() < 0 or self.t.max() >= self.n_classes):
                raise ValueError("class index out of range")
        else:
            self.t = np.asarray(self.t, dtype=np.float64)
        if self.t.shape != (self.x.shape[0],):
            raise ValueError("one target per example is required")

    def __len__(self) -> int:
        return self.x.shape[0]

    def __getitem__(self, i: int) -> Example:
        return Example(self.x[i], self.t[i].item())

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def n_features(self) -> int:
        return self.x.shape[1]

    @property
    def n_outputs(self) -> int:
        return 1 if self.task == REGRESSION else int(self.n_classes)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.x[idx], self.t[idx], self.task, self.n_classes, self.stats, dict(self.meta))

    def manifest(self) -> dict:
        out = {"kind": self.task, "n": len(self), "d": self.n_features}
        if self.task == CLASSIFICATION:
            out["classes"] = self.n_classes
        out.update(self.meta)
        if self.stats is not None:
            out["standardization"] = self.stats.to_json()
        return out


def standardize(x: np.ndarray) -> tuple[np.ndarray, Standardization]:
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    flat = std == 0.0
    if np.any(flat):
        log.warning("constant feature column(s) %s: std clamped to 1", np.flatnonzero(flat).tolist())
        std = np.where(flat, 1.0, std)
    return (x - mean) / std, Standardization(mean, std)


def load_csv(path, target_column: str, task: str = REGRESSION) -> Dataset:
    """Load a numeric CSV with a header row and standardize it.

    Features always get zero mean and unit variance; regression targets are
    standardized likewise. The statistics are kept on the dataset.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if target_column not in header:
        raise KeyError(f"{path}: missing target column {target_column!r}")
    body = rows[1:]
    if not body:
        raise ValueError(f"{path}: no data rows")
    values = np.empty((len(body), len(header)))
    for i, row in enumerate(body):
        if len(row) != len(header):
            raise ValueError(f"{path}: row {i + 2} has {len(row)} cells, expected {len(header)}")
        for j, cell in enumerate(row):
            try:
                values[i, j] = float(cell)
            except ValueError:
                raise ValueError(
                    f"{path}: non-numeric cell at row {i + 2}, column {header[j]!r}: {cell!r}"
                ) from None
    tcol = header.index(target_column)
    feats = np.delete(values, tcol, axis=1)
    x, stats = standardize(feats)
    t = values[:, tcol]
    meta = {"source_path": str(path)}
    if task == REGRESSION:
        tm, ts = float(t.mean()), float(t.std())
        if ts == 0.0:
            log.warning("constant target column: std clamped to 1")
            ts = 1.0
        stats.target_mean, stats.target_std = tm, ts
        t = (t - tm) / ts
        return Dataset(x, t, REGRESSION, stats=stats, meta=meta)
    return Dataset(x, t.astype(np.int64), CLASSIFICATION, stats=stats, meta=meta)


def write_csv(dataset: Dataset, path, target_column: str = "target") -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(dataset.n_features)] + [target_column])
        for x, t in zip(dataset.x, dataset.t):
            w.writerow([repr(float(v)) for v in x] + [repr(t.item())])


def read_raw_csv(path, task: str, n_classes: int | None = None, target_column: str = "target") -> Dataset:
    """Read a CSV written by :func:`write_csv` without re-standardizing."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    tcol = header.index(target_column)
    vals = np.array([[float(c) for c in r] for r in body]).reshape(len(body), len(header))
    x = np.delete(vals, tcol, axis=1)
    t = vals[:, tcol]
    if task == CLASSIFICATION:
        t = t.astype(np.int64)
    return Dataset(x, t, task, n_classes)


def synth_regression(n: int, d: int, noise_std: float = 0.1, seed: int = 0) -> Dataset:
    """``t = wᵀx + ε`` with ``x ~ N(0, I)`` and a planted ``w ~ N(0, I/d)``."""
    if n < 2 or d < 1 or noise_std < 0:
        raise ValueError("synth_regression needs n >= 2, d >= 1, noise_std >= 0")
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(d) / np.sqrt(d)
    x = rng.standard_normal((n, d))
    t = x @ w + noise_std * rng.standard_normal(n)
    meta = {"seed": seed, "noise_std": noise_std, "planted_w": w.tolist()}
    return Dataset(x, t, REGRESSION, meta=meta)


def synth_classification(
    n: int, d: int, classes: int = 3, margin: float = 2.0, seed: int = 0, label_noise: float = 0.0
) -> Dataset:
    """Gaussian class clusters whose centers sit ``margin`` apart on average.

    ``label_noise`` relabels that fraction of examples uniformly at random.
    """
    if n < 2 or d < 1 or classes < 2 or not 0.0 <= label_noise <= 1.0:
        raise ValueError("invalid synth_classification parameters")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((classes, d))
    centers *= margin / np.sqrt(2.0 * d)
    t = rng.integers(0, classes, size=n)
    x = centers[t] + rng.standard_normal((n, d))
    n_noisy = int(round(label_noise * n))
    if n_noisy:
        idx = rng.choice(n, size=n_noisy, replace=False)
        t = t.copy()
        t[idx] = rng.integers(0, classes, size=n_noisy)
    meta = {"seed": seed, "margin": margin, "label_noise": label_noise}
    return Dataset(x, t, CLASSIFICATION, classes, meta=meta)


def split(dataset: Dataset, n_query: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded disjoint split into a training set and ``n_query`` queries."""
    n = len(dataset)
    if not 0 <= n_query < n:
        raise ValueError(f"n_query must be in [0, {n})")
    perm = np.random.default_rng(seed).permutation(n)
    q_idx = np.sort(perm[:n_query])
    tr_idx = np.sort(perm[n_query:])
    train = dataset.subset(tr_idx)
    queries = dataset.subset(q_idx)
    train.meta["indices"] = tr_idx.tolist()
    queries.meta["indices"] = q_idx.tolist()
    return train, queries


def save_manifest(dataset: Dataset, path) -> None:
    man = {k: v for k, v in dataset.manifest().items() if k != "indices"}
    Path(path).write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")

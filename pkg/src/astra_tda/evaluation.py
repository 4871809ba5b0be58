"""Linear datamodeling score harness and curvature-subspace scans."""

from __future__ import annotations

import csv
import json
import logging
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .attribution import AttributionMatrix, _queries_xt
from .data import Dataset
from .ekfac import EkfacState, project_to_bin
from .ihvp import SolverConfig, astra_solve, sni_solve
from .linalg import DimensionError, UndefinedCorrelationError, spearman
from .model import MlpSpec, ggn_vec, measurement, measurement_grads, per_example_grads
from .seeding import derive_seed
from .trainer import TrainConfig, TrainingDivergence, train

log = logging.getLogger(__name__)

BIN_THRESHOLDS = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5)
SCAN_DAMPING = 1e-4


@dataclass(frozen=True)
class MaskSet:
    masks: np.ndarray
    beta: float
    seed: int

    @property
    def n_masks(self) -> int:
        return self.masks.shape[0]


def generate_masks(n: int, beta: float, n_masks: int, seed: int) -> MaskSet:
    """Uniform ``⌊βN⌋``-subsets, each from a seeded partial Fisher–Yates shuffle."""
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must be in (0, 1)")
    k = int(np.floor(beta * n))
    if k < 1 or n_masks < 1:
        raise ValueError(f"need floor(beta*N) >= 1 and M >= 1 (got k={k}, M={n_masks})")
    rng = np.random.default_rng(seed)
    masks = np.zeros((n_masks, n), dtype=bool)
    for j in range(n_masks):
        perm = np.arange(n)
        for i in range(k):
            s = int(rng.integers(i, n))
            perm[i], perm[s] = perm[s], perm[i]
        masks[j, perm[:k]] = True
    dup = n_masks - len({m.tobytes() for m in masks})
    if dup:
        log.warning("%d duplicate masks among %d", dup, n_masks)
    return MaskSet(masks, beta, seed)


def cell_config(base: TrainConfig, base_seed: int, mask_id: int, repeat: int) -> TrainConfig:
    return replace(
        base,
        init_seed=derive_seed(base_seed, mask_id, repeat, 0),
        order_seed=derive_seed(base_seed, mask_id, repeat, 1),
    )


@dataclass
class GroundTruth:
    """Raw retraining measurements ``values[mask, repeat, query]`` (NaN = diverged)."""

    values: np.ndarray
    failed: list[tuple[int, int]] = field(default_factory=list)

    @property
    def repeats(self) -> int:
        return self.values.shape[1]

    @property
    def mean(self) -> np.ndarray:
        if not self.failed:
            return self.values.mean(axis=1)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return np.nanmean(self.values, axis=1)

    @property
    def std(self) -> np.ndarray:
        if self.repeats < 2:
            return np.zeros(self.values.shape[::2])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return np.nanstd(self.values, axis=1, ddof=1)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["mask_id", "repeat", "query_id", "measurement"])
            for (j, r, q), val in np.ndenumerate(self.values):
                w.writerow([j, r, q, repr(float(val))])

    @classmethod
    def from_csv(cls, path) -> "GroundTruth":
        with Path(path).open(newline="") as fh:
            rows = [(int(r["mask_id"]), int(r["repeat"]), int(r["query_id"]), float(r["measurement"]))
                    for r in csv.DictReader(fh)]
        if not rows:
            raise ValueError(f"{path}: empty ground truth")
        shape = tuple(max(r[i] for r in rows) + 1 for i in range(3))
        vals = np.full(shape, np.nan)
        for j, r, q, m in rows:
            vals[j, r, q] = m
        failed = sorted({(j, r) for j, r, _ in zip(*np.nonzero(np.isnan(vals)))})
        return cls(vals, [(int(j), int(r)) for j, r in failed])


def _run_cell(args) -> np.ndarray | None:
    spec, dataset, config, mask, qx, qt = args
    try:
        traj = train(spec, dataset, config, mask)
        return np.atleast_1d(measurement(spec, traj.final, qx, qt))
    except TrainingDivergence as exc:
        log.warning("cell diverged: %s", exc)
        return None


def compute_ground_truth(
    spec: MlpSpec,
    dataset: Dataset,
    train_config: TrainConfig,
    masks: MaskSet,
    repeats: int,
    queries,
    base_seed: int = 0,
    workers: int = 1,
    cache_dir=None,
) -> GroundTruth:
    """Retrain on every (mask, repeat) cell and measure all queries at the end.

    Cells are cached under ``cache_dir`` as they finish, so an interrupted grid
    resumes where it stopped.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    qx, qt = _queries_xt(queries)
    vals = np.full((masks.n_masks, repeats, qx.shape[0]), np.nan)
    cache = Path(cache_dir) if cache_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
    todo = []
    for j in range(masks.n_masks):
        for r in range(repeats):
            f = cache / f"cell_{j:05d}_{r:04d}.npy" if cache is not None else None
            if f is not None and f.exists():
                vals[j, r] = np.load(f)
            else:
                todo.append((j, r, f))

    def store(j, r, f, res):
        row = np.full(qx.shape[0], np.nan) if res is None else res
        vals[j, r] = row
        if f is not None:
            tmp = f.with_suffix(".tmp.npy")
            np.save(tmp, row)
            os.replace(tmp, f)

    jobs = [(spec, dataset, cell_config(train_config, base_seed, j, r), masks.masks[j], qx, qt) for j, r, _ in todo]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for (j, r, f), res in zip(todo, pool.map(_run_cell, jobs, chunksize=max(1, len(jobs) // (4 * workers)))):
                store(j, r, f, res)
    else:
        for (j, r, f), job in zip(todo, jobs):
            store(j, r, f, _run_cell(job))
    failed = [(j, r) for j in range(masks.n_masks) for r in range(repeats) if np.isnan(vals[j, r]).any()]
    if failed:
        log.warning("%d training cells diverged and are excluded", len(failed))
    return GroundTruth(vals, failed)


def group_influence(row, mask) -> float:
    row = np.asarray(row, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if row.shape != mask.shape:
        raise DimensionError("score row and mask lengths differ")
    return float(row[mask].sum())


def group_influences(scores: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """``Γ[j, q] = Σ_{m ∈ S_j} τ(z_m, z_q)`` for all masks and queries."""
    return np.asarray(masks, dtype=np.float64) @ np.asarray(scores, dtype=np.float64).T


@dataclass
class LdsReport:
    method: str
    seeds: tuple[int, ...]
    per_query: list[float | None]
    mean: float
    stderr: float
    excluded: int

    @property
    def ensemble_size(self) -> int:
        return len(self.seeds)

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "seeds": list(self.seeds),
            "ensemble_size": self.ensemble_size,
            "per_query": self.per_query,
            "mean": self.mean,
            "stderr": self.stderr,
            "excluded": self.excluded,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")


def _summarize(rhos: list[float | None]) -> tuple[float, float, int]:
    ok = np.array([r for r in rhos if r is not None])
    excluded = len(rhos) - ok.size
    if ok.size == 0:
        return float("nan"), float("nan"), excluded
    se = float(ok.std(ddof=1) / np.sqrt(ok.size)) if ok.size > 1 else 0.0
    return float(ok.mean()), se, excluded


def lds_from_predictions(predictions: np.ndarray, truth: np.ndarray) -> list[float | None]:
    """Per-query Spearman between truth[:, q] and predictions[:, q].

    Masks with a non-finite truth entry are dropped; constant columns give ``None``.
    """
    rhos = []
    for q in range(truth.shape[1]):
        keep = np.isfinite(truth[:, q])
        try:
            rhos.append(spearman(truth[keep, q], predictions[keep, q]))
        except (UndefinedCorrelationError, DimensionError):
            rhos.append(None)
    return rhos


def lds(scores: AttributionMatrix, masks: MaskSet, ground_truth: GroundTruth) -> LdsReport:
    """Linear datamodeling score.

    Removing a helpful example (positive score) raises the measurement, so the
    predicted outcome of training on ``S`` is ``-Γ(S)``; it is rank-correlated
    with the expected retrained measurement per query.
    """
    truth = ground_truth.mean
    if truth.shape != (masks.n_masks, scores.shape[0]):
        raise DimensionError(
            f"ground truth {truth.shape} does not match masks x queries ({masks.n_masks}, {scores.shape[0]})"
        )
    if masks.masks.shape[1] != scores.shape[1]:
        raise DimensionError("mask length does not match the number of training examples")
    rhos = lds_from_predictions(-group_influences(scores.scores, masks.masks), truth)
    excluded_q = [q for q, r in enumerate(rhos) if r is None]
    if excluded_q:
        log.warning("queries %s have constant columns and are excluded", excluded_q)
    mean, se, excluded = _summarize(rhos)
    return LdsReport(scores.method, scores.seeds, rhos, mean, se, excluded)


def null_lds_bound(n_masks: int, n_queries: int, trials: int = 2000, seed: int = 0, sigmas: float = 3.0) -> float:
    """``sigmas`` standard deviations of the mean LDS of uninformative scores.

    The per-query null distribution is simulated by correlating random
    permutations of ``n_masks`` ranks.
    """
    rng = np.random.default_rng(seed)
    base = np.arange(n_masks, dtype=np.float64)
    rho = np.array([spearman(base, rng.permutation(n_masks)) for _ in range(trials)])
    return float(sigmas * rho.std(ddof=1) / np.sqrt(n_queries))


@dataclass(frozen=True)
class ScanRow:
    iteration: int
    bin_threshold: float
    objective: float
    lds: float
    solver: str


def _project(state: EkfacState, threshold: float, theta: np.ndarray) -> np.ndarray:
    return theta if threshold <= 0 else project_to_bin(state, threshold, theta)


def curvature_scan(
    spec: MlpSpec,
    params,
    dataset: Dataset,
    state: EkfacState,
    queries,
    config: SolverConfig,
    masks: MaskSet | None = None,
    ground_truth: GroundTruth | None = None,
    thresholds=BIN_THRESHOLDS,
    solvers=("sni", "astra"),
    include_full: bool = True,
    sni_config: SolverConfig | None = None,
) -> list[ScanRow]:
    """Track solver iterates projected onto EKFAC curvature bins.

    Bin ``S_i`` keeps eigendirections with scaling above ``thresholds[i]``; a
    threshold of 0 is the unprojected space. For each snapshot and bin the
    projected objective ``h(Pθ)`` is recorded, averaged over queries, along
    with the mean LDS of the projected scores ``(Pθ)ᵀ∇L_m`` when masks and
    ground truth are given.
    """
    thresholds = list(thresholds)
    if any(b >= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("bin thresholds must be strictly descending")
    if include_full:
        thresholds.append(0.0)
    if not config.snapshot_every:
        config = replace(config, snapshot_every=10)
    params = np.asarray(params, dtype=np.float64)
    qx, qt = _queries_xt(queries)
    qgrads = measurement_grads(spec, params, qx, qt)
    tgrads = per_example_grads(spec, params, dataset.x, dataset.t)
    lam = config.damping
    rows = []
    for solver in solvers:
        cfg = sni_config if solver == "sni" and sni_config is not None else config
        snaps: dict[int, list[np.ndarray]] = {}
        for q, v in enumerate(qgrads):
            c = replace(cfg, seed=derive_seed(cfg.seed, q, 0))
            if solver == "astra":
                _, trace = astra_solve(spec, params, dataset, state, v, c)
            else:
                _, trace = sni_solve(spec, params, dataset, v, c)
            for k, th in trace.snapshots.items():
                snaps.setdefault(k, []).append(th)
        for k in sorted(snaps):
            thetas = np.array(snaps[k])
            for thr in thresholds:
                proj = np.array([_project(state, thr, t) for t in thetas])
                objs = [
                    0.5 * p @ (ggn_vec(spec, params, dataset.x, p) + lam * p) - p @ v
                    for p, v in zip(proj, qgrads)
                ]
                score = float("nan")
                if masks is not None and ground_truth is not None:
                    m = AttributionMatrix(f"{solver}-proj", (cfg.seed,), proj @ tgrads.T)
                    score = lds(m, masks, ground_truth).mean
                rows.append(ScanRow(k, thr, float(np.mean(objs)), score, solver))
    return rows


def write_scan_csv(rows: list[ScanRow], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "bin_threshold", "objective", "lds", "solver"])
        for r in rows:
            w.writerow([r.iteration, repr(float(r.bin_threshold)), repr(float(r.objective)), repr(float(r.lds)), r.solver])


def plateau_index(iterations, values, window: int = 10, tol: float = 1e-8) -> int | None:
    """First iteration after which every ``window``-step change stays below ``tol``."""
    it = np.asarray(iterations)
    val = np.asarray(values, dtype=np.float64)
    lookup = dict(zip(it.tolist(), val.tolist()))
    pairs = [(k, abs(lookup[k + window] - lookup[k])) for k in it if k + window in lookup]
    for i, (k, _) in enumerate(pairs):
        if all(d < tol for _, d in pairs[i:]):
            return int(k)
    return None

"""Influence-function and SOURCE attribution scores.

Scores follow the influence convention ``τ(z_m, z_q) = ∇f_qᵀ (G + λI)⁻¹ ∇L_m``:
a positive score means removing ``z_m`` is predicted to raise the query
measurement. Iterative solves run once per query (query-side ordering) and are
then dotted with every training gradient.
"""

from __future__ import annotations

import csv
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Dataset
from .ekfac import EkfacState, fit_ekfac, matrix_exp_apply, precondition, truncated_unroll_apply
from .ihvp import SolverConfig, SolverDivergence, astra_solve, dense_solve, sni_solve
from .model import MlpSpec, dense_ggn, measurement_grads, per_example_grads
from .seeding import derive_seed
from .trainer import Segment, Trajectory, segment_trajectory

IF_SOLVERS = ("ekfac", "astra", "sni", "identity", "exact")
SOURCE_MODES = ("ekfac", "astra")
ATTR_MAGIC = b"ATTR"
ATTR_VERSION = 1


@dataclass(frozen=True)
class AttributionMatrix:
    method: str
    seeds: tuple[int, ...]
    scores: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 2:
            raise ValueError("scores must be a (queries, train) grid")
        if not np.all(np.isfinite(s)):
            raise ValueError("attribution scores must be finite")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "seeds", tuple(int(x) for x in self.seeds))

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape


@dataclass(frozen=True)
class SourcePlan:
    segments: tuple[Segment, ...]
    states: tuple[EkfacState, ...]
    final_params: np.ndarray
    dampings: tuple[float, ...] = field(init=False)

    def __post_init__(self):
        if len(self.segments) != len(self.states) or not self.segments:
            raise ValueError("one EKFAC state per segment is required")
        d = tuple(s.damping for s in self.segments)
        if min(d) <= 0:
            raise ValueError("segment dampings must be positive")
        object.__setattr__(self, "dampings", d)

    @property
    def if_damping(self) -> float:
        return source_damping(self.segments)


def source_damping(segments) -> float:
    """Iteration-weighted mean of the per-segment dampings ``1/(η̄_ℓ K_ℓ)``."""
    k = np.array([s.steps for s in segments], dtype=np.float64)
    lam = np.array([s.damping for s in segments])
    return float(k @ lam / k.sum())


def plan_source(spec: MlpSpec, traj: Trajectory, dataset: Dataset, n_segments: int, seed: int = 0) -> SourcePlan:
    """Segment the trajectory and fit EKFAC at each segment's averaged weights."""
    segs = segment_trajectory(traj, n_segments)
    states = tuple(fit_ekfac(spec, s.mean_params, dataset, seed=derive_seed(seed, s.index)) for s in segs)
    return SourcePlan(tuple(segs), states, np.asarray(traj.final, dtype=np.float64))


def _queries_xt(queries) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(queries, Dataset):
        return queries.x, queries.t
    xs = np.stack([q.x for q in queries])
    return xs, np.array([q.t for q in queries])


def _solve_one(spec, params, dataset, solver, config, state, g, q):
    cfg = replace(config, seed=derive_seed(config.seed, q, 0))
    try:
        if solver == "astra":
            return astra_solve(spec, params, dataset, state, g, cfg)[0]
        return sni_solve(spec, params, dataset, g, cfg)[0]
    except SolverDivergence as exc:
        raise SolverDivergence(f"query {q}: {exc}", exc.iteration) from exc


def _solve_rows(args):
    spec, params, dataset, solver, config, state, rows = args
    return [_solve_one(spec, params, dataset, solver, config, state, g, q) for q, g in rows]


def _iterative(spec, params, dataset, solver, config, state, qgrads, workers):
    rows = list(enumerate(qgrads))
    if workers <= 1 or len(rows) < 2:
        return np.array(_solve_rows((spec, params, dataset, solver, config, state, rows)))
    chunks = [rows[i::workers] for i in range(workers)]
    out = np.empty_like(qgrads)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for chunk, res in zip(chunks, pool.map(_solve_rows, [(spec, params, dataset, solver, config, state, c) for c in chunks])):
            for (q, _), u in zip(chunk, res):
                out[q] = u
    return out


def if_attribute(
    spec: MlpSpec,
    params,
    dataset: Dataset,
    queries,
    solver: str,
    config: SolverConfig,
    state: EkfacState | None = None,
    query_params=None,
    workers: int = 1,
) -> AttributionMatrix:
    """Influence-function scores for every (query, training example) pair.

    ``query_params`` evaluates the query gradient elsewhere than ``params``
    (where the curvature and training gradients live).
    """
    if solver not in IF_SOLVERS:
        raise ValueError(f"unknown solver {solver!r}; expected one of {IF_SOLVERS}")
    params = np.asarray(params, dtype=np.float64)
    qx, qt = _queries_xt(queries)
    qp = params if query_params is None else np.asarray(query_params, dtype=np.float64)
    qgrads = measurement_grads(spec, qp, qx, qt)
    if solver in ("ekfac", "astra") and state is None:
        state = fit_ekfac(spec, params, dataset, seed=config.seed)
    if solver == "identity":
        u = qgrads
    elif solver == "ekfac":
        u = precondition(state, config.damping, qgrads)
    elif solver == "exact":
        g = dense_ggn(spec, params, dataset.x)
        u = dense_solve(0.5 * (g + g.T), config.damping, qgrads.T).T
    else:
        u = _iterative(spec, params, dataset, solver, config, state, qgrads, workers)
    return AttributionMatrix(f"{solver}-if", (config.seed,), u @ per_example_grads(spec, params, dataset.x, dataset.t).T)


def source_attribute(
    spec: MlpSpec,
    plan: SourcePlan,
    dataset: Dataset,
    queries,
    mode: str,
    config: SolverConfig,
) -> AttributionMatrix:
    """Segmented unrolled-differentiation scores.

    Walking segments from last to first, the query gradient (taken at the
    final weights) is carried backwards through ``exp(-η̄K P_ℓ)``. At each
    segment the response ``r_ℓ`` either uses the closed eigenbasis form
    ``(1 - exp(-η̄KΛ))/Λ`` (``ekfac``) or an ASTRA solve with damping
    ``1/(η̄K)`` (``astra``); ``r_ℓ`` is dotted with training gradients at the
    segment's averaged weights. Scores are in the same units as
    :func:`if_attribute`.
    """
    if mode not in SOURCE_MODES:
        raise ValueError(f"unknown SOURCE mode {mode!r}")
    qx, qt = _queries_xt(queries)
    carry = measurement_grads(spec, plan.final_params, qx, qt)
    scores = np.zeros((carry.shape[0], len(dataset)))
    for seg, state, lam in reversed(list(zip(plan.segments, plan.states, plan.dampings))):
        c = seg.mean_lr * seg.steps
        if mode == "ekfac":
            r = truncated_unroll_apply(state, c, carry)
        else:
            cfg = replace(config, damping=lam, precond_damping=lam)
            r = np.empty_like(carry)
            for q, g in enumerate(carry):
                try:
                    r[q] = astra_solve(spec, seg.mean_params, dataset, state, g,
                                       replace(cfg, seed=derive_seed(config.seed, q, seg.index)))[0]
                except SolverDivergence as exc:
                    raise SolverDivergence(f"query {q}, segment {seg.index}: {exc}", exc.iteration) from exc
        scores += r @ per_example_grads(spec, seg.mean_params, dataset.x, dataset.t).T
        carry = matrix_exp_apply(state, c, carry)
    return AttributionMatrix(f"{mode}-source", (config.seed,), scores)


def ensemble(matrices) -> AttributionMatrix:
    """Elementwise mean of per-seed score grids."""
    matrices = list(matrices)
    if not matrices:
        raise ValueError("nothing to ensemble")
    first = matrices[0]
    seeds = []
    for m in matrices:
        if m.method != first.method:
            raise ValueError(f"method mismatch: {m.method!r} vs {first.method!r}")
        if m.shape != first.shape:
            raise ValueError(f"shape mismatch: {m.shape} vs {first.shape}")
        seeds.extend(m.seeds)
    if len(set(seeds)) != len(seeds):
        raise ValueError("ensemble members must have distinct seeds")
    return AttributionMatrix(first.method, tuple(seeds), np.mean([m.scores for m in matrices], axis=0))


def save_matrix(m: AttributionMatrix, path) -> None:
    """Binary grid: magic, u32 version, u32 rows, u32 cols, u32 method length,
    method bytes, u32 seed count, u64 seeds, then ``<f8`` scores row-major."""
    name = m.method.encode()
    q, n = m.shape
    head = ATTR_MAGIC + struct.pack("<IIII", ATTR_VERSION, q, n, len(name)) + name
    head += struct.pack(f"<I{len(m.seeds)}Q", len(m.seeds), *m.seeds)
    Path(path).write_bytes(head + np.ascontiguousarray(m.scores, dtype="<f8").tobytes())


def load_matrix(path) -> AttributionMatrix:
    raw = Path(path).read_bytes()
    if raw[:4] != ATTR_MAGIC:
        raise ValueError(f"{path}: not an ATTR file")
    version, q, n, ln = struct.unpack_from("<IIII", raw, 4)
    if version != ATTR_VERSION:
        raise ValueError(f"{path}: unsupported ATTR version {version}")
    off = 20
    method = raw[off : off + ln].decode()
    off += ln
    (ns,) = struct.unpack_from("<I", raw, off)
    seeds = struct.unpack_from(f"<{ns}Q", raw, off + 4)
    off += 4 + 8 * ns
    if len(raw) - off != 8 * q * n:
        raise ValueError(f"{path}: truncated score grid")
    scores = np.frombuffer(raw, dtype="<f8", offset=off).reshape(q, n).astype(np.float64)
    return AttributionMatrix(method, seeds, scores)


def write_scores_csv(m: AttributionMatrix, path) -> None:
    seed = "+".join(str(s) for s in m.seeds)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_id", "train_id", "score", "method", "seed"])
        for q, row in enumerate(m.scores):
            for i, s in enumerate(row):
                w.writerow([q, i, repr(float(s)), m.method, seed])

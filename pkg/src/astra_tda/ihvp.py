"""Inverse GGN-vector products: exact oracle, SNI/LiSSA and ASTRA.

Both iterative solvers run (preconditioned) gradient descent on

    h(θ) = ½ θᵀ(G + λI)θ − θᵀv,

whose minimizer is ``(G + λI)⁻¹v``. ``G`` is estimated per iteration from a
mini-batch drawn with replacement, or from the full dataset when
``batch_size`` is ``None``.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.linalg

from .data import Dataset
from .ekfac import EkfacState, precondition
from .model import MlpSpec, dense_ggn, ggn_vec

MAX_DENSE_PARAMS = 2000
LR_SWEEP = (1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5)
DIVERGENCE_FACTOR = 1e6


class SolverDivergence(RuntimeError):
    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


@dataclass(frozen=True)
class SolverConfig:
    """Hyperparameters shared by SNI and ASTRA.

    ``init`` is one of ``"zero"``, ``"query"`` (θ₀ = v) or
    ``"preconditioned"`` (θ₀ = (P + λ̃I)⁻¹v); ``None`` picks the solver's
    default. ``lr_decay_factor`` multiplies the lr every ``lr_decay_every``
    iterations (0 disables decay). ``target_objective`` stops a run as soon
    as the (mini-batch) objective reaches that value.
    """

    lr: float = 0.1
    damping: float = 1e-3
    precond_damping: float | None = None
    batch_size: int | None = 256
    iterations: int = 200
    momentum: float = 0.9
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 50
    repeats: int = 1
    seed: int = 0
    init: str | None = None
    snapshot_every: int = 0
    full_objective_every: int = 0
    target_objective: float | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("solver lr must be positive")
        if not self.damping > 0:
            raise ValueError("damping must be positive")
        if self.precond_damping is not None and not self.precond_damping > 0:
            raise ValueError("preconditioner damping must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.init not in (None, "zero", "query", "preconditioned"):
            raise ValueError(f"unknown init mode {self.init!r}")

    @property
    def tilde_damping(self) -> float:
        return self.damping if self.precond_damping is None else self.precond_damping

    def lr_at(self, k: int) -> float:
        if self.lr_decay_every:
            return self.lr * self.lr_decay_factor ** (k // self.lr_decay_every)
        return self.lr


def astra_defaults(damping: float, **overrides) -> SolverConfig:
    """Default ASTRA recipe: λ̃ = λ, momentum 0.9, lr halved every 50 steps, J = 200.

    The step size 0.1 is relative to the preconditioned system, where the
    preconditioner (P + λ̃I)⁻¹ already carries the 1/λ̃ scale.
    """
    base = SolverConfig(
        lr=0.1, damping=damping, precond_damping=damping, batch_size=256, iterations=200,
        momentum=0.9, lr_decay_factor=0.5, lr_decay_every=50,
    )
    return replace(base, **overrides)


@dataclass
class SolveTrace:
    iterations: list[int] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)
    full_objective: dict[int, float] = field(default_factory=dict)
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "objective", "lr", "wall_time_ms"])
            for row in zip(self.iterations, self.objective, self.lrs, self.wall_ms):
                w.writerow([row[0], repr(float(row[1])), repr(float(row[2])), f"{row[3]:.3f}"])


class GgnOperator:
    """Damped GGN products over a fixed dataset at fixed parameters."""

    def __init__(self, spec: MlpSpec, params, dataset: Dataset, damping: float):
        self.spec = spec
        self.params = np.asarray(params, dtype=np.float64)
        self.x = dataset.x
        self.damping = damping

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def full(self, v) -> np.ndarray:
        return ggn_vec(self.spec, self.params, self.x, v) + self.damping * v

    def batch(self, v, idx) -> np.ndarray:
        return ggn_vec(self.spec, self.params, self.x[idx], v) + self.damping * v


def exact_ihvp(spec: MlpSpec, params, dataset: Dataset, damping: float, v) -> np.ndarray:
    """Dense oracle: assemble G, Cholesky-factor ``G + λI`` and solve."""
    d = spec.n_params
    if d > MAX_DENSE_PARAMS:
        raise ValueError(f"dense oracle refused: {d} parameters exceeds {MAX_DENSE_PARAMS}")
    g = dense_ggn(spec, params, dataset.x)
    return dense_solve(0.5 * (g + g.T), damping, v)


def dense_solve(g: np.ndarray, damping: float, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    a = g + damping * np.eye(g.shape[0])
    try:
        factor = scipy.linalg.cho_factor(a, lower=True)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"G + λI is not positive definite at λ={damping}; increase the damping"
        ) from exc
    x = scipy.linalg.cho_solve(factor, v)
    res = np.linalg.norm(a @ x - v, axis=0) / np.maximum(np.linalg.norm(v, axis=0), 1e-300)
    if np.any(res >= 1e-10):
        raise np.linalg.LinAlgError(f"dense solve residual {np.max(res):.2e} too large")
    return x


def quadratic_objective(spec: MlpSpec, params, dataset: Dataset, damping: float, v, theta) -> float:
    """Full-batch ``½θᵀ(G + λI)θ − θᵀv``."""
    theta = np.asarray(theta, dtype=np.float64)
    gt = ggn_vec(spec, params, dataset.x, theta) + damping * theta
    return float(0.5 * theta @ gt - theta @ np.asarray(v))


def _iterate(
    op: GgnOperator,
    v: np.ndarray,
    config: SolverConfig,
    direction: Callable[[np.ndarray], np.ndarray],
    theta0: np.ndarray,
    rng: np.random.Generator,
    trace: SolveTrace | None,
) -> np.ndarray:
    theta = theta0.copy()
    buf = np.zeros_like(theta)
    t0 = time.perf_counter()
    full_batch = config.batch_size is None
    limit = DIVERGENCE_FACTOR * max(abs(0.5 * v @ v / op.damping), 1e-300)
    for k in range(config.iterations + 1):
        if full_batch:
            gt = op.full(theta)
        else:
            gt = op.batch(theta, rng.integers(0, op.n, size=config.batch_size))
        obj = float(0.5 * theta @ gt - theta @ v)
        if trace is not None:
            trace.iterations.append(k)
            trace.objective.append(obj)
            trace.lrs.append(config.lr_at(k))
            trace.wall_ms.append(1e3 * (time.perf_counter() - t0))
            if config.snapshot_every and k % config.snapshot_every == 0:
                trace.snapshots[k] = theta.copy()
            if config.full_objective_every and k % config.full_objective_every == 0:
                trace.full_objective[k] = float(0.5 * theta @ op.full(theta) - theta @ v)
        if not np.all(np.isfinite(theta)) or not np.isfinite(obj) or obj > limit:
            raise SolverDivergence(f"solver diverged at iteration {k} (objective {obj:.3e})", k)
        if k == config.iterations:
            break
        if config.target_objective is not None and obj <= config.target_objective:
            break
        buf = config.momentum * buf + direction(gt - v)
        theta = theta - config.lr_at(k) * buf
    if trace is not None and config.snapshot_every:
        trace.snapshots.setdefault(config.iterations, theta.copy())
    return theta


def _run(op, v, config, direction, theta0) -> tuple[np.ndarray, SolveTrace]:
    trace = SolveTrace()
    seeds = np.random.SeedSequence(config.seed).spawn(config.repeats)
    acc = np.zeros_like(v)
    for r, ss in enumerate(seeds):
        acc += _iterate(op, v, config, direction, theta0, np.random.default_rng(ss), trace if r == 0 else None)
    return acc / config.repeats, trace


def sni_solve(spec: MlpSpec, params, dataset: Dataset, v, config: SolverConfig) -> tuple[np.ndarray, SolveTrace]:
    """Stochastic Neumann series iterations (LiSSA for ``repeats > 1``).

    ``θ ← θ − α(G̃ + λI)θ + αv``, with heavy-ball momentum on the step when
    configured. Defaults to the query-gradient initialization θ₀ = v.
    """
    v = np.asarray(v, dtype=np.float64)
    op = GgnOperator(spec, params, dataset, config.damping)
    init = config.init or "query"
    if init == "preconditioned":
        raise ValueError("sni_solve has no preconditioner; use 'zero' or 'query'")
    theta0 = v.copy() if init == "query" else np.zeros_like(v)
    return _run(op, v, config, lambda g: g, theta0)


def astra_solve(
    spec: MlpSpec, params, dataset: Dataset, state: EkfacState, v, config: SolverConfig
) -> tuple[np.ndarray, SolveTrace]:
    """EKFAC-preconditioned Neumann iterations.

    ``θ ← θ − α(P + λ̃I)⁻¹(G̃ + λI)θ + α(P + λ̃I)⁻¹v``, momentum applied to the
    preconditioned step. Defaults to θ₀ = (P + λ̃I)⁻¹v.
    """
    if state.spec.shapes != spec.shapes:
        raise ValueError("EKFAC state does not match the model")
    v = np.asarray(v, dtype=np.float64)
    op = GgnOperator(spec, params, dataset, config.damping)
    lt = config.tilde_damping
    init = config.init or "preconditioned"
    if init == "preconditioned":
        theta0 = precondition(state, lt, v)
    elif init == "query":
        theta0 = v.copy()
    else:
        theta0 = np.zeros_like(v)
    return _run(op, v, config, lambda g: precondition(state, lt, g), theta0)


def truncated_neumann_apply(g_apply: Callable[[np.ndarray], np.ndarray], lr: float, damping: float, J: int, v) -> np.ndarray:
    """``α Σ_{j<J} (I − α(G + λI))ʲ v`` by Horner iteration."""
    v = np.asarray(v, dtype=np.float64)
    x = np.zeros_like(v)
    for _ in range(J):
        x = v + x - lr * (g_apply(x) + damping * x)
    return lr * x


def effective_damping(lr: float, damping: float, J: float) -> float:
    """Damping implied by truncating Neumann iterations: ``λ + 1/(αJ)``."""
    if not lr > 0 or not J > 0:
        raise ValueError("lr and J must be positive")
    return damping + 1.0 / (lr * J)


def truncated_response(sigma, lr: float, damping: float, J: float) -> np.ndarray:
    """Spectral response ``(1 − exp(−αJ(σ + λ))) / (σ + λ)`` of a truncated series."""
    s = np.asarray(sigma, dtype=np.float64) + damping
    return -np.expm1(-lr * J * s) / s


def relative_suboptimality(h: float, h_star: float) -> float:
    return (h - h_star) / abs(h_star)


def lr_sweep(
    solve: Callable[[SolverConfig], tuple[np.ndarray, SolveTrace]],
    config: SolverConfig,
    grid=LR_SWEEP,
    tail: int = 10,
) -> tuple[float, dict[float, float]]:
    """Pick the lr with the lowest mean objective over the last ``tail`` iterations.

    Diverged runs score ``inf``.
    """
    scores = {}
    for lr in grid:
        try:
            _, trace = solve(replace(config, lr=lr))
            scores[lr] = float(np.mean(trace.objective[-tail:]))
        except SolverDivergence:
            scores[lr] = float("inf")
    best = min(scores, key=lambda k: scores[k])
    return best, scores

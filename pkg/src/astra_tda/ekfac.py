"""Eigenvalue-corrected Kronecker-factored curvature (EKFAC).

For each layer the Fisher block is approximated in the Kronecker eigenbasis
``Q_A ⊗ Q_S`` of the activation covariance ``Â`` and the pre-activation
pseudo-gradient covariance ``Ŝ``. In matrix form an eigenvector is the outer
product ``q_S[:, o] q_A[:, i]ᵀ`` and its scaling lives at ``lam[o, i]``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import Dataset
from .linalg import sym_eigh
from .model import MlpSpec, _homog, pseudo_grads

EKFC_MAGIC = b"EKFC"
EKFC_VERSION = 1


@dataclass(frozen=True)
class LayerFactors:
    q_a: np.ndarray
    d_a: np.ndarray
    q_s: np.ndarray
    d_s: np.ndarray
    lam: np.ndarray

    def to_eigen(self, block: np.ndarray) -> np.ndarray:
        return self.q_s.T @ block @ self.q_a

    def from_eigen(self, coords: np.ndarray) -> np.ndarray:
        return self.q_s @ coords @ self.q_a.T


@dataclass(frozen=True)
class EkfacState:
    spec: MlpSpec
    layers: tuple[LayerFactors, ...]
    corrected: bool = False

    def _map(self, v: np.ndarray, fn) -> np.ndarray:
        blocks = self.spec.layers(np.asarray(v, dtype=np.float64))
        out = [f.from_eigen(fn(l, f, f.to_eigen(b))) for l, (f, b) in enumerate(zip(self.layers, blocks))]
        return self.spec.flatten(out)

    def eigenvalues(self) -> np.ndarray:
        """All scalings, flattened in parameter-block order."""
        return np.concatenate([f.lam.ravel() for f in self.layers])

    def apply(self, v, damping: float = 0.0) -> np.ndarray:
        """Multiply by ``P + damping·I`` (the forward curvature map)."""
        return self._map(v, lambda _l, f, c: c * (np.maximum(f.lam, 0.0) + damping))


@dataclass(frozen=True)
class LayerStats:
    a: np.ndarray
    s: np.ndarray


def collect_stats(spec: MlpSpec, params, dataset: Dataset, rng: np.random.Generator) -> list[LayerStats]:
    """Uncentered covariances ``Â_{l-1}`` and ``Ŝ_l`` averaged over the dataset.

    ``Ŝ`` uses pseudo-gradients from one label per input drawn from the model.
    """
    if len(dataset) == 0:
        raise ValueError("collect_stats needs a non-empty dataset")
    cache, deltas = pseudo_grads(spec, params, dataset.x, rng)
    n = len(dataset)
    stats = []
    for a, d in zip(cache.activations, deltas):
        ab = _homog(a)
        stats.append(LayerStats(ab.T @ ab / n, d.T @ d / n))
    return stats


def build_state(spec: MlpSpec, stats: list[LayerStats]) -> EkfacState:
    """Eigendecompose the factors; scalings start as KFAC's ``d_S d_Aᵀ``."""
    layers = []
    for st, (rows, cols) in zip(stats, spec.shapes):
        if st.a.shape != (cols, cols) or st.s.shape != (rows, rows):
            raise ValueError("factor shapes do not match the model")
        ea = sym_eigh(st.a)
        es = sym_eigh(st.s)
        lam = np.outer(es.values, ea.values)
        layers.append(LayerFactors(ea.basis, ea.values, es.basis, es.values, lam))
    return EkfacState(spec, tuple(layers), corrected=False)


def correct_eigenvalues(state: EkfacState, params, dataset: Dataset, rng: np.random.Generator) -> EkfacState:
    """Replace scalings by ``E[(Q_Sᵀ DW̄ Q_A)²]`` using fresh sampled labels."""
    if len(dataset) == 0:
        raise ValueError("correct_eigenvalues needs a non-empty dataset")
    cache, deltas = pseudo_grads(state.spec, params, dataset.x, rng)
    n = len(dataset)
    layers = []
    for f, a, d in zip(state.layers, cache.activations, deltas):
        pa = _homog(a) @ f.q_a
        ps = d @ f.q_s
        lam = (ps * ps).T @ (pa * pa) / n
        layers.append(replace(f, lam=lam))
    return EkfacState(state.spec, tuple(layers), corrected=True)


def fit_ekfac(spec: MlpSpec, params, dataset: Dataset, seed: int = 0, correct: bool = True) -> EkfacState:
    """Statistics pass, eigendecomposition and (optionally) correction pass.

    The two passes draw independent labels from child streams of ``seed``.
    """
    ss = np.random.SeedSequence(seed)
    stats_seed, corr_seed = ss.spawn(2)
    state = build_state(spec, collect_stats(spec, params, dataset, np.random.default_rng(stats_seed)))
    if correct:
        state = correct_eigenvalues(state, params, dataset, np.random.default_rng(corr_seed))
    return state


def precondition(state: EkfacState, damping: float, v) -> np.ndarray:
    """Apply ``(P + damping·I)⁻¹`` layer by layer in the eigenbasis."""
    if not damping > 0:
        raise ValueError("preconditioner damping must be positive")
    return state._map(v, lambda _l, f, c: c / (np.maximum(f.lam, 0.0) + damping))


def matrix_exp_apply(state: EkfacState, c: float, v) -> np.ndarray:
    """Apply ``exp(-c·P)``: eigencoordinates are scaled by ``exp(-c·Λ)``."""
    if c < 0:
        raise ValueError("matrix_exp_apply needs c >= 0")
    return state._map(v, lambda _l, f, x: x * np.exp(-c * np.maximum(f.lam, 0.0)))


def truncated_unroll_apply(state: EkfacState, c: float, v) -> np.ndarray:
    """Apply ``(I - exp(-c·P)) P⁻¹``; zero scalings take the limit ``c``."""
    if c < 0:
        raise ValueError("truncated_unroll_apply needs c >= 0")

    def scale(_l, f, x):
        lam = np.maximum(f.lam, 0.0)
        safe = np.where(lam > 0, lam, 1.0)
        return x * np.where(lam > 0, -np.expm1(-c * lam) / safe, c)

    return state._map(v, scale)


def project_to_bin(state: EkfacState, threshold: float, v) -> np.ndarray:
    """Keep only eigencoordinates whose scaling exceeds ``threshold``."""
    if not threshold > 0:
        raise ValueError("bin threshold must be positive")
    return state._map(v, lambda _l, f, x: np.where(f.lam > threshold, x, 0.0))


def layer_kron_basis(f: LayerFactors) -> np.ndarray:
    """Materialized eigenbasis for a row-major flattened block: ``Q_S ⊗ Q_A``."""
    return np.kron(f.q_s, f.q_a)


def dense_matrix(state: EkfacState, damping: float = 0.0) -> np.ndarray:
    """Block-diagonal dense ``P + damping·I`` (small models only)."""
    d = state.spec.n_params
    out = np.zeros((d, d))
    for f, a, b in zip(state.layers, state.spec.offsets[:-1], state.spec.offsets[1:]):
        q = layer_kron_basis(f)
        out[a:b, a:b] = (q * (np.maximum(f.lam.ravel(), 0.0) + damping)) @ q.T
    return out


def save_state(state: EkfacState, path) -> None:
    """Write the little-endian ``EKFC`` layout.

    Header: magic, u32 version, u32 corrected flag, u32 layer count, then
    per-layer (u32 rows, u32 cols). Body per layer: Q_A, d_A, Q_S, d_S, Λ as
    float64.
    """
    head = EKFC_MAGIC + struct.pack("<III", EKFC_VERSION, int(state.corrected), state.spec.n_layers)
    for rows, cols in state.spec.shapes:
        head += struct.pack("<II", rows, cols)
    body = b"".join(
        np.ascontiguousarray(arr, dtype="<f8").tobytes()
        for f in state.layers
        for arr in (f.q_a, f.d_a, f.q_s, f.d_s, f.lam)
    )
    Path(path).write_bytes(head + body)


def load_state(path, spec: MlpSpec) -> EkfacState:
    raw = Path(path).read_bytes()
    if raw[:4] != EKFC_MAGIC:
        raise ValueError(f"{path}: not an EKFC file")
    version, corrected, n_layers = struct.unpack_from("<III", raw, 4)
    if version != EKFC_VERSION:
        raise ValueError(f"{path}: unsupported EKFC version {version}")
    off = 16
    shapes = []
    for _ in range(n_layers):
        shapes.append(tuple(struct.unpack_from("<II", raw, off)))
        off += 8
    if tuple(shapes) != spec.shapes:
        raise ValueError(f"{path}: layer shapes {shapes} do not match the model")

    def take(count, shape):
        nonlocal off
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape)
        off += 8 * count
        return arr

    layers = []
    for rows, cols in shapes:
        q_a = take(cols * cols, (cols, cols))
        d_a = take(cols, (cols,))
        q_s = take(rows * rows, (rows, rows))
        d_s = take(rows, (rows,))
        lam = take(rows * cols, (rows, cols))
        layers.append(LayerFactors(q_a, d_a, q_s, d_s, lam))
    return EkfacState(spec, tuple(layers), bool(corrected))

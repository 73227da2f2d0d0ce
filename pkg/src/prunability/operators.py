"""Symmetric linear operators and dense-matrix utilities.

Every piece of spectral and geometric code in this package talks to a
matrix through :class:`SymmetricOperator`: a dimension plus a
matrix-vector product. Dense matrices back the desk-scale oracles and
test fixtures.

Everything is float64. Operators are immutable after construction and
safe to share across threads; ``apply`` must be pure and re-entrant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class SymmetricOperator:
    """A symmetric linear map exposed as v -> A v.

    Symmetry is a contract, not a runtime check: use
    :func:`check_symmetry` to audit an operator before trusting it.
    """

    dim: int
    apply: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"operator dimension must be positive, got {self.dim}")


@dataclass(frozen=True)
class DenseSymmetric:
    """Dense symmetric matrix, stored full, float64.

    Construct through :meth:`from_matrix`, which symmetrizes; direct
    construction requires exactly symmetric entries.
    """

    entries: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.float64)
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {e.shape}")
        if not np.array_equal(e, e.T):
            raise ValueError("entries are not exactly symmetric; use DenseSymmetric.from_matrix")
        object.__setattr__(self, "entries", e)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "DenseSymmetric":
        """Symmetrize (M + M^T)/2 and wrap. Exact: float addition commutes."""
        m = np.asarray(m, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {m.shape}")
        return cls(0.5 * (m + m.T))


def make_dense_operator(m: DenseSymmetric) -> SymmetricOperator:
    """Wrap a dense symmetric matrix as an operator."""
    entries = m.entries
    dim = m.dim

    def apply(v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (dim,):
            raise ValueError(f"expected vector of shape ({dim},), got {v.shape}")
        return entries @ v

    return SymmetricOperator(dim=dim, apply=apply)


def check_symmetry(op: SymmetricOperator, probes: int = 16, seed: int = 0) -> float:
    """Max |<Au,v> - <u,Av>| over random unit probe pairs.

    Deterministic given the seed. A clean symmetric operator at unit
    scale comes back around 1e-16; anything above 1e-8 times the
    operator's scale means the operator is not the symmetric map it
    claims to be.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(probes):
        u = rng.standard_normal(op.dim)
        v = rng.standard_normal(op.dim)
        u /= np.linalg.norm(u)
        v /= np.linalg.norm(v)
        au = op.apply(u)
        av = op.apply(v)
        worst = max(worst, abs(float(au @ v) - float(u @ av)))
    return worst


def save_dense_csv(m: DenseSymmetric, path) -> None:
    """Write the full D x D matrix, one comma-separated row per line."""
    np.savetxt(path, m.entries, delimiter=",", fmt="%.17g")


def load_dense_csv(path) -> DenseSymmetric:
    """Read a full D x D matrix written by :func:`save_dense_csv`.

    The stored matrix is symmetrized on load, so near-symmetric input
    from external tools is accepted.
    """
    entries = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    if entries.shape[0] != entries.shape[1]:
        raise ValueError(f"matrix in {path} is not square: shape {entries.shape}")
    return DenseSymmetric.from_matrix(entries)

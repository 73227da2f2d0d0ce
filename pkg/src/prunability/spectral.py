"""Spectrum estimation: Lanczos, stochastic quadrature, and the
full-spectrum reconstruction used by the width predictor.

Two routes produce a :class:`Spectrum` of all D eigenvalues:

* :func:`exact_spectrum` - dense eigendecomposition, the desk-scale
  oracle.
* :func:`slq_density` + :func:`count_important` +
  :func:`reconstruct_spectrum` - the estimator that scales: a smoothed
  spectral density from a few Lanczos runs, a census of near-zero
  Hessian rows to count the eigenvalues the Krylov iteration cannot
  see, and a deterministic inverse-CDF resampling back to a multiset
  of D values.

Zero and vanishingly small eigenvalues are carried as the sentinel
value :data:`SENTINEL` so that downstream width formulas treat the
corresponding directions as freely prunable.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .operators import DenseSymmetric, SymmetricOperator

#: Stand-in eigenvalue for zero / vanishingly small curvature directions.
SENTINEL = 1e-30

#: Largest matrix exact_spectrum will decompose (full eigh is O(D^3)).
EXACT_SPECTRUM_DIM_LIMIT = 4000


class SpectrumSource(enum.Enum):
    EXACT = "exact"
    SLQ_RECONSTRUCTED = "slq_reconstructed"


@dataclass(frozen=True)
class Tridiagonal:
    """Lanczos output: diagonal alphas[m], off-diagonal betas[m-1] > 0."""

    alphas: np.ndarray
    betas: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=np.float64)
        b = np.asarray(self.betas, dtype=np.float64)
        if a.ndim != 1 or b.ndim != 1 or len(b) != max(len(a) - 1, 0):
            raise ValueError("need alphas[m] and betas[m-1]")
        if len(a) == 0:
            raise ValueError("empty tridiagonal")
        if np.any(b <= 0):
            raise ValueError("off-diagonal entries must be positive")
        object.__setattr__(self, "alphas", a)
        object.__setattr__(self, "betas", b)

    @property
    def size(self) -> int:
        return len(self.alphas)


@dataclass(frozen=True)
class RitzSet:
    """Ritz values with quadrature weights (squared first eigenvector
    components); weights are nonnegative and sum to 1."""

    values: np.ndarray
    weights: np.ndarray


@dataclass(frozen=True)
class SpectralDensity:
    """Smoothed spectral density phi(t) on a uniform grid."""

    grid: np.ndarray
    density: np.ndarray
    sigma2: float
    runs: int
    iters: int

    def mass(self) -> float:
        return float(np.trapezoid(self.density, self.grid))


@dataclass(frozen=True)
class Spectrum:
    """All D eigenvalues, ascending, plus how many are sentinels."""

    eigenvalues: np.ndarray
    source: SpectrumSource
    important_count: int = 0

    def __post_init__(self):
        e = np.asarray(self.eigenvalues, dtype=np.float64)
        if e.ndim != 1 or len(e) == 0:
            raise ValueError("eigenvalues must be a non-empty 1-D array")
        if np.any(np.diff(e) < 0):
            raise ValueError("eigenvalues must be sorted ascending")
        if not 0 <= self.important_count <= len(e):
            raise ValueError("important_count out of range")
        object.__setattr__(self, "eigenvalues", e)

    @property
    def dim(self) -> int:
        return len(self.eigenvalues)


def lanczos(op: SymmetricOperator, m: int, seed: int) -> Tridiagonal:
    """Tridiagonalize a symmetric operator by m Lanczos iterations.

    Starts from a normalized Gaussian vector drawn from ``seed`` and
    runs the classic three-term recurrence, fully reorthogonalizing
    each residual against all previous Lanczos vectors (twice; once is
    not always enough in float64). Without reorthogonalization the
    Ritz values of desk-scale matrices duplicate and the m = D oracle
    check fails.

    If the residual norm underflows the iteration has exhausted an
    invariant subspace and the tridiagonal built so far is returned
    (size < m).
    """
    if not 1 <= m <= op.dim:
        raise ValueError(f"need 1 <= m <= D, got m={m}, D={op.dim}")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(op.dim)
    v /= np.linalg.norm(v)

    basis = np.empty((m, op.dim), dtype=np.float64)
    basis[0] = v
    alphas: list[float] = []
    betas: list[float] = []

    w = op.apply(v)
    scale = max(1e-300, float(np.linalg.norm(w)))
    alpha = float(w @ v)
    if not np.isfinite(alpha):
        raise FloatingPointError("non-finite value in Lanczos recurrence")
    alphas.append(alpha)
    w = w - alpha * v

    for j in range(1, m):
        q = basis[:j]
        # Full reorthogonalization of the residual, two passes.
        w = w - q.T @ (q @ w)
        w = w - q.T @ (q @ w)
        beta = float(np.linalg.norm(w))
        if not np.isfinite(beta):
            raise FloatingPointError("non-finite value in Lanczos recurrence")
        if beta <= 1e-12 * scale:
            break
        v = w / beta
        basis[j] = v
        w = op.apply(v)
        scale = max(scale, float(np.linalg.norm(w)))
        alpha = float(w @ v)
        if not np.isfinite(alpha):
            raise FloatingPointError("non-finite value in Lanczos recurrence")
        w = w - alpha * v - beta * basis[j - 1]
        alphas.append(alpha)
        betas.append(beta)

    return Tridiagonal(np.array(alphas), np.array(betas))


def ritz(t: Tridiagonal) -> RitzSet:
    """Eigenvalues of the tridiagonal and their quadrature weights.

    The weight of the k-th Ritz value is the squared first component
    of the k-th unit eigenvector; the weights sum to 1 because the
    first row of an orthogonal matrix has unit norm.
    """
    if t.size == 1:
        return RitzSet(values=t.alphas.copy(), weights=np.array([1.0]))
    if not (np.all(np.isfinite(t.alphas)) and np.all(np.isfinite(t.betas))):
        raise FloatingPointError("non-finite tridiagonal entries")
    try:
        values, vectors = eigh_tridiagonal(t.alphas, t.betas)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - scipy internal
        raise FloatingPointError(f"tridiagonal eigensolver failed: {exc}") from exc
    return RitzSet(values=values, weights=vectors[0] ** 2)


def slq_density(
    op: SymmetricOperator,
    m: int,
    l: int,
    sigma2: float,
    bins: int,
    seed: int,
) -> SpectralDensity:
    """Estimate the spectral density by stochastic Lanczos quadrature.

    Runs ``l`` independent Lanczos passes (run i uses seed + i), turns
    each tridiagonal into Ritz values and weights, and smears every
    Ritz pair with a Gaussian kernel of variance ``sigma2``:

        phi(t) = (1/l) sum_i sum_k tau_k^(i) N(t; lambda_k^(i), sigma2)

    evaluated on a uniform grid of ``bins`` points spanning the Ritz
    range extended by three kernel widths on both sides, so the
    density integrates to ~1 on the grid.
    """
    if m < 2:
        raise ValueError("need m >= 2")
    if l < 1:
        raise ValueError("need l >= 1")
    if sigma2 <= 0:
        raise ValueError("need sigma2 > 0")
    if bins < 100:
        raise ValueError("need bins >= 100")

    ritz_sets = [ritz(lanczos(op, m, seed + i)) for i in range(l)]
    sigma = float(np.sqrt(sigma2))
    lo = min(float(r.values.min()) for r in ritz_sets) - 3.0 * sigma
    hi = max(float(r.values.max()) for r in ritz_sets) + 3.0 * sigma
    grid = np.linspace(lo, hi, bins)

    norm = 1.0 / np.sqrt(2.0 * np.pi * sigma2)
    density = np.zeros(bins)
    for r in ritz_sets:
        # (bins x m) kernel matrix; m and bins are desk-scale.
        z = grid[:, None] - r.values[None, :]
        density += (np.exp(-0.5 * z * z / sigma2) * norm) @ r.weights
    density /= l

    return SpectralDensity(grid=grid, density=density, sigma2=float(sigma2), runs=l, iters=m)


def exact_spectrum(m: DenseSymmetric) -> Spectrum:
    """Full eigendecomposition of a dense symmetric matrix.

    important_count counts eigenvalues with |lambda| <= 1e-8 * max
    |lambda| (all of them for the zero matrix); the values themselves
    are kept as computed, not replaced by sentinels.
    """
    if m.dim > EXACT_SPECTRUM_DIM_LIMIT:
        raise ValueError(
            f"exact_spectrum supports D <= {EXACT_SPECTRUM_DIM_LIMIT}, got {m.dim}"
        )
    eigenvalues = np.linalg.eigvalsh(m.entries)
    threshold = 1e-8 * float(np.max(np.abs(eigenvalues)))
    important = int(np.count_nonzero(np.abs(eigenvalues) <= threshold))
    return Spectrum(eigenvalues, SpectrumSource.EXACT, important)


def count_important(
    model_op: SymmetricOperator,
    weight_vector: np.ndarray,
    parts: int = 100,
) -> int:
    """Estimate how many eigenvalues the Lanczos sweep cannot see.

    Sorts the weights ascending by magnitude, splits them into
    ``parts`` contiguous groups, and for the smallest-magnitude weight
    of each group probes the corresponding Hessian row with one
    operator application. A probed row whose L1 norm is at most
    1e-8 times the largest probed row L1 norm counts as a zero /
    vanishingly-small curvature direction; the probed fraction is
    scaled up to the full dimension.

    With parts = D every row is probed and the count is exact.
    """
    if parts < 1:
        raise ValueError("parts must be >= 1")
    w = np.asarray(weight_vector, dtype=np.float64)
    d = model_op.dim
    if w.shape != (d,):
        raise ValueError(f"weight vector shape {w.shape} does not match operator dim {d}")
    parts = min(parts, d)

    order = np.argsort(np.abs(w), kind="stable")
    groups = np.array_split(order, parts)
    probe_indices = [int(g[0]) for g in groups]

    l1 = np.empty(len(probe_indices))
    basis = np.zeros(d)
    for j, i in enumerate(probe_indices):
        basis[i] = 1.0
        row = model_op.apply(basis)
        basis[i] = 0.0
        l1[j] = float(np.sum(np.abs(row)))

    threshold = 1e-8 * float(l1.max())
    zero_rows = int(np.count_nonzero(l1 <= threshold))
    return int(np.floor(d * zero_rows / parts + 0.5))


def reconstruct_spectrum(
    density: SpectralDensity,
    d: int,
    important: int,
    lambda_min_target: float,
) -> Spectrum:
    """Resample a full D-eigenvalue multiset from an SLQ density.

    Takes D - important deterministic inverse-CDF samples of the
    density at the mid-quantiles (k + 0.5)/(D - important). The
    smoothed density cannot reach below its support floor, so when the
    smallest reconstructed value still exceeds ``lambda_min_target``
    (in practice the smallest Ritz value seen by Lanczos) it is
    clipped down to that target. Finally ``important`` sentinel copies
    are appended for the directions Lanczos cannot represent.
    """
    if not 0 <= important <= d:
        raise ValueError("need 0 <= important <= D")
    mass = density.mass()
    if mass < 0.5:
        raise ValueError(f"density mass {mass:.3g} < 0.5: broken SLQ run")

    n = d - important
    values = np.empty(0)
    if n > 0:
        steps = np.diff(density.grid)
        avg = 0.5 * (density.density[:-1] + density.density[1:])
        cdf = np.concatenate([[0.0], np.cumsum(avg * steps)]) / mass
        quantiles = (np.arange(n) + 0.5) / n
        idx = np.searchsorted(cdf, quantiles, side="left")
        idx = np.clip(idx, 1, len(cdf) - 1)
        c0, c1 = cdf[idx - 1], cdf[idx]
        g0, g1 = density.grid[idx - 1], density.grid[idx]
        span = c1 - c0
        frac = np.where(span > 0, (quantiles - c0) / np.where(span > 0, span, 1.0), 1.0)
        values = np.sort(g0 + frac * (g1 - g0))
        if values[0] > lambda_min_target:
            values[0] = lambda_min_target
            values = np.sort(values)

    eigenvalues = np.sort(np.concatenate([values, np.full(important, SENTINEL)]))
    return Spectrum(eigenvalues, SpectrumSource.SLQ_RECONSTRUCTED, important)


def convexify(s: Spectrum) -> Spectrum:
    """Map eigenvalues to their absolute values.

    Exact zeros become sentinels and are added to the important count.
    Idempotent: a convexified spectrum passes through unchanged.
    """
    eigenvalues = np.abs(s.eigenvalues)
    zeros = eigenvalues == 0.0
    eigenvalues[zeros] = SENTINEL
    return Spectrum(
        np.sort(eigenvalues),
        s.source,
        s.important_count + int(np.count_nonzero(zeros)),
    )


def save_spectrum_csv(s: Spectrum, path) -> None:
    """One eigenvalue per line under an `eigenvalue` header."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["eigenvalue"])
        for value in s.eigenvalues:
            writer.writerow([repr(float(value))])


def load_spectrum_csv(path, source: SpectrumSource, important_count: int = 0) -> Spectrum:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["eigenvalue"]:
            raise ValueError(f"{path}: expected header 'eigenvalue', got {header}")
        values = np.array([float(row[0]) for row in reader])
    return Spectrum(np.sort(values), source, important_count)


def save_density_csv(d: SpectralDensity, path) -> None:
    """Grid point and density value per line under a `t,phi` header."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "phi"])
        for t, phi in zip(d.grid, d.density):
            writer.writerow([repr(float(t)), repr(float(phi))])


def load_density_csv(path, sigma2: float, runs: int, iters: int) -> SpectralDensity:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["t", "phi"]:
            raise ValueError(f"{path}: expected header 't,phi', got {header}")
        rows = [(float(r[0]), float(r[1])) for r in reader]
    grid = np.array([r[0] for r in rows])
    density = np.array([r[1] for r in rows])
    return SpectralDensity(grid=grid, density=density, sigma2=sigma2, runs=runs, iters=iters)

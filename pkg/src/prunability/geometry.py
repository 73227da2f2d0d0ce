"""Gaussian widths of loss-sublevel ellipsoids, the pruning threshold
curve, and the Monte Carlo oracles that keep the closed forms honest.

The central object is an ellipsoid ``(1/2) u^T H u <= eps_hat``
described by the spectrum of H: its semi-axes are
``r_i = sqrt(2 eps_hat / lambda_i)``. The closed-form width, the width
after projecting the ellipsoid onto a unit sphere at distance R, and
the resulting pruning-ratio threshold curve all reduce to sums over
the spectrum. Sentinel eigenvalues (zero-curvature directions) give
effectively infinite radii: they poison the unprojected width, which
therefore rejects them, and contribute a saturated term of 1 to the
projected width.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .operators import DenseSymmetric
from .spectral import Spectrum


class SentinelEigenvalueError(ValueError):
    """The spectrum carries zero-curvature sentinels; the unprojected
    width would be infinite. Use the projected width instead."""


@dataclass(frozen=True)
class EllipsoidSpec:
    """Sublevel-set ellipsoid: spectrum of H plus the loss margin."""

    spectrum: Spectrum
    eps_hat: float

    def __post_init__(self):
        if self.eps_hat < 0:
            raise ValueError("eps_hat must be >= 0")

    @property
    def dim(self) -> int:
        return self.spectrum.dim

    def radii_squared(self) -> np.ndarray:
        """Squared semi-axes 2 eps_hat / lambda_i."""
        return 2.0 * self.eps_hat / self.spectrum.eigenvalues


@dataclass(frozen=True)
class ThresholdCurve:
    """Sampled (p, R(p), T(p)) triples and the solved crossing T(p*) = p*.

    ``degenerate`` is set when T - p never changes sign on (0, 1) and
    p_star was pinned to the corresponding endpoint.
    """

    p_grid: np.ndarray
    R_of_p: np.ndarray
    T_of_p: np.ndarray
    p_star: float
    degenerate: bool = False


class MCWidth(NamedTuple):
    estimate: float
    stderr: float


def gaussian_width(e: EllipsoidSpec) -> float:
    """Closed-form width sqrt(2 eps_hat * sum 1/lambda_i) of the ellipsoid.

    Rejects spectra containing sentinel (or otherwise vanishing)
    eigenvalues: their radii are effectively infinite and a silently
    huge width would poison every downstream curve.
    """
    eigenvalues = e.spectrum.eigenvalues
    if np.any(eigenvalues < 1e-20):
        raise SentinelEigenvalueError(
            "spectrum has (near-)zero eigenvalues; use projected_width"
        )
    return float(np.sqrt(2.0 * e.eps_hat * np.sum(1.0 / eigenvalues)))


def mc_width_oracle(
    h: DenseSymmetric, eps: float, samples: int, seed: int
) -> MCWidth:
    """Monte Carlo width of {u : (1/2) u^T H u <= eps} for PD H.

    For a standard Gaussian g the supremum of <g, u> over the
    ellipsoid has the closed form sqrt(2 eps g^T H^{-1} g); the width
    is its expectation, estimated here by plain averaging with the
    linear solves done through one Cholesky factorization. Returns the
    estimate and its standard error.
    """
    if samples < 1000:
        raise ValueError("need samples >= 1000")
    if eps < 0:
        raise ValueError("need eps >= 0")
    try:
        factor = cho_factor(h.entries, lower=True)
    except np.linalg.LinAlgError as exc:
        raise ValueError("matrix is not positive definite") from exc

    rng = np.random.default_rng(seed)
    total = 0.0
    total_sq = 0.0
    done = 0
    chunk = 4096
    while done < samples:
        n = min(chunk, samples - done)
        g = rng.standard_normal((n, h.dim))
        x = cho_solve(factor, g.T)
        quad = np.einsum("ij,ji->i", g, x)
        values = np.sqrt(2.0 * eps * quad)
        total += float(values.sum())
        total_sq += float((values * values).sum())
        done += n
    mean = total / samples
    var = max(total_sq / samples - mean * mean, 0.0)
    return MCWidth(estimate=mean, stderr=float(np.sqrt(var / samples)))


def projected_width(e: EllipsoidSpec, big_r: float) -> float:
    """Width of the ellipsoid projected onto the unit sphere at distance R.

    Each axis contributes r_i^2 / (R^2 + r_i^2); sentinel eigenvalues
    give r_i^2 ~ 1e30 and a term saturated at 1 for any desk-scale R.
    At R = 0 the projection covers the whole sphere: width sqrt(D).
    """
    if big_r < 0:
        raise ValueError("need R >= 0")
    if big_r == 0.0:
        return float(np.sqrt(e.dim))
    r2 = e.radii_squared()
    return float(np.sqrt(np.sum(r2 / (big_r * big_r + r2))))


def threshold(e: EllipsoidSpec, big_r: float) -> float:
    """Pruning-ratio threshold projected_width^2 / D, always in [0, 1]."""
    if big_r == 0.0:
        return 1.0
    r2 = e.radii_squared()
    return float(np.mean(r2 / (big_r * big_r + r2)))


def solve_phase_transition(
    e: EllipsoidSpec,
    r_of_p: Callable[[float], float],
    tol: float = 1e-4,
    grid_points: int = 200,
) -> ThresholdCurve:
    """Find the phase transition p* where the threshold curve crosses p.

    g(p) = threshold(e, R(p)) - p is strictly decreasing whenever R(p)
    is non-decreasing (T non-increasing, -p strictly decreasing), so
    the root is unique and plain bisection suffices. R(p) for a real
    network is a step function of p, which rules out derivative-based
    solvers. The curve is also tabulated on a uniform grid of interior
    points for reporting.

    Degenerate cases are flagged: p* = 1 when T > p everywhere
    (e.g. R identically 0), p* = 0 when T < p everywhere.
    """
    if tol <= 0:
        raise ValueError("need tol > 0")

    def g(p: float) -> float:
        return threshold(e, float(r_of_p(p))) - p

    p_grid = np.linspace(0.0, 1.0, grid_points + 2)[1:-1]
    big_r = np.array([float(r_of_p(p)) for p in p_grid])
    t_vals = np.array([threshold(e, r) for r in big_r])

    lo, hi = 0.0, 1.0
    g_lo, g_hi = g(lo), g(hi)
    if g_hi >= 0.0:
        return ThresholdCurve(p_grid, big_r, t_vals, p_star=1.0, degenerate=True)
    if g_lo <= 0.0:
        return ThresholdCurve(p_grid, big_r, t_vals, p_star=0.0, degenerate=True)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if g(mid) >= 0.0:
            lo = mid
        else:
            hi = mid
    return ThresholdCurve(p_grid, big_r, t_vals, p_star=0.5 * (lo + hi))


def escape_mc(
    h: DenseSymmetric,
    eps: float,
    w0: np.ndarray,
    wp: np.ndarray,
    k: int,
    trials: int,
    seed: int,
) -> float:
    """Empirical probability that a random codimension-k affine
    subspace through wp intersects {w : (1/2)(w-w0)^T H (w-w0) <= eps}.

    Each trial draws an orthonormalized Gaussian basis V of the
    (D - k)-dimensional subspace (uniform on the Grassmannian) and
    minimizes the quadratic over wp + span(V) exactly: solve
    (V^T H V) z = -V^T H (wp - w0) and evaluate at the minimizer. A
    singular reduced system signals a rank-deficient draw and the
    trial is redrawn.
    """
    d_total = h.dim
    if not 1 <= k <= d_total:
        raise ValueError(f"need 1 <= k <= D, got k={k}")
    if trials < 100:
        raise ValueError("need trials >= 100")
    w0 = np.asarray(w0, dtype=np.float64)
    wp = np.asarray(wp, dtype=np.float64)
    if w0.shape != (d_total,) or wp.shape != (d_total,):
        raise ValueError("w0/wp shape does not match the matrix dimension")

    entries = h.entries
    u = wp - w0
    hu = entries @ u
    base_value = 0.5 * float(u @ hu)
    d_sub = d_total - k

    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(trials):
        if d_sub == 0:
            # The subspace is the single point wp.
            hits += base_value <= eps
            continue
        for attempt in range(8):
            basis = np.linalg.qr(rng.standard_normal((d_total, d_sub)))[0]
            reduced = basis.T @ (entries @ basis)
            rhs = -(basis.T @ hu)
            try:
                z = cho_solve(cho_factor(reduced, lower=True), rhs)
                break
            except np.linalg.LinAlgError:
                if attempt == 7:
                    raise
        shifted = u + basis @ z
        value = 0.5 * float(shifted @ (entries @ shifted))
        hits += value <= eps
    return hits / trials


def escape_bound(k: int, width: float) -> float:
    """Miss-probability lower bound 1 - 3.5 exp(-(k/sqrt(k+1) - w)^2 / 18).

    Only meaningful for k > w^2; NaN otherwise.
    """
    if k <= width * width:
        return float("nan")
    gap = k / np.sqrt(k + 1.0) - width
    return float(1.0 - 3.5 * np.exp(-(gap * gap) / 18.0))


def jensen_ratio(q: DenseSymmetric, samples: int, seed: int) -> float:
    """Concentration gap E sqrt(g^T Q g) / sqrt(E g^T Q g) - 1.

    Negative by Jensen; shrinks toward 0 as the effective dimension of
    Q grows. Evaluated by rotation invariance through the eigenvalues
    of Q, with tiny negative eigenvalues from roundoff clipped to 0.
    """
    if samples < 10_000:
        raise ValueError("need samples >= 1e4")
    lam = np.clip(np.linalg.eigvalsh(q.entries), 0.0, None)
    rng = np.random.default_rng(seed)
    total_sqrt = 0.0
    total = 0.0
    done = 0
    chunk = 65536 // max(1, q.dim // 64)
    while done < samples:
        n = min(chunk, samples - done)
        quad = rng.standard_normal((n, q.dim)) ** 2 @ lam
        total_sqrt += float(np.sum(np.sqrt(quad)))
        total += float(np.sum(quad))
        done += n
    return float(total_sqrt / samples / np.sqrt(total / samples) - 1.0)


def magnitude_scale_experiment(
    e: EllipsoidSpec,
    r_of_p: Callable[[float], float],
    factors: Sequence[float],
    tol: float = 1e-4,
) -> list[float]:
    """Phase-transition points when all weight magnitudes scale by c.

    Scaling the weights by c scales every pruning distance R(p) by c,
    so each factor reuses the same spectrum with a scaled distance
    function. Larger weights leave less room to prune: p* decreases.
    """
    if any(c < 1 for c in factors):
        raise ValueError("factors must be >= 1")
    out = []
    for c in factors:
        curve = solve_phase_transition(e, lambda p: c * float(r_of_p(p)), tol=tol)
        out.append(curve.p_star)
    return out


def save_curve_csv(curve: ThresholdCurve, e: EllipsoidSpec, csv_path, json_path) -> None:
    """Write the sampled curve as p,R,T rows plus a JSON sidecar with
    the solved p_star and the ellipsoid's headline numbers."""
    import csv as _csv
    import json

    with open(csv_path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["p", "R", "T"])
        for p, r, t in zip(curve.p_grid, curve.R_of_p, curve.T_of_p):
            writer.writerow([repr(float(p)), repr(float(r)), repr(float(t))])
    sidecar = {
        "p_star": curve.p_star,
        "degenerate": curve.degenerate,
        "D": e.dim,
        "eps_hat": e.eps_hat,
        "important_count": e.spectrum.important_count,
    }
    with open(json_path, "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")

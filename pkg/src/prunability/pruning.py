"""Global one-shot magnitude pruning and the sparsity sweep that
measures the empirical maximum pruning ratio.

Pruning is a single pass: sort the prunable weights (biases excluded)
ascending by magnitude and zero out the smallest fraction p. The
projection distance R is then simply the L2 norm of the removed
entries, which makes R(p) a precomputable prefix-sum step function.

The empirical maximum pruning ratio is the largest swept p whose test
accuracy stays within a stated tolerance (default 1.0 percentage
point) of the dense network's test accuracy. The tolerance is a
declared convention and is carried through every report.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import nets
from .nets import Dataset, FeedforwardNet

#: Allowed test-accuracy drop, in percentage points, when declaring a
#: pruned network still successful.
DEFAULT_TOLERANCE_POINTS = 1.0


def _round_half_away(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class PruneState:
    """A pruning decision: which weights go, and how far that moves w0."""

    w0: np.ndarray
    prunable: np.ndarray
    mask: np.ndarray
    p: float
    R: float


@dataclass(frozen=True)
class SweepRow:
    p: float
    R: float
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float


@dataclass(frozen=True)
class SweepResult:
    rows: list[SweepRow]
    dense_test_acc: float
    empirical_max_p: float
    tolerance_points: float = DEFAULT_TOLERANCE_POINTS


def magnitude_mask(w0: np.ndarray, prunable: np.ndarray, p: float) -> PruneState:
    """Mask the round(p * n_prunable) smallest-magnitude prunable weights.

    Ties in |w| break toward the lower flat index, so the mask is
    deterministic. R is the L2 norm of the masked entries: zeroing
    them moves the weight vector by exactly that distance.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    w0 = np.asarray(w0, dtype=np.float64)
    prunable = np.asarray(prunable, dtype=bool)
    if prunable.shape != w0.shape:
        raise ValueError("prunable mask shape does not match weights")

    candidates = np.flatnonzero(prunable)
    order = candidates[np.argsort(np.abs(w0[candidates]), kind="stable")]
    n_masked = _round_half_away(p * len(candidates))
    chosen = order[:n_masked]

    mask = np.zeros_like(prunable)
    mask[chosen] = True
    return PruneState(
        w0=w0,
        prunable=prunable,
        mask=mask,
        p=p,
        R=float(np.linalg.norm(w0[chosen])),
    )


def r_of_p(w0: np.ndarray, prunable: np.ndarray) -> Callable[[float], float]:
    """Projection distance R as a function of the pruning ratio.

    Precomputes prefix sums of the squared sorted magnitudes, so each
    evaluation is O(1) and agrees with magnitude_mask's R at every p.
    Right-continuous, non-decreasing step function.
    """
    w0 = np.asarray(w0, dtype=np.float64)
    prunable = np.asarray(prunable, dtype=bool)
    magnitudes = np.sort(np.abs(w0[prunable]), kind="stable")
    prefix = np.concatenate([[0.0], np.cumsum(magnitudes**2)])
    n = len(magnitudes)

    def distance(p: float) -> float:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"p must be in [0, 1], got {p}")
        return float(np.sqrt(prefix[_round_half_away(p * n)]))

    return distance


def apply_mask(net: FeedforwardNet, state: PruneState) -> FeedforwardNet:
    """Zero the masked weights; everything else is untouched bitwise."""
    flat = nets.flatten(net)
    if state.mask.shape != flat.shape:
        raise ValueError(
            f"mask has {state.mask.shape} entries, net has {flat.shape}"
        )
    flat[state.mask] = 0.0
    return nets.unflatten(net.widths, flat)


def sweep(
    net: FeedforwardNet,
    data_train: Dataset,
    data_test: Dataset,
    p_grid: Sequence[float],
    tolerance_points: float = DEFAULT_TOLERANCE_POINTS,
) -> SweepResult:
    """Evaluate one-shot pruning at every ratio in the grid.

    A dense baseline row at p = 0 is always prepended. The empirical
    maximum pruning ratio is the largest evaluated p whose test
    accuracy is within `tolerance_points` percentage points of the
    dense test accuracy.
    """
    p_grid = list(p_grid)
    if any(b < a for a, b in zip(p_grid, p_grid[1:])):
        raise ValueError("p_grid must be ascending")
    if any(not 0.0 <= p <= 1.0 for p in p_grid):
        raise ValueError("p_grid values must lie in [0, 1]")

    w0 = nets.flatten(net)
    prunable = nets.prunable_mask(net)

    rows: list[SweepRow] = []
    for p in [0.0] + p_grid:
        state = magnitude_mask(w0, prunable, p)
        pruned = apply_mask(net, state)
        rows.append(
            SweepRow(
                p=p,
                R=state.R,
                train_loss=nets.loss(pruned, data_train.batch()),
                train_acc=nets.accuracy(pruned, data_train),
                test_loss=nets.loss(pruned, data_test.batch()),
                test_acc=nets.accuracy(pruned, data_test),
            )
        )

    dense_test_acc = rows[0].test_acc
    cutoff = dense_test_acc - tolerance_points / 100.0
    empirical_max_p = max(row.p for row in rows if row.test_acc >= cutoff)
    return SweepResult(
        rows=rows,
        dense_test_acc=dense_test_acc,
        empirical_max_p=empirical_max_p,
        tolerance_points=tolerance_points,
    )


def save_sweep_csv(result: SweepResult, csv_path, json_path) -> None:
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["p", "R", "train_loss", "train_acc", "test_loss", "test_acc"])
        for row in result.rows:
            writer.writerow(
                [
                    repr(float(v))
                    for v in (row.p, row.R, row.train_loss, row.train_acc, row.test_loss, row.test_acc)
                ]
            )
    sidecar = {
        "dense_test_acc": result.dense_test_acc,
        "empirical_max_p": result.empirical_max_p,
        "tolerance_points": result.tolerance_points,
    }
    with open(json_path, "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")

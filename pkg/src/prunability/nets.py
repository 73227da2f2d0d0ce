"""Small ReLU feedforward networks trained from scratch with
L1-regularized SGD, plus the gradient / Hessian-vector oracles the
spectral code consumes.

The flat parameter order is fixed and documented: for each layer in
order, the weight matrix (fan_out x fan_in, row-major) followed by the
bias vector. Everything downstream (pruning masks, Hessian rows,
checkpoints) indexes into this layout.

The Hessian here is the Hessian of the data loss only. The L1 term is
piecewise linear, so its second derivative is zero almost everywhere,
and the subgradient convention sign(0) = 0 matches the ReLU
convention relu'(0) = 0 used in backprop.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .operators import DenseSymmetric, SymmetricOperator

CHECKPOINT_VERSION = 1

Batch = tuple[np.ndarray, np.ndarray]


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries the history so far."""

    def __init__(self, message: str, history: list[float]):
        super().__init__(message)
        self.history = history


class Split(enum.Enum):
    TRAIN = "train"
    TEST = "test"


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    split: Split = Split.TRAIN

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or len(x) == 0:
            raise ValueError("features must be a non-empty N x K array")
        if y.shape != (len(x),):
            raise ValueError("labels must be one integer per sample")
        if np.any(y < 0):
            raise ValueError("labels must be non-negative")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return len(self.features)

    def batch(self) -> Batch:
        return self.features, self.labels


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int
    epochs: int
    lr: float
    momentum: float = 0.0
    lambda_l1: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.lambda_l1 < 0:
            raise ValueError("lambda_l1 must be >= 0")


@dataclass
class FeedforwardNet:
    """ReLU stack; the last layer is linear (logits)."""

    widths: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    activation = "relu"

    @property
    def dim(self) -> int:
        return param_count(self.widths)

    @property
    def n_layers(self) -> int:
        return len(self.weights)


def param_count(widths: Sequence[int]) -> int:
    return sum(widths[i] * widths[i + 1] + widths[i + 1] for i in range(len(widths) - 1))


def init_kaiming(widths: Sequence[int], seed: int) -> FeedforwardNet:
    """Weights ~ N(0, 2/fan_in), biases zero. Deterministic given seed."""
    if len(widths) < 2:
        raise ValueError("need at least input and output widths")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        std = np.sqrt(2.0 / fan_in)
        weights.append(rng.standard_normal((fan_out, fan_in)) * std)
        biases.append(np.zeros(fan_out))
    return FeedforwardNet(list(widths), weights, biases)


def flatten(net: FeedforwardNet) -> np.ndarray:
    parts = []
    for w, b in zip(net.weights, net.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def unflatten(widths: Sequence[int], flat: np.ndarray) -> FeedforwardNet:
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape != (param_count(widths),):
        raise ValueError(
            f"flat vector has {flat.shape} entries, expected {param_count(widths)}"
        )
    weights, biases = [], []
    pos = 0
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        n = fan_out * fan_in
        weights.append(flat[pos : pos + n].reshape(fan_out, fan_in).copy())
        pos += n
        biases.append(flat[pos : pos + fan_out].copy())
        pos += fan_out
    return FeedforwardNet(list(widths), weights, biases)


def bias_mask(widths: Sequence[int]) -> np.ndarray:
    """True at flat positions holding biases."""
    mask = np.zeros(param_count(widths), dtype=bool)
    pos = 0
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        pos += fan_out * fan_in
        mask[pos : pos + fan_out] = True
        pos += fan_out
    return mask


def prunable_mask(net: FeedforwardNet) -> np.ndarray:
    """True for weight-matrix entries; biases are never pruned."""
    return ~bias_mask(net.widths)


def _forward(net: FeedforwardNet, x: np.ndarray):
    """Returns (logits, per-layer activations, per-layer pre-activations)."""
    activations = [x]
    pre = []
    a = x
    last = net.n_layers - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w.T + b
        pre.append(z)
        a = z if i == last else np.maximum(z, 0.0)
        activations.append(a)
    return a, activations, pre


def _cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy with max-subtracted softmax; also returns the
    softmax probabilities for reuse in the backward pass."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    rows = np.arange(len(labels))
    log_norm = np.log(exp.sum(axis=1))
    loss = float(np.mean(log_norm - shifted[rows, labels]))
    return loss, probs


def loss(net: FeedforwardNet, batch: Batch) -> float:
    """Mean cross-entropy of the batch (data loss, no L1 term)."""
    x, y = batch
    if len(x) == 0:
        raise ValueError("empty batch")
    logits, _, _ = _forward(net, x)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite activations: divergent parameters")
    value, _ = _cross_entropy(logits, y)
    return value


def _loss_and_grad(net: FeedforwardNet, batch: Batch) -> tuple[float, np.ndarray]:
    x, y = batch
    if len(x) == 0:
        raise ValueError("empty batch")
    logits, activations, pre = _forward(net, x)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite activations: divergent parameters")
    value, probs = _cross_entropy(logits, y)

    n = len(x)
    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n

    grads_w = [None] * net.n_layers
    grads_b = [None] * net.n_layers
    for i in range(net.n_layers - 1, -1, -1):
        grads_w[i] = delta.T @ activations[i]
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ net.weights[i]) * (pre[i - 1] > 0.0)

    parts = []
    for gw, gb in zip(grads_w, grads_b):
        parts.append(gw.ravel())
        parts.append(gb)
    return value, np.concatenate(parts)


def grad(net: FeedforwardNet, batch: Batch) -> np.ndarray:
    """Exact backprop gradient of the mean cross-entropy, flat order."""
    return _loss_and_grad(net, batch)[1]


def train_l1(
    net: FeedforwardNet, data: Dataset, cfg: TrainConfig
) -> tuple[FeedforwardNet, list[float]]:
    """SGD with momentum on loss + lambda_l1 * ||weights||_1.

    The L1 subgradient is sign(w) with sign(0) = 0 and is applied to
    weight-matrix entries only; biases are never pruned so they carry
    no sparsity penalty. Batch order reshuffles every epoch from the
    config seed. Returns the trained net and the per-epoch mean
    training (data) loss. Divergence aborts with the history attached.
    """
    rng = np.random.default_rng(cfg.seed)
    widths = net.widths
    w = flatten(net)
    weight_entries = ~bias_mask(widths)
    velocity = np.zeros_like(w)
    n = len(data)
    history: list[float] = []

    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = (data.features[idx], data.labels[idx])
            try:
                value, g = _loss_and_grad(unflatten(widths, w), batch)
            except FloatingPointError as exc:
                raise TrainingDiverged(str(exc), history) from exc
            if cfg.lambda_l1 > 0:
                g = g + cfg.lambda_l1 * np.sign(w) * weight_entries
            velocity = cfg.momentum * velocity + g
            w = w - cfg.lr * velocity
            batch_losses.append(value)
        epoch_loss = float(np.mean(batch_losses))
        if not np.isfinite(epoch_loss):
            raise TrainingDiverged("non-finite epoch loss", history)
        history.append(epoch_loss)

    return unflatten(widths, w), history


def finite_difference_hvp(
    grad_fn: Callable[[np.ndarray], np.ndarray],
    w: np.ndarray,
    v: np.ndarray,
) -> np.ndarray:
    """Hessian-vector product by central differences of a gradient.

    Step size h = 1e-4 * max(1, ||w||) / max(1e-12, ||v||), so the
    probe displacement h*v has norm about 1e-4 of the parameter scale.
    Central differences are exact for quadratics, which gives the
    sharpest possible correctness test for this routine.
    """
    w = np.asarray(w, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    norm_v = float(np.linalg.norm(v))
    if not np.isfinite(norm_v):
        raise ValueError("non-finite probe vector")
    if norm_v == 0.0:
        return np.zeros_like(w)
    h = 1e-4 * max(1.0, float(np.linalg.norm(w))) / max(1e-12, norm_v)
    result = (grad_fn(w + h * v) - grad_fn(w - h * v)) / (2.0 * h)
    if not np.all(np.isfinite(result)):
        raise FloatingPointError("non-finite Hessian-vector product")
    return result


def hvp(net: FeedforwardNet, batch: Batch, v: np.ndarray) -> np.ndarray:
    """Exact Hessian-vector product of the data loss, flat order.

    Forward-over-reverse: the forward pass carries the directional
    derivative of every activation, the backward pass the directional
    derivative of every gradient, with the ReLU masks held at the base
    point (relu'(0) = 0, relu'' = 0 almost everywhere). This is the
    true Hessian of the smooth piece containing the current weights;
    finite differences of the gradient are kept separately (see
    :func:`finite_difference_hvp`) as the independent oracle, since a
    finite probe step near a ReLU kink picks up gradient jumps
    amplified by 1/h and can swamp the real curvature. The L1 term is
    excluded: piecewise linear, zero second derivative a.e.
    """
    x, y = batch
    if len(x) == 0:
        raise ValueError("empty batch")
    v = np.asarray(v, dtype=np.float64)
    d = net.dim
    if v.shape != (d,):
        raise ValueError(f"expected probe of shape ({d},), got {v.shape}")
    dir_net = unflatten(net.widths, v)

    n = len(x)
    last = net.n_layers - 1
    activations = [x]
    r_activations = [np.zeros_like(x)]
    masks = []
    a, ra = x, np.zeros_like(x)
    for i, (w, b, vw, vb) in enumerate(
        zip(net.weights, net.biases, dir_net.weights, dir_net.biases)
    ):
        z = a @ w.T + b
        rz = ra @ w.T + a @ vw.T + vb
        if i == last:
            logits, r_logits = z, rz
        else:
            mask = z > 0.0
            a = z * mask
            ra = rz * mask
            activations.append(a)
            r_activations.append(ra)
            masks.append(mask)

    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite activations: divergent parameters")
    _, probs = _cross_entropy(logits, y)
    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n
    inner = np.sum(probs * r_logits, axis=1, keepdims=True)
    r_delta = probs * (r_logits - inner) / n

    out_w = [None] * net.n_layers
    out_b = [None] * net.n_layers
    d_cur, rd_cur = delta, r_delta
    for i in range(net.n_layers - 1, -1, -1):
        out_w[i] = rd_cur.T @ activations[i] + d_cur.T @ r_activations[i]
        out_b[i] = rd_cur.sum(axis=0)
        if i > 0:
            mask = masks[i - 1]
            rd_cur = (rd_cur @ net.weights[i] + d_cur @ dir_net.weights[i]) * mask
            d_cur = (d_cur @ net.weights[i]) * mask

    parts = []
    for gw, gb in zip(out_w, out_b):
        parts.append(gw.ravel())
        parts.append(gb)
    result = np.concatenate(parts)
    if not np.all(np.isfinite(result)):
        raise FloatingPointError("non-finite Hessian-vector product")
    return result


def hessian_operator(net: FeedforwardNet, batch: Batch) -> SymmetricOperator:
    """The data-loss Hessian at the net's current parameters as a
    matrix-free symmetric operator."""

    def apply(v: np.ndarray) -> np.ndarray:
        return hvp(net, batch, v)

    return SymmetricOperator(dim=net.dim, apply=apply)


def exact_hessian(net: FeedforwardNet, batch: Batch) -> tuple[DenseSymmetric, float]:
    """Dense Hessian assembled column by column from hvp(e_i), then
    symmetrized as (M + M^T)/2.

    Returns the matrix and the relative symmetrization residual
    ||M - M^T|| / ||M||; a residual above 1e-3 means the gradient
    itself is broken and is raised as an error.
    """
    d = net.dim
    if d > 3000:
        raise ValueError(f"exact_hessian supports D <= 3000, got {d}")
    op = hessian_operator(net, batch)
    columns = np.empty((d, d))
    basis = np.zeros(d)
    for i in range(d):
        basis[i] = 1.0
        columns[:, i] = op.apply(basis)
        basis[i] = 0.0
    norm = float(np.linalg.norm(columns))
    residual = float(np.linalg.norm(columns - columns.T)) / max(norm, 1e-300)
    if residual > 1e-3:
        raise FloatingPointError(
            f"Hessian symmetrization residual {residual:.3g} > 1e-3: broken gradient"
        )
    return DenseSymmetric.from_matrix(columns), residual


def epsilon_hat(net: FeedforwardNet, data: Dataset, batch_size: int) -> float:
    """Population standard deviation of per-batch mean losses.

    One full pass in the dataset's stored order (no shuffling), so the
    estimate is reproducible. This is the loss margin that defines the
    sublevel-set ellipsoid.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(data)
    losses = []
    for start in range(0, n, batch_size):
        x = data.features[start : start + batch_size]
        y = data.labels[start : start + batch_size]
        losses.append(loss(net, (x, y)))
    if len(losses) < 2:
        raise ValueError("need at least 2 batches to estimate the loss deviation")
    return float(np.std(losses))


def accuracy(net: FeedforwardNet, data: Dataset) -> float:
    logits, _, _ = _forward(net, data.features)
    return float(np.mean(np.argmax(logits, axis=1) == data.labels))


def make_blobs(
    n: int, classes: int, separation: float, seed: int, split: Split = Split.TRAIN
) -> Dataset:
    """Isotropic unit-variance Gaussians at simplex-vertex centers.

    Class c sits at separation * e_c in a `classes`-dimensional
    feature space; labels cycle round-robin so counts are balanced.
    """
    if n < classes:
        raise ValueError("need n >= classes")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    centers = separation * np.eye(classes)
    features = centers[labels] + rng.standard_normal((n, classes))
    return Dataset(features, labels, split)


def load_csv_dataset(path, label_column: str, split: Split = Split.TRAIN) -> Dataset:
    """CSV with a header row; `label_column` holds integer class labels,
    all other columns are float features."""
    import csv as _csv

    with open(path, newline="") as fh:
        reader = _csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        if label_column not in header:
            raise ValueError(f"{path}: no column named {label_column!r}")
        label_idx = header.index(label_column)
        features, labels = [], []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            try:
                raw_label = float(row[label_idx])
                feats = [float(v) for i, v in enumerate(row) if i != label_idx]
            except ValueError as exc:
                raise ValueError(f"{path}:{line_no}: {exc}") from exc
            if raw_label != int(raw_label) or raw_label < 0:
                raise ValueError(
                    f"{path}:{line_no}: label {row[label_idx]!r} is not a non-negative integer"
                )
            labels.append(int(raw_label))
            features.append(feats)
    if not features:
        raise ValueError(f"{path}: no data rows")
    return Dataset(np.array(features), np.array(labels), split)


def save_checkpoint(net: FeedforwardNet, path, seed: int) -> None:
    """JSON header line, then the flat parameters as little-endian
    64-bit floats."""
    header = {
        "version": CHECKPOINT_VERSION,
        "widths": list(net.widths),
        "activation": net.activation,
        "seed": seed,
    }
    flat = flatten(net)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(flat.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[FeedforwardNet, dict]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    widths = [int(w) for w in header["widths"]]
    d = param_count(widths)
    if len(payload) != 8 * d:
        raise ValueError(
            f"checkpoint payload is {len(payload)} bytes, expected {8 * d} for widths {widths}"
        )
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return unflatten(widths, flat), header

"""Pipeline stages: train, spectrum, predict, sweep, verify-escape,
report, and the full end-to-end run.

Every artifact lands in the output directory and is listed with its
SHA-256 in manifest.json. Stages cache: each stage stores the hash of
its inputs (config subset plus upstream artifact hashes) in keys.json
and is skipped when that hash is unchanged and its outputs exist, so
changing, say, the SLQ parameters invalidates the spectrum but not
the training run.

All randomness flows from the single global seed: each stage derives
its own seed as the first four bytes (big-endian, sign bit cleared) of
SHA-256("<seed>:<stage-name>"), so stages are independently
reproducible.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .. import geometry, nets, pruning, spectral
from ..operators import DenseSymmetric
from ..spectral import Spectrum, SpectrumSource
from .config import ConfigError, RunConfig, serialize_config

logger = logging.getLogger("prunability")


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _stage(name: str):
    """Convert a stage body's exceptions into StageError(name); inner
    stage errors and config errors pass through untouched."""

    def decorate(fn):
        def wrapper(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except (StageError, ConfigError):
                raise
            except Exception as exc:
                raise StageError(name, exc) from exc

        wrapper.__name__ = fn.__name__
        wrapper.__doc__ = fn.__doc__
        return wrapper

    return decorate


class LockHeldError(RuntimeError):
    """Another process holds the output-directory lock."""


@dataclass(frozen=True)
class Report:
    predicted_p_star: float
    curve_file: str
    empirical_max_p: float
    delta: float
    eps_hat: float
    dim: int
    important_count: int
    spectrum_source: str
    grad_norm: float


def stage_seed(global_seed: int, stage: str) -> int:
    digest = hashlib.sha256(f"{global_seed}:{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big") & 0x7FFFFFFF


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_inputs(*parts: str) -> str:
    return hashlib.sha256("\x1f".join(parts).encode("utf-8")).hexdigest()


class Workspace:
    """Output directory with stage-level caching and a manifest."""

    LOCK_NAME = ".lock"
    KEYS_NAME = "keys.json"
    MANIFEST_NAME = "manifest.json"

    def __init__(self, out_dir: str | os.PathLike):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._keys: dict[str, str] = {}
        keys_path = self.dir / self.KEYS_NAME
        if keys_path.exists():
            self._keys = json.loads(keys_path.read_text())

    def path(self, name: str) -> Path:
        return self.dir / name

    def file_hash(self, name: str) -> str:
        return _sha256_file(self.path(name))

    def cached(self, stage: str, key: str, outputs: list[str]) -> bool:
        return self._keys.get(stage) == key and all(
            self.path(name).exists() for name in outputs
        )

    def record(self, stage: str, key: str) -> None:
        self._keys[stage] = key
        with open(self.path(self.KEYS_NAME), "w") as fh:
            json.dump(self._keys, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_json(self, name: str, payload: dict) -> None:
        with open(self.path(name), "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def read_json(self, name: str) -> dict:
        return json.loads(self.path(name).read_text())

    def write_manifest(self, cfg: RunConfig) -> None:
        """List every artifact in the directory with its SHA-256."""
        skip = {self.LOCK_NAME, self.MANIFEST_NAME}
        files = {}
        for entry in sorted(self.dir.iterdir()):
            if entry.is_file() and entry.name not in skip:
                files[entry.name] = _sha256_file(entry)
        payload = {
            "config_hash": _hash_inputs(serialize_config(cfg)),
            "seed": cfg.seed,
            "files": files,
        }
        self.write_json(self.MANIFEST_NAME, payload)

    def acquire_lock(self) -> None:
        path = self.path(self.LOCK_NAME)
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockHeldError(
                f"{path} exists: another run owns this output directory "
                "(remove the file if that run is dead)"
            )
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))

    def release_lock(self) -> None:
        try:
            os.unlink(self.path(self.LOCK_NAME))
        except FileNotFoundError:
            pass


def _load_datasets(cfg: RunConfig):
    ds = cfg.dataset
    if ds.kind == "blobs":
        train = nets.make_blobs(
            ds.n_train, ds.classes, ds.separation, stage_seed(cfg.seed, "dataset-train")
        )
        test = nets.make_blobs(
            ds.n_test,
            ds.classes,
            ds.separation,
            stage_seed(cfg.seed, "dataset-test"),
            split=nets.Split.TEST,
        )
    else:
        train = nets.load_csv_dataset(ds.train_path, ds.label_column)
        test = nets.load_csv_dataset(ds.test_path, ds.label_column, split=nets.Split.TEST)
    return train, test


def _dataset_key(cfg: RunConfig) -> str:
    ds = cfg.dataset
    if ds.kind == "blobs":
        return _hash_inputs(
            "blobs", str(ds.n_train), str(ds.n_test), str(ds.classes), repr(ds.separation)
        )
    return _hash_inputs(
        "csv", _sha256_file(Path(ds.train_path)), _sha256_file(Path(ds.test_path)), ds.label_column
    )


MODEL_FILE = "model.ckpt"
TRAIN_FILE = "train.json"
SPECTRUM_FILE = "spectrum.csv"
SPECTRUM_META_FILE = "spectrum.json"
DENSITY_FILE = "density.csv"
CURVE_FILE = "curve.csv"
PREDICT_FILE = "predict.json"
SWEEP_FILE = "sweep.csv"
SWEEP_META_FILE = "sweep.json"
ESCAPE_FILE = "escape.csv"
REPORT_JSON = "report.json"
REPORT_TEXT = "report.txt"


@_stage("train")
def run_train(cfg: RunConfig, ws: Workspace) -> None:
    outputs = [MODEL_FILE, TRAIN_FILE]
    key = _hash_inputs(
        "train",
        _dataset_key(cfg),
        str(cfg.widths),
        str(cfg.train.batch_size),
        str(cfg.train.epochs),
        repr(cfg.train.lr),
        repr(cfg.train.momentum),
        repr(cfg.train.lambda_l1),
        str(cfg.seed),
    )
    if ws.cached("train", key, outputs):
        logger.info("train: cached")
        return

    data_train, data_test = _load_datasets(cfg)
    net = nets.init_kaiming(cfg.widths, stage_seed(cfg.seed, "net-init"))
    train_cfg = nets.TrainConfig(
        batch_size=cfg.train.batch_size,
        epochs=cfg.train.epochs,
        lr=cfg.train.lr,
        momentum=cfg.train.momentum,
        lambda_l1=cfg.train.lambda_l1,
        seed=stage_seed(cfg.seed, "train"),
    )
    net, history = nets.train_l1(net, data_train, train_cfg)

    eps_hat = nets.epsilon_hat(net, data_train, cfg.train.batch_size)
    grad_norm = float(np.linalg.norm(nets.grad(net, data_train.batch())))
    nets.save_checkpoint(net, ws.path(MODEL_FILE), seed=cfg.seed)
    ws.write_json(
        TRAIN_FILE,
        {
            "loss_history": history,
            "eps_hat": eps_hat,
            "grad_norm": grad_norm,
            "dense_train_acc": nets.accuracy(net, data_train),
            "dense_test_acc": nets.accuracy(net, data_test),
            "dim": net.dim,
        },
    )
    ws.record("train", key)
    logger.info("train: done (eps_hat=%.3g, grad_norm=%.3g)", eps_hat, grad_norm)


@_stage("spectrum")
def run_spectrum(cfg: RunConfig, ws: Workspace) -> None:
    run_train(cfg, ws)
    spec = cfg.spectrum
    outputs = [SPECTRUM_FILE, SPECTRUM_META_FILE]
    if spec.mode == "slq":
        outputs.append(DENSITY_FILE)
    key = _hash_inputs(
        "spectrum",
        ws.file_hash(MODEL_FILE),
        spec.mode,
        str(spec.slq_runs),
        str(spec.slq_iters),
        repr(spec.slq_sigma2),
        str(spec.slq_bins),
        str(spec.important_parts),
        str(cfg.seed),
    )
    if ws.cached("spectrum", key, outputs):
        logger.info("spectrum: cached")
        return

    net, _ = nets.load_checkpoint(ws.path(MODEL_FILE))
    data_train, _ = _load_datasets(cfg)
    batch = data_train.batch()
    meta: dict = {"mode": spec.mode, "dim": net.dim}

    if spec.mode == "exact":
        dense, residual = nets.exact_hessian(net, batch)
        spectrum = spectral.exact_spectrum(dense)
        meta["sym_residual"] = residual
    else:
        op = nets.hessian_operator(net, batch)
        density = spectral.slq_density(
            op,
            m=min(spec.slq_iters, net.dim),
            l=spec.slq_runs,
            sigma2=spec.slq_sigma2,
            bins=spec.slq_bins,
            seed=stage_seed(cfg.seed, "spectrum"),
        )
        spectral.save_density_csv(density, ws.path(DENSITY_FILE))
        important = spectral.count_important(op, nets.flatten(net), spec.important_parts)
        lambda_min = float(density.grid[0] + 3.0 * np.sqrt(density.sigma2))
        spectrum = spectral.reconstruct_spectrum(density, net.dim, important, lambda_min)
        meta["lambda_min_ritz"] = lambda_min

    spectral.save_spectrum_csv(spectrum, ws.path(SPECTRUM_FILE))
    meta["source"] = spectrum.source.value
    meta["important_count"] = spectrum.important_count
    ws.write_json(SPECTRUM_META_FILE, meta)
    ws.record("spectrum", key)
    logger.info(
        "spectrum: done (source=%s, important=%d)", spectrum.source.value, spectrum.important_count
    )


def _load_spectrum(ws: Workspace) -> Spectrum:
    meta = ws.read_json(SPECTRUM_META_FILE)
    source = SpectrumSource(meta["source"])
    return spectral.load_spectrum_csv(
        ws.path(SPECTRUM_FILE), source, meta["important_count"]
    )


@_stage("predict")
def run_predict(cfg: RunConfig, ws: Workspace) -> None:
    run_spectrum(cfg, ws)
    outputs = [CURVE_FILE, PREDICT_FILE]
    key = _hash_inputs(
        "predict",
        ws.file_hash(MODEL_FILE),
        ws.file_hash(SPECTRUM_FILE),
        ws.file_hash(TRAIN_FILE),
        str(cfg.predict.grid_points),
        repr(cfg.predict.tol),
    )
    if ws.cached("predict", key, outputs):
        logger.info("predict: cached")
        return

    net, _ = nets.load_checkpoint(ws.path(MODEL_FILE))
    eps_hat = ws.read_json(TRAIN_FILE)["eps_hat"]
    spectrum = spectral.convexify(_load_spectrum(ws))
    ellipsoid = geometry.EllipsoidSpec(spectrum=spectrum, eps_hat=eps_hat)
    distance = pruning.r_of_p(nets.flatten(net), nets.prunable_mask(net))
    curve = geometry.solve_phase_transition(
        ellipsoid, distance, tol=cfg.predict.tol, grid_points=cfg.predict.grid_points
    )
    geometry.save_curve_csv(curve, ellipsoid, ws.path(CURVE_FILE), ws.path(PREDICT_FILE))
    ws.record("predict", key)
    logger.info("predict: done (p_star=%.4f%s)", curve.p_star, " [degenerate]" if curve.degenerate else "")


@_stage("sweep")
def run_sweep(cfg: RunConfig, ws: Workspace) -> None:
    run_train(cfg, ws)
    outputs = [SWEEP_FILE, SWEEP_META_FILE]
    key = _hash_inputs(
        "sweep",
        ws.file_hash(MODEL_FILE),
        _dataset_key(cfg),
        repr(cfg.sweep.p_min),
        repr(cfg.sweep.p_max),
        str(cfg.sweep.p_count),
    )
    if ws.cached("sweep", key, outputs):
        logger.info("sweep: cached")
        return

    net, _ = nets.load_checkpoint(ws.path(MODEL_FILE))
    data_train, data_test = _load_datasets(cfg)
    grid = np.linspace(cfg.sweep.p_min, cfg.sweep.p_max, cfg.sweep.p_count)
    result = pruning.sweep(net, data_train, data_test, [float(p) for p in grid])
    pruning.save_sweep_csv(result, ws.path(SWEEP_FILE), ws.path(SWEEP_META_FILE))
    ws.record("sweep", key)
    logger.info("sweep: done (empirical_max_p=%.3f)", result.empirical_max_p)


@_stage("verify-escape")
def run_verify_escape(cfg: RunConfig, ws: Workspace) -> None:
    if cfg.spectrum.mode != "exact":
        raise ConfigError("verify-escape needs spectrum mode = exact")
    run_train(cfg, ws)
    outputs = [ESCAPE_FILE]
    key = _hash_inputs(
        "escape",
        ws.file_hash(MODEL_FILE),
        ws.file_hash(TRAIN_FILE),
        repr(cfg.escape.p),
        str(cfg.escape.trials),
        str(cfg.escape.k_count),
        str(cfg.seed),
    )
    if ws.cached("escape", key, outputs):
        logger.info("verify-escape: cached")
        return

    net, _ = nets.load_checkpoint(ws.path(MODEL_FILE))
    d = net.dim
    if d > 300:
        raise ValueError(f"verify-escape needs D <= 300, got {d} (shrink the net)")
    data_train, _ = _load_datasets(cfg)
    eps_hat = ws.read_json(TRAIN_FILE)["eps_hat"]

    dense, _ = nets.exact_hessian(net, data_train.batch())
    # Convexified positive-definite surrogate of the indefinite Hessian:
    # same |eigenvalues|, floored to keep the reduced solves well posed.
    lam, q = np.linalg.eigh(dense.entries)
    lam = np.abs(lam)
    lam = np.maximum(lam, 1e-12 * lam.max())
    convex_dense = DenseSymmetric.from_matrix((q * lam) @ q.T)
    spectrum = Spectrum(np.sort(lam), SpectrumSource.EXACT)

    w0 = nets.flatten(net)
    state = pruning.magnitude_mask(w0, nets.prunable_mask(net), cfg.escape.p)
    wp = w0.copy()
    wp[state.mask] = 0.0

    ellipsoid = geometry.EllipsoidSpec(spectrum=spectrum, eps_hat=eps_hat)
    width = geometry.projected_width(ellipsoid, state.R)

    ks = np.unique(np.linspace(1, d, min(cfg.escape.k_count, d)).round().astype(int))
    mc_seed = stage_seed(cfg.seed, "escape")
    with open(ws.path(ESCAPE_FILE), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "empirical_prob", "theorem_bound"])
        for i, k in enumerate(ks):
            prob = geometry.escape_mc(
                convex_dense, eps_hat, w0, wp, int(k), cfg.escape.trials, mc_seed + i
            )
            bound = geometry.escape_bound(int(k), width)
            writer.writerow([int(k), repr(prob), repr(bound)])
    ws.record("escape", key)
    logger.info("verify-escape: done (width=%.3f over %d k values)", width, len(ks))


@_stage("report")
def run_report(cfg: RunConfig, ws: Workspace) -> Report:
    run_predict(cfg, ws)
    run_sweep(cfg, ws)
    from . import plots  # matplotlib import deferred to the report path

    outputs = [REPORT_JSON, REPORT_TEXT, plots.CURVE_FIGURE, plots.SWEEP_FIGURE]
    key = _hash_inputs(
        "report",
        ws.file_hash(CURVE_FILE),
        ws.file_hash(PREDICT_FILE),
        ws.file_hash(SWEEP_FILE),
        ws.file_hash(SWEEP_META_FILE),
        ws.file_hash(TRAIN_FILE),
        ws.file_hash(SPECTRUM_META_FILE),
    )
    if ws.cached("report", key, outputs):
        logger.info("report: cached")
        return _report_from_json(ws.read_json(REPORT_JSON))

    predict_meta = ws.read_json(PREDICT_FILE)
    sweep_meta = ws.read_json(SWEEP_META_FILE)
    train_meta = ws.read_json(TRAIN_FILE)
    spectrum_meta = ws.read_json(SPECTRUM_META_FILE)

    predicted = float(predict_meta["p_star"])
    empirical = float(sweep_meta["empirical_max_p"])
    report = Report(
        predicted_p_star=predicted,
        curve_file=CURVE_FILE,
        empirical_max_p=empirical,
        delta=predicted - empirical,
        eps_hat=float(train_meta["eps_hat"]),
        dim=int(spectrum_meta["dim"]),
        important_count=int(spectrum_meta["important_count"]),
        spectrum_source=str(spectrum_meta["source"]),
        grad_norm=float(train_meta["grad_norm"]),
    )
    ws.write_json(REPORT_JSON, asdict(report))
    _write_report_text(report, sweep_meta, ws.path(REPORT_TEXT))
    plots.render_curve_figure(ws.path(CURVE_FILE), predicted, ws.path(plots.CURVE_FIGURE))
    plots.render_sweep_figure(
        ws.path(SWEEP_FILE), predicted, empirical, ws.path(plots.SWEEP_FIGURE)
    )
    ws.record("report", key)
    logger.info("report: done (predicted=%.3f, empirical=%.3f)", predicted, empirical)
    return report


def _report_from_json(payload: dict) -> Report:
    return Report(**payload)


def _write_report_text(report: Report, sweep_meta: dict, path: Path) -> None:
    lines = [
        "maximum pruning ratio report",
        "============================",
        f"predicted p*          : {report.predicted_p_star:.4f}  (curve in {report.curve_file})",
        f"empirical max p       : {report.empirical_max_p:.4f}  "
        f"(test-accuracy drop <= {sweep_meta['tolerance_points']} points)",
        f"delta (pred - actual) : {report.delta:+.4f}",
        f"eps_hat               : {report.eps_hat:.6g}",
        f"parameters D          : {report.dim}",
        f"important eigenvalues : {report.important_count}",
        f"spectrum source       : {report.spectrum_source}",
        f"gradient norm at w0   : {report.grad_norm:.6g}",
        "",
    ]
    path.write_text("\n".join(lines))


def run_full(cfg: RunConfig, ws: Workspace) -> Report:
    return run_report(cfg, ws)


_STAGE_RUNNERS = {
    "train": run_train,
    "spectrum": run_spectrum,
    "predict": run_predict,
    "sweep": run_sweep,
    "verify-escape": run_verify_escape,
    "report": run_report,
    "full": run_full,
}


def run_task(task: str, cfg: RunConfig, ws: Workspace):
    """Run one CLI task under the directory lock, writing the manifest
    even when a stage fails partway."""
    runner = _STAGE_RUNNERS[task]
    ws.acquire_lock()
    try:
        try:
            return runner(cfg, ws)
        finally:
            ws.write_manifest(cfg)
    finally:
        ws.release_lock()

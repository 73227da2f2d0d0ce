"""Run configuration: plain-text key=value files with sections.

The schema is strict: unknown sections or keys are rejected, and every
numeric field is range-checked at parse time. Configs round-trip
exactly through :func:`serialize_config` / :func:`parse_config`.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field

from ..nets import TrainConfig

TASKS = ("train", "spectrum", "predict", "sweep", "verify-escape", "report", "full")

SPECTRUM_MODES = ("exact", "slq")

DATASET_KINDS = ("blobs", "csv")


class ConfigError(ValueError):
    """Malformed, out-of-range, or unknown configuration content."""


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "blobs"
    n_train: int = 1024
    n_test: int = 512
    classes: int = 2
    separation: float = 6.0
    train_path: str = ""
    test_path: str = ""
    label_column: str = "label"

    def validate(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset kind must be one of {DATASET_KINDS}, got {self.kind!r}")
        if self.kind == "blobs":
            if self.classes < 2:
                raise ConfigError("dataset classes must be >= 2")
            if self.n_train < self.classes or self.n_test < 1:
                raise ConfigError("dataset sizes too small")
            if self.separation <= 0:
                raise ConfigError("dataset separation must be > 0")
        else:
            if not self.train_path or not self.test_path:
                raise ConfigError("csv dataset needs train_path and test_path")


@dataclass(frozen=True)
class SpectrumSpec:
    mode: str = "exact"
    slq_runs: int = 1
    slq_iters: int = 128
    slq_sigma2: float = 1e-5
    slq_bins: int = 10000
    important_parts: int = 100

    def validate(self):
        if self.mode not in SPECTRUM_MODES:
            raise ConfigError(f"spectrum mode must be one of {SPECTRUM_MODES}, got {self.mode!r}")
        if self.slq_runs < 1:
            raise ConfigError("slq_runs must be >= 1")
        if self.slq_iters < 2:
            raise ConfigError("slq_iters must be >= 2")
        if self.slq_sigma2 <= 0:
            raise ConfigError("slq_sigma2 must be > 0")
        if self.slq_bins < 100:
            raise ConfigError("slq_bins must be >= 100")
        if self.important_parts < 1:
            raise ConfigError("important_parts must be >= 1")


@dataclass(frozen=True)
class PredictSpec:
    grid_points: int = 200
    tol: float = 1e-4

    def validate(self):
        if self.grid_points < 10:
            raise ConfigError("predict grid_points must be >= 10")
        if self.tol <= 0:
            raise ConfigError("predict tol must be > 0")


@dataclass(frozen=True)
class SweepSpec:
    p_min: float = 0.02
    p_max: float = 1.0
    p_count: int = 50

    def validate(self):
        if not 0.0 <= self.p_min <= self.p_max <= 1.0:
            raise ConfigError("sweep needs 0 <= p_min <= p_max <= 1")
        if self.p_count < 2:
            raise ConfigError("sweep p_count must be >= 2")


@dataclass(frozen=True)
class EscapeSpec:
    p: float = 0.5
    trials: int = 500
    k_count: int = 25

    def validate(self):
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError("escape p must be in [0, 1]")
        if self.trials < 100:
            raise ConfigError("escape trials must be >= 100")
        if self.k_count < 1:
            raise ConfigError("escape k_count must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = ""
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    widths: tuple[int, ...] = (2, 32, 32, 2)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(batch_size=64, epochs=150, lr=0.05, momentum=0.9, lambda_l1=5e-4))
    spectrum: SpectrumSpec = field(default_factory=SpectrumSpec)
    predict: PredictSpec = field(default_factory=PredictSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    escape: EscapeSpec = field(default_factory=EscapeSpec)

    def validate(self):
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ConfigError("net widths need >= 2 positive entries")
        if self.dataset.kind == "blobs" and self.widths[0] != self.dataset.classes:
            raise ConfigError(
                "net input width must equal the blob feature dimension (= classes)"
            )
        self.dataset.validate()
        self.spectrum.validate()
        self.predict.validate()
        self.sweep.validate()
        self.escape.validate()


_SCHEMA = {
    "run": {"seed": int, "out": str},
    "dataset": {
        "kind": str,
        "n_train": int,
        "n_test": int,
        "classes": int,
        "separation": float,
        "train_path": str,
        "test_path": str,
        "label_column": str,
    },
    "net": {"widths": "int_list"},
    "train": {
        "batch_size": int,
        "epochs": int,
        "lr": float,
        "momentum": float,
        "lambda_l1": float,
    },
    "spectrum": {
        "mode": str,
        "slq_runs": int,
        "slq_iters": int,
        "slq_sigma2": float,
        "slq_bins": int,
        "important_parts": int,
    },
    "predict": {"grid_points": int, "tol": float},
    "sweep": {"p_min": float, "p_max": float, "p_count": int},
    "escape": {"p": float, "trials": int, "k_count": int},
}


def _convert(section: str, key: str, raw: str):
    kind = _SCHEMA[section][key]
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind == "int_list":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from exc


def parse_config_text(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc

    values: dict[str, dict] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        values[section] = {}
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            values[section][key] = _convert(section, key, raw)

    run = values.get("run", {})
    train_kw = values.get("train", {})
    # The training seed is derived from the global seed at run time.
    base_train = TrainConfig(batch_size=64, epochs=150, lr=0.05, momentum=0.9, lambda_l1=5e-4)
    try:
        train_cfg = TrainConfig(
            batch_size=train_kw.get("batch_size", base_train.batch_size),
            epochs=train_kw.get("epochs", base_train.epochs),
            lr=train_kw.get("lr", base_train.lr),
            momentum=train_kw.get("momentum", base_train.momentum),
            lambda_l1=train_kw.get("lambda_l1", base_train.lambda_l1),
            seed=0,
        )
        cfg = RunConfig(
            seed=run.get("seed", 0),
            out=run.get("out", ""),
            dataset=DatasetSpec(**values.get("dataset", {})),
            widths=values.get("net", {}).get("widths", RunConfig.widths),
            train=train_cfg,
            spectrum=SpectrumSpec(**values.get("spectrum", {})),
            predict=PredictSpec(**values.get("predict", {})),
            sweep=SweepSpec(**values.get("sweep", {})),
            escape=EscapeSpec(**values.get("escape", {})),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.validate()
    return cfg


def parse_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def serialize_config(cfg: RunConfig) -> str:
    """Canonical text form; parse_config_text inverts it exactly."""
    parser = configparser.ConfigParser(interpolation=None)
    parser["run"] = {"seed": _fmt(cfg.seed), "out": cfg.out}
    ds = cfg.dataset
    parser["dataset"] = {
        "kind": ds.kind,
        "n_train": _fmt(ds.n_train),
        "n_test": _fmt(ds.n_test),
        "classes": _fmt(ds.classes),
        "separation": _fmt(ds.separation),
        "train_path": ds.train_path,
        "test_path": ds.test_path,
        "label_column": ds.label_column,
    }
    parser["net"] = {"widths": _fmt(cfg.widths)}
    parser["train"] = {
        "batch_size": _fmt(cfg.train.batch_size),
        "epochs": _fmt(cfg.train.epochs),
        "lr": _fmt(cfg.train.lr),
        "momentum": _fmt(cfg.train.momentum),
        "lambda_l1": _fmt(cfg.train.lambda_l1),
    }
    parser["spectrum"] = {
        "mode": cfg.spectrum.mode,
        "slq_runs": _fmt(cfg.spectrum.slq_runs),
        "slq_iters": _fmt(cfg.spectrum.slq_iters),
        "slq_sigma2": _fmt(cfg.spectrum.slq_sigma2),
        "slq_bins": _fmt(cfg.spectrum.slq_bins),
        "important_parts": _fmt(cfg.spectrum.important_parts),
    }
    parser["predict"] = {"grid_points": _fmt(cfg.predict.grid_points), "tol": _fmt(cfg.predict.tol)}
    parser["sweep"] = {
        "p_min": _fmt(cfg.sweep.p_min),
        "p_max": _fmt(cfg.sweep.p_max),
        "p_count": _fmt(cfg.sweep.p_count),
    }
    parser["escape"] = {
        "p": _fmt(cfg.escape.p),
        "trials": _fmt(cfg.escape.trials),
        "k_count": _fmt(cfg.escape.k_count),
    }
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()

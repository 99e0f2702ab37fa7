"""Declarative experiment configuration (YAML), validated before any work runs."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

SCHEMA_VERSION = 1
ENV_PREFIX = "NBEDDYN__"


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is the dotted key of the first offending entry."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ObserveSpec(_Strict):
    kind: Literal["select", "real", "linear", "identity"] = "select"
    indices: list[int] = [0]
    matrix: Optional[list[list[float]]] = None


class DatasetSpec(_Strict):
    system: Literal["lorenz63", "linear_complex", "two_mode_field"] = "lorenz63"
    dt: float = 0.01
    length: int = 10000
    transient: int = 1000
    test_length: int = 5000
    initial_state: list[float] = [1.0, 1.0, 1.0]
    test_initial_state: list[float] = [-5.0, 0.5, 25.0]
    observe: ObserveSpec = ObserveSpec()
    noise: float = 0.0
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0
    alpha: list[float] = [-0.1, -0.5]  # (re, im)
    grid: int = 32
    n_components: int = 2

    @field_validator("dt")
    @classmethod
    def _dt(cls, v):
        if not v > 0:
            raise ValueError("must be > 0")
        return v

    @field_validator("length", "test_length")
    @classmethod
    def _len(cls, v):
        if v < 3:
            raise ValueError("must be >= 3")
        return v

    @field_validator("transient")
    @classmethod
    def _transient(cls, v):
        if v < 0:
            raise ValueError("must be >= 0")
        return v

    @field_validator("noise")
    @classmethod
    def _noise(cls, v):
        if v < 0:
            raise ValueError("must be >= 0")
        return v


class ModelSpec(_Strict):
    d_E: Union[int, list[int]] = 6
    lam: float = Field(1.0, ge=0)
    epochs: int = 6000
    lr_theta: float = Field(1e-2, gt=0)
    lr_latent: float = Field(1e-2, gt=0)
    lr_final_fraction: float = Field(0.01, gt=0, le=1)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    latent_init_scale: float = Field(0.1, ge=0)
    theta_init_scale: float = Field(0.01, ge=0)
    substeps: int = Field(1, ge=1)
    quadratic: bool = True
    layers: int = Field(0, ge=0)
    width: int = Field(0, ge=0)
    mode: Literal["joint", "alternating"] = "joint"
    alternate_every: int = Field(100, ge=1)
    # None: 100 Levenberg-Marquardt steps for a pure bilinear field, none with dense layers
    refine_iterations: Optional[int] = Field(None, ge=0)
    refine_damping: float = Field(1e-3, gt=0)
    snapshot_every: int = Field(0, ge=0)
    rmse_gate: Optional[float] = None

    @field_validator("epochs")
    @classmethod
    def _epochs(cls, v):
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @model_validator(mode="after")
    def _refine_needs_bilinear(self):
        if self.refine_iterations and self.layers:
            raise ValueError("refine_iterations needs layers = 0 (pure bilinear field)")
        return self

    @property
    def refine_steps(self) -> int:
        if self.refine_iterations is None:
            return 0 if self.layers else 100
        return self.refine_iterations

    @property
    def dims(self) -> list[int]:
        return [self.d_E] if isinstance(self.d_E, int) else list(self.d_E)


class InferenceSpec(_Strict):
    window: int = Field(50, ge=2)
    iterations: int = Field(2000, ge=0)
    lr: float = Field(1e-2, gt=0)
    lr_final_fraction: float = Field(0.01, gt=0, le=1)
    init: Literal["nearest", "random"] = "nearest"


class DelaySpec(_Strict):
    # integers, or "mi" / "corr" for tau and "fnn" / "takens" for d_E
    tau: Union[int, Literal["mi", "corr"]] = 10
    d_E: Union[int, Literal["fnn", "takens"]] = 3


class AnalogSpec(DelaySpec):
    k: int = Field(10, ge=1)
    regression: Literal["locally_linear", "locally_constant"] = "locally_linear"


class SparseSpec(DelaySpec):
    threshold: float = Field(0.05, ge=0)


class BaselineSpec(_Strict):
    analog: list[AnalogSpec] = []
    sparse: list[SparseSpec] = []
    attractor_dim: float = Field(2.06, gt=0)  # fractal dimension d in the ceil(2d+1) rule
    mi_bins: int = Field(32, ge=2)
    max_lag: int = Field(60, ge=1)


class EvaluationSpec(_Strict):
    horizons: list[int] = [1, 4]
    n_windows: int = Field(200, ge=1)
    history: int = Field(200, ge=2)
    lyapunov_length: int = Field(10000, ge=500)
    lyapunov_spinup: int = Field(2000, ge=0)
    lyapunov_tau: int = Field(16, ge=1)
    lyapunov_dim: int = Field(3, ge=1)
    spectrum_threshold: float = Field(1e-2, gt=0)
    spectrum_stride: int = Field(1, ge=1)

    @field_validator("horizons")
    @classmethod
    def _horizons(cls, v):
        if not v or any(h < 1 for h in v) or len(set(v)) != len(v):
            raise ValueError("must be distinct positive integers")
        return sorted(v)


class ForecastSpec(_Strict):
    horizon: int = 100
    mask_fraction: float = Field(0.0, ge=0, lt=1)
    noise: float = Field(0.0, ge=0)

    @field_validator("horizon")
    @classmethod
    def _horizon(cls, v):
        if v < 1:
            raise ValueError("must be >= 1")
        return v


class ExperimentConfig(_Strict):
    schema_version: int
    name: str = "run"
    seed: int = 0
    output_dir: str = "runs"
    dataset: DatasetSpec = DatasetSpec()
    model: ModelSpec = ModelSpec()
    inference: InferenceSpec = InferenceSpec()
    baselines: BaselineSpec = BaselineSpec()
    evaluation: EvaluationSpec = EvaluationSpec()
    forecast: ForecastSpec = ForecastSpec()

    @field_validator("schema_version")
    @classmethod
    def _version(cls, v):
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema version {v} (expected {SCHEMA_VERSION})")
        return v

    @model_validator(mode="after")
    def _test_long_enough(self):
        need = self.evaluation.history + max(self.evaluation.horizons)
        if self.dataset.test_length + 1 < need:
            raise ValueError(
                f"dataset.test_length={self.dataset.test_length} shorter than evaluation.history + max horizon = {need}"
            )
        return self

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.name


def _set_path(doc: dict, path: list[str], value) -> None:
    node = doc
    for key in path[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(".".join(path), "cannot override inside a non-mapping value")
    node[path[-1]] = value


def apply_env_overrides(doc: dict, environ=None) -> dict:
    """``NBEDDYN__MODEL__EPOCHS=100`` sets ``model.epochs``; values are parsed as YAML scalars."""
    environ = os.environ if environ is None else environ
    for name in sorted(environ):
        if name.startswith(ENV_PREFIX):
            path = [p.lower() for p in name[len(ENV_PREFIX) :].split("__") if p]
            # keep the documented key spelling for mixed-case fields
            path = [{"d_e": "d_E"}.get(p, p) for p in path]
            if path:
                _set_path(doc, path, yaml.safe_load(environ[name]))
    return doc


def validate_config(doc: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        err = exc.errors()[0]
        path = ".".join(str(p) for p in err["loc"])
        raise ConfigError(path, err["msg"]) from None


def load_config(path: str | Path | None, overrides: dict | None = None, environ=None) -> ExperimentConfig:
    doc: dict = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        loaded = yaml.safe_load(text)
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError("", "configuration root must be a mapping")
        doc = loaded or {}
    else:
        doc = {"schema_version": SCHEMA_VERSION}
    doc = apply_env_overrides(doc, environ)
    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_path(doc, dotted.split("."), value)
    return validate_config(doc)

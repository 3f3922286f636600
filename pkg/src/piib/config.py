"""Experiment configuration with YAML round-tripping and per-stage hashes."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .cartpole import CartpoleParams
from .pathintegral import MppiConfig
from .pipeline import SweepConfig

STAGES = ("simulate", "sample", "tables", "sweep", "gaussian")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SamplingConfig:
    n_target: int = 200
    noise_std: float = 0.5
    acceptance_ratio: float = 1.5
    attempt_budget: int | None = None

    def __post_init__(self):
        if self.n_target < 1:
            raise ValueError("n_target must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if not self.acceptance_ratio > 1:
            raise ValueError("acceptance_ratio must exceed 1")
        if self.attempt_budget is not None and self.attempt_budget < 1:
            raise ValueError("attempt_budget must be positive")


@dataclass(frozen=True)
class DiscretizationConfig:
    increment: float = 0.3

    def __post_init__(self):
        if not self.increment > 0:
            raise ValueError("increment must be positive")


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-9
    max_iter: int = 5000
    y_cardinality: int | None = None
    control_estimator: str = "expected_cost"

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        if self.y_cardinality is not None and self.y_cardinality < 1:
            raise ValueError("y_cardinality must be positive")
        if self.control_estimator not in ("expected_cost", "mean_signal"):
            raise ValueError("control_estimator must be expected_cost or mean_signal")


@dataclass(frozen=True)
class GaussianConfig:
    """Linear system for the Gaussian branch; defaults to the upright cart-pole."""

    sigma_x_scale: float = 1.0
    sigma_u_scale: float = 25.0
    lam: float = 1.0
    horizon: int = 1
    beta_min: float = 1.01
    beta_max: float = 100.0
    n_betas: int = 25
    A: list | None = None
    B: list | None = None
    Q: list | None = None

    def __post_init__(self):
        if not (self.sigma_x_scale > 0 and self.sigma_u_scale > 0 and self.lam > 0):
            raise ValueError("gaussian scales and lambda must be positive")
        if self.horizon < 1 or self.n_betas < 1:
            raise ValueError("horizon and n_betas must be positive")
        if not 0 < self.beta_min <= self.beta_max:
            raise ValueError("need 0 < beta_min <= beta_max")
        given = [m is not None for m in (self.A, self.B, self.Q)]
        if any(given) and not all(given):
            raise ValueError("A, B and Q must be given together")


_SECTIONS = {
    "physics": CartpoleParams,
    "mppi": MppiConfig,
    "sampling": SamplingConfig,
    "discretization": DiscretizationConfig,
    "sweep": SweepConfig,
    "solver": SolverConfig,
    "gaussian": GaussianConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    physics: CartpoleParams = field(default_factory=CartpoleParams)
    mppi: MppiConfig = field(default_factory=MppiConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    discretization: DiscretizationConfig = field(default_factory=DiscretizationConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    gaussian: GaussianConfig = field(default_factory=GaussianConfig)
    seed: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.mppi.steps != self.sweep.horizon:
            raise ConfigError(
                f"mppi.steps ({self.mppi.steps}) must equal sweep.horizon ({self.sweep.horizon})"
            )

    # -- serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        out = {}
        for name in _SECTIONS:
            d = dataclasses.asdict(getattr(self, name))
            if name == "sweep":
                d["angles"] = list(d["angles"])
            out[name] = d
        out["seed"] = self.seed
        out["output_dir"] = self.output_dir
        return out

    @classmethod
    def from_dict(cls, data: dict | None) -> "ExperimentConfig":
        data = dict(data or {})
        unknown = set(data) - set(_SECTIONS) - {"seed", "output_dir"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        try:
            for name, kind in _SECTIONS.items():
                section = data.get(name) or {}
                if not isinstance(section, dict):
                    raise ConfigError(f"section {name!r} must be a mapping")
                allowed = {f.name for f in dataclasses.fields(kind)}
                bad = set(section) - allowed
                if bad:
                    raise ConfigError(f"unknown keys in {name}: {sorted(bad)}")
                if name == "sweep" and "angles" in section:
                    section = {**section, "angles": tuple(section["angles"])}
                kw[name] = kind(**section)
            if "seed" in data:
                kw["seed"] = int(data["seed"])
            if "output_dir" in data:
                kw["output_dir"] = str(data["output_dir"])
            return cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML: {exc}") from exc
        if data is not None and not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_yaml(text)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    # -- hashing -----------------------------------------------------------------

    def stage_hash(self, stage: str) -> str:
        """Hash of everything that determines the output of ``stage``.

        Each stage includes the hash of the stage it reads from, so a change
        upstream invalidates everything downstream.
        """
        d = self.to_dict()
        sweep = d["sweep"]
        if stage == "simulate":
            parts = {"physics": d["physics"], "mppi": d["mppi"], "seed": self.seed,
                     "angles": sweep["angles"]}
        elif stage == "sample":
            # bundle files carry bin indices and lambda, so both belong here
            parts = {"up": self.stage_hash("simulate"), "sampling": d["sampling"],
                     "discretization": d["discretization"], "lam": sweep["lam"]}
        elif stage == "tables":
            parts = {"up": self.stage_hash("sample")}
        elif stage == "sweep":
            parts = {"up": self.stage_hash("tables"), "solver": d["solver"],
                     "grid": [sweep["beta_min"], sweep["beta_max"], sweep["beta_step"]]}
            if self.solver.control_estimator == "mean_signal":
                parts["physics"] = d["physics"]
        elif stage == "gaussian":
            parts = {"physics": d["physics"], "gaussian": d["gaussian"]}
        else:
            raise ValueError(f"unknown stage {stage!r}")
        blob = json.dumps(parts, sort_keys=True, separators=(",", ":"), default=repr)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    ValidationInfo,
    field_validator,
    model_validator,
)

from restless_bai.errors import ConfigError
from restless_bai.model.exp_family import (
    ROW_SUM_TOL,
    ExpFamily,
    FamilyError,
    Generator,
    validate_family,
)
from restless_bai.model.instance import Instance
from restless_bai.model.mdp import MdpConfig, StateSpace, count_delay_vectors, enumerate_states
from restless_bai.oracle.lower_bound import SolverConfig
from restless_bai.policy.rstl_dtrack import PolicyConfig, max_epsilon_exponent

SCHEMA_VERSION = 1


class ConfigParseError(ConfigError):
    pass


class ConfigValidationError(ConfigError):
    def __init__(self, field: str, reason: str):
        super().__init__(f"{field}: {reason}")
        self.field = field
        self.reason = reason


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    states: int = Field(..., ge=2)
    generator: List[List[float]]
    f: List[float]
    theta_interval: Tuple[float, float]
    theta: List[float] = Field(..., min_length=2)
    R: int = Field(..., ge=1)
    eta: float = Field(0.5, gt=0.0, lt=1.0)
    delta: float = Field(0.1, gt=0.0, lt=1.0)
    epsilon_exponent: Optional[float] = Field(None, gt=0.0)
    update_period: int = Field(50, ge=1)
    check_period: int = Field(1, ge=1)
    max_steps: int = Field(1_000_000, ge=1)
    trials: int = Field(100, ge=1)
    master_seed: int = Field(0, ge=0)
    output_dir: Optional[str] = None
    family_points: int = Field(41, ge=2)
    checkpoints: List[int] = Field(default_factory=list)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    policy_solver: SolverConfig = Field(default_factory=lambda: SolverConfig(tol=1e-4, max_iter=25))

    @field_validator("generator")
    @classmethod
    def validate_generator(cls, value: List[List[float]]) -> List[List[float]]:
        P = np.asarray(value, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ValueError(f"generator must be a square matrix, got shape {P.shape}")
        sums = P.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > ROW_SUM_TOL)
        if (P < 0).any() or len(bad):
            rows = ", ".join(f"row {r} sums to {sums[r]:.12g}" for r in bad) or "negative entry"
            raise ValueError(f"non-stochastic-row: {rows}")
        return value

    @field_validator("R")
    @classmethod
    def validate_max_delay(cls, value: int, info: ValidationInfo) -> int:
        theta = info.data.get("theta")
        K = len(theta) if theta else 0
        if value == K >= 3:
            raise ValueError(
                f"R = K = {K} makes every state forced and splits the delay space into "
                f"{math.factorial(K - 1)} closed rotation classes; use R > K"
            )
        return value

    @field_validator("theta_interval")
    @classmethod
    def validate_interval(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        if not value[0] < value[1]:
            raise ValueError("theta_interval must satisfy theta_min < theta_max")
        return value

    @model_validator(mode="after")
    def finalize(self) -> "ExperimentConfig":
        S = self.states
        if len(self.generator) != S:
            raise ValueError(f"generator must be {S}x{S}")
        if len(self.f) != S:
            raise ValueError(f"f must have {S} entries")
        lo, hi = self.theta_interval
        outside = [t for t in self.theta if not lo <= t <= hi]
        if outside:
            raise ValueError(f"theta entries {outside} outside theta_interval [{lo}, {hi}]")
        K = len(self.theta)
        if self.R < K:
            raise ValueError(f"R >= K is required, got R={self.R} < K={K}")
        try:
            validate_family(self.generator_model())
        except FamilyError as exc:
            raise ValueError(str(exc)) from exc
        if self.epsilon_exponent is not None:
            ceiling = max_epsilon_exponent(self.n_states)
            if self.epsilon_exponent > ceiling:
                raise ValueError(f"epsilon_exponent must be <= 1/(2(1+n_states)) = {ceiling:.6g}")
        if any(n < K for n in self.checkpoints):
            raise ValueError(f"checkpoints must be >= K={K}")
        return self

    @property
    def K(self) -> int:
        return len(self.theta)

    @property
    def n_states(self) -> int:
        return count_delay_vectors(self.K, self.R) * self.states**self.K

    def generator_model(self) -> Generator:
        return Generator(
            P=np.asarray(self.generator), f=np.asarray(self.f), theta_interval=self.theta_interval
        )

    def family(self) -> ExpFamily:
        return ExpFamily(self.generator_model(), max_delay=self.R)

    def state_space(self) -> StateSpace:
        return enumerate_states(MdpConfig(K=self.K, R=self.R, S=self.states))

    def instance(self) -> Instance:
        return Instance(self.family(), self.state_space(), self.theta)

    def policy_config(self) -> PolicyConfig:
        return PolicyConfig(
            delta=self.delta,
            eta=self.eta,
            epsilon_exponent=self.epsilon_exponent,
            update_period=self.update_period,
            check_period=self.check_period,
            max_steps=self.max_steps,
            solver=self.policy_solver,
        )

    def with_overrides(self, **updates: Any) -> "ExperimentConfig":
        updates = {k: v for k, v in updates.items() if v is not None}
        if not updates:
            return self
        return _validated(self.model_copy(update=updates).model_dump(mode="json"))


def _validated(payload: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(payload)
    except ValidationError as exc:
        error = exc.errors()[0]
        field = ".".join(str(part) for part in error["loc"]) or "config"
        raise ConfigValidationError(field, error["msg"]) from exc


def check_schema_version(payload: Dict[str, Any], source: str) -> None:
    version = payload.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigParseError(f"{source}: unsupported schema_version {version!r}")


def parse_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigParseError(f"config file {path} does not exist") from exc
    except json.JSONDecodeError as exc:
        raise ConfigParseError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(payload, dict):
        raise ConfigParseError(f"{path}: top level must be a JSON object")
    # summaries written by the simulate / lower-bound commands embed the resolved config
    if "schema_version" in payload:
        check_schema_version(payload, str(path))
        embedded = payload.get("config")
        if not isinstance(embedded, dict):
            raise ConfigParseError(f"{path}: no embedded config object")
        payload = embedded
    return _validated(payload)

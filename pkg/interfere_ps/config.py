"""Settings file handling.

Defaults live in the dataclasses below and are mirrored in the repository's
``config.yaml``. A YAML file only needs the keys it overrides.
"""

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import yaml

from .errors import InvalidConfigError

THREADS_ENV_VAR = "INTERFERE_PS_THREADS"


@dataclass(frozen=True)
class QuadratureSettings:
    nodes: int = 30


@dataclass(frozen=True)
class LogisticSettings:
    max_iter: int = 100
    grad_tol: float = 1e-8
    beta_bound: float = 1e3


@dataclass(frozen=True)
class KernelSettings:
    epsilon: float = 1e-6
    min_observations: int = 20


@dataclass(frozen=True)
class MixedSettings:
    max_iter: int = 500
    grad_tol: float = 1e-6
    start_sigmas: Tuple[float, ...] = (0.25, 1.0)
    boundary_sigma2: float = 1e-6
    max_cluster_size: int = 30


@dataclass(frozen=True)
class CrossfitSettings:
    folds: int = 5
    seed: int = 0
    learner: str = "logistic"


@dataclass(frozen=True)
class SemiparametricSettings:
    max_iter: int = 100
    tol: float = 1e-6
    init_sigma2: float = 1.0
    fallback_sigma2: float = 0.25
    inversion_tol: float = 1e-10


@dataclass(frozen=True)
class EstimandSettings:
    spillover_arm: int = 0


@dataclass(frozen=True)
class RuntimeSettings:
    threads: int = 1


@dataclass(frozen=True)
class Settings:
    quadrature: QuadratureSettings = field(default_factory=QuadratureSettings)
    logistic: LogisticSettings = field(default_factory=LogisticSettings)
    kernel: KernelSettings = field(default_factory=KernelSettings)
    mixed: MixedSettings = field(default_factory=MixedSettings)
    crossfit: CrossfitSettings = field(default_factory=CrossfitSettings)
    semiparametric: SemiparametricSettings = field(default_factory=SemiparametricSettings)
    estimands: EstimandSettings = field(default_factory=EstimandSettings)
    runtime: RuntimeSettings = field(default_factory=RuntimeSettings)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


def _coerce(value: Any, default: Any, key: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise InvalidConfigError("expected a boolean", key=key)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidConfigError("expected an integer", key=key)
        return value
    if isinstance(default, float):
        # PyYAML reads "1e-6" (no dot) as a string
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError as exc:
                raise InvalidConfigError("expected a number", key=key) from exc
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidConfigError("expected a number", key=key)
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or not value:
            raise InvalidConfigError("expected a non-empty list", key=key)
        return tuple(_coerce(v, default[0], key) for v in value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise InvalidConfigError("expected a string", key=key)
        return value
    return value


def _overlay(section: Any, values: Dict[str, Any], prefix: str) -> Any:
    if not isinstance(values, dict):
        raise InvalidConfigError("expected a mapping", key=prefix)
    known = {f.name: f for f in dataclasses.fields(section)}
    updates = {}
    for key, value in values.items():
        dotted = f"{prefix}.{key}"
        if key not in known:
            raise InvalidConfigError("unknown key", key=dotted)
        updates[key] = _coerce(value, getattr(section, key), dotted)
    return dataclasses.replace(section, **updates)


def settings_from_dict(raw: Optional[Dict[str, Any]]) -> Settings:
    """Build settings from a parsed mapping, validating every key."""
    settings = Settings()
    if not raw:
        return settings
    if not isinstance(raw, dict):
        raise InvalidConfigError("top level of the settings file must be a mapping")
    updates = {}
    for name, values in raw.items():
        if not hasattr(settings, name):
            raise InvalidConfigError("unknown section", key=name)
        updates[name] = _overlay(getattr(settings, name), values or {}, name)
    return dataclasses.replace(settings, **updates)


def load_settings(path: Optional[str] = None) -> Settings:
    """Load settings from a YAML file, or return the defaults.

    Args:
        path: Path to a YAML settings file.

    Returns:
        Validated settings.
    """
    if path is None:
        return Settings()
    try:
        with open(path, "r", encoding="utf-8") as handle:
            raw = yaml.safe_load(handle)
    except yaml.YAMLError as exc:
        raise InvalidConfigError(f"cannot parse YAML: {exc}") from exc
    except OSError as exc:
        raise InvalidConfigError(f"cannot read settings file: {exc}") from exc
    return settings_from_dict(raw)


def resolve_threads(flag: Optional[int], settings: Settings) -> int:
    """Thread count from the flag, then the environment, then settings."""
    if flag is not None:
        threads = flag
    elif os.getenv(THREADS_ENV_VAR):
        try:
            threads = int(os.environ[THREADS_ENV_VAR])
        except ValueError as exc:
            raise InvalidConfigError("expected an integer", key=THREADS_ENV_VAR) from exc
    else:
        threads = settings.runtime.threads
    if threads < 1:
        raise InvalidConfigError("must be at least 1", key="threads")
    return threads

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

import yaml

from utils import load_config, load_yaml_file, section
from scripts.backtest.windows import MODES
from scripts.errors import ConfigError
from scripts.rainfall import ALL_SCHEMES

REGRESSOR_KINDS = ("gbt", "gp")
PROTOCOLS = ("window", "repeated", "loo")


def _defaults() -> Dict[str, Any]:
    config = load_config()
    backtest = section(config, "backtest")
    search = section(config, "gbt").get("search", {}) or {}
    rainfall = section(config, "rainfall")
    return {
        "baseline": backtest.get("baseline", 2000),
        "offset": backtest.get("offset", 10),
        "mode": backtest.get("mode", "shifting"),
        "last_test_year": backtest.get("last_test_year", 2020),
        "repeats": backtest.get("repeats", 30),
        "split_ratio": backtest.get("split_ratio", 0.7),
        "regressor": backtest.get("regressor", "gbt"),
        "jobs": backtest.get("jobs", 1),
        "cycles": search.get("cycles", 100),
        "rain_scheme": rainfall.get("scheme", "sum3"),
    }


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated settings of one backtest experiment."""

    counties: Tuple[str, ...] = ()
    baseline: int = 2000
    offset: int = 10
    mode: str = "shifting"
    last_test_year: int = 2020
    protocol: str = "window"
    regressor: str = "gbt"
    cycles: int = 100
    repeats: int = 30
    split_ratio: float = 0.7
    rain: bool = False
    rain_scheme: str = "sum3"
    rain_grid: Optional[str] = None
    label_field: str = "eventLabel"
    seed: int = 0
    jobs: int = 1
    claims: Optional[str] = None
    cpi: Optional[str] = None
    schema: Optional[str] = None
    out: Optional[str] = None
    synthetic: bool = False
    synthetic_rows: int = 3000

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be one of {MODES}, got '{self.mode}'")
        if self.protocol not in PROTOCOLS:
            raise ConfigError("protocol", f"must be one of {PROTOCOLS}, got '{self.protocol}'")
        if self.regressor not in REGRESSOR_KINDS:
            raise ConfigError("regressor", f"must be one of {REGRESSOR_KINDS}, got '{self.regressor}'")
        if self.rain_scheme not in ALL_SCHEMES:
            raise ConfigError("rain_scheme", f"must be one of {ALL_SCHEMES}, got '{self.rain_scheme}'")
        if self.offset < 1:
            raise ConfigError("offset", f"must be >= 1, got {self.offset}")
        if self.last_test_year < self.baseline + self.offset:
            raise ConfigError(
                "last_test_year",
                f"must be >= baseline + offset ({self.baseline + self.offset}), got {self.last_test_year}",
            )
        for key in ("cycles", "repeats", "jobs", "synthetic_rows"):
            if getattr(self, key) < 1:
                raise ConfigError(key, f"must be >= 1, got {getattr(self, key)}")
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError("split_ratio", f"must lie in (0, 1), got {self.split_ratio}")
        if self.rain and not self.synthetic and not self.rain_grid:
            raise ConfigError("rain_grid", "a rain grid path is required when rain is enabled")
        if not self.synthetic and not self.claims:
            raise ConfigError("claims", "a claims path is required unless synthetic is set")

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "ExperimentConfig":
        """
        Builds a config from config.yaml defaults overlaid with `data`.

        Raises:
            ConfigError: On an unknown key or a value of the wrong type.
        """
        known = {f.name: f for f in fields(cls)}
        merged: Dict[str, Any] = _defaults()
        for key, value in (data or {}).items():
            if key not in known:
                raise ConfigError(key, "unknown experiment setting")
            merged[key] = value
        values = {}
        for key, value in merged.items():
            values[key] = _coerce(key, known[key].type, value)
        return cls(**values)

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        data = self.to_dict()
        data.update({k: v for k, v in overrides.items() if v is not None})
        return ExperimentConfig.from_mapping(data)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["counties"] = list(self.counties)
        return data


def _coerce(key: str, annotation, value):
    if value is None:
        return None
    try:
        if annotation in (int, "int"):
            if isinstance(value, bool):
                raise ValueError(value)
            if isinstance(value, int):
                return value
            return int(str(value).strip())
        if annotation in (float, "float"):
            return float(value)
        if annotation in (bool, "bool"):
            if isinstance(value, str):
                lowered = value.strip().lower()
                if lowered not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return lowered in ("true", "1", "yes")
            return bool(value)
        if annotation in (Tuple[str, ...], "Tuple[str, ...]"):
            if isinstance(value, str):
                items = value.split(",")
            elif isinstance(value, (list, tuple)):
                items = list(value)
            else:
                items = [value]
            return tuple(str(item).strip() for item in items if str(item).strip())
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(key, f"invalid value {value!r}")


def load_experiment(path: Optional[Path] = None, overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """
    Reads a YAML key-value experiment file and overlays explicit settings.

    Args:
        path (Optional[Path]): Experiment file; None uses config.yaml defaults only.
        overrides (Optional[Mapping[str, Any]]): Values that win over the file; None entries are ignored.

    Raises:
        ConfigError: If the file is missing or malformed, or a key is unknown or invalid.
    """
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            data = load_yaml_file(Path(path))
        except (FileNotFoundError, yaml.YAMLError) as e:
            raise ConfigError("config", str(e))
        if not isinstance(data, dict):
            raise ConfigError("config", "experiment file must be a key-value mapping")
    data = dict(data)
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ExperimentConfig.from_mapping(data)

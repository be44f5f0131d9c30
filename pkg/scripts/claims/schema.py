from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from utils import load_config, load_yaml_file, section
from scripts.errors import SchemaError

KINDS = ("continuous", "categorical", "date")
ROLES = ("predictor", "response", "key")

_ROOT = Path(__file__).resolve().parents[2]
DEFAULT_SCHEMA_PATH = _ROOT / section(load_config(), "claims").get("schema_file", "nfip_schema.yaml")


@dataclass(frozen=True)
class FieldSpec:
    """
    One entry of the schema registry.

    `value_range` holds numeric bounds for continuous fields and ISO date
    strings for date fields; either side may be None.
    """

    name: str
    kind: str
    role: str = "predictor"
    levels: Optional[Tuple[str, ...]] = None
    value_range: Optional[Tuple[object, object]] = None
    monetary: bool = False

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name.strip():
            raise ValueError("field name must be a non-empty string")
        if self.kind not in KINDS:
            raise ValueError(f"field '{self.name}': kind must be one of {KINDS}, got '{self.kind}'")
        if self.role not in ROLES:
            raise ValueError(f"field '{self.name}': role must be one of {ROLES}, got '{self.role}'")
        if self.monetary and self.kind != "continuous":
            raise ValueError(f"field '{self.name}': only continuous fields can be monetary")
        if self.levels is not None and self.kind != "categorical":
            raise ValueError(f"field '{self.name}': levels are only valid for categorical fields")

    @property
    def is_date(self) -> bool:
        return self.kind == "date"

    def to_dict(self) -> dict:
        data = {"kind": self.kind, "role": self.role, "monetary": self.monetary}
        if self.levels is not None:
            data["levels"] = list(self.levels)
        if self.value_range is not None:
            data["range"] = list(self.value_range)
        return data

    @classmethod
    def from_dict(cls, name: str, data: dict) -> "FieldSpec":
        levels = data.get("levels")
        value_range = data.get("range")
        return cls(
            name=name,
            kind=data.get("kind", "continuous"),
            role=data.get("role", "predictor"),
            levels=tuple(str(level) for level in levels) if levels is not None else None,
            value_range=tuple(value_range) if value_range is not None else None,
            monetary=bool(data.get("monetary", False)),
        )


@dataclass(frozen=True)
class SchemaRegistry:
    """Field name to FieldSpec map, in declaration order, with exactly one response."""

    fields: Dict[str, FieldSpec] = field(default_factory=dict)

    def __post_init__(self):
        responses = [spec for spec in self.fields.values() if spec.role == "response"]
        if len(responses) != 1:
            raise SchemaError(
                f"schema must declare exactly one response field, found {len(responses)}"
            )
        response = responses[0]
        if response.kind != "continuous" or not response.monetary:
            raise SchemaError(
                f"response field '{response.name}' must be continuous and monetary"
            )

    @property
    def response(self) -> str:
        return next(spec.name for spec in self.fields.values() if spec.role == "response")

    @property
    def names(self) -> List[str]:
        return list(self.fields)

    def __contains__(self, name: str) -> bool:
        return name in self.fields

    def __getitem__(self, name: str) -> FieldSpec:
        return self.fields[name]

    def of_kind(self, kind: str, role: Optional[str] = "predictor") -> List[str]:
        return [
            spec.name
            for spec in self.fields.values()
            if spec.kind == kind and (role is None or spec.role == role)
        ]

    def monetary_fields(self) -> List[str]:
        return [spec.name for spec in self.fields.values() if spec.monetary]

    def to_dict(self) -> dict:
        return {
            "response": self.response,
            "fields": {name: spec.to_dict() for name, spec in self.fields.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SchemaRegistry":
        raw_fields = data.get("fields") or {}
        if not raw_fields:
            raise SchemaError("schema declares no fields")
        fields = {}
        for name, spec in raw_fields.items():
            try:
                fields[str(name)] = FieldSpec.from_dict(str(name), spec or {})
            except ValueError as e:
                raise SchemaError(str(e)) from e
        declared = data.get("response")
        if declared is not None and (
            declared not in fields or fields[declared].role != "response"
        ):
            raise SchemaError(
                f"declared response '{declared}' is not a field with role 'response'"
            )
        return cls(fields=fields)


def load_schema(path: Optional[Path] = None) -> SchemaRegistry:
    """
    Loads a schema registry from YAML.

    Args:
        path (Optional[Path]): Schema file. Defaults to the bundled NFIP schema.

    Returns:
        SchemaRegistry: The validated registry.

    Raises:
        SchemaError: If the file is missing, unreadable, or violates the registry invariants.
    """
    path = Path(path) if path is not None else DEFAULT_SCHEMA_PATH
    try:
        data = load_yaml_file(path)
    except FileNotFoundError as e:
        raise SchemaError(f"schema file not found: {path}") from e
    except Exception as e:
        raise SchemaError(f"schema file {path} could not be parsed: {e}") from e
    return SchemaRegistry.from_dict(data)

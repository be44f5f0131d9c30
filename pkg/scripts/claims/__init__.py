"""
Claims ingestion: schema registry, columnar claims table, and preprocessing.

Usage:
    from scripts.claims import load_schema, read_claims, adjust_inflation
    schema = load_schema()
    table = read_claims("claims.csv", schema)
"""

from .schema import FieldSpec, SchemaRegistry, load_schema
from .table import (
    ClaimTable,
    Flag,
    MISSING_TOKEN,
    parse_claims,
    serialize_claims,
    serialize_flags,
    parse_flags,
    read_claims,
    write_claims,
    loss_years,
    missing_profile,
)
from .preprocessing import (
    CpiTable,
    parse_cpi,
    read_cpi,
    adjust_inflation,
    fix_construction_dates,
    month_index,
    month_index_array,
    derive_date_features,
)

__all__ = [
    "FieldSpec",
    "SchemaRegistry",
    "load_schema",
    "ClaimTable",
    "Flag",
    "MISSING_TOKEN",
    "parse_claims",
    "serialize_claims",
    "serialize_flags",
    "parse_flags",
    "read_claims",
    "write_claims",
    "loss_years",
    "missing_profile",
    "CpiTable",
    "parse_cpi",
    "read_cpi",
    "adjust_inflation",
    "fix_construction_dates",
    "month_index",
    "month_index_array",
    "derive_date_features",
]

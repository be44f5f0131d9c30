import io

import numpy as np
import pytest

from scripts.claims import (
    CpiTable,
    FieldSpec,
    SchemaRegistry,
    adjust_inflation,
    derive_date_features,
    fix_construction_dates,
    load_schema,
    loss_years,
    missing_profile,
    month_index,
    month_index_array,
    parse_claims,
    parse_cpi,
    parse_flags,
    serialize_claims,
    serialize_flags,
)
from scripts.claims.table import CONSTRUCTION_REPAIRED, COERCION_FAILED, NEGATIVE_RESPONSE, table_to_text
from scripts.errors import SchemaError

pytestmark = pytest.mark.unit

RESPONSE = "amountPaidOnBuildingClaim"


def _claim(amount="1000", loss="2005-06-01", built="1990-01-01", **extra):
    row = {
        RESPONSE: amount,
        "dateOfLoss": loss,
        "originalConstructionDate": built,
        "yearOfLoss": loss[:4] if loss else "",
        "floodZone": "AE",
        "latitude": "29.7",
        "longitude": "-95.3",
    }
    row.update(extra)
    return row


# ─── SCHEMA ───────────────────────────────────────────────────────────────────


def test_bundled_schema_has_one_monetary_response(schema):
    assert schema.response == RESPONSE
    assert RESPONSE in schema.monetary_fields()
    assert "countyCode" not in schema.of_kind("categorical")


def test_schema_without_response_is_rejected():
    with pytest.raises(SchemaError):
        SchemaRegistry(fields={"x": FieldSpec("x", "continuous")})


def test_schema_file_missing(tmp_path):
    with pytest.raises(SchemaError):
        load_schema(tmp_path / "absent.yaml")


def test_field_spec_rejects_levels_on_continuous():
    with pytest.raises(ValueError):
        FieldSpec("x", "continuous", levels=("a",))


# ─── PARSING ──────────────────────────────────────────────────────────────────


def test_blank_amount_is_masked(parse):
    table = parse([_claim("100"), _claim(""), _claim("300")])
    assert table.n == 3
    assert table.mask[RESPONSE].tolist() == [False, True, False]
    assert table.columns[RESPONSE][0] == 100.0


def test_header_only_file_gives_empty_table(parse):
    table = parse([], header=[RESPONSE, "dateOfLoss", "floodZone"])
    assert table.n == 0
    assert missing_profile(table)["rows"] == 0


def test_unparseable_continuous_cell_is_missing_and_counted(parse):
    table = parse([_claim(latitude="ABC"), _claim()])
    assert table.mask["latitude"].tolist() == [True, False]
    assert table.coercion_warnings == 1
    assert [f.code for f in table.flags if f.field == "latitude"] == [COERCION_FAILED]


def test_missing_response_column_is_fatal(schema):
    with pytest.raises(SchemaError):
        parse_claims(io.StringIO("latitude,longitude\n1,2\n"), schema)


def test_duplicate_column_is_fatal(schema):
    with pytest.raises(SchemaError):
        parse_claims(io.StringIO(f"{RESPONSE},{RESPONSE}\n1,2\n"), schema)


def test_zero_byte_file_is_fatal(schema):
    with pytest.raises(SchemaError):
        parse_claims(io.StringIO(""), schema)


def test_negative_response_is_flagged_and_masked(parse):
    table = parse([_claim("-5"), _claim("7")])
    assert table.mask[RESPONSE].tolist() == [True, False]
    assert table.flagged_rows(NEGATIVE_RESPONSE).tolist() == [0]


def test_unknown_columns_are_ignored(parse):
    table = parse([_claim(notInSchema="x")])
    assert "notInSchema" not in table.columns


def test_serialize_round_trip_is_exact(parse, schema):
    table = parse([_claim("1234.5678901", latitude="0.1"), _claim("", loss=""), _claim("3e-7")])
    again = parse_claims(io.StringIO(table_to_text(table)), schema)
    assert again.field_names == table.field_names
    for name in table.field_names:
        assert again.kinds[name] == table.kinds[name]
        np.testing.assert_array_equal(again.mask[name], table.mask[name])
        observed = ~table.mask[name]
        np.testing.assert_array_equal(again.columns[name][observed], table.columns[name][observed])


def test_flags_sidecar_round_trip(parse):
    table = parse([_claim(latitude="ABC"), _claim("-1")])
    buffer = io.StringIO()
    serialize_flags(table, buffer)
    buffer.seek(0)
    assert parse_flags(buffer) == list(table.flags)


def test_take_keeps_flags_with_their_rows(parse):
    table = parse([_claim(), _claim(latitude="ABC")])
    subset = table.take([1])
    assert subset.n == 1
    assert [f.row for f in subset.flags] == [0]


def test_loss_years_fall_back_to_date(parse):
    table = parse([_claim(loss="2003-02-01", yearOfLoss=""), _claim(loss="", yearOfLoss="2007"), _claim(loss="", yearOfLoss="")])
    assert loss_years(table).tolist() == [2003, 2007, -1]


def test_missing_profile_counts_per_record(parse):
    table = parse([_claim(latitude="", longitude=""), _claim()])
    profile = missing_profile(table)
    assert profile["per_field"]["latitude"] == pytest.approx(0.5)
    assert profile["mean_missing_per_record"] == pytest.approx(1.0)


# ─── INFLATION ────────────────────────────────────────────────────────────────


@pytest.mark.parametrize(
    "amount, cpi_year, cpi_base, expected",
    [(100.0, 100.0, 200.0, 200.0), (0.0, 150.0, 200.0, 0.0), (50.0, 200.0, 200.0, 50.0)],
)
def test_adjust_inflation(parse, amount, cpi_year, cpi_base, expected):
    table = parse([_claim(str(amount))])
    cpi = CpiTable(index={2005: cpi_year, 2020: cpi_base}, base_year=2020)
    adjusted = adjust_inflation(table, cpi)
    assert adjusted.columns[RESPONSE][0] == pytest.approx(expected)


def test_uncovered_year_keeps_value_and_is_flagged(parse):
    table = parse([_claim("100", loss="1999-01-01")])
    cpi = CpiTable(index={2020: 200.0}, base_year=2020)
    adjusted = adjust_inflation(table, cpi)
    assert adjusted.columns[RESPONSE][0] == 100.0
    assert any(f.code == "cpi_year_uncovered" for f in adjusted.flags)


def test_parse_cpi_skips_header():
    cpi = parse_cpi(io.StringIO("year,cpi\n2019,255.7\n2020,258.8\n"), base_year=2020)
    assert cpi.factor(2019) == pytest.approx(258.8 / 255.7)


def test_cpi_without_base_year_is_invalid():
    with pytest.raises(ValueError):
        CpiTable(index={2019: 1.0}, base_year=2020)


# ─── CONSTRUCTION DATES ───────────────────────────────────────────────────────


@pytest.mark.parametrize(
    "loss, built, expected",
    [
        ("1980-06-01", "2048-07-25", "1948-07-25"),
        ("2000-01-01", "1990-01-01", "1990-01-01"),
        ("1975-01-01", "2175-01-01", "1975-01-01"),
    ],
)
def test_fix_construction_dates(parse, loss, built, expected):
    fixed = fix_construction_dates(parse([_claim(loss=loss, built=built)]))
    assert str(fixed.columns["originalConstructionDate"][0]) == expected


def test_repaired_dates_are_flagged(parse):
    fixed = fix_construction_dates(parse([_claim(loss="1980-06-01", built="2048-07-25"), _claim()]))
    assert fixed.flagged_rows(CONSTRUCTION_REPAIRED).tolist() == [0]


def test_repair_cap_flags_remaining_inconsistency(parse):
    fixed = fix_construction_dates(parse([_claim(loss="1975-01-01", built="2275-01-01")]), repair_cap=1)
    assert str(fixed.columns["originalConstructionDate"][0]) == "2175-01-01"
    assert fixed.flagged_rows("construction_repair_capped").tolist() == [0]


def test_fix_construction_dates_without_date_columns(parse):
    table = parse([{RESPONSE: "100.5"}, {RESPONSE: "2000"}])
    fixed = fix_construction_dates(table)
    assert fixed.n == 2
    assert "originalConstructionDate" not in fixed.columns
    assert fixed.flags == table.flags


# ─── MONTH INDEX ──────────────────────────────────────────────────────────────


@pytest.mark.parametrize("day, expected", [("1960-01-15", 0), ("1960-02-01", 1), ("2020-01-01", 720)])
def test_month_index(day, expected):
    assert month_index(np.datetime64(day)) == expected


def test_month_index_array_matches_scalar():
    days = np.array(["1960-01-15", "1999-12-31", "NaT"], dtype="datetime64[D]")
    out = month_index_array(days)
    assert out[:2].tolist() == [0.0, float(month_index(np.datetime64("1999-12-31")))]
    assert np.isnan(out[2])


def test_derived_date_features(parse):
    table = derive_date_features(parse([_claim(loss="2010-01-01", built="2000-01-01")]))
    assert table.columns["dateOfLoss_mi"][0] == 600.0
    assert table.columns["buildingAgeYears"][0] == pytest.approx(3653 / 365.25)
    assert table.kind("buildingAgeYears") == "continuous"

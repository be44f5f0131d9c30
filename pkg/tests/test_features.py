import io

import numpy as np
import pytest

from scripts.features import (
    decode_categories,
    fit_levels,
    one_hot,
    read_feature_matrix,
    split,
    standardize_apply,
    standardize_fit,
    write_feature_matrix,
)

pytestmark = pytest.mark.unit

RESPONSE = "amountPaidOnBuildingClaim"


def _zones(parse, zones, areas=None):
    rows = []
    for i, zone in enumerate(zones):
        row = {RESPONSE: str(100 * (i + 1)), "floodZone": zone}
        if areas is not None:
            row["totalBuildingInsuranceCoverage"] = str(areas[i])
        rows.append(row)
    return parse(rows)


# ─── ENCODING ─────────────────────────────────────────────────────────────────


def test_one_hot_indicator_columns(parse):
    matrix = one_hot(_zones(parse, ["A", "B", "A"]))
    assert matrix.names == ["floodZone.A", "floodZone.B"]
    assert matrix.values[:, 0].tolist() == [1.0, 0.0, 1.0]
    assert matrix.values[:, 1].tolist() == [0.0, 1.0, 0.0]
    assert matrix.y.tolist() == [100.0, 200.0, 300.0]


def test_response_is_not_a_predictor(parse):
    matrix = one_hot(_zones(parse, ["A", "B"]))
    assert RESPONSE not in matrix.names


def test_level_unseen_in_training_encodes_to_zeros(parse):
    levels = fit_levels(_zones(parse, ["A", "B"]))
    matrix = one_hot(_zones(parse, ["C"]), levels)
    assert matrix.values.tolist() == [[0.0, 0.0]]


def test_decode_inverts_one_hot(parse):
    matrix = one_hot(_zones(parse, ["X", "AE", "X", "VE"]))
    assert decode_categories(matrix)["floodZone"].tolist() == ["X", "AE", "X", "VE"]


def test_missing_categorical_cell_must_be_imputed_first(parse):
    with pytest.raises(ValueError):
        one_hot(_zones(parse, ["A", ""]))


# ─── STANDARDIZATION ──────────────────────────────────────────────────────────


def test_standardize_small_column(parse):
    matrix = one_hot(_zones(parse, ["A", "A", "A"], areas=[1, 2, 3]))
    scaler = standardize_fit(matrix, [0, 1, 2])
    assert scaler.mean.tolist() == [2.0]
    assert scaler.std.tolist() == [1.0]
    scaled = standardize_apply(matrix, scaler)
    column = matrix.names.index("totalBuildingInsuranceCoverage")
    assert scaled.values[:, column].tolist() == [-1.0, 0.0, 1.0]


def test_constant_column_is_degenerate_and_maps_to_zero(parse):
    train = one_hot(_zones(parse, ["A", "A"], areas=[5, 5]))
    scaler = standardize_fit(train, [0, 1])
    assert scaler.degenerate.tolist() == [True]
    other = one_hot(_zones(parse, ["A"], areas=[7]), fit_levels(train))
    column = other.names.index("totalBuildingInsuranceCoverage")
    assert standardize_apply(other, scaler).values[0, column] == 0.0


def test_indicators_are_not_scaled(parse):
    matrix = one_hot(_zones(parse, ["A", "B", "A"], areas=[10, 20, 60]))
    scaled = standardize_apply(matrix, standardize_fit(matrix, [0, 1, 2]))
    indicators = ~matrix.continuous_columns()
    np.testing.assert_array_equal(scaled.values[:, indicators], matrix.values[:, indicators])


def test_training_rows_have_zero_mean_and_unit_sd(parse, rng):
    areas = rng.uniform(1e4, 5e5, size=40).round(2)
    matrix = one_hot(_zones(parse, ["A"] * 40, areas=areas))
    train, _ = split(matrix.n, 0.7, seed=1)
    scaled = standardize_apply(matrix, standardize_fit(matrix, train))
    column = matrix.names.index("totalBuildingInsuranceCoverage")
    assert scaled.values[train, column].mean() == pytest.approx(0.0, abs=1e-9)
    assert scaled.values[train, column].std(ddof=1) == pytest.approx(1.0, rel=1e-9)


def test_standardize_fit_needs_rows(parse):
    matrix = one_hot(_zones(parse, ["A"], areas=[1]))
    with pytest.raises(ValueError):
        standardize_fit(matrix, [])


# ─── SPLIT ────────────────────────────────────────────────────────────────────


def test_split_sizes_and_partition():
    train, test = split(10, 0.7, seed=0)
    assert (len(train), len(test)) == (7, 3)
    assert sorted(train.tolist() + test.tolist()) == list(range(10))


def test_split_is_seeded():
    first = split(50, 0.7, seed=4)
    second = split(50, 0.7, seed=4)
    other = split(50, 0.7, seed=5)
    np.testing.assert_array_equal(first[0], second[0])
    assert not np.array_equal(first[0], other[0])


@pytest.mark.parametrize("ratio", [0.0, 1.0, -0.2, 1.5])
def test_split_rejects_bad_ratio(ratio):
    with pytest.raises(ValueError):
        split(10, ratio)


def test_split_needs_two_rows():
    with pytest.raises(ValueError):
        split(1, 0.5)


# ─── MATRIX FILE ──────────────────────────────────────────────────────────────


def test_feature_matrix_file(parse):
    matrix = one_hot(_zones(parse, ["A", "B"], areas=[0.1, 123456.789]))
    buffer = io.StringIO()
    write_feature_matrix(matrix, buffer)
    buffer.seek(0)
    again = read_feature_matrix(buffer)
    assert again.columns == matrix.columns
    np.testing.assert_array_equal(again.values, matrix.values)
    np.testing.assert_array_equal(again.y, matrix.y)

import numpy as np
import pytest

from elimpute.dataset import (
    Dataset,
    load_column_config,
    load_csv,
    save_column_config,
    save_csv,
    validate_conditions,
)
from elimpute.errors import DataValidationError, ParseError, SchemaError
from elimpute.kernel_smoothing import KernelSpec


def write_inputs(tmp_path, csv_text, config_text="x = x\ny = y\n"):
    data_path = tmp_path / "data.csv"
    columns_path = tmp_path / "columns.txt"
    data_path.write_text(csv_text, encoding="utf-8")
    columns_path.write_text(config_text, encoding="utf-8")
    return data_path, columns_path


def test_from_arrays_derives_delta(tiny_data):
    """Missing y rows get delta 0 and NaN values"""
    assert tiny_data.n == 6
    assert tiny_data.n_complete == 4
    assert tiny_data.missing_index.tolist() == [4, 5]
    assert np.isnan(tiny_data.y[4:, 0]).all()
    assert tiny_data.delta.tolist() == [1, 1, 1, 1, 0, 0]


def test_arrays_are_read_only(tiny_data):
    """Dataset arrays cannot be written"""
    with pytest.raises(ValueError):
        tiny_data.x[0, 0] = 5.0


def test_partial_rows_are_demoted():
    """A y row with some NA cells counts as fully missing"""
    y = np.array([[1.0, 2.0], [np.nan, 1.0], [3.0, 4.0]])
    data = Dataset.from_arrays(np.arange(3.0)[:, None], y)
    assert data.delta.tolist() == [1, 0, 1]
    assert data.demoted_rows == 1


def test_no_complete_rows_rejected():
    """A dataset with no complete row is rejected"""
    with pytest.raises(DataValidationError):
        Dataset.from_arrays(np.zeros((3, 1)), np.full(3, np.nan))


def test_binary_column_checked():
    """Binary covariates must hold only 0 and 1"""
    with pytest.raises(SchemaError):
        Dataset.from_arrays(np.array([[0.0], [2.0]]), np.array([1.0, 2.0]), x_kinds=["binary"])


def test_subset_allows_repeats(tiny_data):
    """subset keeps repeated indices for bootstrap resamples"""
    sub = tiny_data.subset([0, 0, 4])
    assert sub.n == 3
    assert sub.delta.tolist() == [1, 1, 0]
    assert sub.x[:, 0].tolist() == [0.0, 0.0, 0.5]


def test_complete_cases(tiny_data):
    """complete_cases drops missing rows"""
    cc = tiny_data.complete_cases()
    assert cc.n == 4
    assert cc.n_missing == 0


def test_load_csv(tmp_path):
    """CSV rows with NA responses get delta 0"""
    data_path, columns_path = write_inputs(tmp_path, "x,y\n1.0,2.0\n2.0,NA\n3.0,4.5\n")
    data = load_csv(data_path, columns_path)
    assert data.n == 3
    assert data.delta.tolist() == [1, 0, 1]
    assert data.y[2, 0] == 4.5


def test_load_csv_parse_error(tmp_path):
    """Non-numeric cells raise ParseError with row and column"""
    data_path, columns_path = write_inputs(tmp_path, "x,y\n1.0,2.0\n2.0,abc\n")
    with pytest.raises(ParseError) as excinfo:
        load_csv(data_path, columns_path)
    assert excinfo.value.row == 2
    assert excinfo.value.column == "y"


@pytest.mark.parametrize("cell", [" NA", "NA ", "na", "N/A"])
def test_only_the_exact_na_token_marks_missing(tmp_path, cell):
    """Padded or differently spelled missing markers are parse errors"""
    data_path, columns_path = write_inputs(tmp_path, f"x,y\n1.0,2.0\n2.0,{cell}\n")
    with pytest.raises(ParseError) as excinfo:
        load_csv(data_path, columns_path)
    assert excinfo.value.row == 2


def test_missing_x_rejected(tmp_path):
    """Missing covariates are a schema error"""
    data_path, columns_path = write_inputs(tmp_path, "x,y\nNA,2.0\n2.0,3.0\n")
    with pytest.raises(SchemaError):
        load_csv(data_path, columns_path)


def test_absent_column_rejected(tmp_path):
    """Configured columns must exist in the header"""
    data_path, columns_path = write_inputs(tmp_path, "a,y\n1.0,2.0\n", "x = x\ny = y\n")
    with pytest.raises(SchemaError):
        load_csv(data_path, columns_path)


def test_column_config_kinds(tmp_path):
    """Column config parses roles, kinds and comments"""
    path = tmp_path / "columns.txt"
    path.write_text("# comment\nage = x\nsmoker = x:binary\nincome = y\n", encoding="utf-8")
    config = load_column_config(path)
    assert config.x_names == ["age", "smoker"]
    assert config.x_kinds == ["continuous", "binary"]
    assert config.y_names == ["income"]


def test_column_config_bad_role(tmp_path):
    """Unknown roles are a schema error"""
    path = tmp_path / "columns.txt"
    path.write_text("age = z\n", encoding="utf-8")
    with pytest.raises(SchemaError):
        load_column_config(path)


def test_save_and_load_reproduce_values(tmp_path, mar_data):
    """save_csv and load_csv reproduce the dataset"""
    save_csv(mar_data, tmp_path / "d.csv")
    save_column_config(mar_data, tmp_path / "c.txt")
    loaded = load_csv(tmp_path / "d.csv", tmp_path / "c.txt")
    np.testing.assert_array_equal(loaded.x, mar_data.x)
    np.testing.assert_array_equal(loaded.delta, mar_data.delta)
    np.testing.assert_array_equal(loaded.y[loaded.complete_index], mar_data.y[mar_data.complete_index])


def test_validate_conditions_flags_small_bandwidth(mar_data):
    """Tiny bandwidth fails the n h^d check"""
    report = validate_conditions(mar_data, KernelSpec(bandwidth=1e-4))
    assert not report.ok
    assert any("n * h^d" in w for w in report.warnings)


def test_validate_conditions_flags_second_order_kernel_in_four_dimensions():
    """Four smoothed coordinates with q=2 ask for a higher-order kernel"""
    rng = np.random.default_rng(3)
    data = Dataset.from_arrays(rng.normal(size=(200, 4)), rng.normal(size=200))
    report = validate_conditions(data, KernelSpec(bandwidth=1.0, order=2))
    assert report.kernel_dim == 4
    assert any("order q > 2" in w for w in report.warnings)
    higher = validate_conditions(data, KernelSpec(bandwidth=1.0, order=4))
    assert not any("order q > 2" in w for w in higher.warnings)


def test_validate_conditions_binary_columns_do_not_count_as_smoothed():
    """Three continuous and one binary covariate stay below the high-order threshold"""
    rng = np.random.default_rng(4)
    x = np.column_stack([rng.normal(size=(200, 3)), rng.integers(0, 2, 200)])
    data = Dataset.from_arrays(x, rng.normal(size=200), x_kinds=["continuous"] * 3 + ["binary"])
    report = validate_conditions(data, KernelSpec(bandwidth=1.0, order=2))
    assert report.kernel_dim == 3
    assert not any("order q > 2" in w for w in report.warnings)


def test_validate_conditions_flags_few_complete_cases():
    """Two percent complete cases triggers the low-propensity warning"""
    rng = np.random.default_rng(5)
    y = rng.normal(size=500)
    y[10:] = np.nan
    data = Dataset.from_arrays(rng.normal(size=(500, 1)), y)
    report = validate_conditions(data, KernelSpec(bandwidth=0.5))
    assert report.complete_fraction == pytest.approx(0.02)
    assert any("complete cases" in w for w in report.warnings)


def test_validate_conditions_ok(mar_data):
    """A reasonable bandwidth passes every check"""
    report = validate_conditions(mar_data, KernelSpec(bandwidth=0.5))
    assert report.ok
    assert report.kernel_dim == 1

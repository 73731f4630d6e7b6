import numpy as np
import pandas as pd
import pytest

from elimpute.dataset import save_column_config, save_csv
from elimpute.errors import SchemaError
from elimpute.imputation import impute
from elimpute.kernel_smoothing import KernelSpec
from elimpute.schemas import CalibrationResult, Interval, StudyReport, StudyRow
from elimpute.storage import (
    calibration_items,
    read_extended_sample,
    read_key_values,
    write_calibration,
    write_extended_sample,
    write_fit_report,
    write_key_values,
    write_study_report,
)


@pytest.fixture
def saved_inputs(tmp_path, mar_data):
    data_path, columns_path = tmp_path / "data.csv", tmp_path / "columns.txt"
    save_csv(mar_data, data_path)
    save_column_config(mar_data, columns_path)
    return data_path, columns_path


def test_key_values_keep_floats_exact(tmp_path):
    """Floats round-trip exactly through key=value files"""
    path = tmp_path / "values.txt"
    write_key_values(path, [("a", 0.1 + 0.2), ("flag", True), ("list", [1, 2, 3])])
    values = read_key_values(path)
    assert float(values["a"]) == 0.1 + 0.2
    assert values["flag"] == "true"
    assert values["list"] == "1,2,3"


def test_read_key_values_rejects_garbage(tmp_path):
    """Lines without '=' are a schema error"""
    path = tmp_path / "bad.txt"
    path.write_text("# header\nno separator here\n", encoding="utf-8")
    with pytest.raises(SchemaError):
        read_key_values(path)


def test_extended_sample_file(tmp_path, mar_data, saved_inputs):
    """Extended sample file keeps draws, kernel and seed"""
    data_path, columns_path = saved_inputs
    es = impute(mar_data, KernelSpec(bandwidth=0.37, order=4), kappa=6, seed=12)
    out = tmp_path / "data.imputed"
    write_extended_sample(es, out, data_path, columns_path)

    header = read_key_values(out)
    assert header["kappa"] == "6"
    assert header["seed"] == "12"
    assert f"row.{es.missing_index[0]}" in header

    loaded = read_extended_sample(out)
    np.testing.assert_array_equal(loaded.draws, es.draws)
    assert loaded.kernel == es.kernel
    assert loaded.seed == 12


def test_extended_sample_format_checked(tmp_path):
    """Unknown file format is rejected"""
    path = tmp_path / "other.txt"
    write_key_values(path, [("format", "something-else")])
    with pytest.raises(SchemaError):
        read_extended_sample(path)


def test_calibration_items(tmp_path):
    """Calibration results flatten to key=value items"""
    result = CalibrationResult(
        method="bootstrap", alpha=0.05, estimate=[1.0], threshold=3.1, draws=400,
        intervals=[Interval(name="mean", lower=0.5, upper=1.5, upper_at_hull=True)],
        diagnostics={"discarded": 2}, warnings=["mean: endpoint at hull boundary"],
    )
    items = dict(calibration_items(result))
    assert items["q_star"] == 3.1
    assert items["B"] == 400
    assert items["interval.mean.lower"] == 0.5
    assert items["interval.mean.at_hull"] == "lower=false;upper=true"
    assert items["diagnostics.discarded"] == 2

    path = tmp_path / "calibration.txt"
    write_calibration(result, path)
    assert read_key_values(path)["calibration"] == "bootstrap"


def test_fit_report_with_table(tmp_path):
    """Fit report appends the table as comments"""
    path = tmp_path / "fit.txt"
    write_fit_report(path, [("theta.slope", 0.25)], table="a b\n1 2")
    text = path.read_text(encoding="utf-8")
    assert text.splitlines()[-2:] == ["# a b", "# 1 2"]
    assert read_key_values(path) == {"theta.slope": "0.25"}


def test_study_report_files(tmp_path):
    """Study report writes CSV and labelled text"""
    report = StudyReport(
        scenario="corr-a", n=100, replications=10, B=400, kappa=20, seed=1, alpha=0.05,
        calibration="bootstrap", truth_source="published",
        rows=[StudyRow(method="nimpute", parameter="rho", truth=0.676, bias=0.01, sd=0.1,
                       mse=0.0101, coverage=0.9, ci_length=0.4, used=10)],
    )
    write_study_report(report, tmp_path / "study.csv", tmp_path / "study.txt")
    frame = pd.read_csv(tmp_path / "study.csv")
    assert frame.loc[0, "method"] == "nimpute"
    assert frame.loc[0, "coverage"] == pytest.approx(0.9)
    assert "N. imputation" in (tmp_path / "study.txt").read_text(encoding="utf-8")

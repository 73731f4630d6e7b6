"""
Plain-text artifacts: the extended-sample file, key=value fit and
calibration reports, and study reports as CSV plus an aligned table.

Floats are written with repr so that reading a file back reproduces the
values bit for bit.
"""
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from .dataset import load_csv
from .errors import SchemaError
from .imputation import ExtendedSample
from .kernel_smoothing import KernelSpec
from .schemas import CalibrationResult, StudyReport
from .simulation import format_report, report_frame

logger = logging.getLogger(__name__)

EXTENDED_SAMPLE_FORMAT = "elimpute-extended-sample"
FORMAT_VERSION = "1"
PathLike = Union[str, Path]


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (list, tuple, np.ndarray)):
        return ",".join(_format(v) for v in value)
    return str(value)


def format_key_values(items: Iterable[Tuple[str, object]]) -> str:
    return "".join(f"{key}={_format(value)}\n" for key, value in items)


def write_key_values(path: PathLike, items: Iterable[Tuple[str, object]]) -> None:
    Path(path).write_text(format_key_values(items), encoding="utf-8")


def read_key_values(path: PathLike) -> Dict[str, str]:
    """Ordered key=value pairs; blank lines and '#' comments are skipped"""
    values: Dict[str, str] = {}
    for number, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise SchemaError(f"{path}, line {number}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def write_extended_sample(es: ExtendedSample, path: PathLike, data_path: PathLike, columns_path: PathLike) -> None:
    """Header (source files, seed, kappa, kernel) and one donor list per missing row"""
    kernel = es.kernel or KernelSpec()
    items: List[Tuple[str, object]] = [
        ("format", EXTENDED_SAMPLE_FORMAT),
        ("version", FORMAT_VERSION),
        ("data", str(data_path)),
        ("columns", str(columns_path)),
        ("seed", es.seed),
        ("kappa", es.kappa),
        ("bandwidth", kernel.bandwidth),
        ("order", kernel.order),
        ("standardize", kernel.standardize),
        ("n", es.n),
        ("n_complete", es.base.n_complete),
        ("missing", es.base.n_missing),
        ("pooled_rows", list(es.pooled_rows)),
        ("degenerate_rows", list(es.degenerate_rows)),
    ]
    items += [(f"row.{int(row)}", [int(d) for d in donors]) for row, donors in zip(es.missing_index, es.draws)]
    write_key_values(path, items)


def _int_list(text: str) -> List[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def read_extended_sample(path: PathLike) -> ExtendedSample:
    """Rebuild an ExtendedSample, reloading the dataset named in the header"""
    values = read_key_values(path)
    if values.get("format") != EXTENDED_SAMPLE_FORMAT:
        raise SchemaError(f"{path} is not an extended-sample file")
    base_dir = Path(path).parent

    def resolve(name: str) -> Path:
        candidate = Path(values[name])
        return candidate if candidate.is_absolute() or candidate.exists() else base_dir / candidate

    data = load_csv(resolve("data"), resolve("columns"))
    kappa = int(values["kappa"])
    rows = {int(key.split(".", 1)[1]): _int_list(value) for key, value in values.items() if key.startswith("row.")}
    if sorted(rows) != data.missing_index.tolist():
        raise SchemaError(f"{path}: donor rows do not match the missing rows of {values['data']}")
    draws = np.array([rows[i] for i in data.missing_index], dtype=np.int64).reshape(-1, kappa)
    kernel = KernelSpec(
        bandwidth=float(values["bandwidth"]),
        order=int(values["order"]),
        standardize=values.get("standardize", "true") == "true",
    )
    return ExtendedSample(
        base=data, kappa=kappa, draws=draws, kernel=kernel, seed=int(values["seed"]),
        pooled_rows=tuple(_int_list(values.get("pooled_rows", ""))),
        degenerate_rows=tuple(_int_list(values.get("degenerate_rows", ""))),
    )


def calibration_items(result: CalibrationResult, prefix: str = "") -> List[Tuple[str, object]]:
    items: List[Tuple[str, object]] = [
        (f"{prefix}calibration", result.method),
        (f"{prefix}alpha", result.alpha),
    ]
    if result.threshold is not None:
        items.append((f"{prefix}q_star", result.threshold))
    if result.draws is not None:
        items.append((f"{prefix}{'B' if result.method == 'bootstrap' else 'M'}", result.draws))
    items += [(f"{prefix}diagnostics.{key}", value) for key, value in result.diagnostics.items()]
    for interval in result.intervals:
        items += [
            (f"{prefix}interval.{interval.name}.lower", interval.lower),
            (f"{prefix}interval.{interval.name}.upper", interval.upper),
        ]
        if interval.lower_at_hull or interval.upper_at_hull:
            items.append((f"{prefix}interval.{interval.name}.at_hull",
                          f"lower={_format(interval.lower_at_hull)};upper={_format(interval.upper_at_hull)}"))
    items += [(f"{prefix}warning.{k}", message) for k, message in enumerate(result.warnings)]
    return items


def write_calibration(result: CalibrationResult, path: PathLike) -> None:
    write_key_values(path, calibration_items(result))


def write_fit_report(path: PathLike, items: List[Tuple[str, object]], table: Optional[str] = None) -> None:
    """key=value report, optionally followed by a '#'-commented text table"""
    write_key_values(path, items)
    if table:
        with open(path, "a", encoding="utf-8") as handle:
            handle.write("".join(f"# {line}\n" for line in table.rstrip("\n").splitlines()))


def write_study_report(report: StudyReport, csv_path: PathLike, text_path: Optional[PathLike] = None) -> None:
    report_frame(report).to_csv(csv_path, index=False, float_format="%.10g")
    if text_path is not None:
        Path(text_path).write_text(format_report(report), encoding="utf-8")
    logger.info(f"Study report written to {csv_path}")

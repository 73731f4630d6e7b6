"""
Partially missing samples: the Dataset model, CSV ingestion/serialization and
the data-condition diagnostics run before smoothing.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import DataValidationError, ParseError, SchemaError
from .schemas import ColumnConfig, ColumnSpec

if TYPE_CHECKING:
    from .kernel_smoothing import KernelSpec

logger = logging.getLogger(__name__)

MISSING_TOKEN = "NA"
LOW_COMPLETE_FRACTION = 0.05
KINDS = ("continuous", "binary")


def _readonly(values: np.ndarray) -> np.ndarray:
    values.setflags(write=False)
    return values


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    n rows of always-observed X, possibly missing Y and the indicator delta.

    Y rows with delta = 0 are stored as NaN. Arrays are read-only, so a Dataset
    can be shared between workers.
    """

    x: np.ndarray
    y: np.ndarray
    delta: np.ndarray
    x_names: Tuple[str, ...] = ()
    y_names: Tuple[str, ...] = ()
    x_kinds: Tuple[str, ...] = ()
    demoted_rows: int = 0

    def __post_init__(self):
        x = np.array(self.x, dtype=float)
        y = np.array(self.y, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if y.ndim == 1:
            y = y[:, None]
        delta = np.asarray(self.delta).astype(np.int8).ravel()

        if x.ndim != 2 or y.ndim != 2:
            raise DataValidationError("x and y must be matrices")
        n, d_x = x.shape
        if n < 1 or d_x < 1 or y.shape[1] < 1:
            raise DataValidationError("dataset needs n >= 1, d_x >= 1 and d_y >= 1")
        if y.shape[0] != n or delta.shape[0] != n:
            raise DataValidationError("x, y and delta must have the same number of rows")
        if not np.isin(delta, (0, 1)).all():
            raise DataValidationError("delta must be binary")
        if not np.isfinite(x).all():
            raise DataValidationError("x must not contain missing or non-finite entries")

        observed = delta == 1
        if not observed.any():
            raise DataValidationError("dataset has no complete rows, so no donors exist")
        if not np.isfinite(y[observed]).all():
            raise DataValidationError("complete rows must have finite y values")
        y[~observed] = np.nan

        x_names = tuple(self.x_names) or tuple(f"x{j}" for j in range(d_x))
        y_names = tuple(self.y_names) or tuple(f"y{j}" for j in range(y.shape[1]))
        x_kinds = tuple(self.x_kinds) or ("continuous",) * d_x
        if len(x_names) != d_x or len(x_kinds) != d_x or len(y_names) != y.shape[1]:
            raise DataValidationError("column names and kinds must match the data dimensions")
        for j, kind in enumerate(x_kinds):
            if kind not in KINDS:
                raise DataValidationError(f"unknown column kind {kind!r}")
            if kind == "binary" and not np.isin(x[:, j], (0.0, 1.0)).all():
                raise SchemaError(f"binary column {x_names[j]!r} contains values other than 0/1")

        object.__setattr__(self, "x", _readonly(x))
        object.__setattr__(self, "y", _readonly(y))
        object.__setattr__(self, "delta", _readonly(delta))
        object.__setattr__(self, "x_names", x_names)
        object.__setattr__(self, "y_names", y_names)
        object.__setattr__(self, "x_kinds", x_kinds)

    @classmethod
    def from_arrays(
        cls,
        x: np.ndarray,
        y: np.ndarray,
        x_kinds: Optional[Sequence[str]] = None,
        x_names: Optional[Sequence[str]] = None,
        y_names: Optional[Sequence[str]] = None,
    ) -> "Dataset":
        """Build a Dataset with delta derived from NaN placement in y"""
        y = np.array(y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        missing = ~np.isfinite(y)
        partial = missing.any(axis=1) & ~missing.all(axis=1)
        demoted = int(partial.sum())
        if demoted:
            logger.warning(f"{demoted} partially observed y rows treated as fully missing")
        delta = (~missing.any(axis=1)).astype(np.int8)
        return cls(
            x=x,
            y=y,
            delta=delta,
            x_names=tuple(x_names or ()),
            y_names=tuple(y_names or ()),
            x_kinds=tuple(x_kinds or ()),
            demoted_rows=demoted,
        )

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    @property
    def d_y(self) -> int:
        return self.y.shape[1]

    @property
    def complete_index(self) -> np.ndarray:
        return np.flatnonzero(self.delta == 1)

    @property
    def missing_index(self) -> np.ndarray:
        return np.flatnonzero(self.delta == 0)

    @property
    def n_complete(self) -> int:
        return int(self.delta.sum())

    @property
    def n_missing(self) -> int:
        return self.n - self.n_complete

    @property
    def continuous_columns(self) -> List[int]:
        return [j for j, kind in enumerate(self.x_kinds) if kind == "continuous"]

    @property
    def binary_columns(self) -> List[int]:
        return [j for j, kind in enumerate(self.x_kinds) if kind == "binary"]

    def subset(self, rows: Sequence[int]) -> "Dataset":
        """Rows in the given order; repeated indices are allowed (resampling)"""
        rows = np.asarray(rows, dtype=int)
        return Dataset(
            x=self.x[rows],
            y=self.y[rows],
            delta=self.delta[rows],
            x_names=self.x_names,
            y_names=self.y_names,
            x_kinds=self.x_kinds,
        )

    def complete_cases(self) -> "Dataset":
        return self.subset(self.complete_index)


@dataclass
class ConditionReport:
    complete_fraction: float
    kernel_dim: int
    n_h_d: float
    warnings: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.warnings


def load_column_config(path: Union[str, Path]) -> ColumnConfig:
    """
    Parse a flat key=value column file.

    Each line reads ``name = role[:kind]`` with role x or y and kind
    continuous (default) or binary. Line order is column order.
    """
    specs = []
    with open(path, encoding="utf-8") as handle:
        for number, raw in enumerate(handle, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SchemaError(f"column config line {number}: expected name=role[:kind]")
            name, value = (part.strip() for part in line.split("=", 1))
            role, _, kind = value.replace(",", ":").partition(":")
            role = role.strip()
            kind = kind.strip() or "continuous"
            if role not in ("x", "y") or kind not in KINDS:
                raise SchemaError(f"column config line {number}: bad role/kind {value!r}")
            specs.append(ColumnSpec(name=name, role=role, kind=kind))
    try:
        return ColumnConfig(columns=specs)
    except ValueError as e:
        raise SchemaError(f"invalid column config {path}: {e}") from e


def _parse_column(values: pd.Series, column: str, allow_missing: bool) -> np.ndarray:
    parsed = np.empty(len(values), dtype=float)
    for i, cell in enumerate(values):
        token = cell.strip()
        if cell == MISSING_TOKEN:
            if not allow_missing:
                raise SchemaError(f"missing value in always-observed column {column!r} (row {i + 1})")
            parsed[i] = np.nan
            continue
        try:
            number = float(token)
        except ValueError:
            raise ParseError(i + 1, column, cell) from None
        if not np.isfinite(number):
            raise ParseError(i + 1, column, cell)
        parsed[i] = number
    return parsed


def load_csv(path: Union[str, Path], config: Union[ColumnConfig, str, Path]) -> Dataset:
    """
    Read a UTF-8 CSV with a header row, "NA" marking missing Y cells.

    Args:
        path: CSV file
        config: ColumnConfig or path of the key=value column file

    Returns:
        Dataset whose delta is 0 exactly for rows with any "NA" in the Y block
    """
    if not isinstance(config, ColumnConfig):
        config = load_column_config(config)

    frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False, encoding="utf-8")
    frame.columns = [c.strip() for c in frame.columns]
    absent = [name for name in config.x_names + config.y_names if name not in frame.columns]
    if absent:
        raise SchemaError(f"columns {absent} not found in {path}")

    x = np.column_stack([_parse_column(frame[c], c, allow_missing=False) for c in config.x_names])
    y = np.column_stack([_parse_column(frame[c], c, allow_missing=True) for c in config.y_names])

    try:
        data = Dataset.from_arrays(
            x, y, x_kinds=config.x_kinds, x_names=config.x_names, y_names=config.y_names
        )
    except DataValidationError as e:
        raise DataValidationError(f"{path}: {e}") from e
    logger.info(f"Loaded {path}: n={data.n}, complete={data.n_complete}, demoted={data.demoted_rows}")
    return data


def save_csv(data: Dataset, path: Union[str, Path]) -> None:
    """Write x, y and "NA" tokens so that load_csv reproduces the data exactly"""
    columns = {}
    for j, name in enumerate(data.x_names):
        columns[name] = [repr(float(v)) for v in data.x[:, j]]
    for j, name in enumerate(data.y_names):
        columns[name] = [
            repr(float(v)) if observed else MISSING_TOKEN
            for v, observed in zip(data.y[:, j], data.delta == 1)
        ]
    pd.DataFrame(columns).to_csv(path, index=False)


def save_column_config(data: Dataset, path: Union[str, Path]) -> None:
    lines = [f"{name}=x:{kind}" for name, kind in zip(data.x_names, data.x_kinds)]
    lines += [f"{name}=y" for name in data.y_names]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def validate_conditions(data: Dataset, kernel: "KernelSpec") -> ConditionReport:
    """
    Non-fatal checks of the smoothing conditions.

    Flags a low share of complete cases (propensity bounded away from zero),
    a second-order kernel with four or more smoothed coordinates, and
    n * h**d < 1.
    """
    fraction = data.n_complete / data.n
    kernel_dim = len(data.continuous_columns)
    n_h_d = data.n * kernel.bandwidth ** kernel_dim
    report = ConditionReport(complete_fraction=fraction, kernel_dim=kernel_dim, n_h_d=n_h_d)

    if fraction < LOW_COMPLETE_FRACTION:
        report.warnings.append(
            f"only {fraction:.1%} complete cases; the propensity may not be bounded away from zero"
        )
    if kernel_dim >= 4 and kernel.order == 2:
        report.warnings.append(
            f"{kernel_dim} smoothed coordinates with a second-order kernel; use a kernel of order q > 2"
        )
    if kernel_dim > 0 and n_h_d < 1:
        report.warnings.append(f"n * h^d = {n_h_d:.3g} < 1; the bandwidth is too small for this sample")

    for message in report.warnings:
        logger.warning(message)
    return report

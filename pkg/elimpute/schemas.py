from typing import Dict, List, Literal, Optional, Union

from pydantic import BaseModel, Field, field_validator, model_validator

Role = Literal["x", "y"]
ColumnKind = Literal["continuous", "binary"]
CalibrationMethod = Literal["normal", "chisq-mix", "bootstrap"]
FitMethod = Literal["nimpute", "complete", "full", "wgmm"]
BandwidthRule = Literal["halve", "higher-order"]


class ColumnSpec(BaseModel):
    name: str
    role: Role
    kind: ColumnKind = "continuous"


class ColumnConfig(BaseModel):
    columns: List[ColumnSpec]

    @model_validator(mode="after")
    def _check_roles(self) -> "ColumnConfig":
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ValueError("duplicate column names in column config")
        if not self.x_names:
            raise ValueError("column config declares no x column")
        if not self.y_names:
            raise ValueError("column config declares no y column")
        return self

    @property
    def x_names(self) -> List[str]:
        return [c.name for c in self.columns if c.role == "x"]

    @property
    def y_names(self) -> List[str]:
        return [c.name for c in self.columns if c.role == "y"]

    @property
    def x_kinds(self) -> List[str]:
        return [c.kind for c in self.columns if c.role == "x"]


class Interval(BaseModel):
    name: str
    lower: float
    upper: float
    lower_at_hull: bool = False
    upper_at_hull: bool = False

    @model_validator(mode="after")
    def _ordered(self) -> "Interval":
        if self.lower > self.upper:
            raise ValueError(f"interval for {self.name} has lower > upper")
        return self

    @property
    def length(self) -> float:
        return self.upper - self.lower

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper


class CalibrationResult(BaseModel):
    method: CalibrationMethod
    alpha: float
    estimate: List[float]
    intervals: List[Interval] = Field(default_factory=list)
    threshold: Optional[float] = None
    draws: Optional[int] = None
    diagnostics: Dict[str, Union[int, float, str]] = Field(default_factory=dict)
    warnings: List[str] = Field(default_factory=list)

    @field_validator("threshold")
    @classmethod
    def _nonnegative(cls, value: Optional[float]) -> Optional[float]:
        if value is not None and value < 0:
            raise ValueError("calibration threshold must be nonnegative")
        return value

    def interval(self, name: str) -> Interval:
        for item in self.intervals:
            if item.name == name:
                return item
        raise KeyError(name)


class StudyRow(BaseModel):
    method: str
    parameter: str
    truth: float
    bias: float
    sd: float
    mse: float
    coverage: Optional[float] = None
    ci_length: Optional[float] = None
    used: int
    failures: int = 0


class StudyReport(BaseModel):
    scenario: str
    n: int
    replications: int
    B: int
    kappa: int
    seed: int
    alpha: float
    calibration: str
    truth_source: str
    rows: List[StudyRow]
    failures: Dict[str, int] = Field(default_factory=dict)

    def row(self, method: str, parameter: str) -> StudyRow:
        for item in self.rows:
            if item.method == method and item.parameter == parameter:
                return item
        raise KeyError((method, parameter))


class RunConfig(BaseModel):
    subcommand: Literal["impute", "fit", "simulate"]
    data: Optional[str] = None
    columns: Optional[str] = None
    method: FitMethod = "nimpute"
    estfun: str = "mean"
    kappa: int = 20
    bandwidth: Union[Literal["auto"], float] = "auto"
    bandwidth_rule: BandwidthRule = "halve"
    kernel_order: int = 2
    alpha: float = 0.05
    B: int = 400
    M: int = 100000
    seed: Optional[int] = None
    jobs: int = 1
    out: Optional[str] = None
    calibration: CalibrationMethod = "bootstrap"
    scenario: Optional[str] = None
    n: int = 200
    R: int = 100
    coords: Optional[List[int]] = None
    fixed_kappa: bool = False
    methods: Optional[List[FitMethod]] = None
    intervals: bool = True
    truth_draws: int = 10_000_000

    @field_validator("alpha")
    @classmethod
    def _alpha_open_unit(cls, value: float) -> float:
        if not 0.0 < value < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        return value

    @field_validator("kappa")
    @classmethod
    def _kappa_positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError("kappa must be at least 1")
        return value

    @field_validator("kernel_order")
    @classmethod
    def _order_supported(cls, value: int) -> int:
        if value not in (2, 4, 6):
            raise ValueError("kernel order must be 2, 4 or 6")
        return value

    @field_validator("bandwidth")
    @classmethod
    def _bandwidth_positive(cls, value):
        if value != "auto" and value <= 0:
            raise ValueError("bandwidth must be positive")
        return value

    @field_validator("jobs")
    @classmethod
    def _jobs_positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError("jobs must be at least 1")
        return value

    @model_validator(mode="after")
    def _subcommand_requirements(self) -> "RunConfig":
        if self.subcommand in ("impute", "fit"):
            if not self.data or not self.columns:
                raise ValueError(f"{self.subcommand} requires --data and --columns")
        if self.subcommand == "simulate" and not self.scenario:
            raise ValueError("simulate requires --scenario")

        needs_seed = self.subcommand in ("impute", "simulate") or (
            self.subcommand == "fit"
            and (self.method == "nimpute" or (self.method != "wgmm" and self.calibration in ("bootstrap", "chisq-mix")))
        )
        if needs_seed and self.seed is None:
            raise ValueError(f"{self.subcommand} requires --seed")

        uses_bootstrap = (self.subcommand == "simulate" and self.intervals) or (
            self.subcommand == "fit" and self.calibration == "bootstrap" and self.method != "wgmm"
        )
        if uses_bootstrap and self.B < 100:
            raise ValueError("bootstrap calibration requires B >= 100")
        return self

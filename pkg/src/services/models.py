"""Data models for phantoms, losses, reports and dataset manifests."""

import math
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import DataFormatError


class ClassRoster(BaseModel):
    """Ordered class names: index 0 background, 1 lesion, 2..S organs."""

    model_config = ConfigDict(frozen=True)

    names: tuple[str, ...]

    @model_validator(mode="after")
    def _lesion_at_one(self) -> "ClassRoster":
        if len(self.names) < 2 or self.names[0] != "background" or self.names[1] != "lesion":
            raise ValueError("roster must start with ('background', 'lesion')")
        if len(self.names) > 255:
            raise ValueError("label dtype u8 caps the roster at 255 classes")
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")
        return self

    @classmethod
    def default(cls) -> "ClassRoster":
        return cls(names=("background", "lesion", *ORGAN_NAMES))

    @classmethod
    def from_organs(cls, organs: list[str] | tuple[str, ...]) -> "ClassRoster":
        return cls(names=("background", "lesion", *organs))

    @property
    def num_classes(self) -> int:
        """Total classes including background (S + 1)."""
        return len(self.names)

    @property
    def max_index(self) -> int:
        """S, the largest class index."""
        return len(self.names) - 1

    @property
    def organs(self) -> tuple[str, ...]:
        return self.names[2:]

    def index(self, name: str) -> int:
        return self.names.index(name)


class OrganShape(BaseModel):
    """An analytic ellipsoid painted with a uniform base SUV."""

    class_index: int = Field(ge=2)
    center_mm: tuple[float, float, float]
    semi_axes_mm: tuple[float, float, float]
    base_suv: float = Field(ge=0.0)

    @model_validator(mode="after")
    def _positive_axes(self) -> "OrganShape":
        if any(a <= 0 for a in self.semi_axes_mm):
            raise ValueError("semi-axes must be positive")
        return self


class LesionSpec(BaseModel):
    """Random hot spheres: count, radius (mm) and SUV ranges, all inclusive."""

    count_range: tuple[int, int] = (1, 3)
    radius_mm_range: tuple[float, float] = (4.0, 8.0)
    suv_range: tuple[float, float] = (6.0, 12.0)

    @model_validator(mode="after")
    def _ordered(self) -> "LesionSpec":
        for name in ("count_range", "radius_mm_range", "suv_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} must satisfy 0 <= min <= max")
        if self.radius_mm_range[0] <= 0:
            raise ValueError("lesion radius must be positive")
        return self


class PhantomSpec(BaseModel):
    """Full description of one synthetic phantom case."""

    dims: tuple[int, int, int]
    voxel_mm: tuple[float, float, float]
    roster: ClassRoster
    organ_shapes: list[OrganShape] = Field(default_factory=list)
    lesion_spec: LesionSpec = Field(default_factory=LesionSpec)
    background_suv: float = Field(default=0.2, ge=0.0)
    smoothing_fwhm_mm: float = Field(default=0.0, ge=0.0)
    seed: int = Field(default=0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _hot_lesions(self) -> "PhantomSpec":
        if any(d < 1 for d in self.dims) or any(v <= 0 for v in self.voxel_mm):
            raise ValueError("dims must be >= 1 and voxel sizes > 0")
        max_organ = max([s.base_suv for s in self.organ_shapes] + [self.background_suv])
        if self.lesion_spec.count_range[1] > 0 and self.lesion_spec.suv_range[0] <= max_organ:
            raise ValueError(
                f"lesion SUV minimum {self.lesion_spec.suv_range[0]} must exceed "
                f"the hottest organ/background SUV {max_organ}"
            )
        for shape in self.organ_shapes:
            if shape.class_index > self.roster.max_index:
                raise ValueError(f"organ class {shape.class_index} not in roster")
        return self


class CountModel(BaseModel):
    """Poisson count model: expected counts = SUV * counts_per_suv * fraction."""

    counts_per_suv: float = Field(default=50.0, gt=0.0)
    fraction: float = Field(default=1.0, gt=0.0, le=1.0)

    @property
    def scale(self) -> float:
        return self.counts_per_suv * self.fraction


class ClassWeights(BaseModel):
    """Per-class loss weights w[0..S]."""

    w: tuple[float, ...]

    @model_validator(mode="after")
    def _valid(self) -> "ClassWeights":
        if any(v < 0 or not math.isfinite(v) for v in self.w):
            raise ValueError("class weights must be finite and non-negative")
        if not any(v > 0 for v in self.w):
            raise ValueError("at least one class weight must be positive")
        return self

    @classmethod
    def default(
        cls,
        num_classes: int,
        background: float = 0.1,
        lesion: float = 4.0,
        organ: float = 1.0,
    ) -> "ClassWeights":
        return cls(w=(background, lesion, *([organ] * (num_classes - 2))))

    def __getitem__(self, s: int) -> float:
        return self.w[s]

    def __len__(self) -> int:
        return len(self.w)


class LossReport(BaseModel):
    """Scalar loss parts of one training step."""

    diff: float
    lor: float = 0.0
    rev: float = 0.0
    seg: float = 0.0
    lambda_warm: float
    total: float

    @model_validator(mode="after")
    def _total_identity(self) -> "LossReport":
        expected = self.diff + self.lambda_warm * (self.lor + self.rev + self.seg)
        if abs(expected - self.total) > 1e-9 * max(1.0, abs(expected)):
            raise ValueError(f"total {self.total} != diff + lambda*(lor+rev+seg) = {expected}")
        return self


class LossLogRow(BaseModel):
    """One line of the JSONL loss log."""

    step: int
    epoch: int
    diff: float
    lor: float
    rev: float
    seg: float
    # `lambda` is a keyword, hence the alias
    lambda_warm: float = Field(alias="lambda")
    total: float

    model_config = ConfigDict(populate_by_name=True)

    @classmethod
    def from_report(cls, step: int, epoch: int, report: LossReport) -> "LossLogRow":
        return cls(
            step=step,
            epoch=epoch,
            diff=report.diff,
            lor=report.lor,
            rev=report.rev,
            seg=report.seg,
            lambda_warm=report.lambda_warm,
            total=report.total,
        )


class QuantReport(BaseModel):
    """Clinical metrics of one case."""

    mtv_ml: float
    tlg: float
    lesion_suv_mean: Optional[float] = None
    suv_mean: dict[str, Optional[float]] = Field(default_factory=dict)
    per_class_nrmse: Optional[dict[str, Optional[float]]] = None
    per_class_dice: Optional[dict[str, Optional[float]]] = None


class RegressionResult(BaseModel):
    """Ordinary least squares fit y = slope * x + intercept."""

    slope: float
    intercept: float
    r_squared: float = Field(ge=0.0, le=1.0)
    n: int = Field(ge=2)
    degenerate: bool = False  # SS_tot == 0, R^2 reported as 0


class WilcoxonResult(BaseModel):
    """Wilcoxon signed-rank test outcome."""

    statistic: float
    p_two_sided: float = Field(gt=0.0, le=1.0)
    n_effective: int
    method: str  # exact, normal, degenerate
    degenerate: bool = False


class BiasSummary(BaseModel):
    """Percent bias over cases, mean and sample std."""

    mean: float
    std: float
    n: int = Field(ge=1)
    text: str


class CaseEvaluation(BaseModel):
    """Metrics of one predicted case against its reference."""

    case_id: str
    nrmse: dict[str, Optional[float]]
    dice: dict[str, float]
    predicted: QuantReport
    ground_truth: QuantReport
    bias: dict[str, Optional[float]] = Field(default_factory=dict)


class EvaluationReport(BaseModel):
    """Per-case metrics plus their aggregates across a prediction directory."""

    cases: list[CaseEvaluation] = Field(default_factory=list)
    unpaired: list[str] = Field(default_factory=list)
    mean_nrmse: dict[str, Optional[float]] = Field(default_factory=dict)
    mean_dice: dict[str, Optional[float]] = Field(default_factory=dict)
    regression: dict[str, Optional[RegressionResult]] = Field(default_factory=dict)
    bias: dict[str, Optional[BiasSummary]] = Field(default_factory=dict)
    wilcoxon: Optional[dict[str, Optional[WilcoxonResult]]] = None


class AblationRow(BaseModel):
    """One trained variant of the ablation study."""

    variant: str
    use_lor_regularizer: bool
    use_revision_module: bool
    checkpoint: str
    mean_lor: float
    mean_rev: float
    values: dict[str, Optional[float]] = Field(default_factory=dict)
    starred: list[str] = Field(default_factory=list)  # full-row columns with p < alpha vs every ablation


class AblationReport(BaseModel):
    """Comparison table of the ablation variants."""

    columns: list[str]
    rows: list[AblationRow]
    alpha: float = 0.05


class CaseRecord(BaseModel):
    """One phantom case in a dataset manifest."""

    case_id: str
    split: str = "train"  # train, test
    seed: int
    fractions: list[float]
    files: dict[str, str]
    ground_truth: QuantReport


class DatasetManifest(BaseModel):
    """Root manifest of a generated dataset."""

    roster: list[str]
    dims: tuple[int, int, int]
    voxel_mm: tuple[float, float, float]
    counts_per_suv: float
    seed: int
    cases: list[CaseRecord] = Field(default_factory=list)

    def lc_file(self, case: CaseRecord, fraction: float) -> str:
        try:
            return case.files[lc_key(fraction)]
        except KeyError:
            raise DataFormatError(
                f"case {case.case_id} has no count level {fraction:g}", field="count_fraction"
            ) from None


def lc_key(fraction: float) -> str:
    """File key of a count level, e.g. 0.05 -> 'lc_0.05'."""
    return f"lc_{fraction:g}"


# =============================================================================
# ANATOMY - default phantom layout
# =============================================================================

# Organ roster in class-index order (index 2 onward)
ORGAN_NAMES = ("liver", "lung", "bone", "muscle", "kidney", "spleen", "aorta")

# Fractional ellipsoids (center, semi-axes as fractions of the volume extent) and base SUV.
# Painted in the order listed, so later organs override earlier ones.
ORGAN_LAYOUT = {
    "muscle": ((0.50, 0.50, 0.50), (0.46, 0.40, 0.48), 0.8),
    "lung": ((0.50, 0.40, 0.72), (0.32, 0.20, 0.18), 0.4),
    "bone": ((0.50, 0.78, 0.50), (0.06, 0.06, 0.40), 1.5),
    "liver": ((0.36, 0.50, 0.40), (0.17, 0.17, 0.13), 2.5),
    "spleen": ((0.70, 0.55, 0.42), (0.08, 0.08, 0.08), 2.0),
    "kidney": ((0.64, 0.66, 0.28), (0.07, 0.07, 0.09), 3.0),
    "aorta": ((0.52, 0.62, 0.50), (0.04, 0.04, 0.36), 1.8),
}

"""Synthetic whole-body PET phantoms and simulated low-count acquisitions.

Phantoms are unions of analytic ellipsoids (organs) and spheres (hot lesions)
rasterized by voxel-centre membership, so the labels are exact ground truth.
Low-count images come from Poisson thinning of the activity: a voxel with SUV a
receives k ~ Poisson(a * counts_per_suv * fraction) counts and is reported as
k / (counts_per_suv * fraction).
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from ..config import PhantomConfig, get_settings
from .errors import SpecError
from .metrics import clinical_metrics
from .models import (
    ORGAN_LAYOUT,
    CaseRecord,
    ClassRoster,
    CountModel,
    DatasetManifest,
    LesionSpec,
    OrganShape,
    PhantomSpec,
    lc_key,
)
from .rng import derive_seed
from .volume import LabelVolume, Volume3D, read_json, write_json, write_volume

logger = logging.getLogger(__name__)

FWHM_TO_SIGMA = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))


def default_phantom_spec(
    dims: tuple[int, int, int],
    voxel_mm: tuple[float, float, float],
    organs: list[str] | tuple[str, ...],
    seed: int = 0,
    background_suv: float = 0.2,
    lesion_spec: Optional[LesionSpec] = None,
    smoothing_fwhm_mm: float = 0.0,
) -> PhantomSpec:
    """Build the default anatomy for a roster of organs.

    Organs are painted in ORGAN_LAYOUT order regardless of their class index,
    so the body (muscle) sits underneath every other organ.
    """
    roster = ClassRoster.from_organs(organs)
    extent = [d * v for d, v in zip(dims, voxel_mm)]
    shapes = []
    for name, (center_frac, axes_frac, suv) in ORGAN_LAYOUT.items():
        if name not in roster.names:
            continue
        shapes.append(
            OrganShape(
                class_index=roster.index(name),
                center_mm=tuple(c * e for c, e in zip(center_frac, extent)),
                semi_axes_mm=tuple(a * e for a, e in zip(axes_frac, extent)),
                base_suv=suv,
            )
        )
    return PhantomSpec(
        dims=dims,
        voxel_mm=voxel_mm,
        roster=roster,
        organ_shapes=shapes,
        lesion_spec=lesion_spec or LesionSpec(),
        background_suv=background_suv,
        smoothing_fwhm_mm=smoothing_fwhm_mm,
        seed=seed,
    )


def _voxel_centers(dims, voxel_mm) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Voxel-centre coordinates in mm, broadcastable to (nz, ny, nx)."""
    nx, ny, nz = dims
    dx, dy, dz = voxel_mm
    x = ((np.arange(nx) + 0.5) * dx)[None, None, :]
    y = ((np.arange(ny) + 0.5) * dy)[None, :, None]
    z = ((np.arange(nz) + 0.5) * dz)[:, None, None]
    return x, y, z


def _ellipsoid_mask(centers, center_mm, semi_axes_mm) -> np.ndarray:
    x, y, z = centers
    (cx, cy, cz), (ax, ay, az) = center_mm, semi_axes_mm
    return ((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 + ((z - cz) / az) ** 2 <= 1.0


def _check_inside(center_mm, semi_axes_mm, extent, what: str) -> None:
    for c, a, e in zip(center_mm, semi_axes_mm, extent):
        if c - a < 0 or c + a > e:
            raise SpecError(
                f"{what} (center {center_mm}, semi-axes {semi_axes_mm}) exceeds the volume "
                f"extent {extent} mm",
                field="organ_shapes",
            )


def _place_lesion(
    rng: np.random.Generator,
    organ_mask: np.ndarray,
    centers,
    radius: float,
    extent: list[float],
) -> tuple[float, float, float]:
    """Lesion centre inside organ tissue when a fitting organ voxel exists."""
    lo = np.array([radius] * 3)
    hi = np.array(extent) - radius
    if np.any(hi < lo):
        raise SpecError(f"lesion radius {radius} mm does not fit in extent {extent} mm")
    x, y, z = centers
    fits = (
        organ_mask
        & (x >= lo[0]) & (x <= hi[0])
        & (y >= lo[1]) & (y <= hi[1])
        & (z >= lo[2]) & (z <= hi[2])
    )
    candidates = np.argwhere(fits)
    if len(candidates):
        iz, iy, ix = candidates[rng.integers(len(candidates))]
        return (float(x[0, 0, ix]), float(y[0, iy, 0]), float(z[iz, 0, 0]))
    return tuple(float(v) for v in rng.uniform(lo, hi))


def generate_phantom(spec: PhantomSpec) -> tuple[Volume3D, LabelVolume]:
    """Rasterize a phantom: activity (SUV) and exact labels.

    Labels follow nesting: lesions override organs, later organs override
    earlier ones, everything overrides background. Deterministic given spec.seed.

    Raises:
        SpecError: a shape leaves the volume
    """
    extent = [d * v for d, v in zip(spec.dims, spec.voxel_mm)]
    centers = _voxel_centers(spec.dims, spec.voxel_mm)
    shape = (spec.dims[2], spec.dims[1], spec.dims[0])

    activity = np.full(shape, spec.background_suv, dtype=np.float64)
    labels = np.zeros(shape, dtype=np.uint8)

    for organ in spec.organ_shapes:
        _check_inside(organ.center_mm, organ.semi_axes_mm, extent, f"organ class {organ.class_index}")
        mask = _ellipsoid_mask(centers, organ.center_mm, organ.semi_axes_mm)
        activity[mask] = organ.base_suv
        labels[mask] = organ.class_index

    rng = np.random.default_rng(spec.seed)
    lesions = spec.lesion_spec
    n_lesions = int(rng.integers(lesions.count_range[0], lesions.count_range[1] + 1))
    organ_mask = labels >= 2
    for _ in range(n_lesions):
        radius = float(rng.uniform(*lesions.radius_mm_range))
        suv = float(rng.uniform(*lesions.suv_range))
        center = _place_lesion(rng, organ_mask, centers, radius, extent)
        mask = _ellipsoid_mask(centers, center, (radius, radius, radius))
        activity[mask] = suv
        labels[mask] = 1

    if spec.smoothing_fwhm_mm > 0:
        # array axes are (z, y, x)
        sigma = [spec.smoothing_fwhm_mm * FWHM_TO_SIGMA / v for v in reversed(spec.voxel_mm)]
        activity = gaussian_filter(activity, sigma=sigma, mode="nearest")

    logger.debug(f"Phantom seed={spec.seed}: {n_lesions} lesions, {int((labels == 1).sum())} lesion voxels")
    return (
        Volume3D(spec.dims, spec.voxel_mm, activity.astype(np.float32)),
        LabelVolume(spec.dims, spec.voxel_mm, labels, spec.roster.num_classes),
    )


def simulate_count_level(activity: Volume3D, model: CountModel, seed: int) -> Volume3D:
    """Poisson-thinned low-count realisation; unbiased for the activity."""
    rng = np.random.default_rng(seed)
    scale = model.scale
    counts = rng.poisson(activity.data.astype(np.float64) * scale)
    return activity.with_data((counts / scale).astype(np.float32))


# =============================================================================
# DATASETS
# =============================================================================


@dataclass
class PhantomCase:
    """One generated case: truth, references and low-count realisations."""

    case_id: str
    spec: PhantomSpec
    activity: Volume3D
    labels: LabelVolume
    hc: Volume3D
    lc: dict[float, Volume3D]


def generate_case(config: PhantomConfig, master_seed: int, index: int) -> PhantomCase:
    """Generate case `index` of a dataset; every draw uses its own derived stream."""
    spec = default_phantom_spec(
        dims=config.dims,
        voxel_mm=config.voxel_mm,
        organs=config.organs,
        seed=derive_seed(master_seed, "phantom", index),
        background_suv=config.background_suv,
        lesion_spec=LesionSpec(
            count_range=config.lesion_count,
            radius_mm_range=config.lesion_radius_mm,
            suv_range=config.lesion_suv,
        ),
        smoothing_fwhm_mm=config.smoothing_fwhm_mm,
    )
    activity, labels = generate_phantom(spec)
    if config.hc_fraction is None:
        hc = activity
    else:
        hc = simulate_count_level(
            activity,
            CountModel(counts_per_suv=config.counts_per_suv, fraction=config.hc_fraction),
            derive_seed(master_seed, "hc", index),
        )
    lc = {
        fraction: simulate_count_level(
            activity,
            CountModel(counts_per_suv=config.counts_per_suv, fraction=fraction),
            derive_seed(master_seed, "lc", index, lc_key(fraction)),
        )
        for fraction in config.fractions
    }
    return PhantomCase(f"case_{index:03d}", spec, activity, labels, hc, lc)


def write_case(case: PhantomCase, out_dir: Path, split: str) -> CaseRecord:
    """Write one case's volumes plus its spec sidecar and return its manifest entry."""
    case_dir = Path(out_dir) / case.case_id
    files = {
        "activity": f"{case.case_id}/activity.pvol",
        "hc": f"{case.case_id}/hc.pvol",
        "labels": f"{case.case_id}/labels.pvol",
        "spec": f"{case.case_id}/phantom.json",
    }
    write_volume(case.activity, case_dir / "activity.pvol")
    write_volume(case.hc, case_dir / "hc.pvol")
    write_volume(case.labels, case_dir / "labels.pvol")
    for fraction, volume in case.lc.items():
        key = lc_key(fraction)
        files[key] = f"{case.case_id}/{key}.pvol"
        write_volume(volume, case_dir / f"{key}.pvol")
    write_json(case.spec.model_dump(mode="json"), case_dir / "phantom.json")

    return CaseRecord(
        case_id=case.case_id,
        split=split,
        seed=case.spec.seed,
        fractions=sorted(case.lc),
        files=files,
        ground_truth=clinical_metrics(case.hc, case.labels, case.spec.roster),
    )


def build_dataset(
    config: PhantomConfig, master_seed: int, n_cases: int, out_dir: Path
) -> DatasetManifest:
    """Generate `n_cases` phantoms; the last `n_test` are flagged as test cases."""
    if n_cases < 1:
        raise SpecError("n_cases must be >= 1", field="n_cases")
    out_dir = Path(out_dir)
    manifest = DatasetManifest(
        roster=list(config.roster.names),
        dims=config.dims,
        voxel_mm=config.voxel_mm,
        counts_per_suv=config.counts_per_suv,
        seed=master_seed,
    )
    n_test = min(config.n_test, max(n_cases - 1, 0))
    for index in range(n_cases):
        case = generate_case(config, master_seed, index)
        split = "test" if index >= n_cases - n_test else "train"
        manifest.cases.append(write_case(case, out_dir, split))
        logger.info(f"Generated {case.case_id} ({split})")
    write_json(manifest.model_dump(mode="json"), out_dir / "manifest.json")
    return manifest


def load_manifest(data_dir: Path) -> DatasetManifest:
    """Read the manifest of a dataset directory."""
    path = get_settings().manifest_path(Path(data_dir))
    return DatasetManifest.model_validate(read_json(path))

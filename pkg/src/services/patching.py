"""Patch grids, lesion-balanced training sampling and overlap fusion.

Origins and sizes are given in (x, y, z) voxel order like volume dims; array
slicing happens in the (z, y, x) order of the volume data.
"""

import itertools
import logging
from dataclasses import dataclass
from typing import Literal, Optional, Sequence, Union

import numpy as np

from .errors import GeometryError, PlanError
from .volume import LabelVolume, Volume3D, check_geometry

logger = logging.getLogger(__name__)

Triple = tuple[int, int, int]
Fusion = Literal["mean", "gaussian"]
ArrayOrVolume = Union[np.ndarray, Volume3D, LabelVolume]


@dataclass(frozen=True)
class PatchGrid:
    """Stride-spaced patch origins covering a volume, last origin clamped per axis."""

    dims: Triple
    patch_size: Triple
    stride: Triple
    origins: tuple[Triple, ...]

    def __len__(self) -> int:
        return len(self.origins)

    def slices(self, origin: Triple) -> tuple[slice, slice, slice]:
        """Array slices (z, y, x) of the patch at `origin`."""
        (ox, oy, oz), (px, py, pz) = origin, self.patch_size
        return slice(oz, oz + pz), slice(oy, oy + py), slice(ox, ox + px)

    @property
    def patch_shape(self) -> Triple:
        """Array shape (pz, py, px) of one patch."""
        px, py, pz = self.patch_size
        return (pz, py, px)


def axis_origins(dim: int, patch: int, stride: int) -> list[int]:
    """Stride multiples up to dim - patch, plus a flush final origin if needed."""
    last = dim - patch
    origins = list(range(0, last + 1, stride))
    if origins[-1] != last:
        origins.append(last)
    return origins


def plan_grid(dims: Sequence[int], patch_size: Sequence[int], stride: Sequence[int]) -> PatchGrid:
    """Plan the covering patch grid for a volume.

    Raises:
        PlanError: patch larger than the volume or stride outside [1, patch]
    """
    dims_t = tuple(int(d) for d in dims)
    patch_t = tuple(int(p) for p in patch_size)
    stride_t = tuple(int(s) for s in stride)
    if not len(dims_t) == len(patch_t) == len(stride_t) == 3:
        raise PlanError("dims, patch_size and stride need three components each")
    for axis, (d, p, s) in enumerate(zip(dims_t, patch_t, stride_t)):
        if p < 1 or p > d:
            raise PlanError(f"patch size {p} does not fit dim {d} on axis {axis}", field="patch_size")
        if not 1 <= s <= p:
            raise PlanError(f"stride {s} must lie in [1, {p}] on axis {axis}", field="stride")

    per_axis = [axis_origins(d, p, s) for d, p, s in zip(dims_t, patch_t, stride_t)]
    # x fastest
    origins = tuple((x, y, z) for z, y, x in itertools.product(per_axis[2], per_axis[1], per_axis[0]))
    return PatchGrid(dims_t, patch_t, stride_t, origins)  # type: ignore[arg-type]


def _data(volume: ArrayOrVolume, grid: PatchGrid) -> np.ndarray:
    if isinstance(volume, (Volume3D, LabelVolume)):
        if volume.dims != grid.dims:
            raise GeometryError(f"volume dims {volume.dims} do not match grid dims {grid.dims}")
        return volume.data
    data = np.asarray(volume)
    expected = (grid.dims[2], grid.dims[1], grid.dims[0])
    if data.shape[-3:] != expected:
        raise GeometryError(f"array shape {data.shape} does not end in grid shape {expected}")
    return data


def extract(volume: ArrayOrVolume, grid: PatchGrid) -> list[np.ndarray]:
    """Copy out every patch of the grid, in origin order.

    Leading (channel) axes of a plain array are carried along.
    """
    data = _data(volume, grid)
    return [np.array(data[(..., *grid.slices(o))]) for o in grid.origins]


def gaussian_weight_map(patch_shape: Sequence[int], sigma_scale: float = 1.0 / 8.0) -> np.ndarray:
    """Separable Gaussian importance map peaking at the patch centre.

    Zeros are lifted to the smallest positive weight so every voxel keeps a vote.
    """
    weights = np.ones(tuple(patch_shape), dtype=np.float64)
    for axis, n in enumerate(patch_shape):
        coords = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
        sigma = max(n * sigma_scale, 1e-6)
        profile = np.exp(-0.5 * (coords / sigma) ** 2)
        shape = [1] * len(patch_shape)
        shape[axis] = n
        weights = weights * profile.reshape(shape)
    weights /= weights.max()
    positive = weights[weights > 0]
    weights[weights == 0] = positive.min()
    return weights


def fuse_patches(patches: Sequence[np.ndarray], grid: PatchGrid, fusion: Fusion = "mean") -> np.ndarray:
    """Weighted accumulate/divide of overlapping patches into one array.

    Patches are accumulated in float64 in origin order so the result does not
    depend on how they were produced.

    Raises:
        GeometryError: patch count or shape disagree with the grid
    """
    if len(patches) != len(grid):
        raise GeometryError(f"got {len(patches)} patches for a grid of {len(grid)}")
    if not patches:
        raise GeometryError("no patches to fuse")
    lead = np.shape(patches[0])[:-3]
    for patch in patches:
        if np.shape(patch) != (*lead, *grid.patch_shape):
            raise GeometryError(
                f"patch shape {np.shape(patch)} != expected {(*lead, *grid.patch_shape)}"
            )

    nx, ny, nz = grid.dims
    accum = np.zeros((*lead, nz, ny, nx), dtype=np.float64)
    norm = np.zeros((nz, ny, nx), dtype=np.float64)
    if fusion == "mean":
        weight = np.ones(grid.patch_shape, dtype=np.float64)
    elif fusion == "gaussian":
        weight = gaussian_weight_map(grid.patch_shape)
    else:
        raise PlanError(f"unknown fusion rule '{fusion}'", field="fusion")

    for origin, patch in zip(grid.origins, patches):
        region = grid.slices(origin)
        accum[(..., *region)] += np.asarray(patch, dtype=np.float64) * weight
        norm[region] += weight
    return accum / norm


def reassemble(
    patches: Sequence[np.ndarray],
    grid: PatchGrid,
    dims: Sequence[int],
    voxel_mm: Sequence[float] = (1.0, 1.0, 1.0),
    fusion: Fusion = "mean",
) -> Volume3D:
    """Rebuild an SUV volume from patches by overlap averaging."""
    if tuple(int(d) for d in dims) != grid.dims:
        raise GeometryError(f"dims {tuple(dims)} do not match grid dims {grid.dims}")
    fused = fuse_patches(patches, grid, fusion)
    if fused.ndim != 3:
        raise GeometryError("reassemble expects single-channel patches")
    return Volume3D(grid.dims, tuple(voxel_mm), fused.astype(np.float32))


# =============================================================================
# TRAINING SAMPLER
# =============================================================================


@dataclass(frozen=True)
class PatchSample:
    """One training crop: SUV patches (same order as the inputs), labels, origin."""

    suv: tuple[np.ndarray, ...]
    labels: np.ndarray
    origin: Triple
    lesion_fallback: bool = False


def _window_sums(mask: np.ndarray, patch_shape: Sequence[int]) -> np.ndarray:
    """Number of True voxels in every patch-sized window, one entry per valid origin."""
    table = np.pad(mask.astype(np.int64), ((1, 0), (1, 0), (1, 0))).cumsum(0).cumsum(1).cumsum(2)
    pz, py, px = patch_shape
    return (
        table[pz:, py:, px:]
        - table[:-pz, py:, px:]
        - table[pz:, :-py, px:]
        - table[pz:, py:, :-px]
        + table[:-pz, :-py, px:]
        + table[:-pz, py:, :-px]
        + table[pz:, :-py, :-px]
        - table[:-pz, :-py, :-px]
    )


def lesion_origins(labels: LabelVolume, patch_size: Sequence[int]) -> np.ndarray:
    """Array indices (z, y, x) of every origin whose patch holds a lesion voxel."""
    px, py, pz = patch_size
    counts = _window_sums(labels.data == 1, (pz, py, px))
    return np.argwhere(counts > 0)


def sample_training_patch(
    suv_volumes: Sequence[Volume3D],
    labels: LabelVolume,
    patch_size: Sequence[int],
    lesion_target_frac: float,
    rng: np.random.Generator,
    lesion_candidates: Optional[np.ndarray] = None,
) -> PatchSample:
    """Draw one patch position and crop every volume there.

    With probability `lesion_target_frac` the origin is drawn uniformly among
    lesion-containing origins, otherwise uniformly among all valid origins.
    A lesion-free case silently falls back to uniform and is flagged.
    `lesion_candidates` lets callers cache lesion_origins per case.
    """
    for volume in suv_volumes:
        check_geometry(volume, labels)
    px, py, pz = (int(p) for p in patch_size)
    nx, ny, nz = labels.dims
    if px > nx or py > ny or pz > nz:
        raise PlanError(f"patch {tuple(patch_size)} exceeds volume {labels.dims}", field="patch_size")

    want_lesion = rng.random() < lesion_target_frac
    candidates = np.empty((0, 3), dtype=np.int64)
    if lesion_target_frac > 0:
        candidates = lesion_candidates if lesion_candidates is not None else lesion_origins(labels, patch_size)
    fallback = lesion_target_frac > 0 and len(candidates) == 0
    if fallback:
        logger.debug("No lesion voxels in case, sampling uniformly")

    if want_lesion and not fallback:
        oz, oy, ox = (int(v) for v in candidates[rng.integers(len(candidates))])
    else:
        ox = int(rng.integers(nx - px + 1))
        oy = int(rng.integers(ny - py + 1))
        oz = int(rng.integers(nz - pz + 1))

    region = (slice(oz, oz + pz), slice(oy, oy + py), slice(ox, ox + px))
    return PatchSample(
        suv=tuple(np.array(v.data[region]) for v in suv_volumes),
        labels=np.array(labels.data[region]),
        origin=(ox, oy, oz),
        lesion_fallback=fallback,
    )

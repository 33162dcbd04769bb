"""Whole-volume inference: patch-wise denoising, revision, segmentation, quantification.

Patch i always draws its chain noise from the stream derived from (seed, "patch", i),
so denoising and segmentation of the same volume with the same seed share the
same denoised patches regardless of the inference batch size.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
import torch

from ..config import ExperimentConfig, get_settings
from ..networks.params import JointModel, check_compatible, load_checkpoint
from .diffusion import (
    DenoiserFn,
    DiffusionNorm,
    ScheduleTable,
    cosine_schedule,
    one_step_estimate,
    sample_chain,
)
from .errors import GeometryError
from .metrics import clinical_metrics
from .models import ClassRoster, QuantReport
from .patching import PatchGrid, extract, fuse_patches, plan_grid
from .phantom import load_manifest
from .rng import derive_seed, torch_generator
from .volume import LabelVolume, Volume3D, check_geometry, read_suv, write_json, write_volume

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SegOutput:
    """Fused labels plus the averaged probability maps they came from."""

    labels: LabelVolume
    lesion_prob: Volume3D
    organ_probs: tuple[Volume3D, ...]  # organ head channels: 0 = no organ, j = class j + 1
    p_hc: Volume3D


def load_model(path: Path, config: Optional[ExperimentConfig] = None) -> tuple[JointModel, ExperimentConfig]:
    """Load a checkpoint; with a config given, it must match the checkpoint's network."""
    checkpoint = load_checkpoint(path)
    if config is not None:
        check_compatible(checkpoint, config)
    model = checkpoint.build_model()
    model.eval()
    return model, config or checkpoint.config


def _check_grid(volume: Volume3D, grid: PatchGrid) -> None:
    if volume.dims != grid.dims:
        raise GeometryError(f"grid planned for {grid.dims}, volume has {volume.dims}")


def _batches(n: int, size: int):
    size = max(1, size)
    for start in range(0, n, size):
        yield range(start, min(start + size, n))


def _denoised_patches(
    i_lc: Volume3D,
    denoiser_fn: DenoiserFn,
    sched: ScheduleTable,
    grid: PatchGrid,
    seed: int,
    norm: DiffusionNorm,
    one_step: bool,
    batch_size: int,
) -> list[torch.Tensor]:
    """Diffusion-space P_HC for every patch, each (1, 1, D, H, W)."""
    patches = extract(i_lc, grid)
    sampler = one_step_estimate if one_step else sample_chain
    out: list[torch.Tensor] = []
    for indices in _batches(len(patches), batch_size):
        condition = norm.to_diffusion(torch.from_numpy(np.stack([patches[i] for i in indices])[:, None]))
        generators = [torch_generator(seed, "patch", i) for i in indices]
        result = sampler(condition, denoiser_fn, sched, generators)
        out.extend(result[k : k + 1] for k in range(len(indices)))
        logger.debug(f"Denoised patches {indices.start}..{indices.stop - 1} of {len(patches)}")
    return out


def denoise_volume(
    i_lc: Volume3D,
    model: Union[JointModel, DenoiserFn],
    sched: ScheduleTable,
    grid: PatchGrid,
    seed: int,
    config: ExperimentConfig,
    one_step: bool = False,
) -> Volume3D:
    """Reverse-diffusion denoising of a whole volume; returns SUV clamped to the cutoff.

    `model` may also be a bare denoiser function (x_t, condition, t) -> eps_hat.
    """
    _check_grid(i_lc, grid)
    norm = DiffusionNorm(config.diffusion.suv_cutoff)
    denoiser_fn = model.denoiser if isinstance(model, JointModel) else model
    with torch.inference_mode():
        patches = _denoised_patches(
            i_lc, denoiser_fn, sched, grid, seed, norm, one_step, get_settings().inference_batch
        )
        suv = [norm.to_suv(p[0, 0]).double().numpy() for p in patches]
    fused = fuse_patches(suv, grid, config.patching.fusion)
    return i_lc.with_data(fused.astype(np.float32))


def fuse_labels(lesion_prob: np.ndarray, organ_probs: np.ndarray, threshold: float) -> np.ndarray:
    """Organ argmax (channel j -> class j + 1, channel 0 -> background), lesion over organ."""
    organ_channel = organ_probs.argmax(axis=0)
    labels = np.where(organ_channel > 0, organ_channel + 1, 0)
    labels[lesion_prob > threshold] = 1
    return labels.astype(np.uint8)


def segment_volume(
    i_lc: Volume3D,
    model: JointModel,
    sched: ScheduleTable,
    grid: PatchGrid,
    seed: int,
    config: ExperimentConfig,
    fast: Optional[bool] = None,
    denoiser_fn: Optional[Callable] = None,
) -> SegOutput:
    """Denoise, revise and segment every patch, then fuse probabilities and labels.

    `fast` selects the one-step P_HC estimate instead of the full chain; it
    defaults to config.inference.fast_seg.
    """
    _check_grid(i_lc, grid)
    one_step = config.inference.fast_seg if fast is None else fast
    norm = DiffusionNorm(config.diffusion.suv_cutoff)
    model.eval()
    lc_patches = extract(i_lc, grid)
    p_hc_suv, lesion_patches, organ_patches = [], [], []
    with torch.inference_mode():
        p_hc = _denoised_patches(
            i_lc,
            denoiser_fn or model.denoiser,
            sched,
            grid,
            seed,
            norm,
            one_step,
            get_settings().inference_batch,
        )
        for p, lc in zip(p_hc, lc_patches):
            lc_t = torch.from_numpy(lc)[None, None]
            p_hcr = model.revision(p, lc_t) if config.ablation.use_revision_module else lc_t
            lesion_logits, organ_logits = model.segmenter(p_hcr, lc_t)
            lesion_patches.append(lesion_logits.softmax(dim=1)[0, 1].double().numpy())
            organ_patches.append(organ_logits.softmax(dim=1)[0].double().numpy())
            p_hc_suv.append(norm.to_suv(p[0, 0]).double().numpy())

    fusion = config.patching.fusion
    lesion_prob = np.clip(fuse_patches(lesion_patches, grid, fusion), 0.0, 1.0)
    organ_probs = np.clip(fuse_patches(organ_patches, grid, fusion), 0.0, 1.0)
    labels = fuse_labels(lesion_prob, organ_probs, config.inference.lesion_threshold)
    num_classes = organ_probs.shape[0] + 1
    return SegOutput(
        labels=LabelVolume(i_lc.dims, i_lc.voxel_mm, labels, num_classes),
        lesion_prob=i_lc.with_data(lesion_prob.astype(np.float32)),
        organ_probs=tuple(i_lc.with_data(ch.astype(np.float32)) for ch in organ_probs),
        p_hc=i_lc.with_data(fuse_patches(p_hc_suv, grid, fusion).astype(np.float32)),
    )


def generic_roster(num_classes: int) -> ClassRoster:
    """Default roster when it matches, numbered organ names otherwise."""
    default = ClassRoster.default()
    if default.num_classes == num_classes:
        return default
    return ClassRoster(names=("background", "lesion", *(f"class_{s}" for s in range(2, num_classes))))


def quantify(
    p_hc: Volume3D, seg: Union[SegOutput, LabelVolume], roster: Optional[ClassRoster] = None
) -> QuantReport:
    """MTV, TLG and organ SUVmean of a denoised volume under a segmentation."""
    labels = seg.labels if isinstance(seg, SegOutput) else seg
    check_geometry(p_hc, labels)
    return clinical_metrics(p_hc, labels, roster or generic_roster(labels.num_classes))


# =============================================================================
# DATASET PREDICTION
# =============================================================================

# Per-case prediction files read back by evaluation
PRED_P_HC = "p_hc.pvol"
PRED_SEG = "seg.pvol"
PRED_LESION_PROB = "lesion_prob.pvol"
PRED_REPORT = "report.json"


def write_prediction(seg: SegOutput, case_dir: Path, roster: ClassRoster) -> QuantReport:
    """Write P_HC, fused labels, probability maps and the quantification report."""
    case_dir = Path(case_dir)
    write_volume(seg.p_hc, case_dir / PRED_P_HC)
    write_volume(seg.labels, case_dir / PRED_SEG)
    write_volume(seg.lesion_prob, case_dir / PRED_LESION_PROB)
    for channel, volume in enumerate(seg.organ_probs):
        write_volume(volume, case_dir / f"organ_prob_{channel}.pvol")
    report = quantify(seg.p_hc, seg, roster)
    write_json(report.model_dump(mode="json"), case_dir / PRED_REPORT)
    return report


def predict_dataset(
    model: JointModel,
    config: ExperimentConfig,
    data_dir: Path,
    out_dir: Path,
    seed: int,
    split: str = "test",
    fraction: Optional[float] = None,
) -> list[str]:
    """Segment every `split` case of a dataset at one count level; returns the case ids.

    The count level defaults to config.inference.count_fraction, then to the
    lowest level present in each case.
    """
    data_dir, out_dir = Path(data_dir), Path(out_dir)
    manifest = load_manifest(data_dir)
    sched = cosine_schedule(config.diffusion.T, config.diffusion.s_offset)
    roster = config.roster
    done = []
    for record in (c for c in manifest.cases if c.split == split):
        level = fraction or config.inference.count_fraction or min(record.fractions)
        i_lc = read_suv(data_dir / manifest.lc_file(record, level))
        grid = plan_grid(i_lc.dims, config.patching.patch_size, config.patching.stride)
        seg = segment_volume(i_lc, model, sched, grid, derive_seed(seed, "case", record.case_id), config)
        write_prediction(seg, out_dir / record.case_id, roster)
        logger.info(f"Predicted {record.case_id} at count level {level:g}")
        done.append(record.case_id)
    return done

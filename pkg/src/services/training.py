"""Joint training of denoiser, revision module and segmenter.

One step draws per-item timesteps and noise, predicts the noise, forms the
one-step x0 estimate as the training-time denoised patch, feeds it through the
revision module and segmenter, and takes one Adam update on

    L_diff + lambda_warm(e) * (L_lor + L_rev + L_seg)

Every random draw comes from generators stored in the TrainState, so a run
resumed from a checkpoint continues exactly where the original left off.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np
import torch

from ..config import ExperimentConfig, get_settings
from ..networks.params import Checkpoint, JointModel, check_compatible, init_params, load_checkpoint, save_checkpoint
from .diffusion import DiffusionNorm, ScheduleTable, cosine_schedule, forward_diffuse, predict_x0, sample_timesteps
from .errors import ConfigError, TrainingDivergenceError
from .losses import diff_loss, lor_loss, rev_loss, seg_loss, total_loss, warmup_weight
from .models import LossLogRow, LossReport
from .patching import lesion_origins, sample_training_patch
from .phantom import load_manifest
from .rng import derive_seed, numpy_rng, torch_generator
from .volume import LabelVolume, Volume3D, read_labels, read_suv

logger = logging.getLogger(__name__)

Batch = dict[str, torch.Tensor]


# =============================================================================
# DATA
# =============================================================================


@dataclass
class TrainingCase:
    """A case held in memory with its lesion-origin cache."""

    case_id: str
    lc: dict[float, Volume3D]
    hc: Volume3D
    labels: LabelVolume
    lesion_candidates: Optional[np.ndarray] = None


def load_training_cases(
    data_dir: Path, split: str = "train", fractions: Optional[list[float]] = None
) -> list[TrainingCase]:
    """Read every case of `split` (all fractions unless restricted)."""
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir)
    cases = []
    for record in manifest.cases:
        if record.split != split:
            continue
        wanted = fractions or record.fractions
        lc = {f: read_suv(data_dir / manifest.lc_file(record, f)) for f in wanted}
        cases.append(
            TrainingCase(
                case_id=record.case_id,
                lc=lc,
                hc=read_suv(data_dir / record.files["hc"]),
                labels=read_labels(data_dir / record.files["labels"]),
            )
        )
    return cases


def sample_batch(
    cases: list[TrainingCase], config: ExperimentConfig, rng: np.random.Generator
) -> tuple[Batch, int]:
    """Draw a batch of lesion-balanced patches; returns the batch and the fallback count."""
    lc_patches, hc_patches, label_patches = [], [], []
    fallbacks = 0
    patch = config.patching.patch_size
    for _ in range(config.training.batch_size):
        case = cases[int(rng.integers(len(cases)))]
        fractions = sorted(case.lc)
        fraction = fractions[int(rng.integers(len(fractions)))]
        if case.lesion_candidates is None:
            case.lesion_candidates = lesion_origins(case.labels, patch)
        sample = sample_training_patch(
            [case.lc[fraction], case.hc],
            case.labels,
            patch,
            config.patching.lesion_target_frac,
            rng,
            lesion_candidates=case.lesion_candidates,
        )
        fallbacks += int(sample.lesion_fallback)
        lc_patches.append(sample.suv[0])
        hc_patches.append(sample.suv[1])
        label_patches.append(sample.labels)
    batch = {
        "i_lc": torch.from_numpy(np.stack(lc_patches)[:, None]),
        "i_hc": torch.from_numpy(np.stack(hc_patches)[:, None]),
        "labels": torch.from_numpy(np.stack(label_patches).astype(np.int64)),
    }
    return batch, fallbacks


# =============================================================================
# STEP
# =============================================================================


@dataclass
class TrainState:
    """Everything a run needs to continue: weights, Adam moments, counters, generators."""

    model: JointModel
    optimizer: torch.optim.Adam
    epoch: int = 0
    step: int = 0
    generator: torch.Generator = field(default_factory=torch.Generator)
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    history: list[LossLogRow] = field(default_factory=list)


def make_optimizer(model: JointModel, config: ExperimentConfig) -> torch.optim.Adam:
    training = config.training
    return torch.optim.Adam(
        model.parameters(),
        lr=training.learning_rate,
        betas=training.adam_betas,
        eps=training.adam_eps,
        foreach=False,
    )


def new_state(config: ExperimentConfig) -> TrainState:
    """Fresh state; init weights and every stream derive from config.seed."""
    model = init_params(config, derive_seed(config.seed, "init"))
    return TrainState(
        model=model,
        optimizer=make_optimizer(model, config),
        generator=torch_generator(config.seed, "train", "noise"),
        rng=numpy_rng(config.seed, "train", "patches"),
    )


def compute_losses(
    batch: Batch,
    model: JointModel,
    sched: ScheduleTable,
    config: ExperimentConfig,
    generator: torch.Generator,
    epoch: int,
) -> tuple[torch.Tensor, LossReport]:
    """Forward pass of one batch; returns the differentiable total and its report."""
    norm = DiffusionNorm(config.diffusion.suv_cutoff)
    weights = config.class_weights
    ablation = config.ablation
    i_lc, i_hc, labels = batch["i_lc"], batch["i_hc"], batch["labels"]

    x0 = norm.to_diffusion(i_hc)
    condition = norm.to_diffusion(i_lc)
    t = sample_timesteps(i_hc.shape[0], sched.T, generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = forward_diffuse(x0, t, eps, sched)
    eps_hat = model.denoiser(x_t, condition, t)
    l_diff = diff_loss(eps_hat, eps)

    p_hc = predict_x0(x_t, eps_hat, t, sched)
    if config.training.detach_denoised:
        p_hc = p_hc.detach()

    zero = l_diff.new_zeros(())
    l_lor = lor_loss(norm.to_suv(p_hc), i_hc, labels, weights) if ablation.use_lor_regularizer else zero
    if ablation.use_revision_module:
        p_hcr = model.revision(p_hc, i_lc)
        l_rev = rev_loss(p_hcr, i_hc, labels, weights)
    else:
        p_hcr, l_rev = i_lc, zero

    lesion_logits, organ_logits = model.segmenter(p_hcr, i_lc)
    l_seg = seg_loss(
        lesion_logits.softmax(dim=1),
        organ_logits.softmax(dim=1),
        labels,
        weights,
        focal=config.weights.focal_dice,
    )

    lambda_warm = warmup_weight(epoch, config.training.e_max)
    report = total_loss(
        {"diff": l_diff.item(), "lor": l_lor.item(), "rev": l_rev.item(), "seg": l_seg.item()},
        lambda_warm,
    )
    return l_diff + lambda_warm * (l_lor + l_rev + l_seg), report


def train_step(
    batch: Batch, state: TrainState, sched: ScheduleTable, config: ExperimentConfig
) -> tuple[TrainState, LossReport]:
    """One Adam update on all parameters that received gradients.

    Raises:
        TrainingDivergenceError: a loss term is not finite (weights untouched)
    """
    state.model.train()
    try:
        loss, report = compute_losses(batch, state.model, sched, config, state.generator, state.epoch)
    except TrainingDivergenceError as e:
        e.report.update({"step": state.step, "epoch": state.epoch})
        raise
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.history.append(LossLogRow.from_report(state.step, state.epoch, report))
    state.step += 1
    return state, report


# =============================================================================
# CHECKPOINTS
# =============================================================================


def _optimizer_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for index, moments in state.optimizer.state_dict()["state"].items():
        for key, value in moments.items():
            arrays[f"optim/{index}/{key}"] = torch.as_tensor(value).detach().cpu().numpy().copy()
    arrays["rng/torch"] = state.generator.get_state().numpy().copy()
    return arrays


def save_state(path: Path, state: TrainState, config: ExperimentConfig) -> None:
    meta: dict[str, Any] = {
        "epoch": state.epoch,
        "step": state.step,
        "numpy_rng": state.rng.bit_generator.state,
        "history": [row.model_dump(by_alias=True) for row in state.history],
    }
    save_checkpoint(path, state.model, config, extra_arrays=_optimizer_arrays(state), meta=meta)


def restore_state(checkpoint: Checkpoint, config: ExperimentConfig) -> TrainState:
    """Rebuild a TrainState so that training continues bit-for-bit."""
    check_compatible(checkpoint, config)
    state = new_state(config)
    checkpoint.params().load_into(state.model)

    optim_state: dict[int, dict[str, torch.Tensor]] = {}
    for name, array in checkpoint.arrays.items():
        if not name.startswith("optim/"):
            continue
        _, index, key = name.split("/")
        optim_state.setdefault(int(index), {})[key] = torch.from_numpy(array.copy())
    saved = state.optimizer.state_dict()
    saved["state"] = optim_state
    state.optimizer.load_state_dict(saved)

    state.generator.set_state(torch.from_numpy(checkpoint.arrays["rng/torch"].copy()))
    state.rng.bit_generator.state = checkpoint.meta["numpy_rng"]
    state.epoch = int(checkpoint.meta["epoch"])
    state.step = int(checkpoint.meta["step"])
    state.history = [LossLogRow.model_validate(row) for row in checkpoint.meta.get("history", [])]
    return state


# =============================================================================
# RUN
# =============================================================================


@dataclass
class TrainResult:
    checkpoint: Path
    loss_log: Path
    history: list[LossLogRow]
    fallbacks: int = 0


def _log_line(row: LossLogRow) -> str:
    return json.dumps(row.model_dump(by_alias=True), sort_keys=True) + "\n"


def train(
    cases: list[TrainingCase],
    config: ExperimentConfig,
    out_dir: Path,
    resume_from: Optional[Path] = None,
    on_step: Optional[Callable[[TrainState, LossReport], None]] = None,
) -> TrainResult:
    """Run e_max epochs of steps_per_epoch steps, checkpointing at epoch ends.

    Raises:
        ConfigError: no training cases
        TrainingDivergenceError: a loss became non-finite; the log up to that step is kept
    """
    if not cases:
        raise ConfigError("training needs at least one case", field="data")
    if config.patching.lesion_target_frac > 0 and not any((c.labels.data == 1).any() for c in cases):
        logger.warning("No training case contains lesion voxels; patches will be drawn uniformly")

    torch.use_deterministic_algorithms(True)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    settings = get_settings()
    log_path = out_dir / settings.loss_log_filename
    sched = cosine_schedule(config.diffusion.T, config.diffusion.s_offset)
    training = config.training

    state = restore_state(load_checkpoint(resume_from), config) if resume_from else new_state(config)
    if resume_from:
        logger.info(f"Resuming from {resume_from} at epoch {state.epoch}, step {state.step}")

    fallbacks_total = 0
    with open(log_path, "w", encoding="utf-8") as log:
        for row in state.history:
            log.write(_log_line(row))
        while state.epoch < training.e_max:
            fallbacks = 0
            for _ in range(training.steps_per_epoch):
                batch, n_fallback = sample_batch(cases, config, state.rng)
                fallbacks += n_fallback
                _, report = train_step(batch, state, sched, config)
                log.write(_log_line(state.history[-1]))
                if on_step:
                    on_step(state, report)
            log.flush()
            recent = state.history[-training.steps_per_epoch :]
            mean_total = sum(r.total for r in recent) / len(recent)
            logger.info(
                f"Epoch {state.epoch + 1}/{training.e_max}: mean total {mean_total:.4f}, "
                f"lambda {recent[-1].lambda_warm:.4f}, {fallbacks} lesion-free fallbacks"
            )
            fallbacks_total += fallbacks
            state.epoch += 1
            if state.epoch % training.checkpoint_interval == 0 and state.epoch < training.e_max:
                save_state(out_dir / f"checkpoint_epoch_{state.epoch:03d}.pckpt", state, config)

    final = out_dir / "checkpoint_final.pckpt"
    save_state(final, state, config)
    return TrainResult(checkpoint=final, loss_log=log_path, history=list(state.history), fallbacks=fallbacks_total)

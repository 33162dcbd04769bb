"""Training objectives and the warming-up combination.

Image tensors are (B, 1, D, H, W); label tensors are integer (B, D, H, W).
Masked L1 terms are per-mask means so each class contributes independently of
its size.
"""

import math
from typing import Mapping

import torch

from .errors import ConfigError, TrainingDivergenceError
from .models import ClassWeights, LossReport

PROB_CLAMP = 1e-7
DICE_EPS = 1e-7
# focal exponent applied to (1 - soft Dice)
FOCAL_GAMMA = 0.75


def diff_loss(eps_hat: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean absolute error between predicted and injected noise."""
    return (eps_hat - eps).abs().mean()


def masked_l1(pred: torch.Tensor, ref: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """sum(mask * |pred - ref|) / max(sum(mask), 1); an empty mask gives 0."""
    mask = mask.to(pred.dtype)
    return (mask * (pred - ref).abs()).sum() / mask.sum().clamp(min=1.0)


def _class_mask(labels: torch.Tensor, s: int, like: torch.Tensor) -> torch.Tensor:
    mask = labels == s
    if mask.ndim == like.ndim - 1:
        mask = mask.unsqueeze(1)
    return mask.to(like.dtype)


def class_weighted_l1(
    pred: torch.Tensor,
    ref: torch.Tensor,
    labels: torch.Tensor,
    weights: ClassWeights,
    first_class: int,
) -> torch.Tensor:
    """sum over s >= first_class of w[s] * masked_l1 over class s."""
    total = pred.new_zeros(())
    for s in range(first_class, len(weights)):
        if weights[s] == 0:
            continue
        total = total + weights[s] * masked_l1(pred, ref, _class_mask(labels, s, pred))
    return total


def lor_loss(
    p_hc_suv: torch.Tensor, i_hc_suv: torch.Tensor, labels: torch.Tensor, weights: ClassWeights
) -> torch.Tensor:
    """Lesion/organ regularizer: weighted masked L1 over classes 1..S (background excluded)."""
    return class_weighted_l1(p_hc_suv, i_hc_suv, labels, weights, first_class=1)


def rev_loss(
    p_hcr: torch.Tensor, i_hc: torch.Tensor, labels: torch.Tensor, weights: ClassWeights
) -> torch.Tensor:
    """Revision supervision: weighted masked L1 over classes 0..S."""
    return class_weighted_l1(p_hcr, i_hc, labels, weights, first_class=0)


def class_probability(lesion_probs: torch.Tensor, organ_probs: torch.Tensor, s: int) -> torch.Tensor:
    """Probability map of class s >= 1: lesion head for s = 1, organ channel s - 1 otherwise."""
    if s == 1:
        return lesion_probs[:, 1:2]
    return organ_probs[:, s - 1 : s]


def focal_dice(p: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """(1 - D)^gamma with soft Dice D = 2 sum(PM) / (sum(P^2) + sum(M^2) + eps)."""
    dice = 2.0 * (p * m).sum() / ((p * p).sum() + (m * m).sum() + DICE_EPS)
    return (1.0 - dice).clamp(min=0.0) ** FOCAL_GAMMA


def modulated_focal_dice(p: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """1 - 2 sum(F P M) / (sum(F P^2) + sum(M^2) + eps) with voxel modulation F = (1 - P)^(1/gamma).

    Confident voxels are down-weighted inside the Dice sums, so this form does
    not vanish for a perfect prediction.
    """
    modulation = (1.0 - p) ** (1.0 / FOCAL_GAMMA)
    dice = 2.0 * (modulation * p * m).sum() / ((modulation * p * p).sum() + (m * m).sum() + DICE_EPS)
    return 1.0 - dice


FOCAL_DICE = {"power": focal_dice, "modulated": modulated_focal_dice}


def binary_cross_entropy(p: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    return -(m * torch.log(p) + (1.0 - m) * torch.log(1.0 - p)).mean()


def seg_loss(
    lesion_probs: torch.Tensor,
    organ_probs: torch.Tensor,
    labels: torch.Tensor,
    weights: ClassWeights,
    focal: str = "power",
) -> torch.Tensor:
    """(1/S) sum over s = 1..S of w[s] * (BCE_s + focal Dice_s).

    `focal` picks the Dice term: "power" is (1 - D)^gamma, "modulated" weights
    the Dice sums voxelwise (see modulated_focal_dice). "power" is the default
    because it is zero for a perfect prediction, so a perfect segmentation
    leaves only the BCE part; "modulated" keeps a positive Dice term there.

    Raises:
        TrainingDivergenceError: probabilities are not finite
    """
    if not (torch.isfinite(lesion_probs).all() and torch.isfinite(organ_probs).all()):
        raise TrainingDivergenceError("segmentation probabilities are not finite")
    num_classes = organ_probs.shape[1] + 1
    if num_classes != len(weights):
        raise ConfigError(
            f"{len(weights)} class weights for a {num_classes}-class segmenter", field="weights"
        )
    if focal not in FOCAL_DICE:
        raise ConfigError(f"unknown focal Dice form '{focal}'", field="focal_dice")
    dice_term = FOCAL_DICE[focal]
    s_max = num_classes - 1
    total = lesion_probs.new_zeros(())
    for s in range(1, s_max + 1):
        p = class_probability(lesion_probs, organ_probs, s).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
        m = _class_mask(labels, s, p)
        total = total + weights[s] * (binary_cross_entropy(p, m) + dice_term(p, m))
    return total / s_max


def warmup_weight(e: float, e_max: int) -> float:
    """exp(-5 (1 - e/e_max)^2); e counts completed epochs from 0."""
    if e_max < 1:
        raise ConfigError("e_max must be >= 1", field="e_max")
    if not 0 <= e <= e_max:
        raise ConfigError(f"epoch {e} outside [0, {e_max}]", field="e")
    return math.exp(-5.0 * (1.0 - e / e_max) ** 2)


def total_loss(parts: Mapping[str, float], lambda_warm: float) -> LossReport:
    """Combine scalar parts into a LossReport: diff + lambda * (lor + rev + seg).

    Raises:
        TrainingDivergenceError: a part or the total is not finite
    """
    diff = float(parts.get("diff", 0.0))
    lor = float(parts.get("lor", 0.0))
    rev = float(parts.get("rev", 0.0))
    seg = float(parts.get("seg", 0.0))
    total = diff + lambda_warm * (lor + rev + seg)
    values = {"diff": diff, "lor": lor, "rev": rev, "seg": seg, "lambda": lambda_warm, "total": total}
    if not all(math.isfinite(v) for v in values.values()):
        raise TrainingDivergenceError(f"non-finite loss: {values}", report=values)
    return LossReport(diff=diff, lor=lor, rev=rev, seg=seg, lambda_warm=lambda_warm, total=total)

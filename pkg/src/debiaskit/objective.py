"""The training objective: entailment contrastive loss, alignment loss,
masked-token loss, and their weighted combination.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import BatchTooSmall, NonPositiveTau, NoMaskedPositions

_EXCLUDE_FILL = -1.0e30

ALIGN_VARIANTS = ("AL1", "AL2", "AL3")


@dataclass
class ObjectiveConfig:
    alpha: float = 0.05
    lambda_: float = 0.1
    tau: float = 0.05
    align_variant: str = "AL1"
    use_cl: bool = True
    use_al: bool = True
    use_mlm: bool = True
    # Stricter exclusion: drop every duplicated augmented hypothesis from
    # every anchor's denominator, not just the anchor's own index.
    exclude_all_duplicates: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.lambda_ < 0.0:
            raise ValueError("lambda must be >= 0")
        if self.tau <= 0.0:
            raise NonPositiveTau(f"tau must be > 0, got {self.tau}")
        if self.align_variant not in ALIGN_VARIANTS:
            raise ValueError(f"align_variant must be one of {ALIGN_VARIANTS}")


@dataclass
class LossBreakdown:
    """Per-batch loss values; a disabled component is None, not zero."""

    l_cl: Optional[float]
    l_al: Optional[float]
    l_mlm: Optional[float]
    total: float
    batch_size: int

    def to_dict(self) -> dict:
        return {"l_cl": self.l_cl, "l_al": self.l_al, "l_mlm": self.l_mlm,
                "total": self.total, "batch_size": self.batch_size}


def _sim_block(anchors: Tensor, candidates: Tensor) -> Tensor:
    """Pairwise cosine similarities between two row sets, [m, n]."""
    return ad.l2_normalize_rows(anchors) @ ad.transpose(ad.l2_normalize_rows(candidates), (1, 0))


def _diag(square: Tensor) -> Tensor:
    m = square.data.shape[0]
    return ad.tsum(ad.mul(square, np.eye(m)), axis=1)


def contrastive_loss(premises: Tensor, hypotheses: Tensor,
                     premises_aug: Tensor, hypotheses_aug: Tensor,
                     exclusion_flags, tau: float,
                     exclude_all_duplicates: bool = False) -> Tensor:
    """Entailment contrastive loss over a batch of m quads.

    Each premise anchors its own hypothesis against all 2m in-batch
    hypotheses (originals and augmentations); augmented premises do the
    same with the roles swapped. Where a hypothesis was unchanged by
    augmentation (exclusion_flags), its augmented copy is removed from
    that index's denominators so the positive never doubles as a negative.
    """
    if tau <= 0.0:
        raise NonPositiveTau(f"tau must be > 0, got {tau}")
    m = premises.data.shape[0]
    flags = np.asarray(exclusion_flags, dtype=bool)
    if flags.shape != (m,):
        raise ValueError("exclusion_flags must have one entry per pair")
    inv_tau = 1.0 / tau

    # candidate mask over the augmented-hypothesis block, [m anchors x m columns]
    mask = np.zeros((m, m))
    flagged = np.where(flags)[0]
    if exclude_all_duplicates:
        mask[:, flagged] = _EXCLUDE_FILL
    else:
        mask[flagged, flagged] = _EXCLUDE_FILL

    def anchor_term(anchors, positives_are_aug):
        sim_h = ad.scale(_sim_block(anchors, hypotheses), inv_tau)
        sim_ha = ad.scale(_sim_block(anchors, hypotheses_aug), inv_tau)
        denom = ad.logsumexp(ad.concat([sim_h, sim_ha + mask], axis=1))
        positive = _diag(sim_ha if positives_are_aug else sim_h)
        return denom - positive

    per_pair = anchor_term(premises, False) + anchor_term(premises_aug, True)
    return ad.tmean(per_pair)


def alignment_loss(premises: Tensor, hypotheses: Tensor,
                   premises_aug: Tensor, hypotheses_aug: Tensor,
                   variant: str = "AL1", tau: float = 0.05) -> Tensor:
    """Alignment regularizer over a batch; see ALIGN_VARIANTS.

    AL1 penalizes the squared gap between each pair's similarity and its
    augmented counterpart's. AL2 contrasts each original sentence against
    its augmentation with same-role in-batch negatives. AL3 is the signed
    difference of premise and hypothesis self-similarities.
    """
    m = premises.data.shape[0]
    if variant == "AL1":
        sim = _diag(_sim_block(premises, hypotheses))
        sim_aug = _diag(_sim_block(premises_aug, hypotheses_aug))
        gap = sim_aug - sim
        return ad.tmean(ad.mul(gap, gap))
    if variant == "AL2":
        if m < 2:
            raise BatchTooSmall("AL2 needs at least 2 pairs for in-batch negatives")
        if tau <= 0.0:
            raise NonPositiveTau(f"tau must be > 0, got {tau}")
        inv_tau = 1.0 / tau
        self_mask = np.concatenate([np.eye(m) * _EXCLUDE_FILL, np.zeros((m, m))], axis=1)
        terms = []
        for originals, augmented in ((premises, premises_aug), (hypotheses, hypotheses_aug)):
            pool = ad.concat([originals, augmented], axis=0)
            sims = ad.scale(_sim_block(originals, pool), inv_tau)
            denom = ad.logsumexp(sims + self_mask)
            positive = _diag(ad.scale(_sim_block(originals, augmented), inv_tau))
            terms.append(ad.tsum(denom - positive))
        return ad.scale(terms[0] + terms[1], 1.0 / (2 * m))
    if variant == "AL3":
        sim_p = _diag(_sim_block(premises, premises_aug))
        sim_h = _diag(_sim_block(hypotheses, hypotheses_aug))
        return ad.tmean(ad.neg(sim_p - sim_h))
    raise ValueError(f"unknown alignment variant {variant!r}")


def mlm_loss(logits: Tensor, target_ids: np.ndarray, mask_positions) -> Tensor:
    """Mean cross-entropy at the masked positions of [B, T, |V|] logits.

    mask_positions is a sequence of (row, column) index pairs; target_ids
    is the [B, T] array of original token ids.
    """
    positions = list(mask_positions)
    if not positions:
        raise NoMaskedPositions("mlm_loss needs at least one masked position")
    rows = np.array([r for r, _ in positions], dtype=np.intp)
    cols = np.array([c for _, c in positions], dtype=np.intp)
    picked = ad.select_positions(logits, rows, cols)
    targets = np.asarray(target_ids)[rows, cols]
    return ad.cross_entropy_with_logits(picked, targets)


def _coefficients(config: ObjectiveConfig):
    cl = (1.0 - config.alpha) if config.use_cl else None
    al = config.alpha if config.use_al else None
    mlm = config.lambda_ if config.use_mlm else None
    return cl, al, mlm


def total_loss(l_cl: Optional[float], l_al: Optional[float], l_mlm: Optional[float],
               config: ObjectiveConfig, batch_size: int = 0) -> LossBreakdown:
    """Combine scalar loss values into the interpolated training objective."""
    c_cl, c_al, c_mlm = _coefficients(config)
    total = 0.0
    parts = []
    for coef, value, name in ((c_cl, l_cl, "l_cl"), (c_al, l_al, "l_al"),
                              (c_mlm, l_mlm, "l_mlm")):
        if coef is None:
            parts.append(None)
            continue
        if value is None:
            raise ValueError(f"{name} is enabled by the config but missing")
        parts.append(float(value))
        total += coef * float(value)
    return LossBreakdown(l_cl=parts[0], l_al=parts[1], l_mlm=parts[2],
                         total=total, batch_size=batch_size)


def combine_losses(l_cl: Optional[Tensor], l_al: Optional[Tensor],
                   l_mlm: Optional[Tensor], config: ObjectiveConfig,
                   batch_size: int = 0) -> tuple[Tensor, LossBreakdown]:
    """Tensor-valued combination used in the training loop."""
    c_cl, c_al, c_mlm = _coefficients(config)
    total = None
    for coef, value, name in ((c_cl, l_cl, "l_cl"), (c_al, l_al, "l_al"),
                              (c_mlm, l_mlm, "l_mlm")):
        if coef is None:
            continue
        if value is None:
            raise ValueError(f"{name} is enabled by the config but missing")
        term = ad.scale(value, coef)
        total = term if total is None else total + term
    if total is None:
        raise ValueError("all objective components are disabled")
    breakdown = total_loss(
        None if l_cl is None or c_cl is None else l_cl.item(),
        None if l_al is None or c_al is None else l_al.item(),
        None if l_mlm is None or c_mlm is None else l_mlm.item(),
        config, batch_size=batch_size)
    return total, breakdown

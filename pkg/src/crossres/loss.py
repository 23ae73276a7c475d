"""Transport-masked training losses.

Per training patch the coarse labels (one-hot) and the prediction
probabilities are average-pooled onto a fixed 16x16-pixel block grid and
flattened to N row distributions each. An exact transport plan between the
two row sets marks each block confident (its plan row peaks on the
diagonal) or vague. Confident pixels receive a confidence-weighted
cross-entropy; vague structure is penalized through a per-category
variance between confident-area and vague-area feature means. The plan,
the mask, and the confidence weights are constants of the step: gradients
flow only through the logits and the aggregated decoder feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, NumericError, ShapeError, Tensor
from .transport import cost_matrix, solve_exact

__all__ = [
    "BLOCK", "CELL", "AreaMask", "Supervision", "LossBreakdown",
    "pool_targets", "area_mask", "confidence_weights", "prepare_supervision",
    "weighted_ce_loss", "area_variance_loss", "total_loss", "plain_ce_loss",
    "compute_losses",
]

BLOCK = 16  # pixels per pooled-target block, fixed regardless of patch size
CELL = 8    # pixels per variance-loss grid cell (level-1 feature pooled by 2)


def _softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError(f"label outside [0, {k}): found {labels.min()}..{labels.max()}")
    out = np.zeros((*labels.shape, k))
    np.put_along_axis(out, labels[:, :, None].astype(np.int64), 1.0, axis=2)
    return out


def _block_average(x: np.ndarray, block: int) -> np.ndarray:
    h, w = x.shape[:2]
    if h % block or w % block:
        raise ShapeError(f"extents ({h}, {w}) not divisible by block {block}")
    return x.reshape(h // block, block, w // block, block, -1).mean(axis=(1, 3))


def pool_targets(labels: np.ndarray, logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pool one-hot coarse labels and prediction probabilities onto the
    block grid; both returned as (N, K) rows in row-major block order."""
    h, w = labels.shape
    k = logits.shape[-1]
    if logits.shape[:2] != (h, w):
        raise ShapeError(f"labels {labels.shape} vs logits {logits.shape[:2]}")
    label_rows = _block_average(_one_hot(labels, k), BLOCK).reshape(-1, k)
    pred_rows = _block_average(_softmax_np(np.asarray(logits, dtype=np.float64)),
                               BLOCK).reshape(-1, k)
    return label_rows, pred_rows


@dataclass
class AreaMask:
    flags: np.ndarray   # (N,) 1 = confident block
    grid: np.ndarray    # (H/16, W/16)
    pixels: np.ndarray  # (H, W), nearest-neighbor block replication

    @property
    def ca_fraction(self) -> float:
        return float(self.pixels.mean())


def area_mask(gamma: np.ndarray, hw: tuple[int, int]) -> AreaMask:
    """Row-argmax-on-diagonal rule; a tie at the diagonal counts as confident."""
    h, w = hw
    gh, gw = h // BLOCK, w // BLOCK
    n = gh * gw
    if gamma.shape != (n, n):
        raise ShapeError(f"plan shape {gamma.shape} != ({n}, {n}) for extents ({h}, {w})")
    flags = (np.diag(gamma) >= gamma.max(axis=1)).astype(np.float64)
    grid = flags.reshape(gh, gw)
    pixels = grid.repeat(BLOCK, axis=0).repeat(BLOCK, axis=1)
    return AreaMask(flags, grid, pixels)


def confidence_weights(logits: np.ndarray) -> np.ndarray:
    """exp(max softmax probability) per pixel, in (exp(1/K), e]."""
    return np.exp(_softmax_np(np.asarray(logits, dtype=np.float64)).max(axis=-1))


@dataclass
class Supervision:
    """Constants of one training step (no gradient flows through them)."""
    mask: AreaMask
    weights: np.ndarray         # (H, W) confidence weights
    cell_class: np.ndarray      # (H/8, W/8) category per variance cell
    cell_confident: np.ndarray  # (H/8, W/8) bool, majority of the pixel mask
    p_confident: float
    p_vague: float
    gamma: np.ndarray


def prepare_supervision(logits: np.ndarray, labels: np.ndarray) -> Supervision:
    """Solve the block transport problem and freeze every masking quantity."""
    h, w = labels.shape
    label_rows, pred_rows = pool_targets(labels, logits)
    plan = solve_exact(cost_matrix(label_rows, pred_rows))
    mask = area_mask(plan.gamma, (h, w))
    probs = _softmax_np(np.asarray(logits, dtype=np.float64))
    cell_class = _block_average(probs, CELL).argmax(axis=-1)
    cell_confident = _block_average(mask.pixels[:, :, None], CELL)[:, :, 0] > 0.5
    p_ca = mask.ca_fraction
    return Supervision(mask=mask, weights=confidence_weights(logits),
                       cell_class=cell_class, cell_confident=cell_confident,
                       p_confident=p_ca, p_vague=1.0 - p_ca, gamma=plan.gamma)


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------

def weighted_ce_loss(logits: Tensor, labels: np.ndarray, pixel_mask: np.ndarray,
                     weights: np.ndarray) -> Tensor:
    """Masked, confidence-weighted cross-entropy on logits, normalized by the
    full pixel count (not the confident count)."""
    h, w, k = logits.shape
    if labels.shape != (h, w) or pixel_mask.shape != (h, w) or weights.shape != (h, w):
        raise ShapeError(f"per-pixel inputs must be ({h}, {w})")
    onehot = _one_hot(labels, k)
    coeff = (pixel_mask * weights)[:, :, None] * onehot
    coeff_t = Tensor(coeff.astype(logits.data.dtype))
    log_probs = T.log_softmax(logits, axis=-1)
    return T.mul(T.tsum(T.mul(log_probs, coeff_t)), -1.0 / (h * w))


def plain_ce_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Unmasked mean cross-entropy (the baseline training objective)."""
    h, w, _ = logits.shape
    ones = np.ones((h, w))
    return weighted_ce_loss(logits, labels, ones, ones)


def _masked_mean(x: Tensor, sel: np.ndarray) -> Tensor:
    mask = np.broadcast_to(sel[:, :, None], x.shape).astype(x.data.dtype)
    total = T.tsum(T.mul(x, Tensor(mask)), axis=(0, 1))
    return T.mul(total, 1.0 / float(sel.sum()))


def area_variance_loss(fused: Tensor, sup: Supervision, classes: int) -> tuple[Tensor, np.ndarray]:
    """Sum over categories of proportion-weighted squared distances of the
    confident/vague feature means from the category mean.

    ``fused`` is the (W/4, H/4, C) decoder feature; max- and avg-pooled
    halves are concatenated per 2x2 window before aggregation. Categories
    or sides with no cells contribute zero.
    """
    agg = T.concat([T.pool2d(fused, "max", 2), T.pool2d(fused, "avg", 2)], axis=-1)
    if agg.shape[:2] != sup.cell_class.shape:
        raise ShapeError(f"cell grid {sup.cell_class.shape} does not match "
                         f"aggregated feature {agg.shape[:2]}")
    sigma = np.zeros(classes)
    terms: list[Tensor] = []
    for k in range(classes):
        sel = sup.cell_class == k
        if not sel.any():
            continue
        mean_all = _masked_mean(agg, sel)
        for side_sel, proportion in ((sel & sup.cell_confident, sup.p_confident),
                                     (sel & ~sup.cell_confident, sup.p_vague)):
            if not side_sel.any() or proportion == 0.0:
                continue
            diff = T.sub(_masked_mean(agg, side_sel), mean_all)
            term = T.mul(T.tsum(T.mul(diff, diff)), proportion)
            sigma[k] += term.item()
            terms.append(term)
    if not terms:
        return Tensor(np.zeros((), dtype=fused.data.dtype)), sigma
    total = terms[0]
    for term in terms[1:]:
        total = T.add(total, term)
    return total, sigma


@dataclass
class LossBreakdown:
    ca: Tensor                # confident-area weighted cross-entropy
    va: Tensor                # vague-area variance term
    total: Tensor             # exact sum of the two
    ca_fraction: float
    sigma: np.ndarray         # per-category variance contributions

    def record(self) -> dict:
        return {
            "loss_ca": self.ca.item(),
            "loss_va": self.va.item(),
            "loss": self.total.item(),
            "ca_fraction": self.ca_fraction,
            "sigma": [float(s) for s in self.sigma],
        }


def total_loss(ca: Tensor, va: Tensor, ca_fraction: float,
               sigma: np.ndarray) -> LossBreakdown:
    for name, part in (("ca", ca), ("va", va)):
        if not np.isfinite(part.data).all():
            raise NumericError(f"loss component {name!r} is non-finite")
    return LossBreakdown(ca=ca, va=va, total=T.add(ca, va),
                         ca_fraction=ca_fraction, sigma=sigma)


def compute_losses(logits: Tensor, fused: Tensor, labels: np.ndarray,
                   sup: Supervision) -> LossBreakdown:
    """Full masked objective against frozen supervision constants."""
    classes = logits.shape[-1]
    ca = weighted_ce_loss(logits, labels, sup.mask.pixels, sup.weights)
    va, sigma = area_variance_loss(fused, sup, classes)
    return total_loss(ca, va, sup.mask.ca_fraction, sigma)

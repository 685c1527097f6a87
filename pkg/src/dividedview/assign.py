"""Bipartite matching and the detection loss.

Matching cost is the DETR-style mix of class likelihood and center
distance; the optimal one-to-one assignment comes from
``scipy.optimize.linear_sum_assignment``.  One-to-many training simply
Hungarian-matches every query group against the same ground truth
independently, multiplying the positive pairs.

The loss is sigmoid focal classification over all queries (unmatched
queries are background) plus an L1 box regression over matched pairs,
with yaw entering as its (sin, cos) pair.  Deep supervision sums the loss
over decoder layers; everything is normalized by the ground-truth count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import Tensor

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass
class CostMatrix:
    values: np.ndarray          # [num_preds, num_gt]
    w_cls: float
    w_box: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError("cost matrix must be 2D")


@dataclass
class Assignment:
    """Matched (pred, gt) pairs; preds not listed are background."""

    pairs: list[tuple[int, int]]
    num_preds: int
    num_gts: int

    @property
    def unmatched_gts(self) -> list[int]:
        matched = {j for _, j in self.pairs}
        return [j for j in range(self.num_gts) if j not in matched]


def pairwise_cost(pred_centers: np.ndarray, pred_probs: np.ndarray,
                  gt_centers: np.ndarray, gt_labels: np.ndarray,
                  w_cls: float = 2.0, w_box: float = 0.25) -> CostMatrix:
    """cost[i, j] = w_cls * (-p_i(class_j)) + w_box * ||c_i - c_j||_1."""
    pred_centers = np.asarray(pred_centers, dtype=float)
    pred_probs = np.asarray(pred_probs, dtype=float)
    gt_centers = np.asarray(gt_centers, dtype=float)
    gt_labels = np.asarray(gt_labels, dtype=np.intp)
    if pred_centers.shape[0] < 1:
        raise ValueError("need at least one prediction")
    cls_cost = -pred_probs[:, gt_labels]
    box_cost = np.abs(pred_centers[:, None, :] - gt_centers[None, :, :]).sum(axis=2)
    return CostMatrix(values=w_cls * cls_cost + w_box * box_cost, w_cls=w_cls, w_box=w_box)


def hungarian(cost: CostMatrix) -> Assignment:
    """Minimum-total-cost one-to-one assignment."""
    values = cost.values
    if not np.all(np.isfinite(values)):
        raise ValueError("cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(values)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    return Assignment(pairs=pairs, num_preds=values.shape[0], num_gts=values.shape[1])


def one_to_many_assign(group_costs: list[CostMatrix]) -> list[Assignment]:
    """Independent Hungarian matching per query group against the same GTs."""
    return [hungarian(c) for c in group_costs]


@dataclass
class LossBreakdown:
    total: Tensor
    l3d: float
    l3d_extra: float
    l2d: float = 0.0        # out-of-scope term, fixed at zero
    l3d_dn: float = 0.0     # out-of-scope term, fixed at zero
    positive_pairs: int = 0
    lambda1: float = 1.0
    lambda3: float = 1.0


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda3: float = 1.0
    w_cls: float = 2.0
    w_box: float = 0.25
    # L1 component weights: center(3), log-size(3), yaw sin/cos(2), velocity(2)
    code: tuple = (1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.2, 0.2)


def focal_loss_matrix(logits: Tensor, pos_mask: np.ndarray) -> Tensor:
    """Elementwise sigmoid focal loss (alpha=0.25, gamma=2), summed.

    ``pos_mask[i, k]`` marks query i's assigned class k; every other cell
    is background.
    """
    pos = pos_mask.astype(logits.dtype)
    p = ad.sigmoid(logits)
    # -log(p) = softplus(-x), -log(1-p) = softplus(x)
    pos_term = ad.mul(ad.pow_const(ad.sub(ad.tensor(np.ones((), dtype=logits.dtype)), p), FOCAL_GAMMA),
                      ad.softplus(ad.neg(logits)))
    neg_term = ad.mul(ad.pow_const(p, FOCAL_GAMMA), ad.softplus(logits))
    mix = ad.add(ad.scale(ad.mul(pos_term, ad.tensor(pos)), FOCAL_ALPHA),
                 ad.scale(ad.mul(neg_term, ad.tensor(1.0 - pos)), 1.0 - FOCAL_ALPHA))
    return ad.sum_(mix)


def _gt_target_vector(gts) -> np.ndarray:
    """[G, 10] regression targets: center, log-size, yaw sin/cos, velocity."""
    rows = []
    for g in gts:
        rows.append(np.concatenate([
            np.asarray(g.center, dtype=float),
            np.log(np.asarray(g.size, dtype=float)),
            [np.sin(g.yaw), np.cos(g.yaw)],
            np.asarray(g.velocity, dtype=float)[:2],
        ]))
    return np.stack(rows) if rows else np.zeros((0, 10))


def layer_group_loss(pred, rows: np.ndarray, gts, weights: LossWeights) -> tuple[Tensor, Assignment]:
    """Loss of one decoder layer restricted to one query group.

    ``pred`` is a LayerPrediction (tensor fields over all queries);
    ``rows`` selects the group's query rows.  Matching runs on detached
    values; the returned loss is differentiable.
    """
    centers = ad.take_rows(pred.center, rows)
    logits = ad.take_rows(pred.class_logits, rows)
    n_gt = len(gts)
    probs = 1.0 / (1.0 + np.exp(-logits.data.astype(float)))

    if n_gt:
        gt_centers = np.stack([np.asarray(g.center, dtype=float) for g in gts])
        gt_labels = np.array([g.label for g in gts], dtype=np.intp)
        cost = pairwise_cost(centers.data.astype(float), probs, gt_centers, gt_labels,
                             weights.w_cls, weights.w_box)
        assign = hungarian(cost)
    else:
        assign = Assignment(pairs=[], num_preds=rows.size, num_gts=0)

    norm = 1.0 / max(1, n_gt)
    pos_mask = np.zeros(logits.shape, dtype=bool)
    for i, j in assign.pairs:
        pos_mask[i, gts[j].label] = True
    loss = ad.scale(focal_loss_matrix(logits, pos_mask), norm)

    if assign.pairs:
        pred_rows = np.array([i for i, _ in assign.pairs], dtype=np.intp)
        gt_rows = np.array([j for _, j in assign.pairs], dtype=np.intp)
        box = ad.concat([ad.take_rows(centers, pred_rows),
                         ad.take_rows(ad.take_rows(pred.log_size, rows), pred_rows),
                         ad.take_rows(ad.take_rows(pred.yaw_sincos, rows), pred_rows),
                         ad.take_rows(ad.take_rows(pred.velocity, rows), pred_rows)], axis=1)
        target = _gt_target_vector([gts[j] for j in gt_rows])
        code = np.asarray(weights.code, dtype=box.dtype)
        l1 = ad.sum_(ad.mul(ad.abs_(ad.sub(box, ad.tensor(target.astype(box.dtype)))),
                            ad.tensor(code)))
        loss = ad.add(loss, ad.scale(l1, norm))
    return loss, assign


def detection_loss(per_layer_preds, gts, group_rows: list[np.ndarray],
                   weights: LossWeights) -> LossBreakdown:
    """Deep-supervised detection loss over all layers and query groups.

    ``group_rows[0]`` indexes the default group's query rows; any further
    entries are the one-to-many additional groups (weighted by lambda3).
    The 2D-auxiliary and denoising terms of the full objective are out of
    scope and fixed at zero.
    """
    default_terms, extra_terms = [], []
    positives = 0
    for pred in per_layer_preds:
        for g, rows in enumerate(group_rows):
            term, assign = layer_group_loss(pred, rows, gts, weights)
            positives += len(assign.pairs)
            (default_terms if g == 0 else extra_terms).append(term)

    dtype = per_layer_preds[0].center.dtype

    def added(terms):
        acc = ad.tensor(np.zeros((), dtype=dtype))
        for t in terms:
            acc = ad.add(acc, t)
        return acc

    l3d = added(default_terms)
    l3d_extra = added(extra_terms)

    total = ad.add(ad.scale(l3d, weights.lambda1), ad.scale(l3d_extra, weights.lambda3))
    return LossBreakdown(total=total, l3d=float(l3d.data), l3d_extra=float(l3d_extra.data),
                         positive_pairs=positives, lambda1=weights.lambda1,
                         lambda3=weights.lambda3)

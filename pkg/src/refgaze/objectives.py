"""Loss functions and their composition for pre-training and training.

Location losses are L1 in raw pixels, durations are L1 in seconds, the
token loss is cross-entropy over all pack slots, and the grounding side
combines L1 box regression, a generalized-IoU penalty, and category
cross-entropy. Every loss here is differentiable through diffcore and
verified by the finite-difference oracle.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Pack, PackKind
from .diffcore import autodiff as ad
from .errors import ContractError
from .model import TOKEN_EOS, TOKEN_FIX, TOKEN_PAD, PackPrediction, VLState

LOG_CLAMP = 1e-12


def token_targets(pack: Pack, pack_slots: int) -> np.ndarray:
    """Slot-level token classes: l FIX then PAD padding for normal packs,
    all PAD for null packs, all EOS for terminal packs."""
    if pack.kind is PackKind.TERMINAL:
        return np.full(pack_slots, TOKEN_EOS, dtype=np.int64)
    out = np.full(pack_slots, TOKEN_PAD, dtype=np.int64)
    out[: len(pack.fixations)] = TOKEN_FIX
    return out


def loss_xy(loc_mean: ad.Node, pack: Pack) -> ad.Node:
    """(1/l) sum |x - x_gt| + |y - y_gt| over the l ground-truth fixations,
    raw pixels. Defined for packs that actually contain fixations."""
    if pack.kind is not PackKind.NORMAL:
        raise ContractError(f"loss_xy needs a NORMAL ground-truth pack, got {pack.kind}")
    l = len(pack.fixations)
    gt = np.array([[fx.x, fx.y] for fx in pack.fixations], dtype=np.float32)
    pred = ad.getitem(loc_mean, (slice(0, l),))
    return ad.mul(ad.sum_(ad.abs_(ad.sub(pred, ad.constant(gt)))), ad.constant(1.0 / l))


def loss_token(token_probs: ad.Node, pack: Pack) -> ad.Node:
    """Cross-entropy over all pack slots with the log clamped at 1e-12."""
    slots = token_probs.value.shape[0]
    targets = token_targets(pack, slots)
    onehot = np.zeros((slots, 3), dtype=np.float32)
    onehot[np.arange(slots), targets] = 1.0
    logp = ad.log(ad.maximum(token_probs, ad.constant(LOG_CLAMP)))
    return ad.neg(ad.sum_(ad.mul(logp, ad.constant(onehot))))


def loss_duration(dur_mean: ad.Node, pack: Pack) -> ad.Node:
    """(1/l) sum |d - d_gt| in seconds."""
    if pack.kind is not PackKind.NORMAL:
        raise ContractError(
            f"loss_duration needs a NORMAL ground-truth pack, got {pack.kind}"
        )
    l = len(pack.fixations)
    gt = np.array([[fx.duration / 1000.0] for fx in pack.fixations], dtype=np.float32)
    pred = ad.getitem(dur_mean, (slice(0, l),))
    return ad.mul(ad.sum_(ad.abs_(ad.sub(pred, ad.constant(gt)))), ad.constant(1.0 / l))


def giou(box_a, box_b) -> ad.Node:
    """Generalized IoU of two (x, y, w, h) boxes in normalized coordinates:
    IoU - (enclosing - union) / enclosing, in (-1, 1]."""
    a, b = ad.as_node(box_a), ad.as_node(box_b)
    for v in (a.value, b.value):
        if v.shape != (4,):
            raise ContractError(f"giou expects (4,) boxes, got {v.shape}")
        if v[2] <= 0 or v[3] <= 0:
            raise ContractError(f"degenerate box {v.tolist()}")

    def corner(n):
        x0 = ad.getitem(n, (slice(0, 2),))
        return x0, ad.add(x0, ad.getitem(n, (slice(2, 4),)))

    a0, a1 = corner(a)
    b0, b1 = corner(b)
    zero = ad.constant(np.zeros(2, np.float32))
    inter_wh = ad.maximum(ad.sub(ad.minimum(a1, b1), ad.maximum(a0, b0)), zero)
    inter = ad.mul(ad.getitem(inter_wh, (0,)), ad.getitem(inter_wh, (1,)))

    def area(n):
        return ad.mul(ad.getitem(n, (2,)), ad.getitem(n, (3,)))

    union = ad.sub(ad.add(area(a), area(b)), inter)
    enc_wh = ad.sub(ad.maximum(a1, b1), ad.minimum(a0, b0))
    enc = ad.mul(ad.getitem(enc_wh, (0,)), ad.getitem(enc_wh, (1,)))
    iou = ad.div(inter, union)
    return ad.sub(iou, ad.div(ad.sub(enc, union), enc))


def giou_value(box_a, box_b) -> float:
    return float(giou(np.asarray(box_a, np.float64), np.asarray(box_b, np.float64)).value)


def loss_bbox(pred_box: ad.Node, gt_box) -> tuple[ad.Node, ad.Node]:
    """(l_reg, l_giou): summed L1 over the 4 normalized parameters, and
    1 - GIoU."""
    gt = ad.as_node(np.asarray(gt_box, dtype=np.float32))
    l_reg = ad.sum_(ad.abs_(ad.sub(pred_box, gt)))
    l_giou = ad.sub(ad.constant(1.0), giou(pred_box, gt))
    return l_reg, l_giou


def loss_target(tgt_dist: ad.Node, gt_index: int) -> ad.Node:
    """-log p(gt category), clamped at 1e-12."""
    n = tgt_dist.value.shape[-1]
    if not 0 <= gt_index < n:
        raise IndexError(f"category index {gt_index} outside [0, {n})")
    p = ad.getitem(tgt_dist, (gt_index,))
    return ad.neg(ad.log(ad.maximum(p, ad.constant(LOG_CLAMP))))


@dataclass
class LossBreakdown:
    l_xy: float
    l_token: float
    l_d: float
    l_reg: float
    l_giou: float
    l_target: float
    l_gaze: float
    l_ground: float
    total: float
    node: ad.Node  # differentiable total

    def as_dict(self) -> dict:
        return {
            "l_xy": self.l_xy, "l_token": self.l_token, "l_d": self.l_d,
            "l_reg": self.l_reg, "l_giou": self.l_giou, "l_target": self.l_target,
            "l_gaze": self.l_gaze, "l_ground": self.l_ground, "total": self.total,
        }


def _mean_node(nodes, count=None):
    count = count if count is not None else len(nodes)
    total = nodes[0]
    for n in nodes[1:]:
        total = ad.add(total, n)
    return ad.mul(total, ad.constant(1.0 / count))


def total_loss(vl: VLState, pred: PackPrediction, gt_packs, grounding_flags,
               gt_boxes: np.ndarray, gt_categories: np.ndarray,
               duration_enabled: bool = True,
               ground_average: str = "qualifying") -> LossBreakdown:
    """Multitask training loss for one minibatch of packs.

    Every pack contributes l_token; packs with fixations add l_xy (and l_d
    when duration modeling is on). Packs flagged for grounding (last word
    already uttered, or ground truth terminated) add l_reg + l_giou +
    l_target. The gaze side is averaged over the whole batch; the grounding
    side over the qualifying packs only (set ground_average="batch" to
    divide by batch size instead).
    """
    if ground_average not in ("qualifying", "batch"):
        raise ContractError(f"unknown ground_average {ground_average!r}")
    n = len(gt_packs)
    if n == 0:
        raise ContractError("empty batch")
    zero = ad.constant(0.0)

    gaze_items, xy_vals, tok_vals, dur_vals = [], [], [], []
    ground_items, reg_vals, giou_vals, tgt_vals = [], [], [], []
    for b, pack in enumerate(gt_packs):
        tok = loss_token(ad.getitem(pred.token_probs, (b,)), pack)
        item = tok
        tok_vals.append(float(tok.value))
        if pack.kind is PackKind.NORMAL:
            xy = loss_xy(ad.getitem(pred.loc_mean, (b,)), pack)
            item = ad.add(item, xy)
            xy_vals.append(float(xy.value))
            if duration_enabled:
                dur = loss_duration(ad.getitem(pred.dur_mean, (b,)), pack)
                item = ad.add(item, dur)
                dur_vals.append(float(dur.value))
            else:
                dur_vals.append(0.0)
        else:
            xy_vals.append(0.0)
            dur_vals.append(0.0)
        gaze_items.append(item)

        if grounding_flags[b]:
            l_reg, l_giou = loss_bbox(ad.getitem(vl.bbox_pred, (b,)), gt_boxes[b])
            l_tgt = loss_target(ad.getitem(vl.tgt_dist, (b,)), int(gt_categories[b]))
            ground_items.append(ad.add(ad.add(l_reg, l_giou), l_tgt))
            reg_vals.append(float(l_reg.value))
            giou_vals.append(float(l_giou.value))
            tgt_vals.append(float(l_tgt.value))

    l_gaze = _mean_node(gaze_items)
    if ground_items:
        denom = len(ground_items) if ground_average == "qualifying" else n
        l_ground = _mean_node(ground_items, count=denom)
        total = ad.add(l_gaze, l_ground)
    else:
        l_ground = zero
        total = l_gaze

    return LossBreakdown(
        l_xy=float(np.mean(xy_vals)),
        l_token=float(np.mean(tok_vals)),
        l_d=float(np.mean(dur_vals)),
        l_reg=float(np.mean(reg_vals)) if reg_vals else 0.0,
        l_giou=float(np.mean(giou_vals)) if giou_vals else 0.0,
        l_target=float(np.mean(tgt_vals)) if tgt_vals else 0.0,
        l_gaze=float(l_gaze.value),
        l_ground=float(l_ground.value),
        total=float(total.value),
        node=total,
    )


def pretrain_loss(vl: VLState, gt_boxes: np.ndarray,
                  gt_categories: np.ndarray) -> LossBreakdown:
    """l_reg + l_giou + l_target on complete expressions, batch mean."""
    n = gt_boxes.shape[0]
    items, reg_vals, giou_vals, tgt_vals = [], [], [], []
    for b in range(n):
        l_reg, l_giou = loss_bbox(ad.getitem(vl.bbox_pred, (b,)), gt_boxes[b])
        l_tgt = loss_target(ad.getitem(vl.tgt_dist, (b,)), int(gt_categories[b]))
        items.append(ad.add(ad.add(l_reg, l_giou), l_tgt))
        reg_vals.append(float(l_reg.value))
        giou_vals.append(float(l_giou.value))
        tgt_vals.append(float(l_tgt.value))
    total = _mean_node(items)
    return LossBreakdown(
        l_xy=0.0, l_token=0.0, l_d=0.0,
        l_reg=float(np.mean(reg_vals)),
        l_giou=float(np.mean(giou_vals)),
        l_target=float(np.mean(tgt_vals)),
        l_gaze=0.0,
        l_ground=float(total.value),
        total=float(total.value),
        node=total,
    )

"""Metric implementations. See package docstring for definitions."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..core import ABSENT, PackKind, Scanpath, flatten, pack_at
from ..errors import ContractError, SkipRecord
from ._alignment import levenshtein_kernel, new_workspace, nw_match_kernel

# epsilon added to saliency maps and std denominators (divide-by-zero guard
# for null packs)
EPS_MAP = 1e-9

# Table column order for reports
METRIC_COLUMNS = ("SS", "SS_pack", "FED", "FED_pack", "CC_pack", "NSS_pack",
                  "SS_t", "FED_t")

DEFAULT_SIGMA = 32.0  # pixels, roughly one degree of visual angle
MAP_DOWNSAMPLE = 8
DEFAULT_BIN_MS = 50


@dataclass(frozen=True)
class ClusterGrid:
    """Axis-aligned partition of the image into rows x cols cells;
    cell id = row * cols + col."""

    rows: int = 10
    cols: int = 18

    def cell_of(self, x: float, y: float, image_size) -> int:
        width, height = image_size
        if not (0 <= x < width and 0 <= y < height):
            raise ContractError(f"fixation ({x}, {y}) outside image {image_size}")
        col = int(x / width * self.cols)
        row = int(y / height * self.rows)
        return row * self.cols + col


def cluster_string(fixations, grid: ClusterGrid, image_size) -> list[int]:
    """One cell id per fixation, order preserved, no deduplication."""
    return [grid.cell_of(fx.x, fx.y, image_size) for fx in fixations]


# ---------------------------------------------------------------------------
# string comparison
# ---------------------------------------------------------------------------


def sequence_score(pred, gt) -> float:
    """Global-alignment similarity in [0, 1]: best score under
    match=1/mismatch=0/gap=0 divided by max(|pred|, |gt|)."""
    a = np.asarray(pred, dtype=np.int64)
    b = np.asarray(gt, dtype=np.int64)
    if a.size == 0 or b.size == 0:
        raise ContractError("sequence_score needs nonempty strings; apply the "
                            "duplication rule first")
    prev, cur = new_workspace(b.size)
    return float(nw_match_kernel(a, b, prev, cur)) / max(a.size, b.size)


def fixation_edit_distance(pred, gt) -> int:
    a = np.asarray(pred, dtype=np.int64)
    b = np.asarray(gt, dtype=np.int64)
    prev, cur = new_workspace(b.size)
    return int(levenshtein_kernel(a, b, prev, cur))


def scanpath_string(s: Scanpath, grid: ClusterGrid, image_size) -> list[int]:
    return cluster_string(flatten(s), grid, image_size)


def _center_cell(grid: ClusterGrid, image_size) -> int:
    return grid.cell_of(image_size[0] / 2.0, image_size[1] / 2.0, image_size)


def whole_ss(pred: Scanpath, gt: Scanpath, grid: ClusterGrid, image_size) -> float:
    """Whole-scanpath Sequence Score over valid fixations only; an empty
    side falls back to the initial center point so the alignment is
    defined."""
    a = scanpath_string(pred, grid, image_size) or [_center_cell(grid, image_size)]
    b = scanpath_string(gt, grid, image_size) or [_center_cell(grid, image_size)]
    return sequence_score(a, b)


def whole_fed(pred: Scanpath, gt: Scanpath, grid: ClusterGrid, image_size) -> int:
    return fixation_edit_distance(
        scanpath_string(pred, grid, image_size),
        scanpath_string(gt, grid, image_size),
    )


# ---------------------------------------------------------------------------
# pack-level variants
# ---------------------------------------------------------------------------


def _per_pack_cells(s: Scanpath, j_max: int, grid: ClusterGrid, image_size):
    """Cell strings per stage 0..j_max with the duplication rules applied:
    a NULL pack, a TERMINAL pack, or a stage past the end of the scanpath is
    replaced by the last fixation of the previous non-null pack (the initial
    center point when there is none)."""
    last = _center_cell(grid, image_size)
    out = []
    for j in range(j_max + 1):
        pack = pack_at(s, j)
        if pack is not ABSENT and pack.kind is PackKind.NORMAL:
            cells = cluster_string(pack.fixations, grid, image_size)
            out.append(cells)
            last = cells[-1]
        else:
            out.append([last])
    return out


def pack_metrics(pred: Scanpath, gt: Scanpath, grid: ClusterGrid, image_size):
    """(SS_pack, FED_pack): per-stage sequence scores / edit distances
    averaged over the union of both scanpaths' stage ranges."""
    j_max = max(pred.last_index, gt.last_index, 0)
    pred_cells = _per_pack_cells(pred, j_max, grid, image_size)
    gt_cells = _per_pack_cells(gt, j_max, grid, image_size)
    ss_vals, fed_vals = [], []
    for pc, gc in zip(pred_cells, gt_cells):
        ss_vals.append(sequence_score(pc, gc))
        fed_vals.append(fixation_edit_distance(pc, gc))
    return float(np.mean(ss_vals)), float(np.mean(fed_vals))


# ---------------------------------------------------------------------------
# saliency-map variants
# ---------------------------------------------------------------------------


def build_map(fixations, sigma: float, image_size,
              downsample: int = MAP_DOWNSAMPLE) -> np.ndarray:
    """Sum of unit-mass isotropic Gaussians at the fixation locations,
    rendered at image resolution / downsample and truncated at 4 sigma."""
    if sigma <= 0:
        raise ContractError(f"sigma must be positive, got {sigma}")
    width, height = image_size
    w_out = math.ceil(width / downsample)
    h_out = math.ceil(height / downsample)
    out = np.zeros((h_out, w_out), dtype=np.float64)
    s = sigma / downsample
    radius = 4.0 * s
    for fx in fixations:
        mx, my = fx.x / downsample, fx.y / downsample
        x0 = max(0, int(math.floor(mx - radius)))
        x1 = min(w_out - 1, int(math.ceil(mx + radius)))
        y0 = max(0, int(math.floor(my - radius)))
        y1 = min(h_out - 1, int(math.ceil(my + radius)))
        if x1 < x0 or y1 < y0:
            continue
        xs = np.arange(x0, x1 + 1, dtype=np.float64)
        ys = np.arange(y0, y1 + 1, dtype=np.float64)
        gx = np.exp(-((xs - mx) ** 2) / (2 * s * s))
        gy = np.exp(-((ys - my) ** 2) / (2 * s * s))
        patch = np.outer(gy, gx)
        out[y0:y1 + 1, x0:x1 + 1] += patch / patch.sum()
    return out


def _pearson(a: np.ndarray, b: np.ndarray, eps: float = EPS_MAP) -> float:
    am = a - a.mean()
    bm = b - b.mean()
    cov = float((am * bm).mean())
    return cov / ((float(a.std()) + eps) * (float(b.std()) + eps))


def _pack_fixations(s: Scanpath, j: int):
    pack = pack_at(s, j)
    if pack is ABSENT or pack.kind is not PackKind.NORMAL:
        return []
    return list(pack.fixations)


def cc_pack(preds, gt: Scanpath, image_size, sigma: float = DEFAULT_SIGMA) -> float:
    """Pearson correlation between the pooled predicted map and the human
    map, per stage, averaged over all stages. Stage maps from null packs are
    epsilon-floored constants, so a null-null stage contributes 0."""
    if not preds:
        raise ContractError("cc_pack needs at least one predicted scanpath")
    j_max = max(max(p.last_index for p in preds), gt.last_index, 0)
    vals = []
    for j in range(j_max + 1):
        pred_fix = [fx for p in preds for fx in _pack_fixations(p, j)]
        gt_fix = _pack_fixations(gt, j)
        pred_map = build_map(pred_fix, sigma, image_size) + EPS_MAP
        gt_map = build_map(gt_fix, sigma, image_size) + EPS_MAP
        vals.append(_pearson(pred_map, gt_map))
    return float(np.mean(vals))


def nss_pack(preds, gt: Scanpath, image_size, sigma: float = DEFAULT_SIGMA):
    """Mean z-scored value of the pooled predicted map at the human fixation
    locations, averaged over stages where both sides have fixations; ABSENT
    when no stage qualifies."""
    if not preds:
        raise ContractError("nss_pack needs at least one predicted scanpath")
    j_max = max(max(p.last_index for p in preds), gt.last_index, 0)
    h_out = math.ceil(image_size[1] / MAP_DOWNSAMPLE)
    w_out = math.ceil(image_size[0] / MAP_DOWNSAMPLE)
    vals = []
    for j in range(j_max + 1):
        pred_fix = [fx for p in preds for fx in _pack_fixations(p, j)]
        gt_fix = _pack_fixations(gt, j)
        if not pred_fix or not gt_fix:
            continue  # null on either side: no defined NSS value
        m = build_map(pred_fix, sigma, image_size)
        z = (m - m.mean()) / (m.std() + EPS_MAP)
        at = []
        for fx in gt_fix:
            row = min(h_out - 1, int(fx.y / MAP_DOWNSAMPLE))
            col = min(w_out - 1, int(fx.x / MAP_DOWNSAMPLE))
            at.append(z[row, col])
        vals.append(float(np.mean(at)))
    if not vals:
        return ABSENT
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# duration-aware variants
# ---------------------------------------------------------------------------


def _expanded_string(s: Scanpath, grid, image_size, bin_ms):
    out = []
    for fx in flatten(s):
        cell = grid.cell_of(fx.x, fx.y, image_size)
        out.extend([cell] * math.ceil(fx.duration / bin_ms))
    return out


def duration_aware(pred: Scanpath, gt: Scanpath, grid: ClusterGrid, image_size,
                   bin_ms: int = DEFAULT_BIN_MS):
    """(SS_t, FED_t): each fixation's cluster id is repeated
    ceil(duration / bin_ms) times before alignment."""
    if bin_ms <= 0:
        raise ContractError(f"bin_ms must be positive, got {bin_ms}")
    a = _expanded_string(pred, grid, image_size, bin_ms)
    b = _expanded_string(gt, grid, image_size, bin_ms)
    fed_t = fixation_edit_distance(a, b)
    center = [_center_cell(grid, image_size)]
    ss_t = sequence_score(a or center, b or center)
    return ss_t, fed_t


# ---------------------------------------------------------------------------
# inter-observer consistency
# ---------------------------------------------------------------------------


def _pairwise_scores(held_out: Scanpath, other: Scanpath, grid, image_size,
                     sigma, bin_ms):
    ss_t, fed_t = duration_aware(held_out, other, grid, image_size, bin_ms)
    ss_pack, fed_pack = pack_metrics(held_out, other, grid, image_size)
    return {
        "SS": whole_ss(held_out, other, grid, image_size),
        "FED": float(whole_fed(held_out, other, grid, image_size)),
        "SS_pack": ss_pack,
        "FED_pack": fed_pack,
        "CC_pack": cc_pack([held_out], other, image_size, sigma),
        "NSS_pack": nss_pack([held_out], other, image_size, sigma),
        "SS_t": ss_t,
        "FED_t": float(fed_t),
    }


def human_consistency(corpus, grid: ClusterGrid | None = None,
                      sigma: float = DEFAULT_SIGMA,
                      bin_ms: int = DEFAULT_BIN_MS) -> dict:
    """Leave-one-scanpath-out agreement: each held-out human scanpath is
    scored against each remaining one, averaged per record then over
    records. Records with fewer than two scanpaths are skipped and listed.
    """
    grid = grid or ClusterGrid()
    per_record = {m: [] for m in METRIC_COLUMNS}
    skipped = []
    for rec in corpus.records:
        try:
            rec_vals = record_consistency(rec, grid, sigma, bin_ms)
        except SkipRecord:
            skipped.append(rec.trial_id)
            continue
        for m in METRIC_COLUMNS:
            if rec_vals[m] is not ABSENT:
                per_record[m].append(rec_vals[m])
    report = {}
    for m in METRIC_COLUMNS:
        vals = per_record[m]
        report[m] = {
            "mean": float(np.mean(vals)) if vals else None,
            "per_record": vals,
        }
    report["skipped_records"] = skipped
    return report


def record_consistency(record, grid: ClusterGrid, sigma: float = DEFAULT_SIGMA,
                       bin_ms: int = DEFAULT_BIN_MS) -> dict:
    paths = [sp for _, sp in record.human_scanpaths]
    if len(paths) < 2:
        raise SkipRecord(f"record {record.trial_id} has {len(paths)} scanpath(s)")
    acc = {m: [] for m in METRIC_COLUMNS}
    for i, held in enumerate(paths):
        for k, other in enumerate(paths):
            if i == k:
                continue
            scores = _pairwise_scores(held, other, grid, record.image_size,
                                      sigma, bin_ms)
            for m in METRIC_COLUMNS:
                if scores[m] is not ABSENT:
                    acc[m].append(scores[m])
    return {
        m: (float(np.mean(v)) if v else ABSENT) for m, v in acc.items()
    }

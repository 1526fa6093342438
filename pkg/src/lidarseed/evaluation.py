"""Cluster-to-category mapping and AP@0.5 scoring with COCO-style size buckets."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .geometry import BBox2D, iou_matrix

OTHERS = 0
GT_MATCH_IOU = 0.5  # segment takes a GT category only above this
SIZE_BUCKETS = {"S": (0.0, 32.0**2), "M": (32.0**2, 96.0**2), "L": (96.0**2, math.inf)}


class GroundTruthBox(NamedTuple):
    frame_id: str
    bbox: BBox2D
    category: int
    heavily_occluded: bool = False
    lidar_points: int = -1  # -1: unknown


class Detection(NamedTuple):
    frame_id: str
    bbox: BBox2D
    score: float
    category: int


def read_gt(path: str | Path) -> list[GroundTruthBox]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        out.append(GroundTruthBox(str(d["frame"]), BBox2D(d["x1"], d["y1"], d["x2"], d["y2"]), int(d["category"]),
                                  bool(d.get("heavily_occluded", False)), int(d.get("lidar_points", -1))))
    return out


def visible_gt(gt: Iterable[GroundTruthBox], min_lidar_points: int) -> list[GroundTruthBox]:
    """GT boxes hit by at least ``min_lidar_points`` LiDAR returns (unknown counts are kept)."""
    return [g for g in gt if g.lidar_points < 0 or g.lidar_points >= min_lidar_points]


def _by_frame(items) -> dict[str, list[int]]:
    out: dict[str, list[int]] = {}
    for i, it in enumerate(items):
        out.setdefault(it.frame_id if hasattr(it, "frame_id") else it[0], []).append(i)
    return out


def assign_gt_to_segments(seg_frames: Sequence[str], seg_boxes: np.ndarray, gt: Sequence[GroundTruthBox]) -> np.ndarray:
    """Category of the best-overlapping GT box when its IoU exceeds 0.5, else ``OTHERS``."""
    seg_boxes = np.asarray(seg_boxes, dtype=np.float64).reshape(-1, 4)
    out = np.full(len(seg_boxes), OTHERS, dtype=np.int64)
    gt_frames = _by_frame(gt)
    seg_by_frame: dict[str, list[int]] = {}
    for i, f in enumerate(seg_frames):
        seg_by_frame.setdefault(f, []).append(i)
    for f, rows in seg_by_frame.items():
        gidx = gt_frames.get(f)
        if not gidx:
            continue
        gb = np.array([gt[k].bbox.as_array() for k in gidx])
        iou = iou_matrix(seg_boxes[rows], gb)
        best = np.argmax(iou, axis=1)
        val = iou[np.arange(len(rows)), best]
        cats = np.array([gt[k].category for k in gidx])
        out[rows] = np.where(val > GT_MATCH_IOU, cats[best], OTHERS)
    return out


@dataclass
class ClusterMapping:
    mapping: dict[int, int]  # cluster -> category, OTHERS = 0
    training_error_rate: float

    def __call__(self, cluster: int) -> int:
        return self.mapping.get(int(cluster), OTHERS)

    def apply(self, clusters: np.ndarray) -> np.ndarray:
        return np.array([self(c) for c in np.asarray(clusters).ravel()], dtype=np.int64)


def build_cluster_mapping(cluster_labels: np.ndarray, segment_gt: np.ndarray) -> ClusterMapping:
    """Per-cluster majority of GT assignments over foreground segments.

    Ties go to ``OTHERS``, then to the lowest category id. Background segments are ignored.
    """
    y = np.asarray(cluster_labels, dtype=np.int64)
    g = np.asarray(segment_gt, dtype=np.int64)
    fg = y > 0
    y, g = y[fg], g[fg]
    if len(y) == 0:
        return ClusterMapping({}, 0.0)
    K = int(g.max()) + 1
    clusters, inv = np.unique(y, return_inverse=True)
    counts = np.zeros((len(clusters), K), dtype=np.int64)
    np.add.at(counts, (inv, g), 1)
    choice = np.argmax(counts, axis=1)  # first maximum = others, then lowest id
    correct = counts[np.arange(len(clusters)), choice].sum()
    return ClusterMapping({int(c): int(k) for c, k in zip(clusters, choice)}, float(1.0 - correct / len(y)))


# ---------------------------------------------------------------- AP


def _all_point_ap(tp: np.ndarray, n_pos: int) -> float:
    if n_pos == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / n_pos
    precision = ctp / np.maximum(ctp + cfp, 1)
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    return math.fsum((mrec[1:] - mrec[:-1]) * mpre[1:])


def _score_order(dets: Sequence[Detection]) -> np.ndarray:
    if not dets:
        return np.zeros(0, dtype=np.int64)
    boxes = np.array([d.bbox.as_array() for d in dets])
    scores = np.array([d.score for d in dets])
    return np.lexsort((boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0], -scores))


def category_ap(dets: Sequence[Detection], gt: Sequence[GroundTruthBox], iou_thresh: float = 0.5,
                area_range: tuple[float, float] = (0.0, math.inf)) -> float:
    """AP for one category; GT outside ``area_range`` is ignored, as are detections matching it
    and unmatched detections outside the range."""
    lo, hi = area_range
    ignore = np.array([not (lo <= g.bbox.area() < hi) for g in gt], dtype=bool)
    n_pos = int((~ignore).sum())
    gt_frames = _by_frame(gt)
    gt_boxes = {f: np.array([gt[k].bbox.as_array() for k in idx]) for f, idx in gt_frames.items()}
    matched = np.zeros(len(gt), dtype=bool)
    tp = []
    for i in _score_order(dets):
        d = dets[i]
        idx = gt_frames.get(d.frame_id, [])
        status = None
        if idx:
            iou = iou_matrix(d.bbox.as_array()[None, :], gt_boxes[d.frame_id])[0]
            idx_arr = np.array(idx)
            for want_ignored in (False, True):
                cand = (iou >= iou_thresh) & ~matched[idx_arr] & (ignore[idx_arr] == want_ignored)
                if cand.any():
                    k = int(np.flatnonzero(cand)[np.argmax(iou[cand])])
                    matched[idx_arr[k]] = True
                    status = "ignore" if want_ignored else "tp"
                    break
        if status is None:
            status = "fp" if lo <= d.bbox.area() < hi else "ignore"
        if status != "ignore":
            tp.append(1 if status == "tp" else 0)
    return _all_point_ap(np.array(tp, dtype=np.int64), n_pos)


@dataclass
class APResult:
    per_category: dict[int, dict[str, float]]  # category -> {"AP", "AP_S", "AP_M", "AP_L"}

    def mean(self, key: str = "AP") -> float:
        vals = [v[key] for v in self.per_category.values() if not math.isnan(v[key])]
        return float(np.mean(vals)) if vals else float("nan")


def average_precision(dets: Sequence[Detection], gt: Sequence[GroundTruthBox], iou_thresh: float = 0.5) -> APResult:
    """Per-category AP over the categories present in ``gt``; ``OTHERS`` detections are dropped."""
    cats = sorted({g.category for g in gt if g.category != OTHERS})
    out = {}
    for c in cats:
        dc = [d for d in dets if d.category == c]
        gc = [g for g in gt if g.category == c]
        row = {"AP": category_ap(dc, gc, iou_thresh)}
        for name, rng in SIZE_BUCKETS.items():
            row[f"AP_{name}"] = category_ap(dc, gc, iou_thresh, rng)
        out[c] = row
    return APResult(out)


def format_report(res: APResult, names: Mapping[int, str] | None = None) -> str:
    """Fixed-width text table, one row per category plus the mean."""
    names = names or {}

    def cell(v: float) -> str:
        return f"{100 * v:7.2f}" if not math.isnan(v) else "      -"

    cols = ("AP", "AP_S", "AP_M", "AP_L")
    lines = ["category      " + "".join(f"{c:>8}" for c in cols)]
    for c, row in sorted(res.per_category.items()):
        label = f"{c} {names.get(c, '')}".strip()
        lines.append(f"{label:<14}" + "".join(" " + cell(row[k]) for k in cols))
    lines.append(f"{'mean':<14}" + "".join(" " + cell(res.mean(k)) for k in cols))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- cluster statistics


def cluster_histogram_stats(labels: np.ndarray | Mapping[int, int],
                            fractions: Sequence[float] = (1.0, 0.9, 0.8)) -> tuple[int, ...]:
    """Number of largest clusters needed to cover each fraction of foreground segments."""
    if isinstance(labels, Mapping):
        sizes = np.array([v for v in labels.values() if v > 0], dtype=np.int64)
    else:
        lab = np.asarray(labels, dtype=np.int64)
        sizes = np.unique(lab[lab > 0], return_counts=True)[1]
    if sizes.sum() == 0:
        return tuple(0 for _ in fractions)
    sizes = np.sort(sizes)[::-1]
    cum = np.cumsum(sizes)
    total = cum[-1]
    # integer comparison: cum >= f * total without float drift
    return tuple(int(np.searchsorted(cum * 10**9, round(f * 10**9) * total, side="left") + 1) for f in fractions)

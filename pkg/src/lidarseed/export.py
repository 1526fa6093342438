"""Pseudo-annotation files and the negative-proposal IoU band."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .geometry import BBox2D, iou_matrix
from .label_init import SegmentLabel

SCHEMA_VERSION = "lidarseed-pseudo-annotations v1"
SCHEMA_FIELDS = "frame:str x1:float y1:float x2:float y2:float cluster:int"
NEG_IOU_BAND = (0.1, 0.5)  # [lo, hi)


class DanglingLabel(KeyError):
    pass


class PseudoAnnotation(NamedTuple):
    frame_id: str
    bbox: BBox2D
    cluster_id: int

    def to_json(self) -> dict:
        x1, y1, x2, y2 = self.bbox.as_tuple()
        return {"frame": self.frame_id, "x1": x1, "y1": y1, "x2": x2, "y2": y2, "cluster": self.cluster_id}


def pseudo_annotations(labels: Iterable[SegmentLabel], boxes: Mapping[tuple[str, int], BBox2D],
                       width: float | None = None, height: float | None = None) -> list[PseudoAnnotation]:
    """Foreground labels as (frame, box, cluster) records ordered by (frame_id, segment_id)."""
    out = []
    for lab in sorted(labels, key=lambda l: (l.frame_id, l.segment_id)):
        key = (lab.frame_id, lab.segment_id)
        if key not in boxes:
            raise DanglingLabel(f"label refers to missing proposal {lab.frame_id}/{lab.segment_id}")
        if lab.y <= 0:
            continue
        box = boxes[key]
        if width is not None and height is not None:
            box = box.clip(width, height)
            if box is None:
                continue
        out.append(PseudoAnnotation(lab.frame_id, box, int(lab.y)))
    return out


def write_pseudo_annotations(path: str | Path, anns: Sequence[PseudoAnnotation]) -> Path:
    """JSONL records plus a ``<name>.schema`` sidecar; returns the sidecar path."""
    path = Path(path)
    with open(path, "w") as fh:
        for a in anns:
            fh.write(json.dumps(a.to_json()) + "\n")
    sidecar = path.with_suffix(path.suffix + ".schema")
    sidecar.write_text(f"{SCHEMA_VERSION}\n{SCHEMA_FIELDS}\n")
    return sidecar


def read_pseudo_annotations(path: str | Path) -> list[PseudoAnnotation]:
    path = Path(path)
    sidecar = path.with_suffix(path.suffix + ".schema")
    if sidecar.exists() and sidecar.read_text().splitlines()[:1] != [SCHEMA_VERSION]:
        raise ValueError(f"{sidecar}: unsupported schema")
    out = []
    for line in path.read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            out.append(PseudoAnnotation(str(d["frame"]), BBox2D(d["x1"], d["y1"], d["x2"], d["y2"]), int(d["cluster"])))
    return out


def export_summary(anns: Sequence[PseudoAnnotation], n_labels: int) -> dict:
    clusters = {a.cluster_id for a in anns}
    return {"annotations": len(anns), "background": n_labels - len(anns), "clusters": len(clusters),
            "frames": len({a.frame_id for a in anns})}


def filter_negative_proposals(proposals: np.ndarray, pseudo_boxes: np.ndarray) -> np.ndarray:
    """Indices of proposals whose best IoU with any pseudo box lies in [0.1, 0.5)."""
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    pseudo_boxes = np.asarray(pseudo_boxes, dtype=np.float64).reshape(-1, 4)
    if len(proposals) == 0 or len(pseudo_boxes) == 0:
        return np.zeros(0, dtype=np.int64)
    best = iou_matrix(proposals, pseudo_boxes).max(axis=1)
    lo, hi = NEG_IOU_BAND
    return np.flatnonzero((best >= lo) & (best < hi))

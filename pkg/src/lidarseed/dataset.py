"""Per-frame proposal files and the flat segment table built from them."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from .features import FEATURE_DIM, appearance_descriptors, shape_descriptor
from .geometry import BBox2D, CameraModel, PointCloud, read_cloud_bin
from .labeler import JitterBank, SegmentRecord, frame_jitter_bank
from .segmentation import BeamConfig, EmptyFrame, SegmentationParams, SegmentProposal, extract_segments
from .synth import ManifestEntry

log = logging.getLogger(__name__)


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def segment_frame(points: np.ndarray, frame_id: str, image: np.ndarray, cam: CameraModel, beams: BeamConfig,
                  params: SegmentationParams, ground_z: float = -1.5) -> tuple[list[SegmentProposal], np.ndarray]:
    """Proposals whose appearance patch is usable, and their raw features."""
    try:
        props = extract_segments(PointCloud(points, frame_id), cam, beams, params)
    except EmptyFrame:
        return [], np.zeros((0, FEATURE_DIM))
    boxes = np.array([p.bbox.as_array() for p in props])
    app, valid = appearance_descriptors(image, boxes)
    keep = [p for p, v in zip(props, valid) if v]
    feats = [np.concatenate([shape_descriptor(points[p.point_indices], ground_z), a]) for p, a, v in
             zip(props, app, valid) if v]
    return keep, np.array(feats).reshape(-1, FEATURE_DIM)


def write_frame_segments(path: str | Path, props: Sequence[SegmentProposal], feats: np.ndarray) -> None:
    lens = np.array([len(p.point_indices) for p in props], dtype=np.int64)
    np.savez(
        path,
        segment_ids=np.array([p.segment_id for p in props], dtype=np.int64),
        boxes=np.array([p.bbox.as_array() for p in props]).reshape(-1, 4),
        offsets=np.concatenate([[0], np.cumsum(lens)]).astype(np.int64),
        indices=np.concatenate([p.point_indices for p in props]).astype(np.int64) if props else np.zeros(0, np.int64),
        features=np.asarray(feats, dtype=np.float64).reshape(-1, FEATURE_DIM),
    )


@dataclass
class FrameSegments:
    frame_id: str
    segment_ids: np.ndarray
    boxes: np.ndarray
    offsets: np.ndarray
    indices: np.ndarray
    features: np.ndarray

    def __len__(self) -> int:
        return len(self.segment_ids)

    def point_indices(self, k: int) -> np.ndarray:
        return self.indices[self.offsets[k] : self.offsets[k + 1]]


def read_frame_segments(path: str | Path, frame_id: str) -> FrameSegments:
    with np.load(path) as z:
        return FrameSegments(frame_id, z["segment_ids"], z["boxes"], z["offsets"], z["indices"], z["features"])


@dataclass
class SegmentTable:
    """All segments of a split in (frame, segment_id) order."""

    frame_ids: list[str]
    segment_ids: np.ndarray
    boxes: np.ndarray
    features: np.ndarray  # raw
    frame_rows: dict[str, np.ndarray]

    def __len__(self) -> int:
        return len(self.segment_ids)

    @property
    def refs(self) -> list[tuple[str, int]]:
        return list(zip(self.frame_ids, (int(s) for s in self.segment_ids)))

    def box_map(self) -> dict[tuple[str, int], BBox2D]:
        return {ref: BBox2D.from_array(b) for ref, b in zip(self.refs, self.boxes)}

    @classmethod
    def from_frames(cls, frames: Sequence[FrameSegments]) -> "SegmentTable":
        fids, sids, boxes, feats, rows = [], [], [], [], {}
        n = 0
        for fr in frames:
            fids.extend([fr.frame_id] * len(fr))
            sids.append(fr.segment_ids)
            boxes.append(fr.boxes.reshape(-1, 4))
            feats.append(fr.features.reshape(-1, FEATURE_DIM))
            rows[fr.frame_id] = np.arange(n, n + len(fr))
            n += len(fr)
        cat = lambda xs, shape: np.concatenate(xs) if xs else np.zeros(shape)
        return cls(fids, cat(sids, (0,)).astype(np.int64), cat(boxes, (0, 4)), cat(feats, (0, FEATURE_DIM)), rows)


def segment_records(fr: FrameSegments, points: np.ndarray, cam: CameraModel) -> list[SegmentRecord]:
    out = []
    for k in range(len(fr)):
        pts = points[fr.point_indices(k)]
        uv, front = cam.project(pts[:, :3])
        out.append(SegmentRecord(fr.frame_id, int(fr.segment_ids[k]), BBox2D.from_array(fr.boxes[k]), pts, uv, front))
    return out


def bank_rng(seed: int, frame_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 3, int(frame_index)]))


def _bank_job(args) -> JitterBank:
    entry, fr, rows, cam, n, seed, index, ground_z = args
    points = read_cloud_bin(entry.cloud, entry.frame_id).points
    image = load_image(entry.image)
    return frame_jitter_bank(segment_records(fr, points, cam), rows, image, n, bank_rng(seed, index), ground_z)


def build_jitter_bank(entries: Sequence[ManifestEntry], frames: Sequence[FrameSegments], table: SegmentTable,
                      cam: CameraModel, n_per_segment: int, seed: int, workers: int = 1,
                      ground_z: float = -1.5) -> JitterBank:
    """Jitter bank over ``frames``; randomness is per frame so the result is worker-count independent."""
    by_id = {e.frame_id: (i, e) for i, e in enumerate(entries)}
    jobs = []
    for fr in frames:
        if len(fr) == 0:
            continue
        idx, entry = by_id[fr.frame_id]
        jobs.append((entry, fr, table.frame_rows[fr.frame_id], cam, n_per_segment, seed, idx, ground_z))
    return JitterBank.concat(parallel_map(_bank_job, jobs, workers))


def parallel_map(fn: Callable, jobs: Sequence, workers: int = 1) -> list:
    """Ordered map over a bounded process pool (in-process when ``workers <= 1``)."""
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    return [fn(j) for j in jobs]

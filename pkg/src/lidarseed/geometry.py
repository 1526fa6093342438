"""Geometric primitives: points, pinhole camera, 2D boxes, IoU and class-agnostic NMS.

Point clouds are carried as ``(N, 4)`` float arrays of ``x, y, z, intensity`` in the
sensor frame (x forward, y left, z up). Pixel coordinates are continuous and are
never rounded before serialization.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .kvfile import floats, read_kv, write_kv

MIN_DEPTH = 1e-6
MIN_VISIBLE_POINTS = 5


@dataclass(frozen=True)
class Point3:
    x: float
    y: float
    z: float
    intensity: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite([self.x, self.y, self.z])):
            raise ValueError(f"non-finite point {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.intensity], dtype=np.float64)


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 4) x, y, z, intensity
    frame_id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if not np.all(np.isfinite(self.points[:, :3])):
            raise ValueError("point cloud contains non-finite coordinates")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]


def read_cloud_bin(path: str | Path, frame_id: str | None = None) -> PointCloud:
    """Read a KITTI-velodyne style file of little-endian float32 ``x y z intensity``."""
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 4:
        raise ValueError(f"{path}: size is not a multiple of 4 float32 values")
    return PointCloud(raw.reshape(-1, 4).astype(np.float64), frame_id or Path(path).stem)


def write_cloud_bin(path: str | Path, cloud: PointCloud | np.ndarray) -> None:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    np.ascontiguousarray(pts.reshape(-1, 4), dtype="<f4").tofile(path)


@dataclass(frozen=True, order=True)
class BBox2D:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self}")

    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "BBox2D":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    def clip(self, width: float, height: float) -> "BBox2D | None":
        x0, y0 = max(self.x_min, 0.0), max(self.y_min, 0.0)
        x1, y1 = min(self.x_max, float(width)), min(self.y_max, float(height))
        if x0 < x1 and y0 < y1:
            return BBox2D(x0, y0, x1, y1)
        return None


@dataclass(frozen=True)
class ScoredBox:
    bbox: BBox2D
    score: float
    cluster_id: int

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


def box_iou(a: BBox2D, b: BBox2D) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area() + b.area() - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0.0, inter / np.where(union > 0, union, 1.0), 0.0)


def _orthonormal(R: np.ndarray, tol: float = 1e-9) -> bool:
    return bool(np.allclose(R @ R.T, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1.0) <= tol)


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not _orthonormal(self.R):
            raise ValueError("extrinsic rotation must be orthonormal with det +1")

    def to_camera(self, xyz: np.ndarray) -> np.ndarray:
        return np.asarray(xyz, dtype=np.float64).reshape(-1, 3) @ self.R.T + self.t

    def project(self, xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project sensor-frame points; returns ``(uv, in_front)``.

        ``uv`` is NaN for points with camera depth at or below ``MIN_DEPTH``.
        """
        cam = self.to_camera(xyz)
        z = cam[:, 2]
        in_front = z > MIN_DEPTH
        safe_z = np.where(in_front, z, 1.0)
        uv = np.stack([self.fx * cam[:, 0] / safe_z + self.cx, self.fy * cam[:, 1] / safe_z + self.cy], axis=1)
        uv[~in_front] = np.nan
        return uv, in_front

    def in_image(self, uv: np.ndarray) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return (uv[:, 0] >= 0) & (uv[:, 0] <= self.width) & (uv[:, 1] >= 0) & (uv[:, 1] <= self.height)

    @property
    def center(self) -> np.ndarray:
        """Camera optical centre in the sensor frame."""
        return -self.R.T @ self.t

    @classmethod
    def from_file(cls, path: str | Path) -> "CameraModel":
        kv = read_kv(path)
        missing = {"fx", "fy", "cx", "cy", "width", "height", "R", "t"} - kv.keys()
        if missing:
            raise ValueError(f"{path}: missing calibration keys {sorted(missing)}")
        return cls(
            fx=float(kv["fx"]),
            fy=float(kv["fy"]),
            cx=float(kv["cx"]),
            cy=float(kv["cy"]),
            width=int(kv["width"]),
            height=int(kv["height"]),
            R=np.array(floats(kv["R"])).reshape(3, 3),
            t=np.array(floats(kv["t"])),
        )

    def to_file(self, path: str | Path) -> None:
        write_kv(
            path,
            {
                "fx": float(self.fx),
                "fy": float(self.fy),
                "cx": float(self.cx),
                "cy": float(self.cy),
                "width": int(self.width),
                "height": int(self.height),
                "R": [float(v) for v in self.R.ravel()],
                "t": [float(v) for v in self.t],
            },
        )


def project_point(p: Point3, cam: CameraModel) -> tuple[float, float] | None:
    """Pinhole projection of one point; ``None`` when it lies behind the camera."""
    uv, ok = cam.project(np.array([[p.x, p.y, p.z]]))
    if not ok[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1])


def bbox_from_uv(uv: np.ndarray, in_front: np.ndarray, cam: CameraModel, min_visible_points: int = MIN_VISIBLE_POINTS) -> BBox2D | None:
    if np.count_nonzero(cam.in_image(uv) & in_front) < min_visible_points:
        return None
    front = uv[in_front]
    hull = (front[:, 0].min(), front[:, 1].min(), front[:, 0].max(), front[:, 1].max())
    x0, y0 = max(hull[0], 0.0), max(hull[1], 0.0)
    x1, y1 = min(hull[2], float(cam.width)), min(hull[3], float(cam.height))
    if not (x0 < x1 and y0 < y1):
        return None
    return BBox2D(float(x0), float(y0), float(x1), float(y1))


def segment_to_bbox(seg: np.ndarray, cam: CameraModel, min_visible_points: int = MIN_VISIBLE_POINTS) -> BBox2D | None:
    """Image box of a segment, or ``None`` when it is not visible enough to keep.

    The box is the hull of all in-front projections clipped to the image, so it
    contains every in-image projected point.
    """
    seg = np.asarray(seg, dtype=np.float64)
    if seg.ndim == 1:
        seg = seg[None, :]
    uv, in_front = cam.project(seg[:, :3])
    return bbox_from_uv(uv, in_front, cam, min_visible_points)


def _nms_order(boxes: np.ndarray, scores: np.ndarray) -> np.ndarray:
    # np.lexsort sorts by the last key first.
    return np.lexsort((boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0], -scores))


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy NMS over arrays; returns kept indices in visiting order."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = _nms_order(boxes, scores)
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        if order.size == 1:
            break
        ious = iou_matrix(boxes[i : i + 1], boxes[order[1:]])[0]
        order = order[1:][ious <= iou_threshold]
    return np.array(keep, dtype=np.int64)


def class_agnostic_nms(dets: Iterable[ScoredBox], iou_threshold: float = 0.3) -> list[ScoredBox]:
    dets = list(dets)
    if not dets:
        if not 0.0 < iou_threshold < 1.0:
            raise ValueError("iou_threshold must lie in (0, 1)")
        return []
    boxes = np.array([d.bbox.as_tuple() for d in dets])
    scores = np.array([d.score for d in dets])
    return [dets[i] for i in nms_indices(boxes, scores, iou_threshold)]

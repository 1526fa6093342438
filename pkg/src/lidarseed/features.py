"""Handcrafted segment descriptors, point augmentations and feature dumps.

Each segment is described by a 73-d shape part computed from its 3D points and a
164-d appearance part computed from the image patch under its box:

    shape (73)       log count | centroid height | PCA-frame extents (3) |
                     normalised covariance eigenvalues (3) | mean intensity |
                     4x4x4 occupancy of the PCA-aligned unit cube (64)
    appearance (164) HSV histogram 8x4x4 (128, L1) |
                     gradient orientations, 9 bins x 2x2 cells (36, L2 per cell)

The PCA frame is yaw-only: the two horizontal axes come from a 2D PCA of the
ground-plane coordinates (signs fixed by skewness) and the third axis stays up.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import BBox2D

SHAPE_DIM = 73
APPEARANCE_DIM = 164
FEATURE_DIM = SHAPE_DIM + APPEARANCE_DIM
PATCH = 32
OCC_BINS = 4
HSV_BINS = (8, 4, 4)
ORIENT_BINS = 9
SIGMA_FLOOR = 1e-12
MIN_PATCH_AREA = 4.0
TARGET_POINTS = 1024
MAX_DROPOUT = 0.875


class DegeneratePatch(ValueError):
    """The clipped box is too small to describe."""


def _canonical_sign(proj: np.ndarray) -> float:
    skew = np.sum(proj**3)
    return -1.0 if skew < 0 else 1.0


def pca_frame_coords(xyz: np.ndarray) -> np.ndarray:
    """Centred coordinates in the yaw-only PCA frame (major, minor, up)."""
    c = xyz - xyz.mean(axis=0)
    if len(c) < 2:
        return c.copy()
    cov = c[:, :2].T @ c[:, :2] / len(c)
    _, vecs = np.linalg.eigh(cov)
    axes = vecs[:, ::-1].T  # rows: major, minor
    local = c[:, :2] @ axes.T
    for k in range(2):
        local[:, k] *= _canonical_sign(local[:, k])
    return np.column_stack([local, c[:, 2]])


def shape_descriptor(points: np.ndarray, ground_z: float = -1.5) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    if len(pts) == 0:
        raise ValueError("shape descriptor needs at least one point")
    xyz = pts[:, :3]
    n = len(pts)
    local = pca_frame_coords(xyz)
    lo, hi = local.min(axis=0), local.max(axis=0)
    extents = hi - lo

    c = xyz - xyz.mean(axis=0)
    eig = np.sort(np.linalg.eigvalsh(c.T @ c / n))[::-1]
    eig = np.clip(eig, 0.0, None)
    total = eig.sum()
    eig = eig / total if total > SIGMA_FLOOR else np.zeros(3)

    safe = np.where(extents > 1e-9, extents, 1.0)
    unit = np.where(extents > 1e-9, (local - lo) / safe, 0.5)
    cell = np.minimum((unit * OCC_BINS).astype(np.int64), OCC_BINS - 1)
    flat = (cell[:, 0] * OCC_BINS + cell[:, 1]) * OCC_BINS + cell[:, 2]
    occ = np.bincount(flat, minlength=OCC_BINS**3) / n

    return np.concatenate(
        [[np.log(n)], [xyz[:, 2].mean() - ground_z], extents, eig, [pts[:, 3].mean()], occ]
    )


def _sample_patches(image: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Bilinear 32x32 resampling of each box; returns ``(B, 32, 32, 3)`` floats in [0, 1]."""
    H, W = image.shape[:2]
    img = image.astype(np.float64) / 255.0 if image.dtype == np.uint8 else image.astype(np.float64)
    steps = (np.arange(PATCH) + 0.5) / PATCH
    # continuous pixel coordinates -> array indices (pixel centres at +0.5)
    xs = boxes[:, 0:1] + steps[None, :] * (boxes[:, 2:3] - boxes[:, 0:1]) - 0.5
    ys = boxes[:, 1:2] + steps[None, :] * (boxes[:, 3:4] - boxes[:, 1:2]) - 0.5
    xs = np.clip(xs, 0.0, W - 1.0)
    ys = np.clip(ys, 0.0, H - 1.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    Y0, X0 = y0[:, :, None], x0[:, None, :]
    Y1, X1 = y1[:, :, None], x1[:, None, :]
    wx = fx[:, None, :, None]
    wy = fy[:, :, None, None]
    top = img[Y0, X0] * (1 - wx) + img[Y0, X1] * wx
    bot = img[Y1, X0] * (1 - wx) + img[Y1, X1] * wx
    return top * (1 - wy) + bot * wy


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """HSV with every channel in [0, 1]; hue is 0 for achromatic pixels."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = np.max(rgb, axis=-1)
    delta = v - np.min(rgb, axis=-1)
    s = np.where(v > 0, delta / np.where(v > 0, v, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(v == r, (g - b) / safe, np.where(v == g, 2.0 + (b - r) / safe, 4.0 + (r - g) / safe))
    h = np.where(delta > 0, np.mod(h / 6.0, 1.0), 0.0)
    return np.stack([h, s, v], axis=-1)


def _color_histograms(patches: np.ndarray) -> np.ndarray:
    hsv = rgb_to_hsv(np.clip(patches, 0.0, 1.0))
    nh, ns, nv = HSV_BINS
    h = np.minimum((hsv[..., 0] * nh).astype(np.int64), nh - 1)
    s = np.minimum((hsv[..., 1] * ns).astype(np.int64), ns - 1)
    v = np.minimum((hsv[..., 2] * nv).astype(np.int64), nv - 1)
    B = len(patches)
    idx = ((h * ns + s) * nv + v).reshape(B, -1)
    flat = idx + (np.arange(B) * nh * ns * nv)[:, None]
    hist = np.bincount(flat.ravel(), minlength=B * nh * ns * nv).reshape(B, -1).astype(np.float64)
    return hist / (PATCH * PATCH)


def _gradient_histograms(patches: np.ndarray) -> np.ndarray:
    gray = patches @ np.array([0.299, 0.587, 0.114])
    gy, gx = np.gradient(gray, axis=(1, 2))
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    b = np.minimum((theta / (np.pi / ORIENT_BINS)).astype(np.int64), ORIENT_BINS - 1)
    B = len(patches)
    half = PATCH // 2
    cy = (np.arange(PATCH) // half)[:, None]
    cx = (np.arange(PATCH) // half)[None, :]
    cell = cy * 2 + cx  # (32, 32)
    flat = (np.arange(B)[:, None, None] * 4 + cell[None]) * ORIENT_BINS + b
    hist = np.bincount(flat.ravel(), weights=mag.ravel(), minlength=B * 4 * ORIENT_BINS).reshape(B, 4, ORIENT_BINS)
    norm = np.linalg.norm(hist, axis=2, keepdims=True)
    hist = np.where(norm > SIGMA_FLOOR, hist / np.where(norm > SIGMA_FLOOR, norm, 1.0), 0.0)
    return hist.reshape(B, -1)


def clip_box_array(boxes: np.ndarray, width: int, height: int) -> np.ndarray:
    out = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0.0, width)
    out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0.0, height)
    return out


def appearance_descriptors(image: np.ndarray, boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched appearance descriptors; returns ``(features (B, 164), valid mask)``.

    Rows whose clipped box area is below ``MIN_PATCH_AREA`` are zero and invalid.
    """
    H, W = image.shape[:2]
    clipped = clip_box_array(boxes, W, H)
    area = np.clip(clipped[:, 2] - clipped[:, 0], 0, None) * np.clip(clipped[:, 3] - clipped[:, 1], 0, None)
    valid = area >= MIN_PATCH_AREA
    out = np.zeros((len(clipped), APPEARANCE_DIM))
    if valid.any():
        patches = _sample_patches(image, clipped[valid])
        out[valid] = np.concatenate([_color_histograms(patches), _gradient_histograms(patches)], axis=1)
    return out, valid


def appearance_descriptor(image: np.ndarray, bbox: BBox2D | np.ndarray) -> np.ndarray:
    arr = bbox.as_array() if isinstance(bbox, BBox2D) else np.asarray(bbox, dtype=np.float64)
    feats, valid = appearance_descriptors(image, arr[None, :])
    if not valid[0]:
        raise DegeneratePatch(f"clipped box {arr.tolist()} has area below {MIN_PATCH_AREA} px^2")
    return feats[0]


def segment_features(points: np.ndarray, image: np.ndarray, bbox: BBox2D | np.ndarray, ground_z: float = -1.5) -> np.ndarray:
    """Raw (unstandardised) shape ‖ appearance vector of one segment."""
    return np.concatenate([shape_descriptor(points, ground_z), appearance_descriptor(image, bbox)])


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentParams:
    rotation_angle: float = 0.0
    flip: bool = False
    dropout_rate: float = 0.0
    target_points: int = TARGET_POINTS

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate <= MAX_DROPOUT:
            raise ValueError(f"dropout_rate must lie in [0, {MAX_DROPOUT}]")
        if not 0.0 <= self.rotation_angle <= 2 * np.pi:
            raise ValueError("rotation_angle must lie in [0, 2pi]")
        if self.target_points != TARGET_POINTS:
            raise ValueError(f"target_points is fixed at {TARGET_POINTS}")

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "AugmentParams":
        return cls(
            rotation_angle=float(rng.uniform(0.0, 2 * np.pi)),
            flip=bool(rng.random() < 0.5),
            dropout_rate=float(rng.uniform(0.0, MAX_DROPOUT)),
        )


def rotate_about_up(points: np.ndarray, angle: float) -> np.ndarray:
    out = np.array(points, dtype=np.float64, copy=True)
    c, s = np.cos(angle), np.sin(angle)
    x, y = out[:, 0].copy(), out[:, 1].copy()
    out[:, 0] = c * x - s * y
    out[:, 1] = s * x + c * y
    return out


def augment_segment(points: np.ndarray, params: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    """Rotate about z, optionally mirror y, drop points, then resample to exactly 1024.

    At least one point always survives dropout. Larger survivors are subsampled
    without replacement; smaller ones keep every point and pad by resampling.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    if len(pts) == 0:
        raise ValueError("cannot augment an empty segment")
    out = rotate_about_up(pts, params.rotation_angle)
    if params.flip:
        out[:, 1] = -out[:, 1]
    if params.dropout_rate > 0:
        keep = rng.random(len(out)) >= params.dropout_rate
        if not keep.any():
            keep[rng.integers(len(out))] = True
        out = out[keep]
    n, target = len(out), params.target_points
    if n > target:
        out = out[np.sort(rng.choice(n, size=target, replace=False))]
    elif n < target:
        out = np.concatenate([out, out[rng.integers(n, size=target - n)]])
    return out


# ---------------------------------------------------------------- standardisation


@dataclass
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, feats: np.ndarray) -> "FeatureStats":
        feats = np.asarray(feats, dtype=np.float64)
        std = feats.std(axis=0)
        return cls(feats.mean(axis=0), np.where(std < SIGMA_FLOOR, 1.0, std))

    def apply(self, feats: np.ndarray) -> np.ndarray:
        return (np.asarray(feats, dtype=np.float64) - self.mean) / self.std

    def save(self, path: str | Path) -> None:
        np.savez(path, mean=self.mean, std=self.std)

    @classmethod
    def load(cls, path: str | Path) -> "FeatureStats":
        with np.load(path) as z:
            return cls(z["mean"], z["std"])


def embed(raw: np.ndarray, stats: FeatureStats, encoder=None, clip: float | None = None) -> np.ndarray:
    """Standardise raw vectors; an encoder, when given, maps them to its embedding.

    ``clip`` bounds the z-scores; rare histogram bins otherwise reach |z| in the thousands.
    """
    z = stats.apply(raw)
    if clip is not None:
        z = np.clip(z, -clip, clip)
    if encoder is not None:
        return encoder.encode(z)
    return z


# ---------------------------------------------------------------- dumps


def write_feature_dump(path: str | Path, feats: np.ndarray) -> None:
    """One text header line ``dim count`` followed by little-endian float32 rows."""
    feats = np.asarray(feats).reshape(len(feats), -1) if len(feats) else np.zeros((0, 0))
    count, dim = feats.shape
    with open(path, "wb") as fh:
        fh.write(f"{dim} {count}\n".encode())
        fh.write(np.ascontiguousarray(feats, dtype="<f4").tobytes())


def read_feature_dump(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().decode().split()
        dim, count = int(header[0]), int(header[1])
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != dim * count:
        raise ValueError(f"{path}: expected {dim * count} values, found {data.size}")
    return data.reshape(count, dim).astype(np.float64)

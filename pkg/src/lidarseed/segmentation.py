"""Candidate object segments from a LiDAR sweep.

The sweep is rasterised into a range image, ground is flooded from the bottom of
each column using an inclination test, and the remaining returns are grouped with
the angle criterion of Bogoslavskyi and Stachniss: neighbours with ranges
``d1 >= d2`` separated by an angular step ``psi`` belong together when
``atan2(d2 sin psi, d1 - d2 cos psi)`` exceeds ``beta``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .geometry import BBox2D, CameraModel, PointCloud, bbox_from_uv
from .kvfile import floats, read_kv, write_kv

log = logging.getLogger(__name__)


class EmptyFrame(Exception):
    """No proposal survived segmentation and visibility filtering."""


@dataclass
class BeamConfig:
    n_rows: int
    n_cols: int
    elevation_angles: np.ndarray  # radians, ascending, one per row
    azimuth_fov: float  # radians, centred on the x axis

    def __post_init__(self):
        self.elevation_angles = np.asarray(self.elevation_angles, dtype=np.float64)
        if self.elevation_angles.shape != (self.n_rows,):
            raise ValueError("need one elevation angle per row")
        if self.n_rows > 1 and np.any(np.diff(self.elevation_angles) <= 0):
            raise ValueError("elevation angles must be strictly increasing")
        if self.n_cols < 8:
            raise ValueError("n_cols must be at least 8")
        if not 0 < self.azimuth_fov <= 2 * np.pi:
            raise ValueError("azimuth_fov must lie in (0, 2pi]")

    @classmethod
    def uniform(cls, n_rows: int, n_cols: int, elev_min_deg: float, elev_max_deg: float, fov_deg: float) -> "BeamConfig":
        return cls(n_rows, n_cols, np.deg2rad(np.linspace(elev_min_deg, elev_max_deg, n_rows)), np.deg2rad(fov_deg))

    @property
    def azimuth_step(self) -> float:
        return self.azimuth_fov / self.n_cols

    def column_azimuths(self) -> np.ndarray:
        """Azimuth of each column centre; column 0 is the leftmost (largest azimuth)."""
        return self.azimuth_fov / 2 - (np.arange(self.n_cols) + 0.5) * self.azimuth_step

    def row_spacing(self) -> np.ndarray:
        """Half-width tolerance reference per row (gap to the nearest neighbouring beam)."""
        e = self.elevation_angles
        if self.n_rows == 1:
            return np.array([np.deg2rad(1.0)])
        gaps = np.diff(e)
        lower = np.concatenate([[gaps[0]], gaps])
        upper = np.concatenate([gaps, [gaps[-1]]])
        return np.minimum(lower, upper)

    @classmethod
    def from_file(cls, path: str | Path) -> "BeamConfig":
        kv = read_kv(path)
        return cls(
            n_rows=int(kv["n_rows"]),
            n_cols=int(kv["n_cols"]),
            elevation_angles=np.array(floats(kv["elevation_angles"])),
            azimuth_fov=float(kv["azimuth_fov"]),
        )

    def to_file(self, path: str | Path) -> None:
        write_kv(
            path,
            {
                "n_rows": self.n_rows,
                "n_cols": self.n_cols,
                "elevation_angles": [float(v) for v in self.elevation_angles],
                "azimuth_fov": float(self.azimuth_fov),
            },
        )


@dataclass
class RangeImage:
    ranges: np.ndarray  # (rows, cols), 0 = no return
    point_index: np.ndarray  # (rows, cols), -1 = no return
    xyz: np.ndarray  # (rows, cols, 3), NaN where empty
    cfg: BeamConfig
    n_outside_fov: int = 0

    @property
    def occupied(self) -> np.ndarray:
        return self.point_index >= 0


@dataclass
class SegmentationParams:
    ground_angle_deg: float = 10.0
    beta_deg: float = 10.0
    min_segment_points: int = 20
    min_visible_points: int = 5
    wrap_azimuth: bool = False


@dataclass
class SegmentProposal:
    segment_id: int
    point_indices: np.ndarray
    bbox: BBox2D
    frame_id: str = ""
    uv: np.ndarray | None = field(default=None, repr=False)  # projections of the indexed points

    def __len__(self) -> int:
        return len(self.point_indices)


def build_range_image(cloud: PointCloud | np.ndarray, cfg: BeamConfig) -> RangeImage:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(pts) == 0:
        raise ValueError("cannot build a range image from an empty cloud")
    xyz = pts[:, :3]
    r = np.linalg.norm(xyz, axis=1)
    horiz = np.hypot(xyz[:, 0], xyz[:, 1])
    elev = np.arctan2(xyz[:, 2], horiz)
    az = np.arctan2(xyz[:, 1], xyz[:, 0])

    e = cfg.elevation_angles
    pos = np.clip(np.searchsorted(e, elev), 1, max(len(e) - 1, 1))
    if len(e) == 1:
        row = np.zeros(len(pts), dtype=np.int64)
    else:
        row = np.where(np.abs(elev - e[pos - 1]) <= np.abs(e[pos] - elev), pos - 1, pos)
    ok_elev = np.abs(elev - e[row]) <= 0.5 * cfg.row_spacing()[row]

    col_f = (cfg.azimuth_fov / 2 - az) / cfg.azimuth_step
    col = np.floor(col_f).astype(np.int64)
    ok = ok_elev & (col >= 0) & (col < cfg.n_cols) & (r > 0)
    n_outside = int(np.count_nonzero(~ok))

    idx = np.nonzero(ok)[0]
    flat = row[idx] * cfg.n_cols + col[idx]
    # nearest return wins; ties go to the lower point index
    order = np.lexsort((idx, r[idx], flat))
    flat_sorted = flat[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    winners = idx[order[first]]
    cells = flat_sorted[first]

    ranges = np.zeros(cfg.n_rows * cfg.n_cols)
    point_index = np.full(cfg.n_rows * cfg.n_cols, -1, dtype=np.int64)
    grid_xyz = np.full((cfg.n_rows * cfg.n_cols, 3), np.nan)
    ranges[cells] = r[winners]
    point_index[cells] = winners
    grid_xyz[cells] = xyz[winners]
    shape = (cfg.n_rows, cfg.n_cols)
    if n_outside:
        log.debug("%d returns outside the beam raster were skipped", n_outside)
    return RangeImage(ranges.reshape(shape), point_index.reshape(shape), grid_xyz.reshape(shape + (3,)), cfg, n_outside)


def inclination_angles(ri: RangeImage) -> np.ndarray:
    """Per-pixel inclination (radians) of the column steps adjacent to each return.

    Each occupied pixel takes the larger of the inclinations of the 3D steps to the
    previous occupied pixel below and the next one above in its column, so the
    lowest row of an upright object does not read as ground. A lone return in a
    column gets 0. Empty pixels are NaN.
    """
    n_rows, n_cols = ri.ranges.shape
    alpha = np.full((n_rows, n_cols), np.nan)
    occ = ri.occupied
    for c in range(n_cols):
        rows = np.nonzero(occ[:, c])[0]
        if len(rows) == 0:
            continue
        if len(rows) == 1:
            alpha[rows[0], c] = 0.0
            continue
        p = ri.xyz[rows, c]
        d = np.diff(p, axis=0)
        inc = np.arctan2(np.abs(d[:, 2]), np.hypot(d[:, 0], d[:, 1]))
        below = np.concatenate([[inc[0]], inc])
        above = np.concatenate([inc, [inc[-1]]])
        alpha[rows, c] = np.maximum(below, above)
    return alpha


def remove_ground(ri: RangeImage, ground_angle_deg: float = 10.0) -> np.ndarray:
    """Boolean ground mask: low-inclination pixels 4-connected to a column bottom."""
    if not 0 < ground_angle_deg <= 45:
        raise ValueError("ground_angle_deg must lie in (0, 45]")
    alpha = inclination_angles(ri)
    with np.errstate(invalid="ignore"):
        candidate = ri.occupied & (alpha < np.deg2rad(ground_angle_deg))
    occ = ri.occupied
    any_occ = occ.any(axis=0)
    bottom_rows = np.argmax(occ, axis=0)
    seeds = np.zeros_like(candidate)
    cols = np.nonzero(any_occ)[0]
    seeds[bottom_rows[cols], cols] = True
    seeds &= candidate
    labels, _ = ndimage.label(candidate)  # default structure is 4-connectivity in 2D
    seeded = np.unique(labels[seeds])
    seeded = seeded[seeded > 0]
    return np.isin(labels, seeded)


def _merge_edges(ri: RangeImage, keep: np.ndarray, beta: float, wrap: bool) -> tuple[np.ndarray, np.ndarray]:
    n_rows, n_cols = ri.ranges.shape
    flat = np.arange(n_rows * n_cols).reshape(n_rows, n_cols)
    src, dst = [], []

    def add(a_sl, b_sl, psi):
        both = keep[a_sl] & keep[b_sl]
        d_a, d_b = ri.ranges[a_sl], ri.ranges[b_sl]
        d1, d2 = np.maximum(d_a, d_b), np.minimum(d_a, d_b)
        ang = np.arctan2(d2 * np.sin(psi), d1 - d2 * np.cos(psi))
        m = both & (ang > beta)
        src.append(flat[a_sl][m])
        dst.append(flat[b_sl][m])

    psi_h = ri.cfg.azimuth_step
    add((slice(None), slice(0, n_cols - 1)), (slice(None), slice(1, n_cols)), psi_h)
    if wrap:
        add((slice(None), slice(n_cols - 1, n_cols)), (slice(None), slice(0, 1)), psi_h)
    if n_rows > 1:
        psi_v = np.diff(ri.cfg.elevation_angles)[:, None]
        add((slice(0, n_rows - 1), slice(None)), (slice(1, n_rows), slice(None)), psi_v)
    return np.concatenate(src), np.concatenate(dst)


def segment_range_image(
    ri: RangeImage,
    ground: np.ndarray,
    beta_deg: float = 10.0,
    min_segment_points: int = 20,
    wrap_azimuth: bool = False,
) -> list[np.ndarray]:
    """Connected components of non-ground returns under the angle criterion.

    Returns sorted point-index arrays ordered by their first pixel in row-major
    scan order. Components of the merge graph are the same sets a breadth-first
    flood over the 4-neighbourhood visits.
    """
    if not 0 < beta_deg < 90:
        raise ValueError("beta_deg must lie in (0, 90)")
    if min_segment_points < 1:
        raise ValueError("min_segment_points must be >= 1")
    keep = ri.occupied & ~ground
    n = keep.size
    src, dst = _merge_edges(ri, keep, np.deg2rad(beta_deg), wrap_azimuth)
    graph = coo_matrix((np.ones(len(src), dtype=np.int8), (src, dst)), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    comp = comp.reshape(ri.ranges.shape)

    pix = np.nonzero(keep.ravel())[0]
    if len(pix) == 0:
        return []
    labels = comp.ravel()[pix]
    order = np.argsort(labels, kind="stable")
    labels_sorted, pix_sorted = labels[order], pix[order]
    starts = np.concatenate([[0], np.nonzero(np.diff(labels_sorted))[0] + 1, [len(pix_sorted)]])
    pidx = ri.point_index.ravel()
    groups = []
    for a, b in zip(starts[:-1], starts[1:]):
        if b - a < min_segment_points:
            continue
        members = pix_sorted[a:b]
        groups.append((members.min(), np.sort(pidx[members])))
    groups.sort(key=lambda g: g[0])
    return [g[1] for g in groups]


def extract_segments(
    cloud: PointCloud,
    cam: CameraModel,
    beams: BeamConfig,
    params: SegmentationParams | None = None,
) -> list[SegmentProposal]:
    """Full per-frame proposal generation; raises ``EmptyFrame`` when nothing survives."""
    params = params or SegmentationParams()
    ri = build_range_image(cloud, beams)
    ground = remove_ground(ri, params.ground_angle_deg)
    groups = segment_range_image(ri, ground, params.beta_deg, params.min_segment_points, params.wrap_azimuth)
    uv_all, front_all = cam.project(cloud.xyz)
    out = []
    for g in groups:
        box = bbox_from_uv(uv_all[g], front_all[g], cam, params.min_visible_points)
        if box is None:
            continue
        out.append(SegmentProposal(len(out), g, box, cloud.frame_id, uv_all[g]))
    if not out:
        raise EmptyFrame(f"frame {cloud.frame_id!r}: no visible segments")
    return out

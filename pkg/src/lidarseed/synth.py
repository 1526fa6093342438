"""Synthetic driving scenes with exact ground truth.

A scene is a ground plane plus upright primitives (boxes, vertical cylinders,
capsules) whose categories follow a Zipf law. The LiDAR sweep and the camera
image are both produced by ray casting, so every return carries the id of the
object it hit (0 = ground) and every GT box is the hull of an object's rendered
mask.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraModel, PointCloud, write_cloud_bin
from .segmentation import BeamConfig

log = logging.getLogger(__name__)

SKY_RGB = np.array([0.55, 0.72, 0.92])
GROUND_RGB = np.array([0.42, 0.40, 0.36])
GROUND_INTENSITY = 0.3
LIGHT_DIR = np.array([-0.6, 0.5, 0.6]) / np.linalg.norm([-0.6, 0.5, 0.6])
HEAVY_OCCLUSION_PIXELS = 25
MANIFEST_HEADER = "# lidarseed-manifest v1: frame_id split cloud image source_ids"


@dataclass(frozen=True)
class ObjectTemplate:
    shape: str  # "box" | "cylinder" | "capsule"
    size_min: tuple[float, float, float]  # box: (length, width, height); round shapes: (radius, radius, height)
    size_max: tuple[float, float, float]
    albedo: tuple[float, float, float]
    category: int
    subgroup: int = 0
    yaw_family: float | None = None  # yaw relative to the line of sight; None = uniform

    def __post_init__(self):
        if self.shape not in ("box", "cylinder", "capsule"):
            raise ValueError(f"unknown shape {self.shape!r}")
        if min(self.size_min) <= 0 or any(a > b for a, b in zip(self.size_min, self.size_max)):
            raise ValueError("sizes must be positive with min <= max")
        if self.category < 1:
            raise ValueError("category must be >= 1")


def _variants(shape, smin, smax, albedo, category, yaws=None, albedos=None):
    if yaws is not None:
        return [ObjectTemplate(shape, smin, smax, albedo, category, i, y) for i, y in enumerate(yaws)]
    if albedos is not None:
        return [ObjectTemplate(shape, smin, smax, a, category, i) for i, a in enumerate(albedos)]
    return [ObjectTemplate(shape, smin, smax, albedo, category)]


def default_catalog() -> list[ObjectTemplate]:
    """Ten categories; the three most frequent carry three pose/appearance subgroups."""
    views = [0.0, np.pi / 2, np.pi / 4]
    cat = []
    cat += _variants("box", (3.8, 1.7, 1.5), (4.6, 1.9, 1.7), (0.75, 0.15, 0.15), 1, yaws=views)
    cat += _variants(
        "capsule", (0.25, 0.25, 1.6), (0.32, 0.32, 1.85), (0.15, 0.25, 0.7), 2,
        albedos=[(0.15, 0.25, 0.7), (0.25, 0.2, 0.45), (0.4, 0.55, 0.9)],
    )
    cat += _variants("box", (1.6, 0.5, 1.6), (1.9, 0.7, 1.8), (0.15, 0.6, 0.2), 3, yaws=views)
    cat += _variants("box", (7.0, 2.3, 2.8), (9.0, 2.6, 3.3), (0.85, 0.75, 0.1), 4)
    cat += _variants("cylinder", (0.3, 0.3, 0.9), (0.4, 0.4, 1.1), (0.9, 0.45, 0.1), 5)
    cat += _variants("cylinder", (0.12, 0.12, 2.8), (0.18, 0.18, 3.4), (0.55, 0.55, 0.55), 6)
    cat += _variants("box", (1.6, 0.5, 0.7), (2.0, 0.7, 0.9), (0.45, 0.28, 0.12), 7)
    cat += _variants("capsule", (0.18, 0.18, 1.0), (0.22, 0.22, 1.2), (0.92, 0.92, 0.92), 8)
    cat += _variants("cylinder", (0.9, 0.9, 1.4), (1.1, 1.1, 1.7), (0.5, 0.2, 0.6), 9)
    cat += _variants("box", (0.9, 0.9, 0.9), (1.1, 1.1, 1.1), (0.1, 0.7, 0.75), 10)
    return cat


def default_beams() -> BeamConfig:
    return BeamConfig.uniform(40, 440, -22.0, 3.0, 110.0)


def default_camera() -> CameraModel:
    # sensor (x fwd, y left, z up) -> camera (x right, y down, z fwd); camera 0.3 m below the LiDAR
    R = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    return CameraModel(fx=240.0, fy=240.0, cx=240.0, cy=135.0, width=480, height=270, R=R, t=np.array([0.0, -0.3, 0.0]))


@dataclass
class SceneObject:
    object_id: int  # 1-based within the scene
    shape: str
    category: int
    subgroup: int
    center: np.ndarray  # (x, y) on the ground plane
    yaw: float
    dims: np.ndarray  # box: (l, w, h); round: (r, r, h)
    albedo: np.ndarray

    @property
    def footprint_radius(self) -> float:
        if self.shape == "box":
            return 0.5 * float(np.hypot(self.dims[0], self.dims[1]))
        return float(self.dims[0])

    def corners(self, ground_z: float) -> np.ndarray:
        """Vertices of the object's bounding box (exact for boxes)."""
        if self.shape == "box":
            hx, hy = self.dims[0] / 2, self.dims[1] / 2
        else:
            hx = hy = self.dims[0]
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        out = []
        for sx in (-1, 1):
            for sy in (-1, 1):
                lx, ly = sx * hx, sy * hy
                x = self.center[0] + c * lx - s * ly
                y = self.center[1] + s * lx + c * ly
                for z in (ground_z, ground_z + self.dims[2]):
                    out.append((x, y, z))
        return np.array(out)


@dataclass
class Scene:
    objects: list[SceneObject]
    ground_z: float
    seed: int = 0


@dataclass
class SynthConfig:
    zipf_s: float = 1.5
    objects_min: int = 3
    objects_max: int = 7
    range_min: float = 5.0
    range_max: float = 20.0
    half_fov: float = np.deg2rad(40.0)
    min_gap: float = 1.0
    sensor_height: float = 1.5
    range_noise: float = 0.01
    max_range: float = 80.0
    val_fraction: float = 0.2
    catalog: list[ObjectTemplate] = field(default_factory=default_catalog)
    beams: BeamConfig = field(default_factory=default_beams)
    camera: CameraModel = field(default_factory=default_camera)


def zipf_probabilities(n_categories: int, s: float) -> np.ndarray:
    w = np.arange(1, n_categories + 1, dtype=np.float64) ** (-s)
    return w / w.sum()


def generate_scene(
    catalog: list[ObjectTemplate],
    zipf_s: float,
    n_objects: int,
    rng: np.random.Generator,
    cfg: SynthConfig | None = None,
    max_attempts: int = 1000,
) -> Scene:
    """Place ``n_objects`` non-overlapping objects with Zipf-distributed categories.

    Categories are ranked by id; a category's subgroups are equally likely. Gives up
    after ``max_attempts`` placement trials and returns fewer objects.
    """
    if not catalog:
        raise ValueError("catalog must not be empty")
    if zipf_s <= 0:
        raise ValueError("zipf_s must be positive")
    cfg = cfg or SynthConfig()
    cats = sorted({t.category for t in catalog})
    by_cat = {c: [t for t in catalog if t.category == c] for c in cats}
    probs = zipf_probabilities(len(cats), zipf_s)
    objects: list[SceneObject] = []
    attempts = 0
    # the category is fixed per slot and only the placement is retried, so rejection
    # of large objects cannot skew the category frequencies
    while len(objects) < n_objects and attempts < max_attempts:
        cat = cats[rng.choice(len(cats), p=probs)]
        options = by_cat[cat]
        tmpl = options[rng.integers(len(options))]
        dims = rng.uniform(tmpl.size_min, tmpl.size_max)
        if tmpl.shape != "box":
            dims[1] = dims[0]
        while attempts < max_attempts:
            attempts += 1
            rad = np.sqrt(rng.uniform(cfg.range_min**2, cfg.range_max**2))
            az = rng.uniform(-cfg.half_fov, cfg.half_fov)
            center = np.array([rad * np.cos(az), rad * np.sin(az)])
            if tmpl.yaw_family is None:
                yaw = rng.uniform(0, np.pi)
            else:
                yaw = az + tmpl.yaw_family + rng.uniform(-np.deg2rad(10), np.deg2rad(10))
            obj = SceneObject(len(objects) + 1, tmpl.shape, tmpl.category, tmpl.subgroup, center, float(yaw), dims,
                              np.array(tmpl.albedo))
            if np.linalg.norm(center) - obj.footprint_radius < cfg.range_min - 1.0:
                continue
            if any(np.linalg.norm(center - o.center) < obj.footprint_radius + o.footprint_radius + cfg.min_gap
                   for o in objects):
                continue
            objects.append(obj)
            break
    return Scene(objects, -cfg.sensor_height)


# ---------------------------------------------------------------- ray casting


def _rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _intersect_box(obj: SceneObject, o: np.ndarray, D: np.ndarray, ground_z: float):
    R = _rot_z(obj.yaw)
    c = np.array([obj.center[0], obj.center[1], ground_z + obj.dims[2] / 2])
    lo = (o - c) @ R  # world -> local is R^T
    ld = D @ R
    half = obj.dims / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - lo) / ld
        t2 = (half - lo) / ld
    tn = np.minimum(t1, t2)
    tf = np.maximum(t1, t2)
    tn = np.where(np.isnan(tn), -np.inf, tn)
    tf = np.where(np.isnan(tf), np.inf, tf)
    t_near = tn.max(axis=1)
    t_far = tf.min(axis=1)
    hit = (t_far >= t_near) & (t_near > 1e-9)
    t = np.where(hit, t_near, np.inf)
    axis = tn.argmax(axis=1)
    n_local = np.zeros_like(ld)
    n_local[np.arange(len(ld)), axis] = -np.sign(ld[np.arange(len(ld)), axis])
    return t, n_local @ R.T


def _ray_sphere(o, D, center, r):
    oc = o - center
    b = D @ oc
    cc = oc @ oc - r * r
    disc = b * b - cc
    with np.errstate(invalid="ignore"):
        t = -b - np.sqrt(disc)
    t = np.where((disc >= 0) & (t > 1e-9), t, np.inf)
    return t


def _ray_cylinder_side(o, D, cxy, r, z0, z1):
    ox, oy = o[0] - cxy[0], o[1] - cxy[1]
    a = D[:, 0] ** 2 + D[:, 1] ** 2
    b = 2 * (ox * D[:, 0] + oy * D[:, 1])
    cc = ox * ox + oy * oy - r * r
    disc = b * b - 4 * a * cc
    with np.errstate(invalid="ignore", divide="ignore"):
        t = (-b - np.sqrt(disc)) / (2 * a)
    z = o[2] + t * D[:, 2]
    ok = (disc >= 0) & (a > 1e-12) & (t > 1e-9) & (z >= z0) & (z <= z1)
    return np.where(ok, t, np.inf)


def _ray_disk(o, D, cxy, r, z):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (z - o[2]) / D[:, 2]
    px = o[0] + t * D[:, 0] - cxy[0]
    py = o[1] + t * D[:, 1] - cxy[1]
    ok = (t > 1e-9) & (px * px + py * py <= r * r)
    return np.where(ok, t, np.inf)


def _intersect_round(obj: SceneObject, o: np.ndarray, D: np.ndarray, ground_z: float):
    r, h = float(obj.dims[0]), float(obj.dims[2])
    cxy = obj.center
    z0, z1 = ground_z, ground_z + h
    if obj.shape == "cylinder":
        cands = [_ray_cylinder_side(o, D, cxy, r, z0, z1), _ray_disk(o, D, cxy, r, z1)]
    else:
        r = min(r, h / 2)
        lo_c = np.array([cxy[0], cxy[1], z0 + r])
        hi_c = np.array([cxy[0], cxy[1], z1 - r])
        cands = [_ray_cylinder_side(o, D, cxy, r, z0 + r, z1 - r), _ray_sphere(o, D, lo_c, r), _ray_sphere(o, D, hi_c, r)]
    t = np.minimum.reduce(cands)
    p = o + D * np.where(np.isfinite(t), t, 0.0)[:, None]
    n = np.zeros_like(D)
    if obj.shape == "cylinder":
        top = np.isfinite(t) & (t == cands[1])
        n[:, 0] = p[:, 0] - cxy[0]
        n[:, 1] = p[:, 1] - cxy[1]
        n[top] = (0.0, 0.0, 1.0)
    else:
        axis_z = np.clip(p[:, 2], z0 + r, z1 - r)
        n = p - np.stack([np.full(len(p), cxy[0]), np.full(len(p), cxy[1]), axis_z], axis=1)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    n = n / np.where(norm > 0, norm, 1.0)
    return t, n


def intersect(obj: SceneObject, o: np.ndarray, D: np.ndarray, ground_z: float):
    """First hit distance (inf = miss) and unit surface normal for unit rays ``D`` from ``o``."""
    if obj.shape == "box":
        return _intersect_box(obj, o, D, ground_z)
    return _intersect_round(obj, o, D, ground_z)


def cast(scene: Scene, o: np.ndarray, D: np.ndarray, max_range: float | None = None):
    """Nearest hit over ground and objects; returns ``(t, source_id, normal)``; id 0 = ground, -1 = miss."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(D[:, 2] < 0, (scene.ground_z - o[2]) / D[:, 2], np.inf)
    t_best = t_ground
    ids = np.where(np.isfinite(t_ground), 0, -1)
    normals = np.tile([0.0, 0.0, 1.0], (len(D), 1))
    for obj in scene.objects:
        t, n = intersect(obj, o, D, scene.ground_z)
        closer = t < t_best
        t_best = np.where(closer, t, t_best)
        ids = np.where(closer, obj.object_id, ids)
        normals[closer] = n[closer]
    if max_range is not None:
        far = t_best > max_range
        t_best = np.where(far, np.inf, t_best)
        ids = np.where(far, -1, ids)
    return t_best, ids, normals


def beam_directions(beams: BeamConfig) -> np.ndarray:
    """Unit ray per (row, col), row-major, shape ``(rows*cols, 3)``."""
    e = beams.elevation_angles[:, None]
    a = beams.column_azimuths()[None, :]
    d = np.stack(np.broadcast_arrays(np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)), axis=-1)
    return d.reshape(-1, 3)


def luminance(rgb) -> float:
    rgb = np.asarray(rgb)
    return float(0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2])


def simulate_lidar(scene: Scene, beams: BeamConfig, rng: np.random.Generator, noise_sigma: float = 0.01, max_range: float = 80.0):
    """One ray per raster cell; returns ``(PointCloud, source_ids)``."""
    D = beam_directions(beams)
    t, ids, _ = cast(scene, np.zeros(3), D, max_range)
    hit = ids >= 0
    noisy = t[hit] + rng.normal(0.0, noise_sigma, size=int(hit.sum()))
    xyz = D[hit] * noisy[:, None]
    lum = {o.object_id: luminance(o.albedo) for o in scene.objects}
    inten = np.array([GROUND_INTENSITY if i == 0 else lum[i] for i in ids[hit]])
    pts = np.column_stack([xyz, inten]) if len(xyz) else np.zeros((0, 4))
    return PointCloud(pts), ids[hit].astype(np.int64)


def _object_pixel_rect(obj: SceneObject, scene: Scene, cam: CameraModel):
    corners = obj.corners(scene.ground_z)
    uv, front = cam.project(corners)
    if not front.all():
        return 0, 0, cam.width, cam.height
    u0 = int(np.floor(max(uv[:, 0].min() - 2, 0)))
    v0 = int(np.floor(max(uv[:, 1].min() - 2, 0)))
    u1 = int(np.ceil(min(uv[:, 0].max() + 2, cam.width)))
    v1 = int(np.ceil(min(uv[:, 1].max() + 2, cam.height)))
    return u0, v0, u1, v1


def render_image(scene: Scene, cam: CameraModel):
    """Flat-shaded ray-cast render with a depth buffer.

    Returns ``(rgb uint8 (H, W, 3), object_id_map (H, W) with -1 sky / 0 ground)``.
    """
    H, W = cam.height, cam.width
    v, u = np.mgrid[0:H, 0:W]
    dc = np.stack([(u + 0.5 - cam.cx) / cam.fx, (v + 0.5 - cam.cy) / cam.fy, np.ones_like(u, dtype=float)], axis=-1)
    D = dc.reshape(-1, 3) @ cam.R  # camera -> sensor is R^T
    D /= np.linalg.norm(D, axis=1, keepdims=True)
    o = cam.center
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.where(D[:, 2] < 0, (scene.ground_z - o[2]) / D[:, 2], np.inf)
    ids = np.where(np.isfinite(depth), 0, -1)
    shade = np.zeros(len(D))
    depth = depth.reshape(H, W)
    ids = ids.reshape(H, W)
    shade = shade.reshape(H, W)
    Dg = D.reshape(H, W, 3)
    for obj in scene.objects:
        u0, v0, u1, v1 = _object_pixel_rect(obj, scene, cam)
        if u1 <= u0 or v1 <= v0:
            continue
        sub = Dg[v0:v1, u0:u1].reshape(-1, 3)
        t, n = intersect(obj, o, sub, scene.ground_z)
        t = t.reshape(v1 - v0, u1 - u0)
        closer = t < depth[v0:v1, u0:u1]
        depth[v0:v1, u0:u1] = np.where(closer, t, depth[v0:v1, u0:u1])
        ids[v0:v1, u0:u1] = np.where(closer, obj.object_id, ids[v0:v1, u0:u1])
        lam = np.clip(n @ LIGHT_DIR, 0.0, None).reshape(v1 - v0, u1 - u0)
        shade[v0:v1, u0:u1] = np.where(closer, 0.35 + 0.65 * lam, shade[v0:v1, u0:u1])

    img = np.empty((H, W, 3))
    img[:] = SKY_RGB
    g = ids == 0
    img[g] = GROUND_RGB[None, :] * (0.6 + 0.4 * np.exp(-depth[g] / 40.0))[:, None]
    for obj in scene.objects:
        m = ids == obj.object_id
        if m.any():
            img[m] = obj.albedo[None, :] * shade[m][:, None]
    rgb = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return rgb, ids


@dataclass
class GTRecord:
    frame_id: str
    bbox: tuple[float, float, float, float]
    category: int
    subgroup: int
    object_id: int
    heavily_occluded: bool
    lidar_points: int

    def to_json(self) -> dict:
        x1, y1, x2, y2 = self.bbox
        return {
            "frame": self.frame_id,
            "x1": x1, "y1": y1, "x2": x2, "y2": y2,
            "category": self.category,
            "subgroup": self.subgroup,
            "object": self.object_id,
            "heavily_occluded": self.heavily_occluded,
            "lidar_points": self.lidar_points,
        }


def gt_boxes_from_mask(scene: Scene, ids: np.ndarray, source_ids: np.ndarray, frame_id: str = "") -> list[GTRecord]:
    """Tight pixel hull of each object's rendered mask."""
    out = []
    counts = np.bincount(source_ids[source_ids > 0], minlength=len(scene.objects) + 1)
    for obj in scene.objects:
        vs, us = np.nonzero(ids == obj.object_id)
        if len(us) == 0:
            continue
        box = (float(us.min()), float(vs.min()), float(us.max() + 1), float(vs.max() + 1))
        out.append(GTRecord(frame_id, box, obj.category, obj.subgroup, obj.object_id, len(us) < HEAVY_OCCLUSION_PIXELS, int(counts[obj.object_id])))
    return out


@dataclass
class ScenePackage:
    cloud: PointCloud
    source_ids: np.ndarray
    image: np.ndarray
    gt: list[GTRecord]
    camera: CameraModel
    scene: Scene
    seed: int


def frame_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def make_frame(cfg: SynthConfig, seed: int, index: int, frame_id: str | None = None) -> ScenePackage:
    frame_id = frame_id if frame_id is not None else f"{index:06d}"
    rng = frame_rng(seed, index)
    n = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    scene = generate_scene(cfg.catalog, cfg.zipf_s, n, rng, cfg)
    scene.seed = seed
    cloud, src = simulate_lidar(scene, cfg.beams, rng, cfg.range_noise, cfg.max_range)
    cloud.frame_id = frame_id
    rgb, ids = render_image(scene, cfg.camera)
    gt = gt_boxes_from_mask(scene, ids, src, frame_id)
    return ScenePackage(cloud, src, rgb, gt, cfg.camera, scene, seed)


def _write_frame(args):
    cfg, seed, index, out_dir, split = args
    pkg = make_frame(cfg, seed, index)
    fid = pkg.cloud.frame_id
    out = Path(out_dir)
    write_cloud_bin(out / "clouds" / f"{fid}.bin", pkg.cloud)
    pkg.source_ids.astype("<i4").tofile(out / "source_ids" / f"{fid}.bin")
    Image.fromarray(pkg.image).save(out / "images" / f"{fid}.png")
    return fid, split, [g.to_json() for g in pkg.gt]


def split_of(index: int, n_frames: int, val_fraction: float) -> str:
    n_val = int(round(n_frames * val_fraction))
    return "val" if index >= n_frames - n_val else "train"


def generate_dataset(n_frames: int, cfg: SynthConfig, seed: int, out_dir: str | Path, workers: int = 1) -> Path:
    """Write clouds, source ids, images, GT, calibration and a manifest; returns the manifest path."""
    out = Path(out_dir)
    try:
        for sub in ("clouds", "source_ids", "images"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        cfg.camera.to_file(out / "calib.txt")
        cfg.beams.to_file(out / "beams.txt")
        jobs = [(cfg, seed, i, str(out), split_of(i, n_frames, cfg.val_fraction)) for i in range(n_frames)]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as ex:
                results = list(ex.map(_write_frame, jobs, chunksize=8))
        else:
            results = [_write_frame(j) for j in jobs]
        lines = [MANIFEST_HEADER]
        with open(out / "gt.jsonl", "w") as fh:
            for fid, split, gts in results:
                lines.append(f"{fid} {split} clouds/{fid}.bin images/{fid}.png source_ids/{fid}.bin")
                for rec in gts:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
        manifest = out / "manifest.txt"
        manifest.write_text("\n".join(lines) + "\n")
    except OSError as e:
        raise IoFailure(str(e)) from e
    log.info("wrote %d frames to %s", n_frames, out)
    return manifest


class IoFailure(OSError):
    pass


@dataclass
class ManifestEntry:
    frame_id: str
    split: str
    cloud: Path
    image: Path
    source_ids: Path


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    path = Path(path)
    root = path.parent
    out = []
    for line in path.read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        fid, split, cloud, image, src = line.split()
        out.append(ManifestEntry(fid, split, root / cloud, root / image, root / src))
    return out


def read_source_ids(path: str | Path) -> np.ndarray:
    return np.fromfile(path, dtype="<i4").astype(np.int64)

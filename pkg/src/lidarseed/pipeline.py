"""Stage orchestration. Every stage reads the files of earlier stages and writes its own
subdirectory under the output root, so any stage can be deleted and re-run."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .contrastive import ContrastiveEncoder, contrastive_pretrain
from .dataset import (
    FrameSegments,
    SegmentTable,
    build_jitter_bank,
    load_image,
    parallel_map,
    read_frame_segments,
    segment_frame,
    write_frame_segments,
)
from .evaluation import (
    OTHERS,
    APResult,
    Detection,
    GroundTruthBox,
    assign_gt_to_segments,
    average_precision,
    build_cluster_mapping,
    cluster_histogram_stats,
    format_report,
    read_gt,
    visible_gt,
)
from .export import (
    filter_negative_proposals,
    pseudo_annotations,
    write_pseudo_annotations,
    export_summary,
)
from .features import (
    SHAPE_DIM,
    AugmentParams,
    FeatureStats,
    augment_segment,
    embed,
    shape_descriptor,
    write_feature_dump,
)
from .geometry import BBox2D, CameraModel, nms_indices, read_cloud_bin
from .kvfile import KVFormatError, read_kv
from .label_init import SegmentLabel, init_labels, kmeans, read_labels, write_labels
from .labeler import (
    IterationReport,
    JitterBank,
    LabelerConfig,
    LabelerModel,
    NoForegroundLabels,
    iterate,
    train_labeler,
)
from .segmentation import BeamConfig, SegmentationParams
from .synth import SynthConfig, default_beams, default_camera, generate_dataset, read_manifest

log = logging.getLogger(__name__)

CATEGORY_NAMES = {1: "car", 2: "pedestrian", 3: "cyclist", 4: "truck", 5: "barrel", 6: "pole", 7: "bench",
                  8: "bollard", 9: "tank", 10: "crate"}


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


def _bool(v: str) -> bool:
    t = v.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


@dataclass
class PipelineConfig:
    out: Path = Path("out")
    dataset: Path | None = None  # defaults to <out>/synth-gen
    beams: Path | None = None
    camera: Path | None = None
    seed: int = 0
    workers: int = 1
    # synthetic data
    n_frames: int = 100
    zipf_s: float = 1.5
    objects_min: int = 3
    objects_max: int = 7
    val_fraction: float = 0.2
    # segmentation and features
    ground_angle_deg: float = 10.0
    beta_deg: float = 10.0
    min_segment_points: int = 20
    min_visible_points: int = 5
    wrap_azimuth: bool = False
    ground_z: float = -1.5
    feature_clip: float = 5.0
    # optional encoder
    encoder: bool = False
    encoder_dims: tuple[int, ...] = (237, 128, 64)
    pretrain_epochs: int = 10
    pretrain_batch: int = 256
    temperature: float = 0.2
    # labeling
    C: int = 10000
    kmeans_iters: int = 100
    eta: float = 0.95
    rounds: int = 10
    pos_neg_ratio: str = "1:3"
    lr: float = 0.05
    steps: int = 2000
    hidden: tuple[int, ...] = (256,)
    jitters_per_segment: int = 12
    prior: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    # evaluation
    nms_iou: float = 0.3
    visible_only: bool = True
    min_gt_points: int = 20
    sweep_etas: tuple[float, ...] = (0.999, 0.99, 0.95, 0.90, 0.80)
    overlay_frames: int = 8
    source: Path | None = field(default=None, repr=False)  # the file this was read from

    @classmethod
    def from_mapping(cls, kv: dict[str, str], base: Path | None = None) -> "PipelineConfig":
        fields = {f.name: f for f in dataclasses.fields(cls) if f.name != "source"}
        unknown = sorted(set(kv) - set(fields))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        vals = {}
        for k, raw in kv.items():
            default = fields[k].default
            try:
                if k in ("out", "dataset", "beams", "camera"):
                    p = Path(raw)
                    vals[k] = p if p.is_absolute() or base is None else base / p
                elif isinstance(default, bool):
                    vals[k] = _bool(raw)
                elif isinstance(default, int):
                    vals[k] = int(raw)
                elif isinstance(default, float):
                    vals[k] = float(raw)
                elif isinstance(default, tuple):
                    conv = float if isinstance(default[0], float) else int
                    vals[k] = tuple(conv(t) for t in raw.replace(",", " ").split())
                else:
                    vals[k] = raw
            except ValueError as e:
                raise ConfigError(f"bad value for {k!r}: {e}") from e
        if base is not None and "out" not in vals:
            vals["out"] = base / "out"  # relative paths resolve against the config file
        cfg = cls(**vals)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            kv = read_kv(path)
        except KVFormatError as e:
            raise ConfigError(f"{path}: {e}") from e
        cfg = cls.from_mapping(kv, path.parent)
        cfg.source = path
        return cfg

    def validate(self) -> None:
        if self.pos_neg_ratio.replace(" ", "") != "1:3":
            raise ConfigError("pos_neg_ratio is fixed at 1:3")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not 0.0 < self.eta < 1.0 or not all(0.0 < e < 1.0 for e in self.sweep_etas):
            raise ConfigError("eta values must lie in (0, 1)")
        if self.feature_clip <= 0:
            raise ConfigError("feature_clip must be positive")
        for name in ("beams", "camera"):
            p = getattr(self, name)
            if p is not None and not p.exists():
                raise ConfigError(f"{name} file {p} does not exist")

    def require_dataset(self) -> None:
        if not (self.dataset_dir / "manifest.txt").exists():
            raise ConfigError(f"dataset {self.dataset_dir} has no manifest.txt")

    @property
    def dataset_dir(self) -> Path:
        return self.dataset if self.dataset is not None else self.out / "synth-gen"

    def stage_dir(self, name: str) -> Path:
        d = self.out / name
        d.mkdir(parents=True, exist_ok=True)
        return d

    def load_beams(self) -> BeamConfig:
        p = self.beams or self.dataset_dir / "beams.txt"
        return BeamConfig.from_file(p) if p.exists() else default_beams()

    def load_camera(self) -> CameraModel:
        p = self.camera or self.dataset_dir / "calib.txt"
        return CameraModel.from_file(p) if p.exists() else default_camera()

    def segmentation_params(self) -> SegmentationParams:
        return SegmentationParams(self.ground_angle_deg, self.beta_deg, self.min_segment_points,
                                  self.min_visible_points, self.wrap_azimuth)

    def labeler_config(self, eta: float | None = None, C: int | None = None) -> LabelerConfig:
        return LabelerConfig(C=C or self.C, eta=self.eta if eta is None else eta, rounds=self.rounds,
                             hidden=tuple(self.hidden), lr=self.lr, steps=self.steps, momentum=self.momentum,
                             weight_decay=self.weight_decay, jitters_per_segment=self.jitters_per_segment,
                             prior=self.prior, ground_z=self.ground_z)


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{path} not found; run `{stage}` first")
    return path


def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(tag)]))


# stream tags keep every stage's randomness independent of the others
TAG_KMEANS, TAG_DETECTOR, TAG_PRETRAIN = 11, 13, 17


# ---------------------------------------------------------------- synth-gen


def run_synth_gen(cfg: PipelineConfig) -> Path:
    scfg = SynthConfig(zipf_s=cfg.zipf_s, objects_min=cfg.objects_min, objects_max=cfg.objects_max,
                       val_fraction=cfg.val_fraction, beams=cfg.load_beams() if cfg.beams else default_beams(),
                       camera=cfg.load_camera() if cfg.camera else default_camera(),
                       sensor_height=-cfg.ground_z)
    return generate_dataset(cfg.n_frames, scfg, cfg.seed, cfg.dataset_dir, cfg.workers)


# ---------------------------------------------------------------- segment


def _segment_job(args):
    entry, out_path, cam, beams, params, ground_z = args
    cloud = read_cloud_bin(entry.cloud, entry.frame_id)
    image = load_image(entry.image)
    props, feats = segment_frame(cloud.points, entry.frame_id, image, cam, beams, params, ground_z)
    write_frame_segments(out_path, props, feats)
    return entry.frame_id, len(props)


def run_segment(cfg: PipelineConfig) -> dict[str, int]:
    cfg.require_dataset()
    entries = read_manifest(cfg.dataset_dir / "manifest.txt")
    out = cfg.stage_dir("segment") / "frames"
    out.mkdir(exist_ok=True)
    cam, beams, params = cfg.load_camera(), cfg.load_beams(), cfg.segmentation_params()
    jobs = [(e, out / f"{e.frame_id}.npz", cam, beams, params, cfg.ground_z) for e in entries]
    counts = dict(parallel_map(_segment_job, jobs, cfg.workers))
    lines = [f"{fid} {n}" for fid, n in counts.items()]
    empty = sum(1 for n in counts.values() if n == 0)
    lines.append(f"# frames {len(counts)} segments {sum(counts.values())} empty_frames {empty}")
    (cfg.out / "segment" / "summary.txt").write_text("\n".join(lines) + "\n")
    log.info("segmented %d frames: %d proposals", len(counts), sum(counts.values()))
    return counts


def load_frames(cfg: PipelineConfig, split: str | None = None) -> tuple[list, list[FrameSegments]]:
    entries = read_manifest(cfg.dataset_dir / "manifest.txt")
    if split is not None:
        entries = [e for e in entries if e.split == split]
    d = _need(cfg.out / "segment" / "frames", "segment")
    frames = [read_frame_segments(_need(d / f"{e.frame_id}.npz", "segment"), e.frame_id) for e in entries]
    return entries, frames


# ---------------------------------------------------------------- pretrain


def _segment_points(entries, frames) -> list[np.ndarray]:
    out = []
    for e, fr in zip(entries, frames):
        pts = read_cloud_bin(e.cloud, e.frame_id).points
        out.extend(pts[fr.point_indices(k)] for k in range(len(fr)))
    return out


def run_pretrain(cfg: PipelineConfig) -> ContrastiveEncoder:
    cfg.require_dataset()
    entries, frames = load_frames(cfg, "train")
    table = SegmentTable.from_frames(frames)
    stats = FeatureStats.fit(table.features)
    points = _segment_points(entries, frames)
    appearance = table.features[:, SHAPE_DIM:]

    def views(idx, rng):
        raw = np.array([np.concatenate([shape_descriptor(augment_segment(points[i], AugmentParams.sample(rng), rng),
                                                         cfg.ground_z), appearance[i]]) for i in idx])
        return embed(raw, stats, clip=cfg.feature_clip)

    enc = contrastive_pretrain(len(table), views, cfg.pretrain_epochs, _rng(cfg.seed, TAG_PRETRAIN),
                               cfg.encoder_dims, batch_size=cfg.pretrain_batch,
                               temperature=cfg.temperature)
    d = cfg.stage_dir("pretrain")
    enc.save(d / "encoder.npz")
    (d / "loss.txt").write_text("".join(f"{i} {v!r}\n" for i, v in enumerate(enc.loss_trace)))
    return enc


def load_encoder(cfg: PipelineConfig) -> ContrastiveEncoder | None:
    if not cfg.encoder:
        return None
    return ContrastiveEncoder.load(_need(cfg.out / "pretrain" / "encoder.npz", "pretrain"))


def first_layer(enc: ContrastiveEncoder | None):
    return None if enc is None else (enc.weights[0], enc.biases[0])


# ---------------------------------------------------------------- init


def run_init(cfg: PipelineConfig) -> list[SegmentLabel]:
    cfg.require_dataset()
    _, frames = load_frames(cfg, "train")
    table = SegmentTable.from_frames(frames)
    if len(table) == 0:
        raise NoForegroundLabels("no training segments to cluster")
    stats = FeatureStats.fit(table.features)
    x = embed(table.features, stats, load_encoder(cfg), cfg.feature_clip)
    model, assign = kmeans(x, cfg.C, cfg.kmeans_iters, int(_rng(cfg.seed, TAG_KMEANS).integers(2**31)))
    labels = [SegmentLabel(f, s, int(k) + 1) for (f, s), k in zip(table.refs, assign)]
    d = cfg.stage_dir("init")
    stats.save(d / "feature_stats.npz")
    write_labels(d / "labels.txt", labels)
    (d / "objective.txt").write_text("".join(f"{i} {v!r}\n" for i, v in enumerate(model.objective_trace)))
    write_feature_dump(d / "features.bin", x)
    n100, n90, n80 = cluster_histogram_stats(assign + 1)
    log.info("k-means: %d iterations, %d non-empty clusters (90%%: %d, 80%%: %d)", model.n_iter, n100, n90, n80)
    return labels


# ---------------------------------------------------------------- iterate


@dataclass
class TrainingData:
    table: SegmentTable
    seg_x: np.ndarray
    bank: JitterBank
    bank_x: np.ndarray
    first_layer: tuple | None


def load_training_data(cfg: PipelineConfig) -> TrainingData:
    entries, frames = load_frames(cfg, "train")
    table = SegmentTable.from_frames(frames)
    stats = FeatureStats.load(_need(cfg.out / "init" / "feature_stats.npz", "init"))
    bank_path = cfg.out / "iterate" / "bank.npz"
    if bank_path.exists():
        bank = JitterBank.load(bank_path)
    else:
        bank = build_jitter_bank(entries, frames, table, cfg.load_camera(), cfg.jitters_per_segment, cfg.seed,
                                 cfg.workers, cfg.ground_z)
        bank.save(cfg.stage_dir("iterate") / "bank.npz")
    clip = cfg.feature_clip
    return TrainingData(table, stats.apply(table.features).clip(-clip, clip), bank,
                        stats.apply(bank.features).clip(-clip, clip), first_layer(load_encoder(cfg)))


def labels_array(table: SegmentTable, labels: list[SegmentLabel]) -> np.ndarray:
    pos = {ref: i for i, ref in enumerate(table.refs)}
    out = np.zeros(len(table), dtype=np.int64)
    seen = np.zeros(len(table), dtype=bool)
    for lab in labels:
        i = pos.get((lab.frame_id, lab.segment_id))
        if i is None:
            raise ConfigError(f"label for unknown segment {lab.frame_id}/{lab.segment_id}")
        out[i] = lab.y
        seen[i] = True
    if not seen.all():
        raise ConfigError(f"{int((~seen).sum())} segments have no label")
    return out


def to_labels(table: SegmentTable, y: np.ndarray) -> list[SegmentLabel]:
    return [SegmentLabel(f, s, int(v)) for (f, s), v in zip(table.refs, y)]


def run_labeling(cfg: PipelineConfig, data: TrainingData, eta: float, out_dir: Path) -> tuple[np.ndarray, list[IterationReport]]:
    out_dir.mkdir(parents=True, exist_ok=True)
    init = labels_array(data.table, read_labels(_need(cfg.out / "init" / "labels.txt", "init")))
    lcfg = cfg.labeler_config(eta=eta)
    report_path = out_dir / "reports.jsonl"
    report_path.write_text("")

    def on_round(rep: IterationReport, y: np.ndarray):
        write_labels(out_dir / f"round_{rep.round:02d}.txt", to_labels(data.table, y))
        with open(report_path, "a") as fh:
            fh.write(json.dumps(rep.to_json()) + "\n")

    y, reports, model = iterate(data.seg_x, data.bank_x, data.bank, init, lcfg, cfg.seed, data.first_layer, on_round)
    write_labels(out_dir / "labels.txt", to_labels(data.table, y))
    model.save(out_dir / "model.npz")
    return y, reports


def run_iterate(cfg: PipelineConfig) -> list[IterationReport]:
    cfg.require_dataset()
    data = load_training_data(cfg)
    _, reports = run_labeling(cfg, data, cfg.eta, cfg.stage_dir("iterate"))
    return reports


# ---------------------------------------------------------------- export


def run_export(cfg: PipelineConfig) -> dict:
    cfg.require_dataset()
    _, frames = load_frames(cfg, "train")
    table = SegmentTable.from_frames(frames)
    labels = read_labels(_need(cfg.out / "iterate" / "labels.txt", "iterate"))
    cam = cfg.load_camera()
    anns = pseudo_annotations(labels, table.box_map(), cam.width, cam.height)
    d = cfg.stage_dir("export")
    write_pseudo_annotations(d / "pseudo_annotations.jsonl", anns)
    # proposals in the negative IoU band, per frame, for detector training
    by_frame: dict[str, list[np.ndarray]] = {}
    for a in anns:
        by_frame.setdefault(a.frame_id, []).append(a.bbox.as_array())
    n_neg = 0
    with open(d / "negative_proposals.jsonl", "w") as fh:
        for fid, rows in table.frame_rows.items():
            pseudo = np.array(by_frame.get(fid, [])).reshape(-1, 4)
            for k in filter_negative_proposals(table.boxes[rows], pseudo):
                x1, y1, x2, y2 = (float(v) for v in table.boxes[rows][k])
                fh.write(json.dumps({"frame": fid, "x1": x1, "y1": y1, "x2": x2, "y2": y2}) + "\n")
                n_neg += 1
    summary = export_summary(anns, len(labels))
    summary["negative_proposals"] = n_neg
    (d / "summary.txt").write_text("".join(f"{k} {v}\n" for k, v in summary.items()))
    return summary


# ---------------------------------------------------------------- eval


@dataclass
class EvalResult:
    ap: APResult
    mapping: dict[int, int]
    mapping_error: float
    detections: list[Detection]
    scored_clusters: list[int]


def load_gt(cfg: PipelineConfig, frames: set[str]) -> list[GroundTruthBox]:
    gt = [g for g in read_gt(cfg.dataset_dir / "gt.jsonl") if g.frame_id in frames]
    return visible_gt(gt, cfg.min_gt_points) if cfg.visible_only else gt


def detect(model: LabelerModel, table: SegmentTable, x: np.ndarray, nms_iou: float) -> list[tuple[str, BBox2D, float, int]]:
    """One detection per proposal (top cluster and its score), then class-agnostic NMS per frame."""
    if len(table) == 0:
        return []
    s = model.scores(x)
    cl = np.argmax(s, axis=1) + 1
    sc = s[np.arange(len(s)), cl - 1]
    out = []
    for fid, rows in table.frame_rows.items():
        if len(rows) == 0:
            continue
        for k in nms_indices(table.boxes[rows], sc[rows], nms_iou):
            r = rows[k]
            out.append((fid, BBox2D.from_array(table.boxes[r]), float(sc[r]), int(cl[r])))
    return out


def evaluate_labels(cfg: PipelineConfig, data: TrainingData, y_train: np.ndarray, C: int | None = None,
                    eta: float | None = None) -> EvalResult:
    """Fit the cluster mapping on the training split, train a detector on the labels and score val."""
    seg_gt = ground_truth_labels(cfg, data)
    mapping = build_cluster_mapping(y_train, seg_gt)
    lcfg = cfg.labeler_config(eta=eta, C=C)
    model, _ = train_labeler(data.bank_x, data.bank, y_train, lcfg, _rng(cfg.seed, TAG_DETECTOR), data.first_layer)

    _, val_frames = load_frames(cfg, "val")
    val = SegmentTable.from_frames(val_frames)
    stats = FeatureStats.load(cfg.out / "init" / "feature_stats.npz")
    xv = stats.apply(val.features).clip(-cfg.feature_clip, cfg.feature_clip)
    raw = detect(model, val, xv, cfg.nms_iou)
    dets = [Detection(f, b, s, mapping(c)) for f, b, s, c in raw]
    dets = [d for d in dets if d.category != OTHERS]
    gt_val = load_gt(cfg, set(val.frame_rows))
    return EvalResult(average_precision(dets, gt_val), mapping.mapping, mapping.training_error_rate, dets,
                      [c for _, _, _, c in raw])


def ground_truth_labels(cfg: PipelineConfig, data: TrainingData) -> np.ndarray:
    """Segment labels from GT (category or background); the supervised reference."""
    gt_train = [g for g in read_gt(cfg.dataset_dir / "gt.jsonl") if g.frame_id in set(data.table.frame_ids)]
    return assign_gt_to_segments(data.table.frame_ids, data.table.boxes, gt_train)


def write_eval(d: Path, res: EvalResult, prefix: str = "") -> None:
    (d / f"{prefix}report.txt").write_text(format_report(res.ap, CATEGORY_NAMES) +
                                           f"mapping_error {res.mapping_error!r}\n")
    (d / f"{prefix}mapping.txt").write_text("".join(f"{c} {k}\n" for c, k in sorted(res.mapping.items())))
    with open(d / f"{prefix}detections.jsonl", "w") as fh:
        for det in res.detections:
            x1, y1, x2, y2 = det.bbox.as_tuple()
            fh.write(json.dumps({"frame": det.frame_id, "x1": x1, "y1": y1, "x2": x2, "y2": y2,
                                 "score": det.score, "category": det.category}) + "\n")
    (d / f"{prefix}ap.json").write_text(json.dumps(
        {"mean": {k: _nan_none(res.ap.mean(k)) for k in ("AP", "AP_S", "AP_M", "AP_L")},
         "per_category": {str(c): {k: _nan_none(v) for k, v in row.items()} for c, row in res.ap.per_category.items()}},
        indent=1, sort_keys=True) + "\n")


def _nan_none(v: float):
    return None if math.isnan(v) else v


def run_eval(cfg: PipelineConfig, oracle: bool = False) -> EvalResult:
    cfg.require_dataset()
    data = load_training_data(cfg)
    d = cfg.stage_dir("eval")
    if oracle:
        y = ground_truth_labels(cfg, data)
        res = evaluate_labels(cfg, data, y, C=max(int(y.max()), 1))
        write_eval(d, res, "oracle_")
        return res
    y = labels_array(data.table, read_labels(_need(cfg.out / "iterate" / "labels.txt", "iterate")))
    res = evaluate_labels(cfg, data, y)
    write_eval(d, res)
    return res


# ---------------------------------------------------------------- sweep-eta


def run_sweep_eta(cfg: PipelineConfig) -> list[dict]:
    cfg.require_dataset()
    data = load_training_data(cfg)
    root = cfg.stage_dir("sweep-eta")
    rows = []
    for eta in cfg.sweep_etas:
        d = root / f"eta_{eta:g}"
        row = {"eta": eta}
        try:
            y, reports = run_labeling(cfg, data, eta, d)
            res = evaluate_labels(cfg, data, y, eta=eta)
            write_eval(d, res)
            n100, n90, n80 = reports[-1].coverage
            row.update(status="ok", foreground=int((y > 0).sum()), clusters=n100,
                       **{k: res.ap.mean(k) for k in ("AP", "AP_S", "AP_M", "AP_L")})
        except NoForegroundLabels as e:
            log.info("eta %g collapsed: %s", eta, e)
            (d / "labels.txt").write_text("")
            row.update(status=f"collapsed@{e.round_index}", foreground=0, clusters=0,
                       **{k: 0.0 for k in ("AP", "AP_S", "AP_M", "AP_L")})
        rows.append(row)
    lines = [f"{'eta':>7} {'status':>13} {'fg':>7} {'clusters':>8} {'AP':>7} {'AP_S':>7} {'AP_M':>7} {'AP_L':>7}"]
    for r in rows:
        cells = " ".join(f"{100 * r[k]:7.2f}" if not math.isnan(r[k]) else "      -" for k in ("AP", "AP_S", "AP_M", "AP_L"))
        lines.append(f"{r['eta']:7g} {r['status']:>13} {r['foreground']:7d} {r['clusters']:8d} {cells}")
    (root / "table.txt").write_text("\n".join(lines) + "\n")
    return rows


# ---------------------------------------------------------------- stats


def read_reports(path: Path) -> list[IterationReport]:
    return [IterationReport.from_json(json.loads(l)) for l in _need(path, "iterate").read_text().splitlines() if l.strip()]


def run_stats(cfg: PipelineConfig) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    reports = read_reports(cfg.out / "iterate" / "reports.jsonl")
    d = cfg.stage_dir("stats")
    init_path = cfg.out / "init" / "labels.txt"
    curves = []
    if init_path.exists():
        y0 = np.array([l.y for l in read_labels(init_path)])
        sizes0 = np.sort(np.unique(y0[y0 > 0], return_counts=True)[1])[::-1]
        curves.append(("init", sizes0, cluster_histogram_stats(y0), int((y0 > 0).sum())))
    for r in reports:
        curves.append((f"round {r.round}", np.sort(np.array(list(r.cluster_histogram.values())))[::-1],
                       r.coverage, r.n_foreground))
    lines = ["stage,non_empty,clusters_90,clusters_80,foreground"]
    lines += [f"{name},{c[0]},{c[1]},{c[2]},{fg}" for name, _, c, fg in curves]
    (d / "clusters.csv").write_text("\n".join(lines) + "\n")
    with open(d / "cluster_sizes.csv", "w") as fh:
        fh.write("stage,rank,size\n")
        for name, sizes, _, _ in curves:
            fh.writelines(f"{name},{i + 1},{int(s)}\n" for i, s in enumerate(sizes))

    fig, (a1, a2) = plt.subplots(1, 2, figsize=(10, 4))
    for name, sizes, _, _ in curves:
        if len(sizes):
            a1.plot(np.arange(1, len(sizes) + 1), sizes, label=name)
    a1.set_xscale("log")
    a1.set_yscale("log")
    a1.set_xlabel("cluster rank")
    a1.set_ylabel("segments")
    a1.legend(fontsize=7)
    xs = np.arange(len(curves))
    for j, lab in enumerate(("100%", "90%", "80%")):
        a2.plot(xs, [c[2][j] for c in curves], marker="o", label=f"clusters covering {lab}")
    a2.set_xticks(xs, [c[0].replace("round ", "r") for c in curves])
    a2.set_yscale("log")
    a2.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(d / "clusters.png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    return d / "clusters.csv"


# ---------------------------------------------------------------- overlay


def run_overlay(cfg: PipelineConfig) -> list[Path]:
    from PIL import Image, ImageDraw

    cfg.require_dataset()
    det_path = _need(cfg.out / "eval" / "detections.jsonl", "eval")
    dets: dict[str, list[dict]] = {}
    for line in det_path.read_text().splitlines():
        if line.strip():
            r = json.loads(line)
            dets.setdefault(r["frame"], []).append(r)
    entries = [e for e in read_manifest(cfg.dataset_dir / "manifest.txt") if e.split == "val"][: cfg.overlay_frames]
    gt = read_gt(cfg.dataset_dir / "gt.jsonl")
    d = cfg.stage_dir("overlay")
    palette = [(230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48), (145, 30, 180),
               (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 190)]
    out = []
    for e in entries:
        with Image.open(e.image) as im:
            img = im.convert("RGB")
        draw = ImageDraw.Draw(img)
        for g in gt:
            if g.frame_id == e.frame_id:
                draw.rectangle(g.bbox.as_tuple(), outline=(255, 255, 255))
        for r in sorted(dets.get(e.frame_id, []), key=lambda r: r["score"]):
            col = palette[(r["category"] - 1) % len(palette)]
            draw.rectangle((r["x1"], r["y1"], r["x2"], r["y2"]), outline=col, width=2)
            name = CATEGORY_NAMES.get(r["category"], str(r["category"]))
            draw.text((r["x1"] + 2, r["y1"] + 1), f"{name} {r['score']:.2f}", fill=col)
        p = d / f"{e.frame_id}.png"
        img.save(p)
        out.append(p)
    return out

"""Iterative segment labeling.

A per-class sigmoid MLP is trained from scratch each round on jittered copies of the
currently-foreground segments, then relabels every original segment: background
when no class clears ``eta``, otherwise the highest-scoring cluster.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, NamedTuple, Sequence

import numpy as np
from scipy.special import expit

from .evaluation import cluster_histogram_stats
from .features import FEATURE_DIM, MIN_PATCH_AREA, appearance_descriptors, clip_box_array, shape_descriptor
from .geometry import BBox2D, box_iou, iou_matrix

log = logging.getLogger(__name__)

IOU_TOL = 0.005
TARGET_RANGE = (0.1, 1.0)
POSITIVE_IOU = 0.5
MAX_JITTER_ATTEMPTS = 10_000
PROB_CLAMP = 1e-7


class NoForegroundLabels(RuntimeError):
    def __init__(self, msg: str, round_index: int | None = None):
        super().__init__(msg)
        self.round_index = round_index


@dataclass
class LabelerConfig:
    C: int = 10000
    eta: float = 0.95
    rounds: int = 10
    hidden: tuple[int, ...] = (256,)
    lr: float = 0.05
    steps: int = 2000
    batch_pos: int = 16
    batch_neg: int = 48
    momentum: float = 0.9
    weight_decay: float = 1e-4
    jitters_per_segment: int = 12
    prior: float = 0.01  # initial sigmoid output of every head unit
    ground_z: float = -1.5

    def __post_init__(self):
        if self.C < 1:
            raise ValueError("C must be >= 1")
        if not 0.0 < self.eta < 1.0:
            raise ValueError("eta must lie in (0, 1)")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.batch_pos < 1 or self.batch_neg != 3 * self.batch_pos:
            raise ValueError("batches hold positives and negatives at 1:3")
        if self.steps < 1 or self.lr <= 0:
            raise ValueError("steps and lr must be positive")
        if not 0.0 < self.prior < 1.0:
            raise ValueError("prior must lie in (0, 1)")


# ---------------------------------------------------------------- jittering


class JitteredBox(NamedTuple):
    bbox: BBox2D
    iou_target: float
    iou_achieved: float


@dataclass
class JitterSample:
    source_ref: tuple[str, int]
    jittered_bbox: BBox2D
    jittered_point_indices: np.ndarray
    iou_target: float
    iou_achieved: float
    z_hat: int
    y: int = 0


def _window_scale(target: float) -> float:
    # corner spread shrinks with the target so high-IoU draws stay attainable; 1.5 sides at most
    return float(np.clip(1.5 * (1.0 - target) + 0.01, 0.0, 1.5))


def _batch_iou(ref: np.ndarray, cands: np.ndarray) -> np.ndarray:
    return iou_matrix(ref[None, :], cands)[0]


def jitter_box(b: BBox2D, rng: np.random.Generator, target: float | None = None,
               max_attempts: int = MAX_JITTER_ATTEMPTS, chunk: int = 256,
               accept: Callable[[np.ndarray], bool] | None = None) -> JitteredBox:
    """Random corners around ``b`` whose IoU with ``b`` is within 0.005 of a target.

    The target is drawn from U(0.1, 1.0) unless given. A target of exactly 1.0 returns
    ``b``. After ``max_attempts`` misses a fresh target is drawn. ``accept`` can veto
    candidates (degenerate crops); vetoed draws count as misses.
    """
    ref = b.as_array()
    w, h = b.width, b.height
    while True:
        t = float(rng.uniform(*TARGET_RANGE)) if target is None else float(target)
        if t >= 1.0:
            if accept is None or accept(ref):
                return JitteredBox(b, 1.0, 1.0)
            target = None
            continue
        s = _window_scale(t)
        spread = np.array([w, h, w, h]) * s
        tried = 0
        while tried < max_attempts:
            n = min(chunk, max_attempts - tried)
            tried += n
            c = ref[None, :] + rng.uniform(-1.0, 1.0, size=(n, 4)) * spread
            lo = np.minimum(c[:, :2], c[:, 2:])
            hi = np.maximum(c[:, :2], c[:, 2:])
            c = np.concatenate([lo, hi], axis=1)
            ok = (c[:, 2] > c[:, 0]) & (c[:, 3] > c[:, 1])
            iou = np.where(ok, _batch_iou(ref, np.where(ok[:, None], c, ref)), -1.0)
            hits = np.flatnonzero(np.abs(iou - t) <= IOU_TOL)
            for k in hits:
                if accept is None or accept(c[k]):
                    box = BBox2D.from_array(c[k])
                    return JitteredBox(box, t, box_iou(b, box))
        target = None  # redraw


def points_in_box(uv: np.ndarray, in_front: np.ndarray, box: BBox2D | np.ndarray) -> np.ndarray:
    """Mask of points whose projection lies inside ``box`` (inclusive edges)."""
    x0, y0, x1, y1 = box.as_tuple() if isinstance(box, BBox2D) else tuple(np.asarray(box, dtype=np.float64))
    u, v = uv[:, 0], uv[:, 1]
    with np.errstate(invalid="ignore"):
        return in_front & (u >= x0) & (u <= x1) & (v >= y0) & (v <= y1)


def jitter_segment(point_indices: np.ndarray, uv: np.ndarray, in_front: np.ndarray, box: BBox2D | np.ndarray) -> np.ndarray:
    """Subset of ``point_indices`` whose projections fall inside the jittered box."""
    return np.asarray(point_indices)[points_in_box(uv, in_front, box)]


@dataclass
class SegmentRecord:
    """Inputs needed to jitter one segment."""

    frame_id: str
    segment_id: int
    bbox: BBox2D
    points: np.ndarray  # (n, 4) x, y, z, intensity of the segment
    uv: np.ndarray  # (n, 2) projections, NaN when behind the camera
    in_front: np.ndarray


def make_jitter_samples(seg: SegmentRecord, image: np.ndarray, n: int, rng: np.random.Generator,
                        y: int = 0) -> list[JitterSample]:
    """``n`` non-degenerate jitters of one segment."""
    H, W = image.shape[:2]
    idx = np.arange(len(seg.points))

    def accept(c: np.ndarray) -> bool:
        cl = clip_box_array(c, W, H)[0]
        if (cl[2] - cl[0]) * (cl[3] - cl[1]) < MIN_PATCH_AREA:
            return False
        return bool(points_in_box(seg.uv, seg.in_front, c).any())

    out = []
    for _ in range(n):
        jb = jitter_box(seg.bbox, rng, accept=accept)
        kept = jitter_segment(idx, seg.uv, seg.in_front, jb.bbox)
        out.append(JitterSample((seg.frame_id, seg.segment_id), jb.bbox, kept, jb.iou_target,
                                jb.iou_achieved, int(jb.iou_achieved > POSITIVE_IOU), y))
    return out


@dataclass
class JitterBank:
    """Jittered training samples with precomputed raw features; reused across rounds."""

    features: np.ndarray  # (M, D) raw
    source: np.ndarray  # (M,) row into the segment table
    z_hat: np.ndarray  # (M,)
    iou_target: np.ndarray
    iou_achieved: np.ndarray

    def __len__(self) -> int:
        return len(self.source)

    @classmethod
    def concat(cls, banks: Sequence["JitterBank"]) -> "JitterBank":
        if not banks:
            return cls(np.zeros((0, FEATURE_DIM)), np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), np.zeros(0))
        return cls(*(np.concatenate([getattr(b, f) for b in banks]) for f in
                     ("features", "source", "z_hat", "iou_target", "iou_achieved")))

    def save(self, path) -> None:
        np.savez(path, features=self.features, source=self.source, z_hat=self.z_hat,
                 iou_target=self.iou_target, iou_achieved=self.iou_achieved)

    @classmethod
    def load(cls, path) -> "JitterBank":
        with np.load(path) as z:
            return cls(z["features"], z["source"], z["z_hat"], z["iou_target"], z["iou_achieved"])


def frame_jitter_bank(segments: Sequence[SegmentRecord], rows: Sequence[int], image: np.ndarray, n_per_segment: int,
                      rng: np.random.Generator, ground_z: float = -1.5) -> JitterBank:
    """Jitter every segment of one frame; ``rows`` are their positions in the segment table."""
    feats, src, z, tgt, ach = [], [], [], [], []
    for seg, row in zip(segments, rows):
        samples = make_jitter_samples(seg, image, n_per_segment, rng)
        boxes = np.array([s.jittered_bbox.as_array() for s in samples])
        app, valid = appearance_descriptors(image, boxes)
        assert valid.all()
        for s, a in zip(samples, app):
            feats.append(np.concatenate([shape_descriptor(seg.points[s.jittered_point_indices], ground_z), a]))
            src.append(row)
            z.append(s.z_hat)
            tgt.append(s.iou_target)
            ach.append(s.iou_achieved)
    if not feats:
        return JitterBank.concat([])
    return JitterBank(np.array(feats), np.array(src, dtype=np.int64), np.array(z, dtype=np.int64),
                      np.array(tgt), np.array(ach))


# ---------------------------------------------------------------- loss


def eql_loss(s_hat: np.ndarray, z_hat: np.ndarray, y: np.ndarray, reduction: str = "mean") -> tuple[float, np.ndarray]:
    """Simplified equalization loss over a batch and its gradient wrt the logits.

    ``y`` holds 1-based cluster ids (the source label, also for negatives). A positive
    only touches its own logit; a negative pushes every logit down.
    """
    s_hat = np.atleast_2d(np.asarray(s_hat, dtype=np.float64))
    z = np.asarray(z_hat, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    B, C = s_hat.shape
    if np.any((y < 1) | (y > C)):
        raise ValueError("y must lie in 1..C")
    s = np.clip(s_hat, PROB_CLAMP, 1.0 - PROB_CLAMP)
    rows = np.arange(B)
    pos = -np.log(s[rows, y - 1])
    neg = -np.log1p(-s).sum(axis=1)
    per = z * pos + (1.0 - z) * neg
    grad = (1.0 - z)[:, None] * s_hat
    grad[rows, y - 1] += z * (s_hat[rows, y - 1] - 1.0)
    if reduction == "mean":
        return float(per.mean()), grad / B
    if reduction == "sum":
        return float(per.sum()), grad
    raise ValueError(f"unknown reduction {reduction!r}")


# ---------------------------------------------------------------- model


@dataclass
class LabelerModel:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("need one weight matrix and bias per layer transition")
        for k, W in enumerate(self.weights):
            if W.shape != (self.layer_dims[k], self.layer_dims[k + 1]):
                raise ValueError(f"layer {k} has shape {W.shape}")

    @property
    def C(self) -> int:
        return self.layer_dims[-1]

    @classmethod
    def init(cls, input_dim: int, C: int, hidden: Sequence[int], rng: np.random.Generator, prior: float = 0.01,
             first_layer: tuple[np.ndarray, np.ndarray] | None = None) -> "LabelerModel":
        """He-initialised hidden layers; head biased so every score starts at ``prior``.

        ``first_layer`` (weights, bias) replaces the first hidden layer and fixes its width.
        """
        hidden = list(hidden)
        if first_layer is not None:
            W0, b0 = first_layer
            if W0.shape[0] != input_dim:
                raise ValueError(f"warm-start layer expects input {W0.shape[0]}, features have {input_dim}")
            hidden = [W0.shape[1]] + hidden[1:]
        dims = [input_dim] + hidden + [C]
        Ws, bs = [], []
        for k, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            if k == len(dims) - 2:
                Ws.append(rng.normal(0.0, 0.01, size=(a, b)))
                bs.append(np.full(b, -np.log((1.0 - prior) / prior)))
            else:
                Ws.append(rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)))
                bs.append(np.zeros(b))
        if first_layer is not None:
            Ws[0], bs[0] = first_layer[0].copy(), first_layer[1].copy()
        return cls(dims, Ws, bs)

    @property
    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def _forward(self, x: np.ndarray):
        acts, pre = [x], []
        h = x
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ W + b
            pre.append(a)
            h = np.maximum(a, 0.0) if k < last else a
            acts.append(h)
        return h, (acts, pre)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self._forward(np.atleast_2d(np.asarray(x, dtype=np.float64)))[0]

    def scores(self, x: np.ndarray, chunk: int = 4096) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return np.concatenate([expit(self.logits(x[a : a + chunk])) for a in range(0, max(len(x), 1), chunk)]) \
            if len(x) else np.zeros((0, self.C))

    def _backward(self, d_logits: np.ndarray, cache) -> list[np.ndarray]:
        acts, pre = cache
        dh = d_logits
        grads = []
        for k in range(len(self.weights) - 1, -1, -1):
            if k < len(self.weights) - 1:
                dh = dh * (pre[k] > 0)
            grads.append(dh.sum(axis=0))
            grads.append(acts[k].T @ dh)
            dh = dh @ self.weights[k].T
        grads.reverse()
        return grads

    def loss_and_grad(self, x: np.ndarray, z_hat: np.ndarray, y: np.ndarray) -> tuple[float, list[np.ndarray]]:
        logits, cache = self._forward(x)
        loss, d_logits = eql_loss(expit(logits), z_hat, y)
        return loss, self._backward(d_logits, cache)

    def save(self, path) -> None:
        arrays = {f"W{k}": W for k, W in enumerate(self.weights)}
        arrays.update({f"b{k}": b for k, b in enumerate(self.biases)})
        np.savez(path, layer_dims=np.array(self.layer_dims), **arrays)

    @classmethod
    def load(cls, path) -> "LabelerModel":
        with np.load(path) as z:
            dims = [int(d) for d in z["layer_dims"]]
            n = len(dims) - 1
            return cls(dims, [z[f"W{k}"] for k in range(n)], [z[f"b{k}"] for k in range(n)])


# ---------------------------------------------------------------- training


def lr_at(step: int, steps: int, base_lr: float) -> float:
    """Step schedule: 10x drops at 50% and 75% of training."""
    if step >= int(0.75 * steps):
        return base_lr * 0.01
    if step >= int(0.5 * steps):
        return base_lr * 0.1
    return base_lr


def training_pools(bank: JitterBank, seg_labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Positive and negative bank rows whose source segment is currently foreground."""
    fg = np.asarray(seg_labels)[bank.source] > 0
    return np.flatnonzero(fg & (bank.z_hat == 1)), np.flatnonzero(fg & (bank.z_hat == 0))


def sample_batches(pos: np.ndarray, neg: np.ndarray, cfg: LabelerConfig, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless batches of ``batch_pos`` positive then ``batch_neg`` negative bank rows."""
    while True:
        p = rng.choice(pos, cfg.batch_pos, replace=len(pos) < cfg.batch_pos)
        n = rng.choice(neg, cfg.batch_neg, replace=len(neg) < cfg.batch_neg)
        yield np.concatenate([p, n])


def train_labeler(bank_x: np.ndarray, bank: JitterBank, seg_labels: np.ndarray, cfg: LabelerConfig,
                  rng: np.random.Generator, first_layer=None) -> tuple[LabelerModel, list[float]]:
    """Fresh model fit on jitters of foreground segments; ``bank_x`` is the model-ready bank."""
    seg_labels = np.asarray(seg_labels, dtype=np.int64)
    if not np.any(seg_labels > 0):
        raise NoForegroundLabels("every segment is labeled background")
    if seg_labels.max() > cfg.C:
        raise ValueError(f"label {seg_labels.max()} exceeds C={cfg.C}")
    pos, neg = training_pools(bank, seg_labels)
    if len(pos) == 0 or len(neg) == 0:
        raise NoForegroundLabels(f"foreground segments yield {len(pos)} positive and {len(neg)} negative jitters")
    model = LabelerModel.init(bank_x.shape[1], cfg.C, cfg.hidden, rng, cfg.prior, first_layer)
    velocity = [np.zeros_like(p) for p in model.params]
    trace = []
    batches = sample_batches(pos, neg, cfg, rng)
    for step in range(cfg.steps):
        idx = next(batches)
        y = seg_labels[bank.source[idx]]
        loss, grads = model.loss_and_grad(bank_x[idx], bank.z_hat[idx], y)
        trace.append(loss)
        lr = lr_at(step, cfg.steps, cfg.lr)
        for p, g, v in zip(model.params, grads, velocity):
            v *= cfg.momentum
            v += g + cfg.weight_decay * p
            p -= lr * v
    return model, trace


def labels_from_scores(scores: np.ndarray, eta: float) -> np.ndarray:
    """Background when the top score is below ``eta``, else the 1-based argmax (lowest id on ties)."""
    scores = np.atleast_2d(scores)
    if len(scores) == 0:
        return np.zeros(0, dtype=np.int64)
    top = np.argmax(scores, axis=1)
    best = scores[np.arange(len(scores)), top]
    return np.where(best < eta, 0, top + 1).astype(np.int64)


def assign_labels(model: LabelerModel, feats: np.ndarray, eta: float) -> np.ndarray:
    if not 0.0 < eta < 1.0:
        raise ValueError("eta must lie in (0, 1)")
    return labels_from_scores(model.scores(feats), eta)


# ---------------------------------------------------------------- rounds


@dataclass
class IterationReport:
    round: int
    cluster_histogram: dict[int, int]
    n_foreground: int
    n_background: int
    loss_trace: list[float] = field(default_factory=list)

    @property
    def coverage(self) -> tuple[int, int, int]:
        return cluster_histogram_stats(self.cluster_histogram)

    def to_json(self) -> dict:
        n100, n90, n80 = self.coverage
        return {
            "round": self.round,
            "n_foreground": self.n_foreground,
            "n_background": self.n_background,
            "clusters_100": n100,
            "clusters_90": n90,
            "clusters_80": n80,
            "cluster_histogram": {str(k): v for k, v in sorted(self.cluster_histogram.items())},
            "loss_trace": self.loss_trace,
        }

    @classmethod
    def from_json(cls, d: dict) -> "IterationReport":
        return cls(int(d["round"]), {int(k): int(v) for k, v in d["cluster_histogram"].items()},
                   int(d["n_foreground"]), int(d["n_background"]), [float(v) for v in d["loss_trace"]])


def histogram(labels: np.ndarray) -> dict[int, int]:
    ids, counts = np.unique(labels[labels > 0], return_counts=True)
    return {int(i): int(c) for i, c in zip(ids, counts)}


def round_rng(seed: int, round_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 7, round_index]))


def iterate(seg_x: np.ndarray, bank_x: np.ndarray, bank: JitterBank, init: np.ndarray, cfg: LabelerConfig,
            seed: int = 0, first_layer=None, on_round: Callable[[IterationReport, np.ndarray], None] | None = None,
            ) -> tuple[np.ndarray, list[IterationReport], LabelerModel]:
    """Alternate training and relabeling for ``cfg.rounds`` rounds.

    ``seg_x`` are the model-ready features of the original segments, ``bank_x`` those of
    the jitter bank. Returns the final labels, one report per round and the last model.
    """
    labels = np.asarray(init, dtype=np.int64).copy()
    reports = []
    model = None
    for r in range(1, cfg.rounds + 1):
        try:
            model, trace = train_labeler(bank_x, bank, labels, cfg, round_rng(seed, r), first_layer)
        except NoForegroundLabels as e:
            raise NoForegroundLabels(f"round {r}: {e}", r) from e
        labels = assign_labels(model, seg_x, cfg.eta)
        hist = histogram(labels)
        rep = IterationReport(r, hist, int(np.sum(labels > 0)), int(np.sum(labels == 0)), trace)
        reports.append(rep)
        n100, n90, n80 = rep.coverage
        log.info("round %d: %d fg, %d bg, clusters %d/%d/%d", r, rep.n_foreground, rep.n_background, n100, n90, n80)
        if on_round is not None:
            on_round(rep, labels)
    return labels, reports, model

"""Small MLP encoder trained with a symmetric in-batch InfoNCE objective.

Two augmented views of every segment form a positive pair; all other segments in
the batch are negatives. Embeddings are L2-normalised before the similarity
logits are divided by the temperature.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class ContrastiveEncoder:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    temperature: float = 0.2
    loss_trace: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if len(self.weights) != len(self.layer_dims) - 1:
            raise ValueError("need one weight matrix per layer transition")
        for k, W in enumerate(self.weights):
            if W.shape != (self.layer_dims[k], self.layer_dims[k + 1]):
                raise ValueError(f"layer {k} has shape {W.shape}, expected {(self.layer_dims[k], self.layer_dims[k + 1])}")

    @classmethod
    def init(cls, layer_dims=(237, 128, 64), rng: np.random.Generator | None = None, temperature: float = 0.2):
        rng = rng or np.random.default_rng(0)
        dims = list(layer_dims)
        Ws = [rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)) for a, b in zip(dims[:-1], dims[1:])]
        bs = [np.zeros(b) for b in dims[1:]]
        return cls(dims, Ws, bs, temperature)

    # parameters are exposed as a flat list so the optimiser and gradient checks stay generic
    @property
    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def _forward(self, x: np.ndarray):
        acts = [x]
        pre = []
        h = x
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            pre.append(z)
            h = np.maximum(z, 0.0) if k < len(self.weights) - 1 else z
            acts.append(h)
        norm = np.linalg.norm(h, axis=1, keepdims=True)
        norm = np.maximum(norm, 1e-12)
        return h / norm, (acts, pre, norm)

    def encode(self, x: np.ndarray) -> np.ndarray:
        return self._forward(np.atleast_2d(np.asarray(x, dtype=np.float64)))[0]

    def _backward(self, d_out: np.ndarray, cache) -> list[np.ndarray]:
        acts, pre, norm = cache
        u = acts[-1] / norm
        # gradient through L2 normalisation
        dh = (d_out - u * np.sum(d_out * u, axis=1, keepdims=True)) / norm
        grads: list[np.ndarray] = []
        for k in range(len(self.weights) - 1, -1, -1):
            if k < len(self.weights) - 1:
                dh = dh * (pre[k] > 0)
            grads.append(dh.sum(axis=0))
            grads.append(acts[k].T @ dh)
            dh = dh @ self.weights[k].T
        grads.reverse()  # -> W0, b0, W1, b1, ...
        return grads

    def loss_and_grad(self, x1: np.ndarray, x2: np.ndarray) -> tuple[float, list[np.ndarray]]:
        """Symmetric InfoNCE over a batch of positive pairs ``(x1[i], x2[i])``."""
        e1, c1 = self._forward(x1)
        e2, c2 = self._forward(x2)
        loss, g1, g2 = info_nce(e1, e2, self.temperature)
        grads1 = self._backward(g1, c1)
        grads2 = self._backward(g2, c2)
        return loss, [a + b for a, b in zip(grads1, grads2)]

    def save(self, path: str | Path) -> None:
        arrays = {f"W{k}": W for k, W in enumerate(self.weights)}
        arrays.update({f"b{k}": b for k, b in enumerate(self.biases)})
        np.savez(path, layer_dims=np.array(self.layer_dims), temperature=self.temperature,
                 loss_trace=np.array(self.loss_trace), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "ContrastiveEncoder":
        with np.load(path) as z:
            dims = [int(d) for d in z["layer_dims"]]
            n = len(dims) - 1
            return cls(dims, [z[f"W{k}"] for k in range(n)], [z[f"b{k}"] for k in range(n)],
                       float(z["temperature"]), [float(v) for v in z["loss_trace"]])


def _log_softmax(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    return a - m - np.log(np.exp(a - m).sum(axis=axis, keepdims=True))


def info_nce(e1: np.ndarray, e2: np.ndarray, temperature: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss and gradients wrt both embedding batches (rows are matching pairs)."""
    B = len(e1)
    logits = e1 @ e2.T / temperature
    ls_rows = _log_softmax(logits, axis=1)
    ls_cols = _log_softmax(logits, axis=0)
    diag = np.arange(B)
    loss = -0.5 * (ls_rows[diag, diag].mean() + ls_cols[diag, diag].mean())
    eye = np.eye(B)
    d_logits = 0.5 * ((np.exp(ls_rows) - eye) + (np.exp(ls_cols) - eye)) / B
    g1 = d_logits @ e2 / temperature
    g2 = d_logits.T @ e1 / temperature
    return float(loss), g1, g2


ViewFn = Callable[[np.ndarray, np.random.Generator], np.ndarray]


def contrastive_pretrain(
    n_segments: int,
    make_views: ViewFn,
    epochs: int,
    rng: np.random.Generator,
    layer_dims=(237, 128, 64),
    batch_size: int = 256,
    lr: float = 0.05,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
    temperature: float = 0.2,
) -> ContrastiveEncoder:
    """Train an encoder; ``make_views(indices, rng)`` returns standardised feature rows.

    ``make_views`` is called twice per batch with the same indices to obtain the two
    augmented views. The per-epoch mean loss is kept in ``encoder.loss_trace``.
    """
    if n_segments < 2 * batch_size:
        raise ValueError(f"need at least {2 * batch_size} segments for batch size {batch_size}")
    enc = ContrastiveEncoder.init(layer_dims, rng, temperature)
    velocity = [np.zeros_like(p) for p in enc.params]
    for epoch in range(epochs):
        order = rng.permutation(n_segments)
        losses = []
        for start in range(0, n_segments - batch_size + 1, batch_size):
            idx = order[start : start + batch_size]
            x1 = make_views(idx, rng)
            x2 = make_views(idx, rng)
            loss, grads = enc.loss_and_grad(x1, x2)
            losses.append(loss)
            for p, g, v in zip(enc.params, grads, velocity):
                v *= momentum
                v += g + weight_decay * p
                p -= lr * v
        enc.loss_trace.append(float(np.mean(losses)))
        log.info("pretrain epoch %d loss %.4f", epoch, enc.loss_trace[-1])
    return enc

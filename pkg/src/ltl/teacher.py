"""Dense ReLU teacher network and the layer-wise targets distilled from it."""

from __future__ import annotations

import logging
import math
import queue
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import DivergenceError, NumericDomainError, StructureError

log = logging.getLogger(__name__)

NORM_EPS = 1e-6


@dataclass
class TeacherModel:
    layers: list  # [(weights (out, in), bias (out,)), ...]

    @property
    def arch(self) -> list:
        return [self.layers[0][0].shape[1]] + [w.shape[0] for w, _ in self.layers]

    def copy(self) -> "TeacherModel":
        return TeacherModel([(w.copy(), b.copy()) for w, b in self.layers])


@dataclass
class LayerTargets:
    """Per-layer targets for one batch.

    ``rates[l]`` is ``activation / y_norm``, clipped to [0, 1] for hidden
    layers and left raw for the output layer. ``counts[l]`` is the round-down
    spike count ``floor(rate * T_w)`` (``None`` for the output layer).
    """

    rates: list
    counts: list
    norms: list
    T_w: int

    def hidden_target(self, layer: int, round_down: bool = True) -> np.ndarray:
        if round_down:
            return (self.counts[layer] / self.T_w).astype(self.rates[layer].dtype)
        return self.rates[layer]


def init_teacher(arch: Sequence[int], seed: int = 0, dtype=np.float32) -> TeacherModel:
    rng = np.random.default_rng(seed)
    layers = []
    for n_in, n_out in zip(arch[:-1], arch[1:]):
        w = rng.normal(0.0, math.sqrt(2.0 / n_in), size=(n_out, n_in)).astype(dtype)
        layers.append((w, np.zeros(n_out, dtype=dtype)))
    return TeacherModel(layers)


def _forward(model: TeacherModel, x: np.ndarray):
    pre, acts = [], []
    h = x
    for i, (w, b) in enumerate(model.layers):
        z = h @ w.T + b
        pre.append(z)
        h = z if i == len(model.layers) - 1 else np.maximum(z, 0)
        acts.append(h)
    return pre, acts


def _cross_entropy(logits: np.ndarray, labels: np.ndarray):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(len(labels)), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(len(labels)), labels] -= 1.0
    return float(loss), grad / len(labels)


def teacher_loss(model: TeacherModel, x: np.ndarray, y: np.ndarray) -> float:
    _, acts = _forward(model, x)
    return _cross_entropy(acts[-1], y)[0]


def train_teacher(
    dataset,
    arch: Sequence[int],
    epochs: int = 20,
    lr: float = 0.05,
    momentum: float = 0.9,
    weight_decay: float = 5e-4,
    seed: int = 0,
    batch_size: int = 64,
    milestones: Sequence[int] = (15,),
    gamma: float = 0.1,
    on_epoch: Optional[Callable[[int, float, "TeacherModel"], None]] = None,
) -> TeacherModel:
    """Mini-batch SGD with momentum and weight decay on softmax cross-entropy.

    The learning rate is multiplied by ``gamma`` at each epoch in
    ``milestones``. Deterministic for a given ``seed``. ``on_epoch(epoch,
    mean_loss, model)`` is called after every epoch (1-based).
    """
    x, y = dataset.images, dataset.labels
    if len(x) == 0:
        raise ValueError("cannot train on an empty dataset")
    if arch[0] != x.shape[1]:
        raise StructureError(f"arch input width {arch[0]} != data width {x.shape[1]}")
    if arch[-1] <= int(y.max()):
        raise StructureError(f"arch has {arch[-1]} outputs but labels reach {int(y.max())}")
    rng = np.random.default_rng(seed)
    model = init_teacher(arch, seed=seed, dtype=x.dtype if x.dtype == np.float64 else np.float32)
    velocity = [(np.zeros_like(w), np.zeros_like(b)) for w, b in model.layers]
    rate = lr
    for epoch in range(epochs):
        if epoch in milestones:
            rate *= gamma
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), batch_size):
            idx = order[start:start + batch_size]
            xb = x[idx].astype(model.layers[0][0].dtype, copy=False)
            pre, acts = _forward(model, xb)
            loss, d = _cross_entropy(acts[-1], y[idx])
            if not math.isfinite(loss):
                raise DivergenceError(f"teacher loss became {loss} at epoch {epoch}")
            total += loss * len(idx)
            for i in reversed(range(len(model.layers))):
                w, b = model.layers[i]
                h_in = xb if i == 0 else acts[i - 1]
                gw = d.T @ h_in + weight_decay * w
                gb = d.sum(axis=0) + weight_decay * b
                if i:
                    d = (d @ w) * (pre[i - 1] > 0)
                vw, vb = velocity[i]
                vw *= momentum
                vw += gw
                vb *= momentum
                vb += gb
                w -= rate * vw
                b -= rate * vb
        log.info("teacher epoch %d loss %.4f", epoch + 1, total / len(x))
        if on_epoch is not None:
            on_epoch(epoch + 1, total / len(x), model)
    return model


def extract_activations(model: TeacherModel, batch: np.ndarray) -> list:
    """Post-ReLU activations of every hidden layer followed by the raw logits."""
    x = np.asarray(batch)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != model.arch[0]:
        raise StructureError(f"batch width {x.shape[1]} != teacher input width {model.arch[0]}")
    _, acts = _forward(model, x.astype(model.layers[0][0].dtype, copy=False))
    return [a[0] for a in acts] if single else acts


def compute_norm(activations: np.ndarray, percentile: float = 99.9) -> float:
    """Nearest-rank percentile of the flattened activations.

    Falls back to ``max(max(activations), 1e-6)`` when the percentile is not
    positive.
    """
    a = np.asarray(activations, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError("activation set is empty")
    a = a[~np.isnan(a)]
    if a.size == 0:
        raise NumericDomainError("activations are all NaN")
    if not 0 < percentile <= 100:
        raise ValueError(f"percentile must be in (0, 100], got {percentile}")
    ordered = np.sort(a)
    # small slack keeps e.g. 99.9 * 1000 / 100 from rounding up a rank
    rank = max(1, math.ceil(percentile * a.size / 100.0 - 1e-9))
    value = float(ordered[rank - 1])
    if value <= 0:
        value = max(float(ordered[-1]), NORM_EPS)
    return value


def layer_norms(model: TeacherModel, calib_batch: np.ndarray, percentile: float = 99.9) -> list:
    return [compute_norm(a, percentile) for a in extract_activations(model, calib_batch)]


def make_targets(
    model: TeacherModel,
    batch: np.ndarray,
    T_w: int,
    percentile: float = 99.9,
    norms: Optional[Sequence[float]] = None,
) -> LayerTargets:
    """Normalised teacher activations for every layer of ``batch``.

    ``norms`` should come from a fixed calibration batch (see ``layer_norms``);
    when omitted they are computed from ``batch`` itself.
    """
    acts = extract_activations(model, batch)
    if norms is None:
        norms = [compute_norm(a, percentile) for a in acts]
    rates, counts = [], []
    for i, (a, norm) in enumerate(zip(acts, norms)):
        r = a / np.asarray(norm, dtype=a.dtype)
        if i < len(acts) - 1:
            r = np.clip(r, 0.0, 1.0)
            counts.append(np.floor(r * T_w).astype(np.int64))
        else:
            counts.append(None)
        rates.append(r)
    return LayerTargets(rates, counts, list(norms), T_w)


def batch_order(n: int, batch_size: int, rng: np.random.Generator) -> list:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def target_stream(
    model: TeacherModel,
    images: np.ndarray,
    labels: np.ndarray,
    batches: Sequence[np.ndarray],
    T_w: int,
    norms: Sequence[float],
    prefetch: int = 2,
) -> Iterator[tuple]:
    """Yield ``(x, y, LayerTargets)`` per batch, extracting ahead in a thread.

    Teacher inference for batch ``i + 1`` overlaps distillation on batch
    ``i``; at most ``prefetch`` extracted batches wait in the queue.
    """
    q: queue.Queue = queue.Queue(maxsize=max(1, prefetch))
    stop = threading.Event()
    done = object()

    def put(item) -> bool:
        while not stop.is_set():
            try:
                q.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def produce():
        try:
            for idx in batches:
                xb = images[idx]
                if not put((xb, labels[idx], make_targets(model, xb, T_w, norms=norms))):
                    return
            put(done)
        except BaseException as exc:  # surfaced in the consumer
            put(exc)

    worker = threading.Thread(target=produce, daemon=True)
    worker.start()
    try:
        while True:
            item = q.get()
            if item is done:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        worker.join(timeout=5)

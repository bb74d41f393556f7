"""Layer-wise distillation of a teacher ANN into a spiking student.

Both rules share one loop: a forward pass of the student on a batch, a local
gradient for every layer that is learning, and one Adam step per batch.
``strategy="parallel"`` updates all layers from the same forward pass;
``"sequential"`` trains one layer at a time and freezes it before moving on.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np

from .errors import DivergenceError, StructureError
from .metrics import convergence_report, evaluate_snn
from .offline import (
    GradBuffer,
    layer_offline_grads,
    offline_loss,
    output_grads_from_sums,
    output_layer_grads,
    output_loss,
)
from .online import OnlineState
from .snn import LayerSpec, SpikingModel, run_network
from .teacher import TeacherModel, batch_order, layer_norms, target_stream

log = logging.getLogger(__name__)

MODES = ("offline", "online")
STRATEGIES = ("parallel", "sequential")


@dataclass(frozen=True)
class DistillConfig:
    T_w: int = 16
    T_warm: Optional[int] = None  # online only; None means T_w // 4
    epochs: int = 5
    batch_size: int = 8
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    decay_every: int = 10
    decay_factor: float = 0.2
    strategy: str = "parallel"
    percentile: float = 99.9
    calib_size: int = 1024
    round_down: bool = True
    seed: int = 0
    prefetch: int = 2
    per_step_sgd: bool = False
    sgd_lr: float = 0.05
    gated: bool = True
    timing: bool = False
    run_id: str = "run"
    eval_batch_size: int = 500

    def __post_init__(self):
        if self.T_w < 1:
            raise ValueError(f"T_w must be >= 1, got {self.T_w}")
        if self.T_warm is not None and not 0 <= self.T_warm < self.T_w:
            raise ValueError(f"T_warm must satisfy 0 <= T_warm < T_w, got {self.T_warm}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0 or self.sgd_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.decay_every < 1:
            raise ValueError(f"decay_every must be >= 1, got {self.decay_every}")

    @property
    def warmup(self) -> int:
        return self.T_w // 4 if self.T_warm is None else self.T_warm


class Device(Protocol):
    """Where the student lives; ``noise.NoisyDevice`` is the noisy implementation."""

    current_noise: object
    spike_masks: object

    def apply_update(self, index: int, layer: LayerSpec, dW: np.ndarray, db: np.ndarray): ...


class IdealDevice:
    current_noise = None
    spike_masks = None

    def apply_update(self, index: int, layer: LayerSpec, dW: np.ndarray, db: np.ndarray):
        layer.weights += dW
        layer.bias += db


class Adam:
    """Adam over a list of layers, one moment pair per tensor.

    Step counters are per layer, so layers that start learning late (the
    sequential strategy) get their own bias correction.
    """

    def __init__(self, layers: Sequence[LayerSpec], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in layers]
        self.v = [(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in layers]
        self.steps = [0] * len(layers)

    def deltas(self, index: int, grads: GradBuffer) -> tuple:
        """Parameter changes for one layer (to be added to the parameters)."""
        self.steps[index] += 1
        k = self.steps[index]
        c1 = 1.0 - self.b1 ** k
        c2 = 1.0 - self.b2 ** k
        out = []
        for m, v, g in zip(self.m[index], self.v[index], (grads.dW, grads.db)):
            m *= self.b1
            m += (1.0 - self.b1) * g
            sq = np.square(g)
            sq *= 1.0 - self.b2
            v *= self.b2
            v += sq
            denom = np.sqrt(v, out=sq)
            denom *= 1.0 / np.sqrt(c2)
            denom += self.eps
            step = m * (-self.lr / c1)
            step /= denom
            out.append(step.astype(g.dtype, copy=False))
        return tuple(out)


@dataclass
class DistillResult:
    model: SpikingModel
    history: list  # metric rows, see data_io.METRIC_COLUMNS
    accuracies: list  # test accuracy per epoch of the final (or only) stage
    norms: list
    stage_epochs: dict = field(default_factory=dict)  # layer -> convergence epoch (sequential)

    @property
    def convergence_epoch(self) -> Optional[int]:
        return convergence_report(self.accuracies) if self.accuracies else None


def _check_pair(teacher: TeacherModel, student: SpikingModel):
    if list(teacher.arch) != list(student.arch):
        raise StructureError(f"teacher widths {teacher.arch} do not match student widths {student.arch}")


def _finite(value: float, what: str):
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite {what}; lower the learning rate")


class _Trainer:
    def __init__(self, teacher, model: SpikingModel, train, cfg: DistillConfig, mode: str,
                 device: Device, norms: list):
        self.teacher = teacher
        self.model = model
        self.train = train
        self.cfg = cfg
        self.mode = mode
        self.device = device
        self.norms = norms
        self.opt = Adam(model.layers, cfg.lr, cfg.betas, cfg.eps)
        self.rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[1])
        self.scratch: dict = {}  # reused by every batch's online learner

    def _sgd_step(self, layer: int, buf: GradBuffer):
        lr = self.cfg.sgd_lr
        self.device.apply_update(layer, self.model.layers[layer], -lr * buf.dW, -lr * buf.db)
        buf.dW[...] = 0
        buf.db[...] = 0

    def _batch(self, x, tg, active: Sequence[int]) -> dict:
        """One forward pass and update; returns the loss of every active layer."""
        cfg, layers, params = self.cfg, self.model.layers, self.model.params
        n = len(layers)
        depth = max(active) + 1
        hidden = [l for l in active if l < n - 1]
        targets = [tg.hidden_target(l, cfg.round_down) for l in range(n - 1)]
        kw = dict(current_noise=self.device.current_noise, spike_masks=self.device.spike_masks,
                  depth=depth)
        grads = {}
        if self.mode == "offline":
            res = run_network(layers, params, x, cfg.T_w, record=active, **kw)
            losses = {}
            for l in hidden:
                grads[l], losses[l] = layer_offline_grads(res.traces[l], targets[l], res.counts[l], params, l)
            if n - 1 in active:
                grads[n - 1] = output_layer_grads(res.traces[n - 1], tg.rates[-1], n - 1)
        else:
            learner = OnlineState.for_network(layers, targets, cfg.warmup, params, cfg.gated)
            learner.active = frozenset(hidden)
            learner.scratch = self.scratch
            if cfg.per_step_sgd:
                learner.on_grad = self._sgd_step
            res = run_network(layers, params, x, cfg.T_w, on_step=learner, **kw)
            losses = {l: offline_loss(targets[l], res.counts[l], cfg.T_w) for l in hidden}
            if not cfg.per_step_sgd:
                grads.update({l: learner.grads[l] for l in hidden})
            if n - 1 in active:
                grads[n - 1] = output_grads_from_sums(res.output, res.output_presyn_count, tg.rates[-1],
                                                      cfg.T_w, n - 1, "online")
        if n - 1 in active:
            losses[n - 1] = output_loss(res.output, tg.rates[-1])
        for l, loss in losses.items():
            _finite(loss, f"loss in layer {l + 1}")
        for l, g in grads.items():
            g.check(layers[l])
            # the integrator head keeps batched Adam even in per-step SGD mode
            dW, db = self.opt.deltas(l, g)
            self.device.apply_update(l, layers[l], dW, db)
        return losses

    def epoch(self, active: Sequence[int]) -> dict:
        cfg = self.cfg
        batches = batch_order(len(self.train), cfg.batch_size, self.rng)
        sums: dict = {}
        stream = target_stream(self.teacher, self.train.images, self.train.labels, batches,
                               cfg.T_w, self.norms, cfg.prefetch)
        for x, _, tg in stream:
            for l, loss in self._batch(x, tg, active).items():
                sums[l] = sums.get(l, 0.0) + loss
        return {l: s / len(batches) for l, s in sums.items()}


def distill(teacher: TeacherModel, student, train, config: Optional[DistillConfig] = None,
            mode: str = "offline", test=None, device: Optional[Device] = None) -> DistillResult:
    """Train ``student`` to reproduce the teacher layer by layer.

    ``student`` is a ``SpikingModel`` and is not modified; the trained copy is
    returned together with per-epoch metric rows. ``test`` (a dataset) enables
    per-epoch accuracy and SynOps reporting. ``device`` supplies noise hooks
    and the update rule (defaults to an ideal, noise-free device).
    """
    cfg = config or DistillConfig()
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    _check_pair(teacher, student)
    if len(train) == 0:
        raise ValueError("cannot distill on an empty dataset")
    device = device or IdealDevice()
    model = student.copy()
    calib_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[0])
    calib_idx = calib_rng.choice(len(train), size=min(cfg.calib_size, len(train)), replace=False)
    norms = layer_norms(teacher, train.images[np.sort(calib_idx)], cfg.percentile)
    trainer = _Trainer(teacher, model, train, cfg, mode, device, norms)
    n = len(model.layers)
    if cfg.strategy == "parallel":
        stages = [list(range(n))]
    else:
        stages = [[l] for l in range(n)]

    history, accuracies, stage_epochs = [], [], {}
    for stage in stages:
        trainer.opt.lr = cfg.lr
        last_stage = n - 1 in stage
        losses_by_epoch = []
        for epoch in range(1, cfg.epochs + 1):
            start = time.perf_counter()
            losses = trainer.epoch(stage)
            if epoch % cfg.decay_every == 0:
                trainer.opt.lr *= cfg.decay_factor
            acc = ratio = None
            if test is not None and last_stage:
                ev = evaluate_snn(model, test.images, test.labels, cfg.T_w, cfg.eval_batch_size, device)
                acc, ratio = ev.accuracy, ev.synops.ratio
                accuracies.append(acc)
            wall = time.perf_counter() - start if cfg.timing else None
            for l in sorted(losses):
                history.append({"run_id": cfg.run_id, "epoch": epoch, "layer": l + 1, "loss": losses[l],
                                "accuracy": None, "synops_ratio": None, "wall_seconds": None})
            history.append({"run_id": cfg.run_id, "epoch": epoch, "layer": "all" if len(stage) > 1 else
                            f"stage{stage[0] + 1}", "loss": float(sum(losses.values())),
                            "accuracy": acc, "synops_ratio": ratio, "wall_seconds": wall})
            losses_by_epoch.append(sum(losses.values()))
            log.info("%s epoch %d layers %s loss %.5f acc %s", mode, epoch, [l + 1 for l in stage],
                     losses_by_epoch[-1], acc)
        if len(stage) == 1 and losses_by_epoch:
            # loss falls, so convergence is tracked on its negation
            stage_epochs[stage[0] + 1] = convergence_report(
                [-v for v in losses_by_epoch], tolerance=0.01 * abs(losses_by_epoch[-1]) + 1e-12)
    return DistillResult(model, history, accuracies, norms, stage_epochs)


def distill_offline(teacher, student, train, config: Optional[DistillConfig] = None, test=None,
                    device: Optional[Device] = None) -> DistillResult:
    """Offline rule: per-layer BPTT on the global firing rate."""
    return distill(teacher, student, train, config, "offline", test, device)


def distill_online(teacher, student, train, config: Optional[DistillConfig] = None, test=None,
                   device: Optional[Device] = None) -> DistillResult:
    """Online rule: per-step gradients from the running rate, no stored trace."""
    return distill(teacher, student, train, config, "online", test, device)

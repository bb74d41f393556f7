"""Accuracy, firing statistics and synaptic-operation accounting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .snn import RunResult, SpikingModel, run_network
from .teacher import TeacherModel, extract_activations

# MAC vs AC energy factor (45 nm CMOS estimate); reported, never measured
MAC_TO_AC_ENERGY = 5.0


def ann_synops(arch: Sequence[int]) -> int:
    """Multiply-accumulates of one dense forward pass (biases excluded)."""
    return int(sum(a * b for a, b in zip(arch[:-1], arch[1:])))


def _emitted(record) -> tuple[list, int]:
    if isinstance(record, RunResult):
        batch = record.output.shape[0] if record.output.ndim == 2 else 1
        return [np.asarray(record.input_events)] + [np.asarray(c) for c in record.counts], batch
    arrays = [np.asarray(r) for r in record]
    batch = arrays[0].shape[0] if arrays and arrays[0].ndim == 2 else 1
    return arrays, batch


def snn_synops_by_layer(record, arch: Sequence[int]) -> list:
    """Accumulates per layer, averaged per sample.

    ``record`` is a ``RunResult`` or a list whose entry ``l`` holds the spikes
    emitted by layer ``l`` over the window (entry 0: input events). Each
    spike costs one accumulate per outgoing synapse.
    """
    emitted, batch = _emitted(record)
    return [float(emitted[l].sum()) * arch[l + 1] / batch for l in range(min(len(emitted), len(arch) - 1))]


def snn_synops(record, arch: Sequence[int]) -> float:
    return float(sum(snn_synops_by_layer(record, arch)))


@dataclass
class SynOpsReport:
    ann_macs: int
    snn_acs: float
    ratio: float
    T_w: int
    per_layer: list = field(default_factory=list)
    firing_rates: list = field(default_factory=list)

    @property
    def energy_ratio(self) -> float:
        """Estimated SNN/ANN energy, assuming a MAC costs 5 accumulates."""
        return self.ratio / MAC_TO_AC_ENERGY

    def rows(self) -> list:
        out = [("total", self.ann_macs, self.snn_acs, self.ratio, "")]
        for i, acs in enumerate(self.per_layer):
            rate = self.firing_rates[i - 1] if 0 < i <= len(self.firing_rates) else ""
            out.append((f"layer{i + 1}", "", acs, "", rate))
        return out


def synops_report(record: RunResult, arch: Sequence[int]) -> SynOpsReport:
    per_layer = snn_synops_by_layer(record, arch)
    ann = ann_synops(arch)
    acs = float(sum(per_layer))
    rates = [float(np.mean(c)) / record.window for c in record.counts]
    return SynOpsReport(ann, acs, acs / ann if ann else 0.0, record.window, per_layer, rates)


@dataclass
class EvalResult:
    accuracy: float
    synops: SynOpsReport
    predictions: np.ndarray


class _Totals:
    """Sums spike counts across evaluation batches without keeping them."""

    def __init__(self):
        self.n = 0
        self.events = 0.0
        self.counts: Optional[list] = None

    def add(self, res: RunResult):
        self.n += res.output.shape[0]
        self.events += float(res.input_events.sum())
        sums = [c.sum(axis=0).astype(np.float64) for c in res.counts]
        self.counts = sums if self.counts is None else [a + b for a, b in zip(self.counts, sums)]

    def report(self, arch, T_w) -> SynOpsReport:
        counts = self.counts or []
        per_layer = [self.events * arch[1] / self.n] + [
            float(c.sum()) * arch[l + 2] / self.n for l, c in enumerate(counts)
        ]
        ann = ann_synops(arch)
        acs = float(sum(per_layer))
        rates = [float(c.mean()) / self.n / T_w for c in counts]
        return SynOpsReport(ann, acs, acs / ann, T_w, per_layer, rates)


def evaluate_snn(model: SpikingModel, images: np.ndarray, labels: np.ndarray, T_w: int,
                 batch_size: int = 500, device=None) -> EvalResult:
    """Accuracy (argmax of the output accumulator) and SynOps over a dataset."""
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    preds = np.empty(len(labels), dtype=np.int64)
    totals = _Totals()
    for start in range(0, len(labels), batch_size):
        xb = images[start:start + batch_size]
        res = run_network(
            model.layers, model.params, xb, T_w,
            current_noise=None if device is None else device.current_noise,
            spike_masks=None if device is None else device.spike_masks,
        )
        preds[start:start + len(xb)] = res.output.argmax(axis=1)
        totals.add(res)
    acc = float(np.mean(preds == labels))
    return EvalResult(acc, totals.report(model.arch, T_w), preds)


def accuracy(model, dataset, T_w: int = 16, device=None) -> float:
    """Classification accuracy of a teacher (argmax logits) or student (argmax output potential)."""
    images, labels = dataset.images, dataset.labels
    if len(labels) == 0:
        raise ValueError("cannot compute accuracy on an empty dataset")
    if isinstance(model, TeacherModel):
        return float(np.mean(extract_activations(model, images)[-1].argmax(axis=1) == labels))
    return evaluate_snn(model, images, labels, T_w, device=device).accuracy


def convergence_report(series: Sequence[float], tolerance: float = 0.01) -> int:
    """1-based epoch at which accuracy first reaches ``final - tolerance``."""
    if len(series) == 0:
        raise ValueError("empty accuracy series")
    goal = series[-1] - tolerance
    for epoch, acc in enumerate(series, start=1):
        if acc >= goal:
            return epoch
    return len(series)  # unreachable: the last entry always qualifies


def linear_fit_r2(x: Sequence[float], y: Sequence[float]) -> float:
    """Coefficient of determination of a least-squares line through (x, y)."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    total = ((y - y.mean()) ** 2).sum()
    return 1.0 - float((resid ** 2).sum() / total) if total > 0 else 1.0

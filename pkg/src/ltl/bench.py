"""Memory and wall time of one training step, offline versus online."""

from __future__ import annotations

import time
import tracemalloc
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .offline import layer_offline_grads
from .online import OnlineState
from .snn import SpikingModel, run_network
from .teacher import TeacherModel, layer_norms, make_targets


@dataclass
class BenchRow:
    mode: str
    T_w: int
    state_bytes: int  # training state held for the gradient: traces (offline) or learner (online)
    peak_bytes: int  # tracemalloc peak over the whole step
    seconds: float

    def as_tuple(self) -> tuple:
        return (self.mode, self.T_w, self.state_bytes, self.peak_bytes, self.seconds)


BENCH_COLUMNS = ("mode", "T_w", "state_bytes", "peak_bytes", "seconds")


def training_step(model: SpikingModel, x: np.ndarray, targets: Sequence[np.ndarray], T_w: int,
                  mode: str, T_warm: int = 0) -> int:
    """Gradients of every hidden layer for one batch; returns the training-state size."""
    layers, params = model.layers, model.params
    hidden = range(len(layers) - 1)
    if mode == "offline":
        res = run_network(layers, params, x, T_w, record=list(hidden))
        for l in hidden:
            layer_offline_grads(res.traces[l], targets[l], res.counts[l], params, l)
        return sum(res.traces[l].nbytes for l in hidden)
    if mode == "online":
        learner = OnlineState.for_network(layers, targets, T_warm, params)
        run_network(layers, params, x, T_w, on_step=learner)
        return learner.nbytes
    raise ValueError(f"mode must be offline or online, got {mode!r}")


def measure(model: SpikingModel, teacher: TeacherModel, x: np.ndarray, T_w: int, mode: str,
            repeats: int = 1) -> BenchRow:
    norms = layer_norms(teacher, x)
    tg = make_targets(teacher, x, T_w, norms=norms)
    targets = [tg.hidden_target(l) for l in range(len(model.layers) - 1)]
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        start = time.perf_counter()
        for _ in range(repeats):
            state = training_step(model, x, targets, T_w, mode, T_warm=T_w // 4)
        seconds = (time.perf_counter() - start) / repeats
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return BenchRow(mode, T_w, state, peak, seconds)


def bench(model: SpikingModel, teacher: TeacherModel, x: np.ndarray,
          windows: Sequence[int] = (8, 16, 32), repeats: int = 1) -> list:
    return [measure(model, teacher, x, T_w, mode, repeats) for mode in ("offline", "online") for T_w in windows]

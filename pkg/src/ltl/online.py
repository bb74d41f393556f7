"""Online layer-local learning with a moving-average firing rate.

At step ``t`` each hidden layer compares ``C[t] / t`` to its target, so the
weight update uses only quantities present at that step: the running spike
count, the membrane potential and the presynaptic spikes of the previous step.
No state history is kept.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import StructureError
from .offline import GradBuffer, layer_offline_grads
from .snn import LayerSpec, NeuronParams, NeuronState, boxcar_grad, run_network

DENSE_ABOVE = 0.25  # gated block fraction beyond which the dense product is cheaper


def online_error(target_rate, spike_count, t: int) -> np.ndarray:
    """zeta[t] = -(2 / t) * (target - C[t] / t)."""
    if t < 1:
        raise ValueError(f"online error is undefined for t={t}")
    target = np.asarray(target_rate)
    dtype = target.dtype if np.issubdtype(target.dtype, np.floating) else np.float64
    return (-(2.0 / t) * (target - np.asarray(spike_count, dtype=dtype) / t)).astype(dtype, copy=False)


def online_step_grads(
    zeta: np.ndarray,
    membrane: np.ndarray,
    presyn: np.ndarray,
    params: NeuronParams,
    buf: Optional[GradBuffer] = None,
    gated: bool = True,
    scratch: Optional[np.ndarray] = None,
) -> GradBuffer:
    """Add one step's increment ``zeta * s'(U[t]) * S[t-1]`` into ``buf``.

    With ``gated`` only neurons inside the boxcar support and presynaptic
    inputs that actually spiked are touched; every skipped term is exactly
    zero, so the result equals the dense product. Returns ``buf`` (a fresh
    buffer when none is given). Increments are averaged over the batch.
    ``scratch``, shaped like ``buf.dW``, avoids a temporary per call.
    """
    zeta, membrane, presyn = (np.asarray(a) for a in (zeta, membrane, presyn))
    if zeta.shape != membrane.shape or zeta.shape[:-1] != presyn.shape[:-1]:
        raise StructureError(
            f"shapes zeta {zeta.shape}, membrane {membrane.shape}, presyn {presyn.shape} disagree"
        )
    if zeta.ndim == 1:
        zeta, membrane, presyn = zeta[None], membrane[None], presyn[None]
    batch, m = zeta.shape
    n = presyn.shape[1]
    if buf is None:
        buf = GradBuffer(np.zeros((m, n), zeta.dtype), np.zeros(m, zeta.dtype), rule="online")
    g = zeta * boxcar_grad(membrane, params) / batch
    if not gated:
        _add_outer(buf.dW, g, presyn, scratch)
        buf.db += g.sum(axis=0)
        return buf
    rows = np.flatnonzero(g.any(axis=0))
    if rows.size == 0:
        return buf
    buf.db[rows] += g[:, rows].sum(axis=0)
    cols = np.flatnonzero(presyn.any(axis=0))
    if cols.size == 0:
        return buf
    if rows.size * cols.size > DENSE_ABOVE * m * n:
        # scattering into a large block costs more than the dense product of the same zeros
        _add_outer(buf.dW, g, presyn, scratch)
    else:
        buf.dW[np.ix_(rows, cols)] += g[:, rows].T @ presyn[:, cols]
    return buf


def _add_outer(dW: np.ndarray, g: np.ndarray, presyn: np.ndarray, scratch: Optional[np.ndarray]):
    if scratch is None:
        dW += g.T @ presyn
        return
    np.matmul(g.T, presyn, out=scratch)
    dW += scratch


@dataclass
class OnlineState:
    """Streaming learner state for one batch; its size does not depend on T_w."""

    targets: list
    T_warm: int
    params: NeuronParams
    grads: list
    gated: bool = True
    t: int = 0
    updates: list = field(default_factory=list)  # gradient terms touched per layer
    active: Optional[frozenset] = None  # layers that learn; None means all
    on_grad: Optional[Callable[[int, GradBuffer], None]] = None  # per-step apply (SGD mode)
    scratch: dict = field(default_factory=dict)

    @classmethod
    def for_network(cls, net: Sequence[LayerSpec], targets: Sequence[np.ndarray], T_warm: int,
                    params: NeuronParams, gated: bool = True) -> "OnlineState":
        grads = [GradBuffer.zeros_like(layer, i, "online") for i, layer in enumerate(net[:-1])]
        return cls(list(targets), T_warm, params, grads, gated, 0, [0] * len(grads))

    def __call__(self, t: int, layer: int, state: NeuronState, presyn: np.ndarray) -> bool:
        self.t = t
        if t <= self.T_warm or layer >= len(self.grads):
            return False
        if self.active is not None and layer not in self.active:
            return False
        if state.spike_count.shape[-1] and np.any(state.spike_count > t):
            raise StructureError("spike count exceeds elapsed steps")
        zeta = online_error(self.targets[layer], state.spike_count, t).astype(state.membrane.dtype, copy=False)
        buf = self.grads[layer]
        if layer not in self.scratch:
            self.scratch[layer] = np.empty_like(buf.dW)
        online_step_grads(zeta, state.membrane, presyn, self.params, buf, self.gated, self.scratch[layer])
        self.updates[layer] += int(np.count_nonzero(boxcar_grad(state.membrane, self.params)))
        if self.on_grad is None:
            return False
        self.on_grad(layer, self.grads[layer])
        return True

    @property
    def nbytes(self) -> int:
        return sum(g.dW.nbytes + g.db.nbytes for g in self.grads) + sum(a.nbytes for a in self.scratch.values())


def cosine(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    """Cosine similarity of two flattened arrays; ``None`` if either is all zero."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return None
    return float(a @ b / (na * nb))


@dataclass
class CosineReport:
    layer: int
    mean: float
    std: float
    n_batches: int
    excluded: int


def batch_gradients(net, params, x, targets, T_w: int, T_warm: int):
    """Offline and online hidden-layer gradients from one shared forward pass."""
    learner = OnlineState.for_network(net, targets, T_warm, params)
    res = run_network(net, params, x, T_w, record=True, on_step=learner)
    offline = [layer_offline_grads(res.traces[l], targets[l], res.counts[l], params, l)[0]
               for l in range(len(net) - 1)]
    return offline, learner.grads


def grad_cosine_experiment(
    teacher,
    student: Sequence[LayerSpec],
    params: NeuronParams,
    images: np.ndarray,
    T_w: int = 16,
    T_warm: Optional[int] = None,
    batches: int = 50,
    batch_size: int = 128,
    seed: int = 0,
    norms: Optional[Sequence[float]] = None,
    round_down: bool = True,
) -> list:
    """Per-hidden-layer cosine similarity between offline and online gradients.

    ``batches`` random batches are drawn; both rules see the same forward pass
    of the (untrained) student. Batches where either gradient is zero are
    excluded from the statistics and counted in ``excluded``.
    """
    from .teacher import layer_norms, make_targets

    if T_warm is None:
        T_warm = T_w // 4
    rng = np.random.default_rng(seed)
    if norms is None:
        calib = images[rng.choice(len(images), size=min(1024, len(images)), replace=False)]
        norms = layer_norms(teacher, calib)
    n_hidden = len(student) - 1
    sims = [[] for _ in range(n_hidden)]
    excluded = [0] * n_hidden
    for _ in range(batches):
        idx = rng.choice(len(images), size=batch_size, replace=False)
        tg = make_targets(teacher, images[idx], T_w, norms=norms)
        hidden_targets = [tg.hidden_target(l, round_down) for l in range(n_hidden)]
        off, on = batch_gradients(student, params, images[idx], hidden_targets, T_w, T_warm)
        for l in range(n_hidden):
            c = cosine(off[l].dW, on[l].dW)
            if c is None:
                excluded[l] += 1
            else:
                sims[l].append(c)
    return [
        CosineReport(l + 1, float(np.mean(s)) if s else float("nan"),
                     float(np.std(s)) if s else float("nan"), len(s), excluded[l])
        for l, s in enumerate(sims)
    ]

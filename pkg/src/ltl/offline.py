"""Offline layer-local learning: global-rate MSE loss and per-layer BPTT.

Each hidden layer minimises ``||target - C[T_w] / T_w||^2`` on its own; its
error is propagated backwards in time within the layer only, through the
boxcar surrogate of the spike function.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StructureError
from .snn import HIDDEN, OUTPUT, LayerSpec, NeuronParams, StateTrace, boxcar_grad


@dataclass
class GradBuffer:
    dW: np.ndarray
    db: np.ndarray
    layer: int = 0
    rule: str = "offline"

    @classmethod
    def zeros_like(cls, spec: LayerSpec, layer: int = 0, rule: str = "offline") -> "GradBuffer":
        return cls(np.zeros_like(spec.weights), np.zeros_like(spec.bias), layer, rule)

    def check(self, spec: LayerSpec):
        if self.dW.shape != spec.weights.shape or self.db.shape != spec.bias.shape:
            raise StructureError(
                f"gradient shapes {self.dW.shape}/{self.db.shape} do not match layer "
                f"{spec.weights.shape}/{spec.bias.shape}"
            )
        if not (np.all(np.isfinite(self.dW)) and np.all(np.isfinite(self.db))):
            raise StructureError(f"non-finite gradient in layer {self.layer}")


@dataclass
class DeltaSeq:
    delta: np.ndarray  # (T_w, ..., width): dL/dS[t]
    dLdU: np.ndarray  # (T_w, ..., width): dL/dU[t]


def _batched(a: np.ndarray) -> np.ndarray:
    return a[None, :] if a.ndim == 1 else a


def offline_loss(target_rate, spike_count, T_w: int) -> float:
    """Squared rate error summed over neurons, averaged over the batch."""
    target = _batched(np.asarray(target_rate, dtype=np.float64))
    rate = _batched(np.asarray(spike_count, dtype=np.float64)) / T_w
    return float(((target - rate) ** 2).sum(axis=1).mean())


def terminal_error(target_rate, spike_count, T_w: int) -> np.ndarray:
    """dL/dS[T_w] = -(2 / T_w) * (target - C / T_w)."""
    target = np.asarray(target_rate)
    dtype = target.dtype if np.issubdtype(target.dtype, np.floating) else np.float64
    count = np.asarray(spike_count, dtype=dtype)
    return (-(2.0 / T_w) * (target - count / T_w)).astype(dtype, copy=False)


def backprop_through_time(trace: StateTrace, delta_T: np.ndarray, params: NeuronParams,
                          exact: bool = True) -> DeltaSeq:
    """Run the within-layer error recursion backwards from t = T_w.

    ``delta[t]`` is dL/dS[t] and ``s'`` the boxcar surrogate of the recorded
    membrane potentials. The exact recursion of the unrolled graph is::

        delta[t] = delta[T_w] - threshold * dL/dU[t+1]
        dL/dU[t] = alpha * dL/dU[t+1] + delta[t] * s'[t]

    With ``exact=False`` dL/dU[t+1] is replaced by ``delta[t+1] * s'[t+1]``
    on the right-hand side, which keeps only one step of the membrane path::

        delta[t] = -threshold * delta[t+1] * s'[t+1] + delta[T_w]
        dL/dU[t] = alpha * delta[t+1] * s'[t+1] + delta[t] * s'[t]

    Both agree for T_w <= 2.
    """
    if trace.kind != HIDDEN:
        raise StructureError("BPTT applies to spiking layers only")
    u = trace.membrane
    if delta_T.shape != u.shape[1:]:
        raise StructureError(f"terminal error shape {delta_T.shape} != layer shape {u.shape[1:]}")
    surrogate = boxcar_grad(u, params)
    T = u.shape[0]
    delta = np.empty_like(u)
    dLdU = np.empty_like(u)
    delta[T - 1] = delta_T
    dLdU[T - 1] = delta_T * surrogate[T - 1]
    for t in range(T - 2, -1, -1):
        carried = dLdU[t + 1] if exact else delta[t + 1] * surrogate[t + 1]
        delta[t] = -params.threshold * carried + delta_T
        dLdU[t] = params.alpha * carried + delta[t] * surrogate[t]
    return DeltaSeq(delta, dLdU)


def accumulate_param_grads(deltaseq: DeltaSeq, trace: StateTrace, layer: int = 0) -> GradBuffer:
    """dW_ij = sum_t dL/dU_i[t] * S_j[t-1] and db_i = sum_t dL/dU_i[t], batch-averaged."""
    dLdU, presyn = deltaseq.dLdU, trace.presyn
    if dLdU.shape[0] != presyn.shape[0] or dLdU.shape[1:-1] != presyn.shape[1:-1]:
        raise StructureError(f"error shape {dLdU.shape} incompatible with presyn {presyn.shape}")
    if dLdU.ndim == 2:
        dLdU, presyn = dLdU[:, None], presyn[:, None]
    batch = dLdU.shape[1]
    m, n = dLdU.shape[-1], presyn.shape[-1]
    dW = dLdU.reshape(-1, m).T @ presyn.reshape(-1, n) / batch
    db = dLdU.reshape(-1, m).sum(axis=0) / batch
    return GradBuffer(dW, db, layer, "offline")


def output_loss(accumulator, logits_target) -> float:
    acc = _batched(np.asarray(accumulator, dtype=np.float64))
    tgt = _batched(np.asarray(logits_target, dtype=np.float64))
    return float(((acc - tgt) ** 2).sum(axis=1).mean())


def output_grads_from_sums(accumulator, presyn_count, logits_target, T_w: int,
                           layer: int = 0, rule: str = "offline") -> GradBuffer:
    """MSE gradient of the integrator head from its running sums.

    ``accumulator = W @ sum_t S[t-1] + T_w * b``, so only the summed presynaptic
    spikes are needed.
    """
    acc = _batched(np.asarray(accumulator))
    pre = _batched(np.asarray(presyn_count, dtype=acc.dtype))
    err = 2.0 * (acc - _batched(np.asarray(logits_target, dtype=acc.dtype)))
    batch = acc.shape[0]
    return GradBuffer(err.T @ pre / batch, err.sum(axis=0) * T_w / batch, layer, rule)


def output_layer_grads(trace: StateTrace, logits_target, layer: int = 0) -> GradBuffer:
    if trace.kind != OUTPUT:
        raise StructureError("output_layer_grads needs the output-integrator trace")
    return output_grads_from_sums(
        trace.membrane[-1], trace.presyn.sum(axis=0), logits_target, trace.window, layer
    )


def layer_offline_grads(trace: StateTrace, target, spike_count, params: NeuronParams,
                        layer: int = 0, exact: bool = True) -> tuple[GradBuffer, float]:
    """Loss and gradient of one hidden layer from its recorded trace."""
    T_w = trace.window
    delta_T = terminal_error(target, spike_count, T_w).astype(trace.membrane.dtype, copy=False)
    grads = accumulate_param_grads(backprop_through_time(trace, delta_T, params, exact), trace, layer)
    return grads, offline_loss(target, spike_count, T_w)

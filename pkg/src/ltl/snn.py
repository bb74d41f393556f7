"""Discrete-time IF/LIF spiking layers.

Membrane update with reset-by-subtraction::

    U[t] = alpha * U[t-1] + I[t] - threshold * S[t-1]
    S[t] = 1 if U[t] >= threshold else 0

where the input current of layer ``l`` is ``W @ S_{l-1}[t-1] + b``. Layers are
coupled with a one-step delay; the first layer receives the analog input
directly at every step. The last layer is a non-spiking integrator whose
accumulated potential is the network output.

All arrays are batch-first: membrane potentials are ``(batch, width)`` and
weights are ``(out, in)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NumericDomainError, StructureError

HIDDEN = "hidden-spiking"
OUTPUT = "output-integrator"


@dataclass(frozen=True)
class NeuronParams:
    """Dynamics constants shared by every spiking layer of a network.

    ``alpha = exp(-dt / tau_m)``; an IF neuron has ``tau_m = inf`` and
    ``alpha = 1``. ``boxcar_width`` is the support ``p`` of the surrogate.
    """

    alpha: float = 1.0
    tau_m: float = math.inf
    threshold: float = 0.6
    boxcar_width: float = 0.4
    dt: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not self.threshold > 0.0:
            raise ValueError(f"threshold must be positive, got {self.threshold}")
        if not self.boxcar_width > 0.0:
            raise ValueError(f"boxcar_width must be positive, got {self.boxcar_width}")
        if (self.alpha == 1.0) != math.isinf(self.tau_m):
            raise ValueError("alpha == 1 exactly when tau_m is infinite (IF neuron)")
        if not math.isinf(self.tau_m) and not math.isclose(
            self.alpha, math.exp(-self.dt / self.tau_m), rel_tol=1e-12
        ):
            raise ValueError("alpha must equal exp(-dt / tau_m)")

    @classmethod
    def if_neuron(cls, threshold: float = 0.6, boxcar_width: float = 0.4) -> "NeuronParams":
        return cls(1.0, math.inf, threshold, boxcar_width)

    @classmethod
    def lif(
        cls, tau_m: float = 10.0, threshold: float = 0.6, boxcar_width: float = 0.4, dt: float = 1.0
    ) -> "NeuronParams":
        return cls(math.exp(-dt / tau_m), tau_m, threshold, boxcar_width, dt)

    @property
    def is_if(self) -> bool:
        return self.alpha == 1.0


@dataclass
class NeuronState:
    membrane: np.ndarray
    last_spikes: np.ndarray
    spike_count: np.ndarray

    @classmethod
    def zeros(cls, shape, dtype=np.float64) -> "NeuronState":
        return cls(
            np.zeros(shape, dtype=dtype),
            np.zeros(shape, dtype=dtype),
            np.zeros(shape, dtype=np.int64),
        )


@dataclass
class LayerSpec:
    weights: np.ndarray
    bias: np.ndarray
    kind: str = HIDDEN

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        self.bias = np.asarray(self.bias, dtype=self.weights.dtype)
        if self.weights.ndim != 2:
            raise StructureError(f"weights must be 2-D, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise StructureError(
                f"bias shape {self.bias.shape} does not match weights {self.weights.shape}"
            )
        if self.kind not in (HIDDEN, OUTPUT):
            raise StructureError(f"unknown layer kind {self.kind!r}")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "LayerSpec":
        return LayerSpec(self.weights.copy(), self.bias.copy(), self.kind)


@dataclass
class StateTrace:
    """Per-step record of one layer over the whole window.

    ``membrane[t-1]`` holds U[t] (for the output integrator, the running
    accumulator), ``spikes[t-1]`` holds S[t] (``None`` for the integrator) and
    ``presyn[t-1]`` holds the presynaptic input S_{l-1}[t-1] seen at step t.
    """

    membrane: np.ndarray
    spikes: Optional[np.ndarray]
    presyn: np.ndarray
    kind: str = HIDDEN

    @property
    def window(self) -> int:
        return self.membrane.shape[0]

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in (self.membrane, self.spikes, self.presyn) if a is not None)


@dataclass
class RunResult:
    counts: list  # per hidden layer, (batch, width) spike totals C[T_w]
    output: np.ndarray  # (batch, classes) accumulated output potential
    input_events: np.ndarray  # (batch,) nonzero analog inputs per step, times T_w
    output_presyn_count: np.ndarray  # (batch, in) spikes fed to the integrator
    traces: Optional[list] = None
    window: int = 0


def _check_finite(a: np.ndarray, what: str):
    if not np.all(np.isfinite(a)):
        raise NumericDomainError(f"{what} contains non-finite values")


def neuron_step(
    state: NeuronState, input_current: np.ndarray, params: NeuronParams
) -> tuple[NeuronState, np.ndarray]:
    """Advance one time step; returns the new state and the emitted spikes."""
    current = np.asarray(input_current)
    if current.shape != state.membrane.shape:
        raise StructureError(
            f"input current shape {current.shape} != state shape {state.membrane.shape}"
        )
    _check_finite(current, "input current")
    u = params.alpha * state.membrane + current - params.threshold * state.last_spikes
    s = (u >= params.threshold).astype(state.membrane.dtype)
    return NeuronState(u, s, state.spike_count + s.astype(np.int64)), s


def boxcar_grad(membrane: np.ndarray, params: NeuronParams) -> np.ndarray:
    """Boxcar surrogate of dS/dU: ``1/p`` inside ``|U - threshold| < p/2``, else 0."""
    u = np.asarray(membrane)
    _check_finite(u, "membrane")
    p = params.boxcar_width
    dtype = u.dtype if np.issubdtype(u.dtype, np.floating) else np.dtype(np.float64)
    inside = np.abs(u - params.threshold) < p / 2
    return inside.astype(dtype) * dtype.type(1.0 / p)


def encode_input(sample, t: int = 1) -> np.ndarray:
    """Direct (analog) coding: the sample itself is injected at every step."""
    x = np.asarray(sample)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    _check_finite(x, "input sample")
    return x


def validate_network(net: Sequence[LayerSpec]):
    if not net:
        raise StructureError("network has no layers")
    for i, layer in enumerate(net):
        expected = OUTPUT if i == len(net) - 1 else HIDDEN
        if layer.kind != expected:
            raise StructureError(f"layer {i} must be {expected}, got {layer.kind}")
        if i and net[i - 1].out_dim != layer.in_dim:
            raise StructureError(
                f"layer {i} expects {layer.in_dim} inputs but layer {i - 1} has {net[i - 1].out_dim}"
            )


CurrentNoise = Callable[[int, np.ndarray], np.ndarray]
StepHook = Callable[[int, int, NeuronState, np.ndarray], None]


def run_network(
    net: Sequence[LayerSpec],
    params: NeuronParams,
    sample,
    T_w: int,
    record=False,
    *,
    current_noise: Optional[CurrentNoise] = None,
    spike_masks: Optional[Sequence[Optional[np.ndarray]]] = None,
    on_step: Optional[StepHook] = None,
    depth: Optional[int] = None,
) -> RunResult:
    """Simulate ``net`` for ``T_w`` steps on one sample or a batch.

    ``current_noise(layer, I)`` perturbs each layer's input current at every
    step, ``spike_masks[l]`` multiplies the spikes emitted by hidden layer ``l``
    and ``on_step(t, layer, state, presyn)`` observes every hidden layer update
    as it happens (used by the streaming online rule); a truthy return from
    the hook signals that the layer's parameters changed. ``record`` is a
    bool or a collection of layer indices to trace. ``depth`` limits the
    simulation to the first ``depth`` layers.
    """
    if T_w < 1:
        raise ValueError(f"T_w must be >= 1, got {T_w}")
    validate_network(net)
    x = encode_input(sample)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    dtype = net[0].weights.dtype
    x = x.astype(dtype, copy=False)
    if x.shape[1] != net[0].in_dim:
        raise StructureError(f"sample width {x.shape[1]} != input width {net[0].in_dim}")
    n_layers = len(net) if depth is None else depth
    if not 1 <= n_layers <= len(net):
        raise ValueError(f"depth must be in [1, {len(net)}], got {depth}")
    n_hidden = min(n_layers, len(net) - 1)
    has_output = n_layers == len(net)
    batch = x.shape[0]

    states = [NeuronState.zeros((batch, net[l].out_dim), dtype) for l in range(n_hidden)]
    acc = np.zeros((batch, net[-1].out_dim), dtype=dtype)
    out_presyn_count = np.zeros((batch, net[-1].in_dim), dtype=dtype)
    first_current = x @ net[0].weights.T + net[0].bias if n_hidden else None

    if record is True:
        record = range(n_layers)
    recorded = set(record or ())
    traces = None
    if recorded:
        traces = [None] * n_layers
        for l in sorted(recorded):
            shape = (T_w, batch, net[l].out_dim)
            traces[l] = StateTrace(
                np.zeros(shape, dtype),
                np.zeros(shape, dtype) if net[l].kind == HIDDEN else None,
                np.zeros((T_w, batch, net[l].in_dim), dtype),
                net[l].kind,
            )

    for t in range(1, T_w + 1):
        # layer l at step t reads S_{l-1}[t-1], i.e. the spikes before this update
        prev = [s.last_spikes for s in states]
        for l in range(n_hidden):
            presyn = x if l == 0 else prev[l - 1]
            current = first_current if l == 0 else presyn @ net[l].weights.T + net[l].bias
            if current_noise is not None:
                current = current_noise(l, current)
            st, s = neuron_step(states[l], current, params)
            if spike_masks is not None and spike_masks[l] is not None:
                s = s * spike_masks[l]
                st = NeuronState(st.membrane, s, states[l].spike_count + s.astype(np.int64))
            states[l] = st
            if l in recorded:
                traces[l].membrane[t - 1] = st.membrane
                traces[l].spikes[t - 1] = s
                traces[l].presyn[t - 1] = presyn
            if on_step is not None and on_step(t, l, st, presyn) and l == 0:
                first_current = x @ net[0].weights.T + net[0].bias
        if has_output:
            presyn = x if n_hidden == 0 else prev[-1]
            current = presyn @ net[-1].weights.T + net[-1].bias
            if current_noise is not None:
                current = current_noise(len(net) - 1, current)
            acc = acc + current
            out_presyn_count += presyn
            if n_layers - 1 in recorded:
                traces[-1].membrane[t - 1] = acc
                traces[-1].presyn[t - 1] = presyn

    events = np.count_nonzero(x, axis=1).astype(np.int64) * T_w
    counts = [s.spike_count for s in states]
    output = acc
    if single:
        counts = [c[0] for c in counts]
        output = acc[0]
        events = events[0]
        if traces is not None:
            traces = [None if tr is None else StateTrace(
                tr.membrane[:, 0], None if tr.spikes is None else tr.spikes[:, 0], tr.presyn[:, 0], tr.kind
            ) for tr in traces]
    if single:
        out_presyn_count = out_presyn_count[0]
    return RunResult(counts, output, events, out_presyn_count, traces, T_w)


def init_student(widths: Sequence[int], seed: int = 0, dtype=np.float32,
                 scheme: str = "uniform", gain: float = 1.0, bias: float = 0.12) -> list:
    """Student network; the last layer is the output integrator.

    ``uniform`` draws weights and biases from U(-k, k) with k = 1/sqrt(fan_in)
    (the usual dense-layer default); ``he`` draws weights from
    N(0, 2/fan_in) with zero bias. ``gain`` scales either draw. ``zero`` sets
    every weight to 0 and every hidden bias to ``bias``, so each neuron starts
    from the same constant drive and is told apart only by its own target.
    The default 0.12 (a fifth of the default threshold) makes the resulting
    sawtooth membrane enter the surrogate window within any 4 consecutive
    steps for IF neurons (5 for LIF with tau_m = 10), so online updates
    after a long warm-up still see a non-zero gradient.
    """
    rng = np.random.default_rng(seed)
    net = []
    for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
        last = i == len(widths) - 2
        if scheme == "uniform":
            k = gain / math.sqrt(n_in)
            w = rng.uniform(-k, k, size=(n_out, n_in))
            b = rng.uniform(-k, k, size=n_out)
        elif scheme == "he":
            w = rng.normal(0.0, gain * math.sqrt(2.0 / n_in), size=(n_out, n_in))
            b = np.zeros(n_out)
        elif scheme == "zero":
            w = np.zeros((n_out, n_in))
            b = np.full(n_out, 0.0 if last else bias)
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
        net.append(LayerSpec(w.astype(dtype), b.astype(dtype), OUTPUT if last else HIDDEN))
    return net


def copy_network(net: Sequence[LayerSpec]) -> list:
    return [layer.copy() for layer in net]


def network_widths(net: Sequence[LayerSpec]) -> list:
    return [net[0].in_dim] + [layer.out_dim for layer in net]



@dataclass
class SpikingModel:
    """A student network together with its neuron constants."""

    layers: list
    params: NeuronParams

    def __post_init__(self):
        validate_network(self.layers)

    @property
    def arch(self) -> list:
        return network_widths(self.layers)

    def copy(self) -> "SpikingModel":
        return SpikingModel(copy_network(self.layers), self.params)

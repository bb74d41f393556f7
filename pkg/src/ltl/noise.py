"""Analog-substrate non-idealities and noise-aware calibration.

Four noise models act on a deployed student:

* ``mismatch``: every parameter and every later parameter update is drawn
  from N(theta, sigma * |theta|).
* ``quantization``: per-tensor symmetric uniform quantization to ``bits``.
* ``thermal``: every input current is drawn from N(I, sigma * |I|) at every
  step.
* ``silencing``: a fixed random subset of hidden neurons never spikes.

Calibration fine-tunes the noisy student with the online rule while the
noise stays active.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .snn import LayerSpec, SpikingModel

KINDS = ("mismatch", "quantization", "thermal", "silencing")


@dataclass(frozen=True)
class NoiseConfig:
    kind: str
    level: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"noise kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind in ("mismatch", "thermal") and self.level < 0:
            raise ValueError(f"sigma must be >= 0, got {self.level}")
        if self.kind == "quantization" and (int(self.level) != self.level or not 2 <= self.level <= 16):
            raise ValueError(f"bit-width must be an integer in [2, 16], got {self.level}")
        if self.kind == "silencing" and not 0 <= self.level <= 1:
            raise ValueError(f"failure rate must lie in [0, 1], got {self.level}")


def _relative_gaussian(a: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0:
        return a.copy()
    dtype = a.dtype if a.dtype in (np.float32, np.float64) else np.float64
    eps = rng.standard_normal(a.shape, dtype=dtype)
    return (a + sigma * np.abs(a) * eps).astype(a.dtype, copy=False)


def apply_mismatch(net: Sequence[LayerSpec], sigma: float, rng: np.random.Generator) -> list:
    """Replace every weight and bias theta by a draw from N(theta, sigma * |theta|)."""
    return [
        LayerSpec(_relative_gaussian(l.weights, sigma, rng), _relative_gaussian(l.bias, sigma, rng), l.kind)
        for l in net
    ]


def perturb_update(delta: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Mismatch on a parameter update, same multiplicative form as on the parameters."""
    return _relative_gaussian(delta, sigma, rng)


def quantize_tensor(a: np.ndarray, bits: int) -> np.ndarray:
    """Symmetric uniform quantization with scale max|a| / (2^(bits-1) - 1)."""
    if bits < 2:
        raise ValueError(f"bits must be >= 2, got {bits}")
    peak = float(np.max(np.abs(a))) if a.size else 0.0
    if peak == 0.0:
        return a.copy()
    scale = peak / (2 ** (bits - 1) - 1)
    return (np.round(a / scale) * scale).astype(a.dtype, copy=False)


def quantize_params(net: Sequence[LayerSpec], bits: int) -> list:
    return [LayerSpec(quantize_tensor(l.weights, bits), quantize_tensor(l.bias, bits), l.kind) for l in net]


def thermal_noise_hook(current: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Fresh N(I, sigma * |I|) draw for every neuron."""
    return _relative_gaussian(np.asarray(current), sigma, rng)


def silence_neurons(layer_widths: Sequence[int], p_fail: float, rng: np.random.Generator,
                    dtype=np.float32) -> list:
    """One 0/1 mask per hidden layer; a neuron fails with probability ``p_fail``."""
    if not 0 <= p_fail <= 1:
        raise ValueError(f"p_fail must lie in [0, 1], got {p_fail}")
    return [(rng.random(w) >= p_fail).astype(dtype) for w in layer_widths]


class NoisyDevice:
    """Noise attached to one deployed model instance.

    Exposes the hooks the simulator and the training loop consume:
    ``current_noise``, ``spike_masks`` and ``apply_update``. All randomness
    comes from independent streams split off ``config.seed``.
    """

    def __init__(self, config: NoiseConfig):
        self.config = config
        deploy_seq, update_seq, thermal_seq = np.random.SeedSequence(config.seed).spawn(3)
        self._deploy_rng = np.random.default_rng(deploy_seq)
        self._update_rng = np.random.default_rng(update_seq)
        self._thermal_rng = np.random.default_rng(thermal_seq)
        self.spike_masks: Optional[list] = None
        self._shadow: Optional[list] = None

    @property
    def current_noise(self):
        if self.config.kind != "thermal":
            return None
        sigma = self.config.level
        return lambda layer, current: thermal_noise_hook(current, sigma, self._thermal_rng)

    def deploy(self, model: SpikingModel) -> SpikingModel:
        """Return the model as it exists on the noisy substrate."""
        kind, level = self.config.kind, self.config.level
        layers = [l.copy() for l in model.layers]
        if kind == "mismatch":
            layers = apply_mismatch(layers, level, self._deploy_rng)
        elif kind == "quantization":
            self._shadow = [l.copy() for l in layers]
            layers = quantize_params(layers, int(level))
        elif kind == "silencing":
            widths = [l.out_dim for l in layers[:-1]]
            self.spike_masks = silence_neurons(widths, level, self._deploy_rng, layers[0].weights.dtype)
        return SpikingModel(layers, model.params)

    def apply_update(self, index: int, layer: LayerSpec, dW: np.ndarray, db: np.ndarray):
        """Add an update to the device parameters under this noise model."""
        kind = self.config.kind
        if kind == "mismatch":
            dW = perturb_update(dW, self.config.level, self._update_rng)
            db = perturb_update(db, self.config.level, self._update_rng)
        if kind == "quantization" and self._shadow is not None:
            # latent full-precision copy is trained; the device holds its quantized image
            shadow = self._shadow[index]
            shadow.weights += dW
            shadow.bias += db
            bits = int(self.config.level)
            layer.weights[...] = quantize_tensor(shadow.weights, bits)
            layer.bias[...] = quantize_tensor(shadow.bias, bits)
            return
        layer.weights += dW
        layer.bias += db


@dataclass
class CalibrationResult:
    model: SpikingModel
    curve: list  # (epoch, accuracy); epoch 0 is the uncalibrated device
    clean_accuracy: Optional[float]
    history: list


def calibrate(noisy_student: SpikingModel, teacher, noise_cfg: NoiseConfig, train, test,
              epochs: int = 5, T_w: int = 16, T_warm: Optional[int] = None, config=None,
              device: Optional[NoisyDevice] = None, clean_accuracy: Optional[float] = None
              ) -> CalibrationResult:
    """Fine-tune a deployed noisy student with the online rule, noise active throughout.

    ``noisy_student`` must already carry the noise (see ``NoisyDevice.deploy``);
    pass the same ``device`` so its masks, thermal stream and update
    perturbation stay in force. The teacher is only read.
    """
    from dataclasses import replace

    from .distill import DistillConfig, distill
    from .metrics import evaluate_snn

    if device is None:
        device = NoisyDevice(noise_cfg)
        noisy_student = device.deploy(noisy_student)
    cfg = replace(config or DistillConfig(), T_w=T_w, epochs=epochs,
                  T_warm=T_warm if T_warm is not None else (config.T_warm if config else None))
    before = evaluate_snn(noisy_student, test.images, test.labels, T_w, device=device).accuracy
    result = distill(teacher, noisy_student, train, cfg, "online", test=test, device=device)
    curve = [(0, before)] + [(i + 1, a) for i, a in enumerate(result.accuracies)]
    return CalibrationResult(result.model, curve, clean_accuracy, result.history)

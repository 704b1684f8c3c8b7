"""Feed-forward embedding map with exact backprop and SGD-with-momentum.

The map is a stack of affine layers with rectifier activations on hidden
layers and identity output. Everything is float64; the finite-difference
checks in the test suite depend on that.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, ContractError, ParseError

_CHECKPOINT_MAGIC = b"MDML1\x00"


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    anneal_factor: float = 1.0
    epoch_length: int = 100

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if not 0 < self.anneal_factor <= 1:
            raise ConfigurationError("anneal_factor must lie in (0, 1]")
        if self.epoch_length < 1:
            raise ConfigurationError("epoch_length must be >= 1")


class ActivationTrace:
    """Per-layer inputs and pre-activations retained for the paired backward."""

    def __init__(self, version: int, layer_inputs, preacts):
        self.version = version
        self.layer_inputs = layer_inputs
        self.preacts = preacts

    def hidden_preacts(self) -> np.ndarray:
        """All hidden-layer pre-activations, flattened (rectifier kink margins)."""
        if len(self.preacts) <= 1:
            return np.empty(0)
        return np.concatenate([z.ravel() for z in self.preacts[:-1]])


class EmbeddingModel:
    """MLP mapping inputs to representation space."""

    def __init__(self, layer_dims: Sequence[int], seed: int = 0):
        if len(layer_dims) < 2 or any(d < 1 for d in layer_dims):
            raise ConfigurationError("layer_dims needs at least [input, output], all >= 1")
        self.layer_dims = [int(d) for d in layer_dims]
        rng = np.random.default_rng(seed)
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        for fan_in, fan_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            s = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-s, s, size=(fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))
        self.w_velocity = [np.zeros_like(w) for w in self.weights]
        self.b_velocity = [np.zeros_like(b) for b in self.biases]
        self._version = 0

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def forward(self, batch: np.ndarray) -> Tuple[np.ndarray, ActivationTrace]:
        x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
        if x.shape[1] != self.input_dim:
            raise ConfigurationError(
                f"input dimension {x.shape[1]} != model input {self.input_dim}"
            )
        layer_inputs, preacts = [], []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            layer_inputs.append(h)
            z = h @ w.T + b
            preacts.append(z)
            h = z if i == last else np.maximum(z, 0.0)
        return h, ActivationTrace(self._version, layer_inputs, preacts)

    def embed(self, batch: np.ndarray) -> np.ndarray:
        return self.forward(batch)[0]

    def backward(self, trace: ActivationTrace, representation_grads: np.ndarray):
        """Gradients of sum_n <rep_n, rep_grad_n> w.r.t. every parameter.

        Returns (weight_grads, bias_grads) lists matching the parameter shapes.
        """
        if trace.version != self._version:
            raise ContractError("activation trace is stale; rerun forward")
        g = np.atleast_2d(np.asarray(representation_grads, dtype=np.float64))
        if g.shape != trace.preacts[-1].shape:
            raise ContractError("representation gradients do not match the trace")
        w_grads = [None] * len(self.weights)
        b_grads = [None] * len(self.biases)
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            gz = g if i == last else g * (trace.preacts[i] > 0)
            w_grads[i] = gz.T @ trace.layer_inputs[i]
            b_grads[i] = gz.sum(axis=0)
            if i > 0:
                g = gz @ self.weights[i]
        return w_grads, b_grads

    def sgd_step(self, gradients, config: OptimizerConfig, iteration: int):
        """velocity <- m*velocity - rate*grad; param += velocity (rate annealed per epoch)."""
        w_grads, b_grads = gradients
        rate = config.learning_rate * config.anneal_factor ** (
            iteration // config.epoch_length
        )
        for params, vels, grads in (
            (self.weights, self.w_velocity, w_grads),
            (self.biases, self.b_velocity, b_grads),
        ):
            for p, v, g in zip(params, vels, grads):
                if g.shape != p.shape:
                    raise ContractError("gradient shape does not match parameter")
                v *= config.momentum
                v -= rate * g
                p += v
        self._version += 1

    def snapshot(self) -> "EmbeddingModel":
        """Frozen deep copy for index building and evaluation."""
        clone = EmbeddingModel.__new__(EmbeddingModel)
        clone.layer_dims = list(self.layer_dims)
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        clone.w_velocity = [v.copy() for v in self.w_velocity]
        clone.b_velocity = [v.copy() for v in self.b_velocity]
        clone._version = self._version
        return clone

    # -- flat parameter view used by grad_check and checkpointing ------------

    def get_flat_params(self) -> np.ndarray:
        return np.concatenate(
            [w.ravel() for w in self.weights] + [b.ravel() for b in self.biases]
        )

    def set_flat_params(self, flat: np.ndarray):
        i = 0
        for arrays in (self.weights, self.biases):
            for a in arrays:
                a[...] = flat[i : i + a.size].reshape(a.shape)
                i += a.size
        if i != flat.size:
            raise ContractError("flat parameter vector has the wrong length")
        self._version += 1

    def flatten_grads(self, gradients) -> np.ndarray:
        w_grads, b_grads = gradients
        return np.concatenate([g.ravel() for g in w_grads] + [g.ravel() for g in b_grads])

    def save(self, path):
        """Binary checkpoint: magic, layer count, dims, then row-major W and b arrays."""
        with Path(path).open("wb") as fh:
            fh.write(_CHECKPOINT_MAGIC)
            fh.write(struct.pack("<q", len(self.layer_dims)))
            fh.write(np.asarray(self.layer_dims, dtype="<i8").tobytes())
            for w, b in zip(self.weights, self.biases):
                fh.write(w.astype("<f8").tobytes())
                fh.write(b.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "EmbeddingModel":
        raw = Path(path).read_bytes()
        if raw[: len(_CHECKPOINT_MAGIC)] != _CHECKPOINT_MAGIC:
            raise ParseError(f"{path}: not a model checkpoint")
        off = len(_CHECKPOINT_MAGIC)
        (n_dims,) = struct.unpack_from("<q", raw, off)
        off += 8
        dims = np.frombuffer(raw, dtype="<i8", count=n_dims, offset=off).tolist()
        off += 8 * n_dims
        model = cls(dims, seed=0)
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            w = np.frombuffer(raw, dtype="<f8", count=fan_out * fan_in, offset=off)
            off += 8 * fan_out * fan_in
            b = np.frombuffer(raw, dtype="<f8", count=fan_out, offset=off)
            off += 8 * fan_out
            model.weights[i] = w.reshape(fan_out, fan_in).copy()
            model.biases[i] = b.copy()
        if off != len(raw):
            raise ParseError(f"{path}: trailing bytes in checkpoint")
        return model


@dataclass
class GradCheckReport:
    max_relative_error: float
    checked: int
    skipped: int
    passed: bool


def grad_check(
    model: EmbeddingModel,
    loss_probe: Callable[[EmbeddingModel], tuple],
    tolerance: float = 1e-4,
    num_coords: int = 200,
    step: float = 1e-5,
    seed: int = 0,
    kink_margin: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients to central finite differences.

    ``loss_probe(model) -> (loss, flat_grad, kink_values)`` where kink_values
    are hinge/rectifier arguments; a coordinate is skipped when perturbing it
    crosses (or lands within ``kink_margin`` of) a kink, since the loss is not
    differentiable there.
    """
    rng = np.random.default_rng(seed)
    _, flat_grad, _ = loss_probe(model)
    n_params = flat_grad.size
    coords = rng.choice(n_params, size=min(num_coords, n_params), replace=False)
    base = model.get_flat_params()

    max_rel = 0.0
    checked = skipped = 0
    try:
        for c in coords:
            perturbed = base.copy()
            perturbed[c] = base[c] + step
            model.set_flat_params(perturbed)
            loss_p, _, kinks_p = loss_probe(model)
            perturbed[c] = base[c] - step
            model.set_flat_params(perturbed)
            loss_m, _, kinks_m = loss_probe(model)
            if _crosses_kink(kinks_p, kinks_m, kink_margin):
                skipped += 1
                continue
            fd = (loss_p - loss_m) / (2 * step)
            an = flat_grad[c]
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
            max_rel = max(max_rel, rel)
            checked += 1
    finally:
        model.set_flat_params(base)
    return GradCheckReport(
        max_relative_error=max_rel,
        checked=checked,
        skipped=skipped,
        passed=checked > 0 and max_rel < tolerance,
    )


def _crosses_kink(kinks_p, kinks_m, margin) -> bool:
    if kinks_p is None or kinks_m is None or len(kinks_p) == 0:
        return False
    kp = np.asarray(kinks_p)
    km = np.asarray(kinks_m)
    if kp.shape != km.shape:
        return True
    near = (np.abs(kp) < margin) | (np.abs(km) < margin)
    flipped = np.sign(kp) != np.sign(km)
    return bool((near | flipped).any())

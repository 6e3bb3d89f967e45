"""Neural building blocks: plain-array layer functions and parameter initialization.

The functions here evaluate single records (or explicit batches) eagerly and
share their kernels with the graph primitives in :mod:`thama.autodiff`, so a
layer computed here and the same layer inside a trained graph agree exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Mapping, NamedTuple

import numpy as np

from thama.autodiff import BCE, Conv1D, MaxPool1D, RunContext
from thama.errors import ShapeError

KERNEL_WIDTH = 3
BCE_CLAMP = 1e-7


@dataclass
class Conv1DLayer:
    kernels: np.ndarray  # [out_channels, in_channels, 3]
    bias: np.ndarray  # [out_channels]

    def __post_init__(self):
        self.kernels = np.asarray(self.kernels)
        self.bias = np.asarray(self.bias)
        if self.kernels.ndim != 3 or self.kernels.shape[2] != KERNEL_WIDTH:
            raise ShapeError(f"conv kernels must be [out, in, {KERNEL_WIDTH}], got {self.kernels.shape}")
        if self.bias.shape != (self.kernels.shape[0],):
            raise ShapeError(f"conv bias {self.bias.shape} does not match {self.kernels.shape[0]} channels")

    @property
    def in_channels(self):
        return self.kernels.shape[1]

    @property
    def out_channels(self):
        return self.kernels.shape[0]


@dataclass
class DenseLayer:
    weights: np.ndarray  # [in_dim, out_dim]
    bias: np.ndarray  # [out_dim]

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        self.bias = np.asarray(self.bias)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ShapeError(f"dense layer shapes inconsistent: {self.weights.shape}, {self.bias.shape}")


@dataclass(frozen=True)
class DropoutSpec:
    rate: float
    mode: Literal["training", "inference"] = "inference"

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")
        if self.mode not in ("training", "inference"):
            raise ValueError(f"unknown dropout mode {self.mode!r}")


def conv1d(x: np.ndarray, layer: Conv1DLayer) -> np.ndarray:
    """Same-padded cross-correlation of ``x`` [C_in, L] (or [B, C_in, L])."""
    x = np.asarray(x)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1] != layer.in_channels:
        raise ShapeError(f"conv1d: input {x.shape} does not match {layer.in_channels} input channels")
    if x.shape[2] < 1:
        raise ShapeError("conv1d: empty sequence")
    dtype = np.result_type(x, layer.kernels)
    out, _ = Conv1D().forward(None, [x.astype(dtype), layer.kernels.astype(dtype), layer.bias.astype(dtype)], None)
    return out[0] if single else out


def maxpool1d(x: np.ndarray) -> np.ndarray:
    """Pool size 2, stride 2 over the last axis; an odd trailing element is dropped."""
    x = np.asarray(x)
    if x.shape[-1] < 2:
        raise ShapeError(f"maxpool1d needs length >= 2, got {x.shape[-1]}")
    out, _ = MaxPool1D().forward(None, [x], None)
    return out


def dense(x: np.ndarray, layer: DenseLayer) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] != layer.weights.shape[0]:
        raise ShapeError(f"dense: input dim {x.shape[-1]} != {layer.weights.shape[0]}")
    return x @ layer.weights + layer.bias


def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def dropout(x: np.ndarray, spec: DropoutSpec, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x)
    if spec.mode == "inference" or spec.rate == 0.0:
        return x
    keep = rng.random(x.shape) >= spec.rate
    return x * keep / (1.0 - spec.rate)


def bce(prob, label) -> float:
    """Batch-mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    p = np.atleast_1d(np.asarray(prob, dtype=np.float64))
    y = np.broadcast_to(np.asarray(label, dtype=np.float64), p.shape)
    loss, _ = BCE(BCE_CLAMP).forward(None, [p, y], RunContext(False, None, None))
    return float(loss)


class ParamInfo(NamedTuple):
    """Shape and initializer of one trainable tensor."""

    shape: tuple[int, ...]
    init: Literal["he", "glorot", "zeros"]
    fan_in: int = 0
    fan_out: int = 0


def he_bound(fan_in: int) -> float:
    return float(np.sqrt(6.0 / fan_in))


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_parameters(layout: Mapping[str, ParamInfo], seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Draw every tensor in ``layout`` order from one seeded stream.

    He-uniform uses U(-sqrt(6/fan_in), +sqrt(6/fan_in)); Glorot-uniform uses
    U(-sqrt(6/(fan_in+fan_out)), +...). Biases are zero.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, info in layout.items():
        if info.init == "zeros":
            value = np.zeros(info.shape)
        elif info.init == "he":
            bound = he_bound(info.fan_in)
            value = rng.uniform(-bound, bound, size=info.shape)
        elif info.init == "glorot":
            bound = glorot_bound(info.fan_in, info.fan_out)
            value = rng.uniform(-bound, bound, size=info.shape)
        else:
            raise ValueError(f"unknown initializer {info.init!r}")
        params[name] = value.astype(dtype)
    return params

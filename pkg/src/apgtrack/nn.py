"""Small dense/conv network building blocks evaluated through autodiff."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from apgtrack import autodiff as ad

ACTIVATIONS = {
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "linear": lambda x: x,
}


class ConfigurationError(ValueError):
    pass


@dataclass
class Layer:
    """Dense layer ``act(W x + b)``; ``kernel > 0`` marks a valid 1-D convolution
    whose weight has shape ``(filters, kernel * channels)``."""

    name: str
    weight: object
    bias: object
    activation: str = "tanh"
    kernel: int = 0

    @property
    def in_width(self) -> int:
        return ad.value(self.weight).shape[1]

    @property
    def out_width(self) -> int:
        return ad.value(self.weight).shape[0]

    def __call__(self, x):
        if self.kernel:
            x = unfold(x, self.kernel)
        return ACTIVATIONS[self.activation](ad.matvec(self.weight, x) + self.bias)


def unfold(x, kernel: int):
    """``(..., steps, channels) -> (..., steps - kernel + 1, kernel * channels)``."""
    shape = ad.value(x).shape
    steps, channels = shape[-2], shape[-1]
    n_out = steps - kernel + 1
    if n_out < 1:
        raise ConfigurationError(f"sequence of {steps} steps shorter than kernel {kernel}")
    if isinstance(x, ad.Var):
        idx = np.arange(n_out)[:, None] + np.arange(kernel)[None, :]
        patches = x[(Ellipsis, idx, slice(None))]
    else:
        patches = np.lib.stride_tricks.sliding_window_view(x, kernel, axis=-2)
        patches = np.swapaxes(patches, -1, -2)
    return ad.reshape(patches, shape[:-2] + (n_out, kernel * channels))


def init_layer(rng: np.random.Generator, name: str, fan_in: int, fan_out: int,
               activation: str = "tanh", kernel: int = 0) -> Layer:
    if fan_in <= 0:
        raise ConfigurationError(f"layer {name!r}: fan_in must be positive")
    if activation not in ACTIVATIONS:
        raise ConfigurationError(f"layer {name!r}: unknown activation {activation!r}")
    bound = np.sqrt(1.0 / fan_in)
    w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
    return Layer(name, w, np.zeros(fan_out), activation, kernel)


@dataclass
class Network:
    """Named layers plus the metadata needed to interpret their outputs."""

    layers: list[Layer] = field(default_factory=list)

    def __getitem__(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def with_arrays(self, arrays):
        """Shallow copy with weights/biases replaced in :meth:`arrays` order."""
        new = copy.copy(self)
        new.layers = []
        it = iter(arrays)
        for layer in self.layers:
            new.layers.append(Layer(layer.name, next(it), next(it), layer.activation, layer.kernel))
        return new

    def on_tape(self, tape: ad.Tape):
        vars_ = [tape.variable(a) for a in self.arrays()]
        return self.with_arrays(vars_), vars_

    def flat(self) -> np.ndarray:
        return np.concatenate([np.ravel(a) for a in self.arrays()])

    def with_flat(self, vec: np.ndarray):
        vec = np.asarray(vec, dtype=np.float64)
        arrays, pos = [], 0
        for a in self.arrays():
            n = np.size(a)
            arrays.append(vec[pos:pos + n].reshape(np.shape(a)).copy())
            pos += n
        if pos != vec.size:
            raise ConfigurationError(f"flat vector has {vec.size} values, expected {pos}")
        return self.with_arrays(arrays)

    @property
    def n_params(self) -> int:
        return int(sum(np.size(a) for a in self.arrays()))


def mlp(rng: np.random.Generator, widths: list[int], activations: list[str], prefix: str = "fc") -> list[Layer]:
    return [
        init_layer(rng, f"{prefix}{i}", widths[i], widths[i + 1], activations[i])
        for i in range(len(widths) - 1)
    ]


def run_chain(layers, x):
    for layer in layers:
        x = layer(x)
    return x

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np

from .layers import Conv2d, Dense, Layer, Parameter, layer_from_spec
from .optim import xavier_init


class Sequential:
    """A plain stack of layers with a known per-sample input shape."""

    def __init__(self, layers: Sequence[Layer], input_shape: tuple[int, ...]):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.shapes = layer_shapes(self.layers, self.input_shape)

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.params()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def apply(self, x: np.ndarray, start: int = 0, stop: int | None = None,
              on_layer: Callable[[int], None] | None = None) -> np.ndarray:
        stop = len(self.layers) if stop is None else stop
        for i in range(start, stop):
            x = self.layers[i].apply(x)
            if on_layer is not None:
                on_layer(i)
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def macs(self) -> list[int]:
        return [layer.macs(s) for layer, s in zip(self.layers, self.shapes)]

    def init_xavier(self, rng: np.random.Generator) -> None:
        init_layers(self.layers, rng)

    def table(self) -> list[dict]:
        return layer_table(self.layers)

    @classmethod
    def from_table(cls, table: list[dict], input_shape) -> "Sequential":
        return cls([layer_from_spec(e["kind"], e["hyper"]) for e in table], tuple(input_shape))


def layer_shapes(layers: Sequence[Layer], input_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Input shape of each layer followed by the final output shape."""
    shapes = [tuple(input_shape)]
    for layer in layers:
        shapes.append(tuple(layer.output_shape(shapes[-1])))
    return shapes


def init_layers(layers: Sequence[Layer], rng: np.random.Generator) -> None:
    for layer in layers:
        if isinstance(layer, (Conv2d, Dense)):
            xavier_init(layer.weight, layer.fan_in, layer.fan_out, rng)
            layer.bias.value[...] = 0.0


def layer_table(layers: Sequence[Layer]) -> list[dict]:
    return [{"kind": layer.kind, "hyper": layer.hyper()} for layer in layers]

"""Shared test utilities."""
from __future__ import annotations

import numpy as np

from eeoffload.nn import (
    Conv2d, Dense, Flatten, GlobalAvgPool, MaxPool2d, ReLU, Sequential, cross_entropy_loss,
    cross_entropy_with_grad,
)


def promote_f64(net: Sequential) -> None:
    """Switch every parameter to float64 so finite differences are meaningful."""
    for p in net.parameters():
        p.value = p.value.astype(np.float64)
        p.reset_state()


def random_network(rng: np.random.Generator):
    """A small random conv/pool/dense stack with <= 1000 parameters, in float64."""
    c = int(rng.integers(1, 3))
    h = int(rng.integers(6, 9))
    co = int(rng.integers(2, 4))
    k = int(rng.choice([1, 3]))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2)) if k == 3 else 0
    layers = [Conv2d(c, co, k, stride, pad), ReLU()]
    net = Sequential(layers, (c, h, h))
    _, hh, ww = net.output_shape
    if rng.random() < 0.5 and hh >= 2:
        layers += [MaxPool2d(2)]
    else:
        layers += [GlobalAvgPool()]
    net = Sequential(layers + [Flatten()], (c, h, h))
    feat = net.output_shape[0]
    classes = int(rng.integers(2, 5))
    net = Sequential(layers + [Flatten(), Dense(feat, classes)], (c, h, h))
    net.init_xavier(rng)
    for layer in net.layers:
        if hasattr(layer, "bias"):
            layer.bias.value[...] = rng.normal(scale=0.1, size=layer.bias.shape)
    promote_f64(net)
    x = rng.normal(size=(3, c, h, h))
    y = rng.integers(0, classes, size=3)
    return net, x, y


def gradcheck_network(net: Sequential, x: np.ndarray, y: np.ndarray, h: float = 1e-6) -> float:
    """Max relative error between backprop and central differences, over params and input."""
    net.zero_grad()
    _, g = cross_entropy_with_grad(net.forward(x), y)
    dx = net.backward(g)
    worst = 0.0

    def rel(a, b):
        return abs(a - b) / max(1e-7, abs(a) + abs(b))

    def loss():
        return cross_entropy_loss(net.apply(x), y)

    for p in net.parameters():
        for idx in np.ndindex(p.shape):
            old = p.value[idx]
            p.value[idx] = old + h
            lp = loss()
            p.value[idx] = old - h
            lm = loss()
            p.value[idx] = old
            worst = max(worst, rel(p.grad[idx], (lp - lm) / (2 * h)))
    for idx in list(np.ndindex(x.shape))[:40]:
        old = x[idx]
        x[idx] = old + h
        lp = loss()
        x[idx] = old - h
        lm = loss()
        x[idx] = old
        worst = max(worst, rel(dx[idx], (lp - lm) / (2 * h)))
    return worst

"""Layer kinds for a fixed, sequential-with-branches network.

Each layer offers two entry points:

``apply(x)``
    Pure inference. Nothing is cached, so a finalized model can be shared
    between threads.
``forward(x)`` / ``backward(grad)``
    Training pair. ``forward`` caches what ``backward`` needs and
    ``backward`` consumes that cache; calling it twice in a row raises
    :class:`BackwardError`.

Shapes exclude the batch axis: a conv input is ``(C, H, W)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import BackwardError, ShapeError


@dataclass(eq=False)
class Parameter:
    value: np.ndarray
    trainable: bool = True
    grad: np.ndarray = field(init=False)
    adam_m: np.ndarray = field(init=False)
    adam_v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=np.float32)
        self.reset_state()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def reset_state(self) -> None:
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)


class Layer:
    kind: str = ""

    def __init__(self):
        self._cache = None

    def params(self) -> list[Parameter]:
        return []

    def hyper(self) -> dict:
        return {}

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError

    def macs(self, in_shape: tuple[int, ...]) -> int:
        """Multiply-accumulate count for one sample."""
        return 0

    def apply(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray, input_grad: bool = True) -> np.ndarray | None:
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise BackwardError(f"{self.kind}.backward called without a preceding forward")
        cache, self._cache = self._cache, None
        return cache

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.hyper().items())
        return f"{self.kind}({args})"


def _check_rank(x: np.ndarray, rank: int, what: str) -> None:
    if x.ndim != rank:
        raise ShapeError(f"{what} input rank", rank, x.ndim)


class Conv2d(Layer):
    kind = "Conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0):
        super().__init__()
        if min(in_channels, out_channels, kernel_size, stride) < 1 or padding < 0:
            raise ValueError("invalid Conv2d hyperparameters")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        k = kernel_size
        self.weight = Parameter(np.zeros((out_channels, in_channels, k, k), np.float32))
        self.bias = Parameter(np.zeros(out_channels, np.float32))

    def params(self):
        return [self.weight, self.bias]

    def hyper(self):
        return {"in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel_size": self.kernel_size, "stride": self.stride, "padding": self.padding}

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel_size ** 2

    @property
    def fan_out(self) -> int:
        return self.out_channels * self.kernel_size ** 2

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ShapeError("Conv2d input (C, H, W)", (self.in_channels, "H", "W"), tuple(in_shape))
        _, h, w = in_shape
        k, s, p = self.kernel_size, self.stride, self.padding
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError("Conv2d spatial size too small for kernel", f">= {k - 2 * p}", (h, w))
        return (self.out_channels, ho, wo)

    def macs(self, in_shape):
        c, ho, wo = self.output_shape(in_shape)
        return c * ho * wo * self.fan_in

    def _cols(self, x):
        """Patch matrix of shape (C*k*k, N*Ho*Wo), channel-major."""
        _check_rank(x, 4, "Conv2d")
        _, ho, wo = self.output_shape(x.shape[1:])
        p, k, s = self.padding, self.kernel_size, self.stride
        n, c, h, w = x.shape
        xp = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=x.dtype)
        xp[:, :, p:p + h, p:p + w] = x.transpose(1, 0, 2, 3)
        cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, i, j] = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
        return cols.reshape(c * k * k, n * ho * wo), (n, ho, wo), xp.shape

    def _out(self, cols, n, ho, wo):
        wm = self.weight.value.reshape(self.out_channels, -1)
        y = cols.T @ wm.T
        y += self.bias.value
        return np.ascontiguousarray(y.reshape(n, ho, wo, self.out_channels).transpose(0, 3, 1, 2))

    def apply(self, x):
        cols, (n, ho, wo), _ = self._cols(x)
        return self._out(cols, n, ho, wo)

    def forward(self, x):
        cols, (n, ho, wo), padded_shape = self._cols(x)
        self._cache = (cols, padded_shape, x.dtype)
        return self._out(cols, n, ho, wo)

    def backward(self, grad, input_grad: bool = True):
        cols, padded_shape, dtype = self._take_cache()
        n, co, ho, wo = grad.shape
        g = np.ascontiguousarray(grad.transpose(0, 2, 3, 1)).reshape(-1, co)
        wm = self.weight.value.reshape(co, -1)
        if self.weight.trainable:
            self.weight.grad += (cols @ g).T.reshape(self.weight.shape)
        if self.bias.trainable:
            self.bias.grad += g.sum(axis=0, dtype=np.float64).astype(np.float32)
        if not input_grad:
            return None
        k, s, p = self.kernel_size, self.stride, self.padding
        dcols = (wm.T @ g.T).reshape(self.in_channels, k, k, n, ho, wo)
        dxp = np.zeros(padded_shape, dtype=dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, i, j]
        _, _, hp, wp = padded_shape
        return np.ascontiguousarray(dxp[:, :, p:hp - p, p:wp - p].transpose(1, 0, 2, 3))


class Dense(Layer):
    kind = "Dense"

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        if in_features < 1 or out_features < 1:
            raise ValueError("invalid Dense hyperparameters")
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(np.zeros((out_features, in_features), np.float32))
        self.bias = Parameter(np.zeros(out_features, np.float32))

    def params(self):
        return [self.weight, self.bias]

    def hyper(self):
        return {"in_features": self.in_features, "out_features": self.out_features}

    @property
    def fan_in(self) -> int:
        return self.in_features

    @property
    def fan_out(self) -> int:
        return self.out_features

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError("Dense input", (self.in_features,), tuple(in_shape))
        return (self.out_features,)

    def macs(self, in_shape):
        return self.in_features * self.out_features

    def apply(self, x):
        _check_rank(x, 2, "Dense")
        self.output_shape(x.shape[1:])
        return x @ self.weight.value.T + self.bias.value

    def forward(self, x):
        y = self.apply(x)
        self._cache = x
        return y

    def backward(self, grad, input_grad=True):
        x = self._take_cache()
        if self.weight.trainable:
            self.weight.grad += grad.T @ x
        if self.bias.trainable:
            self.bias.grad += grad.sum(axis=0, dtype=np.float64).astype(np.float32)
        if not input_grad:
            return None
        return grad @ self.weight.value


class ReLU(Layer):
    kind = "ReLU"

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def apply(self, x):
        return np.maximum(x, 0)

    def forward(self, x):
        self._cache = x > 0
        return np.maximum(x, 0)

    def backward(self, grad, input_grad=True):
        return grad * self._take_cache()


class MaxPool2d(Layer):
    kind = "MaxPool2d"

    def __init__(self, kernel_size: int = 2, stride: int | None = None):
        super().__init__()
        self.kernel_size = kernel_size
        self.stride = stride or kernel_size
        if self.kernel_size < 1 or self.stride < 1:
            raise ValueError("invalid MaxPool2d hyperparameters")

    def hyper(self):
        return {"kernel_size": self.kernel_size, "stride": self.stride}

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError("MaxPool2d input rank", 3, len(in_shape))
        c, h, w = in_shape
        k, s = self.kernel_size, self.stride
        if h < k or w < k:
            raise ShapeError("MaxPool2d spatial size", f">= {k}", (h, w))
        return (c, (h - k) // s + 1, (w - k) // s + 1)

    def _views(self, x):
        """The k*k shifted strided views of ``x``, each shaped like the output."""
        _check_rank(x, 4, "MaxPool2d")
        _, ho, wo = self.output_shape(x.shape[1:])
        k, s = self.kernel_size, self.stride
        return [x[:, :, i:i + s * ho:s, j:j + s * wo:s] for i in range(k) for j in range(k)]

    def apply(self, x):
        views = self._views(x)
        out = views[0].copy()
        for v in views[1:]:
            np.maximum(out, v, out=out)
        return out

    def forward(self, x):
        out = self.apply(x)
        self._cache = (x, out)
        return out

    def backward(self, grad, input_grad=True):
        # gradient goes to the first maximal element of each window
        x, out = self._take_cache()
        k, s = self.kernel_size, self.stride
        ho, wo = out.shape[2:]
        dx = np.zeros_like(x)
        taken = np.zeros(out.shape, dtype=bool)
        for i in range(k):
            for j in range(k):
                hit = (x[:, :, i:i + s * ho:s, j:j + s * wo:s] == out) & ~taken
                taken |= hit
                dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += np.where(hit, grad, 0)
        return dx


class GlobalAvgPool(Layer):
    kind = "GlobalAvgPool"

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError("GlobalAvgPool input rank", 3, len(in_shape))
        return (in_shape[0],)

    def macs(self, in_shape):
        return int(np.prod(in_shape))

    def apply(self, x):
        _check_rank(x, 4, "GlobalAvgPool")
        return x.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)

    def forward(self, x):
        self._cache = x.shape
        return self.apply(x)

    def backward(self, grad, input_grad=True):
        n, c, h, w = self._take_cache()
        return np.broadcast_to((grad / (h * w))[:, :, None, None], (n, c, h, w)).copy()


class Flatten(Layer):
    kind = "Flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def apply(self, x):
        return x.reshape(x.shape[0], -1)

    def forward(self, x):
        self._cache = x.shape
        return self.apply(x)

    def backward(self, grad, input_grad=True):
        return grad.reshape(self._take_cache())


LAYER_KINDS = {cls.kind: cls for cls in (Conv2d, Dense, ReLU, MaxPool2d, GlobalAvgPool, Flatten)}


def layer_from_spec(kind: str, hyper: dict) -> Layer:
    try:
        cls = LAYER_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown layer kind {kind!r}") from None
    return cls(**hyper)


def conv2d_forward(x: np.ndarray, layer: Conv2d) -> np.ndarray:
    """Cross-correlation of ``x`` [N, C, H, W] with the layer's kernel, plus bias."""
    return layer.apply(x)

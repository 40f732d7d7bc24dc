"""Gaussian blur and Gaussian noise distortion models.

Images are ``uint8`` arrays shaped ``(H, W, C)`` with ``C`` in {1, 3}.

Noise is drawn from numpy's PCG64 bit generator seeded with the caller's
integer seed, using ``Generator.standard_normal``; the same (image, sigma,
seed) triple gives the same bytes on every platform numpy supports.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BLUR_LEVELS: tuple[int, ...] = (1, 2, 3, 4, 5)
NOISE_LEVELS: tuple[int, ...] = (5, 10, 20, 30, 40)


class Kind(str, enum.Enum):
    PRISTINE = "pristine"
    BLUR = "blur"
    NOISE = "noise"

    @property
    def code(self) -> int:
        return _KIND_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "Kind":
        for kind, c in _KIND_CODES.items():
            if c == code:
                return kind
        raise ValueError(f"unknown distortion kind code {code}")

    def __str__(self):
        return self.value


_KIND_CODES = {Kind.PRISTINE: 0, Kind.BLUR: 1, Kind.NOISE: 2}
KINDS: tuple[Kind, ...] = (Kind.PRISTINE, Kind.BLUR, Kind.NOISE)


def level_grid(kind: Kind) -> tuple[int, ...]:
    kind = Kind(kind)
    if kind is Kind.BLUR:
        return BLUR_LEVELS
    if kind is Kind.NOISE:
        return NOISE_LEVELS
    return (0,)


@dataclass(frozen=True)
class DistortionSpec:
    kind: Kind
    level: float = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.level not in level_grid(self.kind):
            raise ValueError(f"level {self.level} is not on the {self.kind} grid {level_grid(self.kind)}")

    def apply(self, img: np.ndarray) -> np.ndarray:
        if self.kind is Kind.BLUR:
            return apply_blur(img, self.level)
        if self.kind is Kind.NOISE:
            return apply_noise(img, self.level, self.seed)
        return img.copy()


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized square Gaussian kernel of side ``4 * sigma + 1``."""
    if sigma < 1:
        raise ValueError(f"sigma must be >= 1, got {sigma}")
    if not float(2 * sigma).is_integer():
        raise ValueError(f"kernel side 4*sigma+1 must be an odd integer, got sigma={sigma}")
    return np.outer(_kernel_1d(sigma), _kernel_1d(sigma))


def _kernel_1d(sigma: float) -> np.ndarray:
    r = int(round(2 * sigma))
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"expected uint8 (H, W, 1|3) image, got {img.dtype} {img.shape}")
    return img


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def _blur_axis(x: np.ndarray, k1: np.ndarray, axis: int) -> np.ndarray:
    r = k1.size // 2
    pad = [(0, 0)] * x.ndim
    pad[axis] = (r, r)
    xp = np.pad(x, pad, mode="reflect")
    win = sliding_window_view(xp, k1.size, axis=axis)
    return win @ k1


def apply_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Convolve each channel with ``gaussian_kernel(sigma)`` (reflect borders).

    The 2-D Gaussian factorizes exactly into two 1-D passes, which is how it
    is evaluated here.
    """
    img = _check_image(img)
    if sigma not in BLUR_LEVELS:
        raise ValueError(f"blur sigma {sigma} not in {BLUR_LEVELS}")
    k1 = _kernel_1d(sigma)
    x = img.astype(np.float64)
    x = _blur_axis(x, k1, axis=0)
    x = _blur_axis(x, k1, axis=1)
    return _to_u8(x)


def apply_noise(img: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2) noise in 8-bit units, then round and clamp."""
    img = _check_image(img)
    if sigma not in NOISE_LEVELS:
        raise ValueError(f"noise sigma {sigma} not in {NOISE_LEVELS}")
    rng = np.random.Generator(np.random.PCG64(seed))
    noise = rng.standard_normal(img.shape) * float(sigma)
    return _to_u8(img.astype(np.float64) + noise)


def plan_augmentation(batch_size: int, kind: Kind, rng: np.random.Generator) -> list[DistortionSpec | None]:
    """Pick which half of a mini-batch gets distorted, and at which level."""
    kind = Kind(kind)
    if kind is Kind.PRISTINE:
        raise ValueError("augmentation kind must be blur or noise")
    if batch_size % 2:
        raise ValueError(f"batch size must be even, got {batch_size}")
    grid = level_grid(kind)
    chosen = rng.choice(batch_size, size=batch_size // 2, replace=False)
    plan: list[DistortionSpec | None] = [None] * batch_size
    for i in sorted(chosen.tolist()):
        level = grid[int(rng.integers(len(grid)))]
        plan[i] = DistortionSpec(kind, level, seed=int(rng.integers(2 ** 63)))
    return plan


def augment_minibatch(batch, kind: Kind, rng: np.random.Generator) -> list[np.ndarray]:
    plan = plan_augmentation(len(batch), kind, rng)
    return [img if spec is None else spec.apply(img) for img, spec in zip(batch, plan)]

"""Distortion-kind classifier on Fourier log-magnitude spectra.

The edge runs it on every incoming image to choose which expert branch set
to activate. Its input is the centred log-magnitude spectrum of the grayscale
image; blur removes high-frequency energy and noise adds a flat floor, which
makes the three kinds separable by a small CNN.
"""
from __future__ import annotations

import csv
import io
import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from . import data
from .distortion import KINDS, DistortionSpec, Kind, level_grid
from .errors import CheckpointError, DatasetError
from .nn import checkpoint
from .nn.functional import cross_entropy_with_grad
from .nn.layers import Conv2d, Dense, Flatten, MaxPool2d, ReLU
from .nn.network import Sequential
from .nn.optim import Adam, cosine_annealing_lr

log = logging.getLogger(__name__)

SPECTRUM_SIZE = 64
FORMAT = "distortion-classifier"


def extract_spectrum(img: np.ndarray, size: int = SPECTRUM_SIZE) -> np.ndarray:
    """Standardized, centred ``log(1 + |DFT|)`` of the channel-mean image, ``(size, size)`` f32."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[..., None]
    if img.ndim != 3 or img.size == 0:
        raise ValueError(f"expected a nonempty (H, W[, C]) image, got shape {img.shape}")
    gray = img.astype(np.float64).mean(axis=2)
    spec = np.fft.fftshift(np.log1p(np.abs(np.fft.fft2(gray))))
    if spec.shape != (size, size):
        spec = data.bilinear_resize(spec[..., None], size, size)[..., 0]
    std = spec.std()
    spec = spec - spec.mean()
    if std > 0:
        spec = spec / std
    return spec.astype(np.float32)


def spectra(images: Sequence[np.ndarray], size: int = SPECTRUM_SIZE) -> np.ndarray:
    """Stack of spectra with a channel axis, ``(N, 1, size, size)``."""
    return np.stack([extract_spectrum(im, size) for im in images])[:, None]


def radial_band_mean(spec: np.ndarray, lo: float, hi: float) -> float:
    """Mean of a centred spectrum over normalized radius ``lo <= r < hi`` (r = 1 at the edge midpoint)."""
    h, w = spec.shape
    yy, xx = np.mgrid[0:h, 0:w]
    r = np.hypot((yy - h // 2) / (h / 2), (xx - w // 2) / (w / 2))
    band = (r >= lo) & (r < hi)
    return float(spec[band].mean())


@dataclass
class ClassifierHyper:
    lr: float = 0.001
    batch_size: int = 32
    weight_decay: float = 0.0005
    max_epochs: int = 12
    patience_epochs: int = 3
    seed: int = 0
    width: int = 8


def build_network(size: int = SPECTRUM_SIZE, width: int = 8) -> Sequential:
    s = size // 4
    layers = [Conv2d(1, width, 3, padding=1), ReLU(), MaxPool2d(2),
              Conv2d(width, 2 * width, 3, padding=1), ReLU(), MaxPool2d(2),
              Flatten(), Dense(2 * width * s * s, len(KINDS))]
    return Sequential(layers, (1, size, size))


class DistortionClassifier:
    def __init__(self, net: Sequential):
        if len(net.input_shape) != 3 or net.input_shape[0] != 1 or net.output_shape != (len(KINDS),):
            raise ValueError(f"classifier net must map (1, S, S) to {len(KINDS)} logits")
        self.net = net

    @property
    def size(self) -> int:
        return self.net.input_shape[-1]

    def macs(self) -> int:
        return int(sum(self.net.macs()))

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.net.apply(x)

    def predict_codes(self, images: Sequence[np.ndarray], chunk: int = 256) -> np.ndarray:
        out = []
        for i in range(0, len(images), chunk):
            out.append(self.logits(spectra(images[i:i + chunk], self.size)).argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def to_bytes(self) -> bytes:
        header = {"format": FORMAT, "input_shape": list(self.net.input_shape),
                  "layers": self.net.table(), "kinds": [k.value for k in KINDS]}
        return checkpoint.encode(header, [p.value for p in self.net.parameters()])

    @classmethod
    def from_bytes(cls, buf: bytes) -> "DistortionClassifier":
        header, tensors = checkpoint.decode(buf)
        if header.get("format") != FORMAT:
            raise CheckpointError("not a distortion-classifier checkpoint")
        if header.get("kinds") != [k.value for k in KINDS]:
            raise CheckpointError(f"unexpected class order {header.get('kinds')}")
        net = Sequential.from_table(header["layers"], header["input_shape"])
        params = net.parameters()
        if len(params) != len(tensors):
            raise CheckpointError(f"checkpoint has {len(tensors)} tensors, classifier needs {len(params)}")
        for p, t in zip(params, tensors):
            if p.shape != t.shape:
                raise CheckpointError(f"tensor shape {t.shape} does not match parameter {p.shape}")
            p.value[...] = t
        return cls(net)

    def save(self, path) -> bytes:
        buf = self.to_bytes()
        with open(path, "wb") as fh:
            fh.write(buf)
        return buf

    @classmethod
    def load(cls, path) -> "DistortionClassifier":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def classify_distortion(clf: DistortionClassifier, img: np.ndarray) -> Kind:
    z = clf.logits(extract_spectrum(img, clf.size)[None, None])
    return Kind.from_code(int(z[0].argmax()))


# --- labelled training material ---------------------------------------------

def distortion_labelled(ds: data.LabeledDataset, seed: int,
                        limit: int | None = None) -> tuple[list[np.ndarray], np.ndarray, list[DistortionSpec]]:
    """Each source image appears once per kind: pristine, blur and noise
    at a uniformly drawn level. Returns images, kind codes and specs."""
    rng = np.random.default_rng([seed, 0xDC])
    n = len(ds) if limit is None else min(limit, len(ds))
    images, codes, specs = [], [], []
    for i in range(n):
        for kind in KINDS:
            grid = level_grid(kind)
            spec = DistortionSpec(kind, grid[int(rng.integers(len(grid)))], seed=int(rng.integers(2 ** 63)))
            images.append(spec.apply(ds.images[i]))
            codes.append(kind.code)
            specs.append(spec)
    return images, np.asarray(codes, dtype=np.int64), specs


def train_classifier(images: Sequence[np.ndarray], codes: np.ndarray,
                     val_images: Sequence[np.ndarray], val_codes: np.ndarray,
                     hyper: ClassifierHyper | None = None, size: int = SPECTRUM_SIZE) -> DistortionClassifier:
    """Fit the spectrum CNN; keeps the weights with the lowest validation loss."""
    hyper = hyper or ClassifierHyper()
    codes = np.asarray(codes, dtype=np.int64)
    missing = sorted(set(k.code for k in KINDS) - set(codes.tolist()))
    if missing:
        raise DatasetError(f"classifier training data lacks kinds {[Kind.from_code(c).value for c in missing]}")
    if len(codes) < hyper.batch_size:
        raise DatasetError(f"{len(codes)} samples is less than one batch of {hyper.batch_size}")
    rng = np.random.default_rng(hyper.seed)
    net = build_network(size, hyper.width)
    net.init_xavier(rng)
    x = spectra(images, size)
    vx = spectra(val_images, size)
    opt = Adam({"all": (net.parameters(), hyper.lr)}, weight_decay=hyper.weight_decay)
    params = net.parameters()
    best, best_loss, stale = [p.value.copy() for p in params], float("inf"), 0
    n, bs = len(codes), hyper.batch_size
    for epoch in range(hyper.max_epochs):
        scale = cosine_annealing_lr(1.0, 0.0, epoch, hyper.max_epochs)
        order = rng.permutation(n)
        for start in range(0, n - bs + 1, bs):
            idx = np.sort(order[start:start + bs])
            opt.zero_grad()
            _, g = cross_entropy_with_grad(net.forward(x[idx]), codes[idx])
            net.backward(g)
            opt.step(scale)
        vz = np.concatenate([net.apply(vx[i:i + 256]) for i in range(0, len(vx), 256)])
        vloss, _ = cross_entropy_with_grad(vz, val_codes)
        vacc = float((vz.argmax(1) == val_codes).mean())
        log.info("classifier epoch %d val loss %.4f acc %.4f", epoch, vloss, vacc)
        if vloss < best_loss:
            best, best_loss, stale = [p.value.copy() for p in params], vloss, 0
        else:
            stale += 1
            if stale >= hyper.patience_epochs:
                break
    for p, v in zip(params, best):
        p.value[...] = v
        p.reset_state()
    return DistortionClassifier(net)


def confusion_matrix(true_codes, pred_codes) -> np.ndarray:
    m = np.zeros((len(KINDS), len(KINDS)), dtype=np.int64)
    np.add.at(m, (np.asarray(true_codes), np.asarray(pred_codes)), 1)
    return m


def confusion_csv(matrix: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true\\pred"] + [k.value for k in KINDS])
    for k, row in zip(KINDS, matrix):
        w.writerow([k.value] + [int(v) for v in row])
    return buf.getvalue()


def evaluate_by_level(clf: DistortionClassifier, ds: data.LabeledDataset, seed: int) -> dict[tuple[Kind, int], float]:
    """Fraction of images classified as their true kind, per (kind, level)."""
    out = {(Kind.PRISTINE, 0): float((clf.predict_codes(list(ds.images)) == Kind.PRISTINE.code).mean())}
    for kind in (Kind.BLUR, Kind.NOISE):
        for level in level_grid(kind):
            d = data.distort_dataset(ds, kind, level, seed)
            out[(kind, level)] = float((clf.predict_codes(list(d.images)) == kind.code).mean())
    return out

"""Labeled image datasets: the built-in ``shapes-v1`` generator and folder loading.

A folder dataset is laid out as ``<root>/<class-name>/<image files>`` with
PNG or binary PPM files; class ids follow sorted folder names. Every loader
returns a deterministic 80/10/10 split driven by a seeded shuffle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import distortion
from .distortion import DistortionSpec, Kind
from .errors import DatasetError
from .nn import checkpoint

BUILTIN_SHAPES = "shapes-v1"
SUPPORTED_SUFFIXES = {".png", ".ppm"}

# class index -> (name, vertex count); 0 vertices means ellipse
SHAPE_CLASSES: list[tuple[str, int]] = [
    ("ellipse", 0), ("triangle", 3), ("square", 4), ("pentagon", 5),
    ("hexagon", 6), ("star", -5), ("cross", -4), ("diamond", 2),
]


@dataclass
class LabeledDataset:
    images: np.ndarray            # (N, H, W, C) uint8
    labels: np.ndarray            # (N,) int64
    class_names: list[str]
    split: str = "train"
    ids: np.ndarray = field(default=None)  # stable per-item ids (index in the source)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(len(self.labels))
        if self.images.dtype != np.uint8 or self.images.ndim != 4:
            raise DatasetError(f"images must be uint8 (N, H, W, C), got {self.images.dtype} {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DatasetError("label out of range")

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(self.images[idx], self.labels[idx], self.class_names, self.split, self.ids[idx])


@dataclass
class DatasetSplits:
    train: LabeledDataset
    validation: LabeledDataset
    test: LabeledDataset

    def __iter__(self):
        return iter((self.train, self.validation, self.test))


def split_dataset(images: np.ndarray, labels, class_names: list[str], seed: int) -> DatasetSplits:
    n = len(labels)
    order = np.random.default_rng(seed).permutation(n)
    n_train, n_val = n * 8 // 10, n // 10
    parts = {"train": order[:n_train], "validation": order[n_train:n_train + n_val],
             "test": order[n_train + n_val:]}
    labels = np.asarray(labels, dtype=np.int64)
    out = {name: LabeledDataset(images[np.sort(idx)], labels[np.sort(idx)], class_names, name, np.sort(idx))
           for name, idx in parts.items()}
    return DatasetSplits(**out)


def load_dataset(source: str | Path, seed: int = 0, classes: int = 3, per_class: int = 600,
                 size: int = 64) -> DatasetSplits:
    """Load a folder dataset, or generate ``shapes-v1`` when ``source`` names it.

    ``classes``/``per_class`` only apply to the built-in generator; ``size``
    is the native square resolution images are stored at.
    """
    if str(source) == BUILTIN_SHAPES:
        images, labels, names = generate_shapes(classes, per_class, seed, size)
    else:
        images, labels, names = _load_folder(Path(source), size)
    return split_dataset(images, labels, names, seed)


# --- synthetic shapes -------------------------------------------------------

def _shape_polygon(vertices: int) -> np.ndarray:
    """Unit-scale outline for a polygonal class, before pose jitter."""
    if vertices > 2:
        ang = np.arange(vertices) * 2 * math.pi / vertices
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    if vertices == 2:  # diamond: elongated rhombus
        return np.array([[1.0, 0.0], [0.0, 0.55], [-1.0, 0.0], [0.0, -0.55]])
    if vertices == -5:  # five-pointed star
        ang = np.arange(10) * math.pi / 5
        rad = np.where(np.arange(10) % 2 == 0, 1.0, 0.45)
        return np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
    if vertices == -4:  # plus-shaped cross
        a, b = 1.0, 0.33
        return np.array([[a, b], [b, b], [b, a], [-b, a], [-b, b], [-a, b],
                         [-a, -b], [-b, -b], [-b, -a], [b, -a], [b, -b], [a, -b]])
    raise ValueError(vertices)


def _inside_polygon(px: np.ndarray, py: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd rule point-in-polygon test, vectorized over pixels."""
    inside = np.zeros(px.shape, dtype=bool)
    xs, ys = poly[:, 0], poly[:, 1]
    for i in range(len(poly)):
        x0, y0, x1, y1 = xs[i - 1], ys[i - 1], xs[i], ys[i]
        crosses = (y0 > py) != (y1 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (px < xint)
    return inside


def _smooth_field(rng: np.random.Generator, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Low-frequency texture in [-1, 1]: a linear ramp plus one sinusoidal grating."""
    theta = rng.uniform(0, 2 * math.pi)
    ramp = gx * math.cos(theta) + gy * math.sin(theta)
    freq = rng.uniform(1.0, 3.0)
    phi = rng.uniform(0, 2 * math.pi)
    beta = rng.uniform(0, 2 * math.pi)
    grating = np.sin(freq * math.pi * (gx * math.cos(beta) + gy * math.sin(beta)) + phi)
    return 0.5 * ramp + 0.5 * grating


def render_shape(class_index: int, rng: np.random.Generator, size: int = 64,
                 supersample: int = 2) -> np.ndarray:
    """Render one RGB ``shapes-v1`` sample of the given class."""
    _, vertices = SHAPE_CLASSES[class_index]
    s = size * supersample
    coords = (np.arange(s) + 0.5) / s * 2.0 - 1.0
    gx, gy = np.meshgrid(coords, coords)

    bg_base = rng.uniform(40, 215, size=3)
    bg = bg_base + rng.uniform(15, 35) * _smooth_field(rng, gx, gy)[..., None]

    scale = rng.uniform(0.42, 0.72)
    cx, cy = rng.uniform(-0.22, 0.22, size=2)
    rot = rng.uniform(0, 2 * math.pi)
    aspect = rng.uniform(0.8, 1.0)
    c, sn = math.cos(rot), math.sin(rot)
    # pixel coords -> shape frame
    u = ((gx - cx) * c + (gy - cy) * sn) / scale
    v = (-(gx - cx) * sn + (gy - cy) * c) / (scale * aspect)
    if vertices == 0:
        mask = u * u + (v / 0.62) ** 2 <= 1.0
    else:
        mask = _inside_polygon(u, v, _shape_polygon(vertices))

    # foreground colour pushed away from the background in luminance
    sign = -1.0 if bg_base.mean() > 127 else 1.0
    fg_base = np.clip(bg_base + sign * rng.uniform(60, 110) + rng.uniform(-30, 30, size=3), 0, 255)
    fg = fg_base + rng.uniform(10, 25) * _smooth_field(rng, gx, gy)[..., None]

    img = np.where(mask[..., None], fg, bg)
    img = img.reshape(size, supersample, size, supersample, 3).mean(axis=(1, 3))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_shapes(classes: int, per_class: int, seed: int, size: int = 64):
    if not 1 <= classes <= len(SHAPE_CLASSES):
        raise DatasetError(f"shapes-v1 supports 1..{len(SHAPE_CLASSES)} classes, got {classes}")
    if per_class < 1:
        raise DatasetError("per_class must be positive")
    root = np.random.SeedSequence([seed, 0x5A4E5])
    streams = root.spawn(classes * per_class)
    images = np.empty((classes * per_class, size, size, 3), dtype=np.uint8)
    labels = np.repeat(np.arange(classes), per_class)
    for i, (label, ss) in enumerate(zip(labels, streams)):
        images[i] = render_shape(int(label), np.random.default_rng(ss), size)
    names = [f"{i:02d}_{SHAPE_CLASSES[i][0]}" for i in range(classes)]
    return images, labels, names


# --- folder datasets ---------------------------------------------------------

def read_image(path: Path) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im = im.convert("L" if im.mode in ("L", "1", "I", "I;16") else "RGB")
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from None
    return arr[..., None] if arr.ndim == 2 else arr


def write_image(path: Path, img: np.ndarray) -> None:
    from PIL import Image

    arr = img[..., 0] if img.shape[2] == 1 else img
    Image.fromarray(arr).save(path)


def decode_image(buf: bytes) -> np.ndarray:
    """PNG or binary PPM bytes -> uint8 (H, W, C)."""
    import io

    return read_image(io.BytesIO(buf))


def encode_png(img: np.ndarray) -> bytes:
    import io

    from PIL import Image

    out = io.BytesIO()
    Image.fromarray(img[..., 0] if img.shape[2] == 1 else img).save(out, format="PNG")
    return out.getvalue()


def _load_folder(root: Path, size: int):
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"no class folders under {root}")
    images, labels = [], []
    for label, d in enumerate(class_dirs):
        files = sorted(f for f in d.iterdir() if f.suffix.lower() in SUPPORTED_SUFFIXES)
        if not files:
            raise DatasetError(f"class folder {d} has no PNG/PPM images")
        for f in files:
            img = read_image(f)
            if img.shape[2] == 1:
                img = np.repeat(img, 3, axis=2)
            if img.shape[:2] != (size, size):
                img = resize_u8(img, size, size)
            images.append(img)
            labels.append(label)
    return np.stack(images), np.asarray(labels), [d.name for d in class_dirs]


# --- resizing and network input ---------------------------------------------

def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the first two axes of ``x`` with half-pixel-centred bilinear sampling."""
    h, w = x.shape[:2]
    if (h, w) == (out_h, out_w):
        return x.astype(np.float64)

    def coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = coords(h, out_h)
    x0, x1, fx = coords(w, out_w)
    x = x.astype(np.float64)
    extra = (None,) * (x.ndim - 2)
    fy = fy[(slice(None), None) + extra]
    fx = fx[(None, slice(None)) + extra]
    top = x[y0][:, x0] * (1 - fx) + x[y0][:, x1] * fx
    bot = x[y1][:, x0] * (1 - fx) + x[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_u8(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    return np.clip(np.rint(bilinear_resize(img, out_h, out_w)), 0, 255).astype(np.uint8)


INPUT_MEAN = 0.5
INPUT_STD = 0.25


def to_network_input(images: np.ndarray, input_size: int) -> np.ndarray:
    """uint8 (N, H, W, C) -> float32 (N, C, s, s), standardized with fixed constants.

    Pixels map to ``(v / 255 - INPUT_MEAN) / INPUT_STD``, i.e. [-2, 2].
    """
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    n, h, w, c = images.shape
    if (h, w) != (input_size, input_size):
        x = np.stack([bilinear_resize(im, input_size, input_size) for im in images])
    else:
        x = images.astype(np.float64)
    x = (x / 255.0 - INPUT_MEAN) / INPUT_STD
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2), dtype=np.float32)


# --- distorted sets and their cache files -----------------------------------

def item_seed(base_seed: int, item_id: int, kind: Kind, level: float) -> int:
    ss = np.random.SeedSequence([base_seed, int(item_id), Kind(kind).code, int(level)])
    return int(ss.generate_state(2, np.uint32).view(np.uint64)[0] >> np.uint64(1))


def distort_dataset(ds: LabeledDataset, kind: Kind, level: float, seed: int) -> LabeledDataset:
    """Apply one (kind, level) to every image; noise seeds derive from item ids."""
    kind = Kind(kind)
    if kind is Kind.PRISTINE:
        return ds
    out = np.empty_like(ds.images)
    for i, (img, item) in enumerate(zip(ds.images, ds.ids)):
        out[i] = DistortionSpec(kind, level, item_seed(seed, item, kind, level)).apply(img)
    return LabeledDataset(out, ds.labels, ds.class_names, ds.split, ds.ids)


def distort_uniform(ds: LabeledDataset, kind: Kind, seed: int) -> LabeledDataset:
    """Distort every image at a level drawn uniformly from the kind's grid."""
    kind = Kind(kind)
    if kind is Kind.PRISTINE:
        return ds
    grid = distortion.level_grid(kind)
    rng = np.random.default_rng([seed, kind.code])
    levels = rng.integers(len(grid), size=len(ds))
    out = np.empty_like(ds.images)
    for i, (img, item, li) in enumerate(zip(ds.images, ds.ids, levels)):
        level = grid[li]
        out[i] = DistortionSpec(kind, level, item_seed(seed, item, kind, level)).apply(img)
    return LabeledDataset(out, ds.labels, ds.class_names, ds.split, ds.ids)


def cache_filename(split: str, kind: Kind, level: float) -> str:
    return f"{split}_{Kind(kind).value}_{level:g}.bin"


def save_distorted(directory: Path, ds: LabeledDataset, kind: Kind, level: float) -> Path:
    path = Path(directory) / cache_filename(ds.split, kind, level)
    header = {"format": "distorted-dataset", "split": ds.split, "kind": Kind(kind).value,
              "level": level, "labels": ds.labels.tolist(), "ids": ds.ids.tolist(),
              "class_names": ds.class_names}
    checkpoint.save(path, header, [ds.images.astype(np.float32)])
    return path


def load_distorted(path: Path) -> tuple[LabeledDataset, Kind, float]:
    header, tensors = checkpoint.load(path)
    if header.get("format") != "distorted-dataset" or len(tensors) != 1:
        raise DatasetError(f"{path} is not a distorted-dataset cache file")
    images = tensors[0].astype(np.uint8)
    ds = LabeledDataset(images, header["labels"], header["class_names"], header["split"],
                        np.asarray(header["ids"]))
    return ds, Kind(header["kind"]), header["level"]

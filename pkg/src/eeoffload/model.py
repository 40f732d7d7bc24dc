"""Early-exit classifier with one expert branch per (exit point, distortion kind).

Exit ids run 1..E for the side exits on the device and E+1 for the final
exit that lives behind the partition point. The partition point is the
backbone layer tapped by the last side exit; its output is what gets
offloaded.
"""
from __future__ import annotations

import copy
import enum
import hashlib
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .distortion import KINDS, Kind
from .errors import BackwardError, CheckpointError, MissingBranchError, ShapeError
from .nn import checkpoint
from .nn.functional import max_confidence
from .nn.layers import Conv2d, Dense, GlobalAvgPool, MaxPool2d, Parameter, ReLU
from .nn.network import Sequential, init_layers, layer_shapes

DEFAULT_EXIT_FRACTIONS = (0.25, 0.5, 0.75)


class ExitTaken(str, enum.Enum):
    SIDE = "side"
    FINAL = "final"
    FALLBACK = "fallback"


@dataclass(frozen=True)
class BranchRecord:
    exit_id: int
    predicted_class: int
    confidence: float


@dataclass(frozen=True)
class InferenceResult:
    predicted_class: int
    confidence: float
    exit_taken: ExitTaken
    exit_id: int
    per_branch: tuple[BranchRecord, ...]
    offloaded: bool

    @property
    def exit_label(self) -> str:
        if self.exit_taken is ExitTaken.SIDE:
            return f"side{self.exit_id}"
        return self.exit_taken.value


@dataclass
class EdgeOutcome:
    result: InferenceResult | None
    payload: np.ndarray | None = None
    per_branch: list[BranchRecord] = field(default_factory=list)

    @property
    def offload(self) -> bool:
        return self.result is None


def decide_exit(conf: float, p_tar: float) -> bool:
    """True when a branch is confident enough to end the inference."""
    return conf >= p_tar


def calibrated_confidence(z, temperature: float) -> tuple[int, float]:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z64 = np.asarray(z, dtype=np.float64).reshape(-1)
    return max_confidence(z64 / temperature)


def resolve_fallback(records: Sequence[BranchRecord]) -> BranchRecord:
    """Most confident record; ties go to the lowest exit id."""
    best = None
    for rec in sorted(records, key=lambda r: r.exit_id):
        if best is None or rec.confidence > best.confidence:
            best = rec
    if best is None:
        raise ValueError("fallback needs at least one branch record")
    return best


class Branch:
    def __init__(self, in_channels: int, num_classes: int, kind: Kind, temperature: float = 1.0):
        self.kind = Kind(kind)
        self.temperature = float(temperature)
        self.head = Sequential([GlobalAvgPool(), Dense(in_channels, num_classes)], (in_channels, 1, 1))
        self.in_channels = in_channels

    @property
    def dense(self) -> Dense:
        return self.head.layers[1]

    def parameters(self) -> list[Parameter]:
        return self.head.parameters()

    def logits(self, activations: np.ndarray) -> np.ndarray:
        if activations.ndim != 4 or activations.shape[1] != self.in_channels:
            raise ShapeError("branch activations (N, C, H, W)", (None, self.in_channels), activations.shape)
        return self.head.apply(activations)

    def copy_weights_from(self, other: "Branch") -> None:
        for dst, src in zip(self.parameters(), other.parameters()):
            dst.value[...] = src.value
            dst.reset_state()
        self.temperature = other.temperature


def default_backbone(in_channels: int = 3, width: int = 16) -> list:
    w = width
    return [
        Conv2d(in_channels, w, 3, padding=1), ReLU(), MaxPool2d(2),
        Conv2d(w, 2 * w, 3, padding=1), ReLU(), MaxPool2d(2),
        Conv2d(2 * w, 2 * w, 3, padding=1), ReLU(),
        Conv2d(2 * w, 4 * w, 3, padding=1), ReLU(), MaxPool2d(2),
        Conv2d(4 * w, 4 * w, 3, padding=1), ReLU(),
    ]


def place_exits(backbone: Sequential, fractions: Sequence[float] = DEFAULT_EXIT_FRACTIONS) -> list[int]:
    """Tap positions whose cumulative MAC share is closest to each fraction.

    Taps sit after ReLU or pooling layers and never after the last layer.
    Among positions with equal cumulative cost the later one is used, so a
    tap lands after a pooling layer when the pool follows immediately.
    """
    macs = np.cumsum(backbone.macs(), dtype=np.float64)
    share = macs / macs[-1]
    last = len(backbone.layers) - 1
    candidates = [i for i, layer in enumerate(backbone.layers)
                  if isinstance(layer, (ReLU, MaxPool2d)) and i < last]
    chosen: list[int] = []
    for f in fractions:
        pool = [i for i in candidates if not chosen or i > chosen[-1]]
        if not pool:
            raise ValueError("backbone too shallow for the requested exits")
        # key: distance, then prefer later index on ties
        chosen.append(min(pool, key=lambda i: (round(abs(share[i] - f), 12), -i)))
    return chosen


class EarlyExitModel:
    def __init__(self, backbone: Sequential, exit_positions: Sequence[int], num_classes: int,
                 kinds: Iterable[Kind] = KINDS, class_names: Sequence[str] | None = None):
        self.backbone = backbone
        self.exit_positions = list(exit_positions)
        if any(b <= a for a, b in zip(self.exit_positions, self.exit_positions[1:])):
            raise ValueError("exit positions must be strictly increasing")
        if not self.exit_positions or self.exit_positions[-1] >= len(backbone.layers) - 1:
            raise ValueError("last side exit must precede the final backbone layer")
        self.num_classes = num_classes
        self.class_names = list(class_names) if class_names else [str(i) for i in range(num_classes)]
        self.branches: dict[tuple[int, Kind], Branch] = {}
        for kind in kinds:
            self.add_kind(kind)
        self.finalized = False
        self._tap_exit = {pos: i + 1 for i, pos in enumerate(self.exit_positions)}

    # ---- structure -------------------------------------------------------
    @classmethod
    def build(cls, num_classes: int, input_shape=(3, 32, 32), width: int = 16,
              kinds: Iterable[Kind] = KINDS, class_names=None) -> "EarlyExitModel":
        bb = Sequential(default_backbone(input_shape[0], width), input_shape)
        return cls(bb, place_exits(bb), num_classes, kinds, class_names)

    @property
    def num_side_exits(self) -> int:
        return len(self.exit_positions)

    @property
    def final_exit(self) -> int:
        return self.num_side_exits + 1

    @property
    def exit_ids(self) -> list[int]:
        return list(range(1, self.final_exit + 1))

    @property
    def partition_point(self) -> int:
        return self.exit_positions[-1]

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.backbone.input_shape

    @property
    def partition_shape(self) -> tuple[int, ...]:
        return self.backbone.shapes[self.partition_point + 1]

    @property
    def kinds(self) -> list[Kind]:
        return [k for k in KINDS if (self.final_exit, k) in self.branches]

    def tap_position(self, exit_id: int) -> int:
        if exit_id == self.final_exit:
            return len(self.backbone.layers) - 1
        return self.exit_positions[exit_id - 1]

    def add_kind(self, kind: Kind) -> None:
        kind = Kind(kind)
        for e in range(1, len(self.exit_positions) + 2):
            pos = self.exit_positions[e - 1] if e <= len(self.exit_positions) else len(self.backbone.layers) - 1
            channels = self.backbone.shapes[pos + 1][0]
            self.branches[(e, kind)] = Branch(channels, self.num_classes, kind)

    def branch(self, exit_id: int, kind: Kind) -> Branch:
        try:
            return self.branches[(exit_id, Kind(kind))]
        except (KeyError, ValueError):
            raise MissingBranchError(exit_id, kind) from None

    def branch_set(self, kind: Kind) -> list[Branch]:
        return [self.branch(e, kind) for e in self.exit_ids]

    def backbone_parameters(self) -> list[Parameter]:
        return self.backbone.parameters()

    def head_parameters(self, kind: Kind) -> list[Parameter]:
        return [p for b in self.branch_set(kind) for p in b.parameters()]

    def init_xavier(self, rng: np.random.Generator) -> None:
        init_layers(self.backbone.layers, rng)
        for key in sorted(self.branches, key=lambda k: (k[1].code, k[0])):
            init_layers(self.branches[key].head.layers, rng)

    def set_backbone_trainable(self, trainable: bool) -> None:
        for p in self.backbone_parameters():
            p.trainable = trainable

    def finalize(self) -> "EarlyExitModel":
        """Mark the model read-only; training entry points refuse afterwards."""
        self.finalized = True
        for p in self.backbone_parameters():
            p.trainable = False
        for b in self.branches.values():
            for p in b.parameters():
                p.trainable = False
        self._model_id = None
        return self

    def clone(self) -> "EarlyExitModel":
        return copy.deepcopy(self)

    # ---- inference ---------------------------------------------------------
    def branch_logits(self, exit_id: int, kind: Kind, activations: np.ndarray) -> np.ndarray:
        return self.branch(exit_id, kind).logits(activations)

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if not np.issubdtype(x.dtype, np.floating):
            x = x.astype(np.float32)
        if x.ndim == 3:
            x = x[None]
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError("model input", self.input_shape, tuple(x.shape[1:]))
        return x

    def all_logits(self, x: np.ndarray, kind: Kind) -> list[np.ndarray]:
        """Logits of every branch of ``kind`` for a batch, no early exit."""
        x = self._check_input(x)
        out = []
        for i, layer in enumerate(self.backbone.layers):
            x = layer.apply(x)
            if i in self._tap_exit:
                out.append(self.branch_logits(self._tap_exit[i], kind, x))
        out.append(self.branch_logits(self.final_exit, kind, x))
        return out

    def backbone_activations(self, x: np.ndarray) -> list[np.ndarray]:
        x = self._check_input(x)
        acts = []
        for layer in self.backbone.layers:
            x = layer.apply(x)
            acts.append(x)
        return acts

    def _record(self, exit_id: int, kind: Kind, acts: np.ndarray) -> BranchRecord:
        branch = self.branch(exit_id, kind)
        cls, conf = calibrated_confidence(branch.logits(acts)[0], branch.temperature)
        return BranchRecord(exit_id, cls, conf)

    def edge_forward(self, kind: Kind, x: np.ndarray, p_tar: float,
                     on_layer: Callable[[int], None] | None = None) -> EdgeOutcome:
        """Run the device half for one sample, stopping at the first confident exit."""
        x = self._check_input(x)
        if x.shape[0] != 1:
            raise ShapeError("edge_forward batch", 1, x.shape[0])
        kind = Kind(kind)
        records: list[BranchRecord] = []
        pos = 0
        for exit_id, tap in enumerate(self.exit_positions, start=1):
            x = self.backbone.apply(x, pos, tap + 1, on_layer)
            pos = tap + 1
            rec = self._record(exit_id, kind, x)
            records.append(rec)
            if decide_exit(rec.confidence, p_tar):
                res = InferenceResult(rec.predicted_class, rec.confidence, ExitTaken.SIDE, exit_id,
                                      tuple(records), offloaded=False)
                return EdgeOutcome(res, None, records)
        return EdgeOutcome(None, x[0], records)

    def cloud_forward(self, kind: Kind, activations: np.ndarray, per_branch: Sequence[BranchRecord],
                      p_tar: float, on_layer: Callable[[int], None] | None = None) -> InferenceResult:
        """Finish an offloaded inference from the partition-point activations."""
        a = np.asarray(activations, dtype=np.float32)
        if a.ndim == len(self.partition_shape):
            a = a[None]
        if tuple(a.shape[1:]) != self.partition_shape or a.shape[0] != 1:
            raise ShapeError("partition activations", self.partition_shape, tuple(a.shape[1:]))
        x = self.backbone.apply(a, self.partition_point + 1, None, on_layer)
        rec = self._record(self.final_exit, Kind(kind), x)
        records = tuple(per_branch) + (rec,)
        if decide_exit(rec.confidence, p_tar):
            return InferenceResult(rec.predicted_class, rec.confidence, ExitTaken.FINAL, rec.exit_id,
                                   records, offloaded=True)
        best = resolve_fallback(records)
        return InferenceResult(best.predicted_class, best.confidence, ExitTaken.FALLBACK, best.exit_id,
                               records, offloaded=True)

    def infer(self, kind: Kind, x: np.ndarray, p_tar: float) -> InferenceResult:
        """Single-process inference: edge half, then cloud half if needed."""
        out = self.edge_forward(kind, x, p_tar)
        if out.result is not None:
            return out.result
        return self.cloud_forward(kind, out.payload, out.per_branch, p_tar)

    def decide_batch(self, logits: list[np.ndarray], kind: Kind, p_tar: float) -> list[InferenceResult]:
        """Apply the exit policy to precomputed per-branch logits of a batch.

        Equivalent to :meth:`infer` per sample, given the same logits.
        """
        temps = [self.branch(e, kind).temperature for e in self.exit_ids]
        results = []
        for n in range(logits[0].shape[0]):
            records = []
            res = None
            for e, z, t in zip(self.exit_ids, logits, temps):
                cls, conf = calibrated_confidence(z[n], t)
                records.append(BranchRecord(e, cls, conf))
                if decide_exit(conf, p_tar):
                    taken = ExitTaken.SIDE if e < self.final_exit else ExitTaken.FINAL
                    res = InferenceResult(cls, conf, taken, e, tuple(records), offloaded=e == self.final_exit)
                    break
            if res is None:
                best = resolve_fallback(records)
                res = InferenceResult(best.predicted_class, best.confidence, ExitTaken.FALLBACK,
                                      best.exit_id, tuple(records), offloaded=True)
            results.append(res)
        return results

    # ---- cost model ----------------------------------------------------------
    def edge_macs(self, exit_id: int) -> int:
        """MACs spent on the device when inference stops at side exit ``exit_id``
        (or at the partition point, for ``exit_id == final_exit``)."""
        layer_macs = self.backbone.macs()
        stop = self.tap_position(min(exit_id, self.num_side_exits))
        total = sum(layer_macs[:stop + 1])
        for e in range(1, min(exit_id, self.num_side_exits) + 1):
            total += self._branch_macs(e)
        return total

    def cloud_macs(self) -> int:
        layer_macs = self.backbone.macs()
        return sum(layer_macs[self.partition_point + 1:]) + self._branch_macs(self.final_exit)

    def _branch_macs(self, exit_id: int) -> int:
        shape = self.backbone.shapes[self.tap_position(exit_id) + 1]
        b = self.branches[(exit_id, self.kinds[0])]
        return sum(layer.macs(s) for layer, s in zip(b.head.layers, layer_shapes(b.head.layers, shape)))

    # ---- training graph ------------------------------------------------------
    def forward_train(self, x: np.ndarray, kind: Kind) -> list[np.ndarray]:
        if self.finalized:
            raise RuntimeError("model is finalized; training is not allowed")
        kind = Kind(kind)
        self._train_kind = kind
        self._train_backbone = any(p.trainable for p in self.backbone_parameters())
        x = self._check_input(x)
        out = []
        for i, layer in enumerate(self.backbone.layers):
            x = layer.forward(x) if self._train_backbone else layer.apply(x)
            if i in self._tap_exit:
                out.append(self.branch(self._tap_exit[i], kind).head.forward(x))
        out.append(self.branch(self.final_exit, kind).head.forward(x))
        return out

    def backward(self, grads: Sequence[np.ndarray]) -> None:
        kind = getattr(self, "_train_kind", None)
        if kind is None:
            raise BackwardError("backward called without a preceding forward_train")
        self._train_kind = None
        tap_grads = {}
        for e, g in zip(self.exit_ids, grads):
            tap_grads[self.tap_position(e)] = self.branch(e, kind).head.backward(g)
        if not self._train_backbone:
            return
        g = None
        for i in range(len(self.backbone.layers) - 1, -1, -1):
            if i in tap_grads:
                g = tap_grads[i] if g is None else g + tap_grads[i]
            g = self.backbone.layers[i].backward(g, input_grad=i > 0)

    # ---- persistence -------------------------------------------------------
    def _ordered_branch_keys(self) -> list[tuple[int, Kind]]:
        return sorted(self.branches, key=lambda k: (k[1].code, k[0]))

    def to_bytes(self) -> bytes:
        keys = self._ordered_branch_keys()
        header = {
            "format": "early-exit-model",
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "class_names": self.class_names,
            "backbone": self.backbone.table(),
            "exit_positions": self.exit_positions,
            "branches": [{"exit": e, "kind": k.value, "temperature": self.branches[(e, k)].temperature,
                          "in_channels": self.branches[(e, k)].in_channels} for e, k in keys],
        }
        tensors = [p.value for p in self.backbone_parameters()]
        for key in keys:
            tensors.extend(p.value for p in self.branches[key].parameters())
        return checkpoint.encode(header, tensors)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "EarlyExitModel":
        header, tensors = checkpoint.decode(buf)
        if header.get("format") != "early-exit-model":
            raise CheckpointError("not an early-exit model checkpoint")
        bb = Sequential.from_table(header["backbone"], header["input_shape"])
        model = cls(bb, header["exit_positions"], header["num_classes"], kinds=(),
                    class_names=header["class_names"])
        for entry in header["branches"]:
            b = Branch(entry["in_channels"], model.num_classes, entry["kind"], entry["temperature"])
            model.branches[(entry["exit"], b.kind)] = b
        params = model.backbone_parameters()
        for key in model._ordered_branch_keys():
            params += model.branches[key].parameters()
        if len(params) != len(tensors):
            raise CheckpointError(f"checkpoint has {len(tensors)} tensors, model needs {len(params)}")
        for p, t in zip(params, tensors):
            if p.shape != t.shape:
                raise CheckpointError(f"tensor shape {t.shape} does not match parameter {p.shape}")
            p.value[...] = t
        for kind in model.kinds:
            missing = [e for e in model.exit_ids if (e, kind) not in model.branches]
            if missing:
                raise CheckpointError(f"kind {kind} lacks branches at exits {missing}")
        return model

    def save(self, path) -> bytes:
        data = self.to_bytes()
        with open(path, "wb") as fh:
            fh.write(data)
        return data

    @classmethod
    def load(cls, path) -> "EarlyExitModel":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def backbone_digest(self) -> str:
        h = hashlib.sha256()
        h.update(repr(self.backbone.table()).encode())
        for p in self.backbone_parameters():
            h.update(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
        return h.hexdigest()

    @property
    def model_id(self) -> str:
        """Content hash; edge and cloud must agree on it."""
        mid = getattr(self, "_model_id", None)
        if mid is None or not self.finalized:
            mid = hashlib.sha256(self.to_bytes()).hexdigest()[:16]
            if self.finalized:
                self._model_id = mid
        return mid

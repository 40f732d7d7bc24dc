"""Edge and cloud services.

The edge classifies the distortion, runs the device half of the early-exit
model and offloads the partition activations when no side exit is
confident. The cloud finishes the inference and resolves the fallback from
the branch records sent along with the activations.

Under a :class:`VirtualClock` every stage is charged from :class:`CostModel`
instead of being timed, which makes traces reproducible to the bit.
"""
from __future__ import annotations

import enum
import math
import threading
from collections.abc import Callable, Mapping
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import data
from ..classifier import DistortionClassifier, classify_distortion
from ..distortion import Kind
from ..errors import EEOffloadError, ShapeError
from ..model import EarlyExitModel, InferenceResult
from . import codec
from .netem import NetworkEmulator, NetworkProfile, VirtualClock


class Mode(str, enum.Enum):
    EXPERT = "expert"
    PRISTINE_BASELINE = "pristine-baseline"
    FORCED_BLUR = "forced-blur"
    FORCED_NOISE = "forced-noise"

    @property
    def fixed_kind(self) -> Kind | None:
        return {Mode.PRISTINE_BASELINE: Kind.PRISTINE, Mode.FORCED_BLUR: Kind.BLUR,
                Mode.FORCED_NOISE: Kind.NOISE}.get(self)


@dataclass(frozen=True)
class CostModel:
    """Throughputs used to charge virtual time."""
    edge_macs_per_ms: float = 2.0e5
    cloud_macs_per_ms: float = 4.0e6
    codec_bytes_per_ms: float = 2.0e5

    def edge_ms(self, macs: float) -> float:
        return macs / self.edge_macs_per_ms

    def cloud_ms(self, macs: float) -> float:
        return macs / self.cloud_macs_per_ms

    def codec_ms(self, nbytes: int) -> float:
        return nbytes / self.codec_bytes_per_ms


def spectrum_macs(height: int, width: int) -> float:
    """Rough cost of a 2-D FFT, counted as MACs."""
    n = height * width
    return 2.5 * n * math.log2(max(n, 2))


@dataclass
class LatencyBreakdown:
    classifier_ms: float = 0.0
    edge_compute_ms: float = 0.0
    serialize_ms: float = 0.0
    emulated_network_ms: float = 0.0
    cloud_compute_ms: float = 0.0
    total_ms: float = 0.0

    def parts_sum(self) -> float:
        return (self.classifier_ms + self.edge_compute_ms + self.serialize_ms
                + self.emulated_network_ms + self.cloud_compute_ms)

    def as_dict(self) -> dict:
        return asdict(self)


class ModelIdMismatch(EEOffloadError):
    pass


class TransportError(EEOffloadError):
    """The cloud could not be reached; ``breakdown`` holds the time spent so far."""

    def __init__(self, message: str, breakdown: LatencyBreakdown):
        super().__init__(message)
        self.breakdown = breakdown


@dataclass
class EdgeReply:
    result: InferenceResult
    latency: LatencyBreakdown
    kind: Kind
    payload_bytes: int = 0


# --- cloud ---------------------------------------------------------------------

class CloudService:
    """Stateless tail executor. Models are shared read-only across requests."""

    def __init__(self, models: EarlyExitModel | Mapping[str, EarlyExitModel], virtual: bool = True,
                 cost: CostModel | None = None):
        if isinstance(models, EarlyExitModel):
            models = {models.model_id: models}
        self.models = dict(models)
        self.virtual = virtual
        self.cost = cost or CostModel()

    def handle(self, req: codec.OffloadRequest) -> codec.OffloadResponse:
        model = self.models.get(req.model_id)
        if model is None:
            raise ModelIdMismatch(f"unknown model_id {req.model_id!r}")
        if req.partition_point != model.partition_point:
            raise ShapeError("partition point", model.partition_point, req.partition_point)
        clock = VirtualClock() if self.virtual else _wall()
        result, ms = clock.measure(
            lambda: model.cloud_forward(req.kind, req.payload, req.per_branch, req.p_tar),
            self.cost.cloud_ms(model.cloud_macs()))
        return codec.OffloadResponse(result, ms)

    def handle_frame(self, frame: bytes) -> bytes:
        """Bytes in, bytes out; failures become error frames, never exceptions."""
        try:
            req = codec.decode_request(frame)
        except codec.CodecError as exc:
            return codec.encode_error(codec.ERR_BAD_REQUEST, str(exc))
        except EEOffloadError as exc:
            return codec.encode_error(codec.ERR_BAD_REQUEST, str(exc))
        try:
            return codec.encode_response(self.handle(req))
        except ModelIdMismatch as exc:
            return codec.encode_error(codec.ERR_UNKNOWN_MODEL, str(exc))
        except ShapeError as exc:
            return codec.encode_error(codec.ERR_SHAPE, str(exc))
        except Exception as exc:  # noqa: BLE001 - report, keep serving
            return codec.encode_error(codec.ERR_INTERNAL, f"{type(exc).__name__}: {exc}")


def _wall():
    from .netem import WallClock
    return WallClock()


# --- edge ----------------------------------------------------------------------

KindSelector = Callable[[np.ndarray], Kind]


class EdgeService:
    """Device-side pipeline for one model, one network profile and one mode.

    ``transport`` is anything with ``send(frame: bytes) -> bytes``.
    ``classifier`` is a trained :class:`DistortionClassifier` or any callable
    mapping an image to a :class:`Kind` (used in expert mode only).
    """

    def __init__(self, model: EarlyExitModel, transport, profile: NetworkProfile, p_tar: float = 0.8,
                 mode: Mode | str = Mode.EXPERT, classifier: DistortionClassifier | KindSelector | None = None,
                 clock=None, cost: CostModel | None = None, jitter_ms: float = 0.0, seed: int = 0,
                 cloud_model_id: str | None = None):
        if not 0.0 <= p_tar <= 1.0:
            raise ValueError(f"p_tar {p_tar} outside [0, 1]")
        self.model = model
        self.transport = transport
        self.p_tar = float(p_tar)
        self.mode = Mode(mode)
        if self.mode is Mode.EXPERT and classifier is None:
            raise ValueError("expert mode needs a distortion classifier")
        if cloud_model_id is not None and cloud_model_id != model.model_id:
            raise ModelIdMismatch(f"edge model {model.model_id} does not match cloud model {cloud_model_id}")
        self.classifier = classifier
        self.clock = clock or VirtualClock()
        self.cost = cost or CostModel()
        self.emulator = NetworkEmulator(profile, self.clock, jitter_ms, seed)
        self._lock = threading.Lock()

    @property
    def profile(self) -> NetworkProfile:
        return self.emulator.profile

    def _select_kind(self, image: np.ndarray) -> tuple[Kind, float]:
        fixed = self.mode.fixed_kind
        if fixed is not None:
            return fixed, 0.0
        clf = self.classifier
        if isinstance(clf, DistortionClassifier):
            macs = clf.macs() + spectrum_macs(image.shape[0], image.shape[1])
            return self.clock.measure(lambda: classify_distortion(clf, image), self.cost.edge_ms(macs))
        kind, ms = self.clock.measure(lambda: Kind(clf(image)), 0.0)
        return kind, ms

    def handle(self, image: np.ndarray) -> EdgeReply:
        """Classify one uint8 image end to end. The counter starts here."""
        if self.clock.virtual:
            with self._lock:
                return self._handle(image)
        return self._handle(image)

    def _handle(self, image: np.ndarray) -> EdgeReply:
        model, clock = self.model, self.clock
        lat = LatencyBreakdown()
        start = clock.now_ms()
        kind, lat.classifier_ms = self._select_kind(image)
        x = data.to_network_input(image, model.input_shape[-1])
        out, _ = clock.measure(lambda: model.edge_forward(kind, x, self.p_tar), 0.0)
        reached = out.result.exit_id if out.result is not None else model.final_exit
        if clock.virtual:
            lat.edge_compute_ms = self.cost.edge_ms(model.edge_macs(reached))
            clock.advance(lat.edge_compute_ms)
        else:
            lat.edge_compute_ms = clock.now_ms() - start - lat.classifier_ms
        if out.result is not None:
            lat.total_ms = clock.now_ms() - start
            return EdgeReply(out.result, lat, kind)

        req = codec.OffloadRequest(model.model_id, kind, model.partition_point, out.payload,
                                   tuple(out.per_branch), self.p_tar)
        frame, enc_ms = clock.measure(lambda: codec.encode_request(req), 0.0)
        if clock.virtual:
            enc_ms = self.cost.codec_ms(len(frame))
            clock.advance(enc_ms)
        lat.emulated_network_ms = self.emulator.transfer(len(frame))
        try:
            reply = self.transport.send(frame)
        except (OSError, EEOffloadError) as exc:
            lat.serialize_ms = enc_ms
            lat.total_ms = clock.now_ms() - start
            raise TransportError(f"cloud unreachable: {exc}", lat) from exc
        resp, dec_ms = clock.measure(lambda: codec.decode_response(reply), 0.0)
        if clock.virtual:
            dec_ms = self.cost.codec_ms(len(reply))
            clock.advance(dec_ms)
        lat.serialize_ms = enc_ms + dec_ms
        lat.cloud_compute_ms = resp.cloud_compute_ms
        clock.account(resp.cloud_compute_ms)
        lat.total_ms = clock.now_ms() - start
        if not clock.virtual:
            # wall mode: whatever the round trip cost beyond emulation and remote compute
            lat.emulated_network_ms += max(0.0, lat.total_ms - lat.parts_sum())
        return EdgeReply(resp.result, lat, kind, len(frame))


class InProcessTransport:
    """Hands frames straight to a :class:`CloudService`; counts calls."""

    def __init__(self, cloud: CloudService):
        self.cloud = cloud
        self.calls = 0

    def send(self, frame: bytes) -> bytes:
        self.calls += 1
        return self.cloud.handle_frame(frame)

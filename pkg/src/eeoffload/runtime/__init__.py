"""Edge/cloud services, wire codec, transports and network emulation."""
from .codec import (
    BadMagicError,
    CodecError,
    FrameLengthError,
    OffloadRequest,
    OffloadResponse,
    RemoteError,
    TruncatedFrameError,
    VersionMismatchError,
    decode_request,
    decode_response,
    encode_request,
    encode_response,
)
from .netem import PRESETS, NetworkEmulator, NetworkProfile, VirtualClock, WallClock, emulate_transfer
from .services import CloudService, CostModel, EdgeService, InProcessTransport, LatencyBreakdown, Mode

__all__ = [
    "BadMagicError", "CloudService", "CodecError", "CostModel", "EdgeService", "FrameLengthError",
    "InProcessTransport", "LatencyBreakdown", "Mode", "NetworkEmulator", "NetworkProfile",
    "OffloadRequest", "OffloadResponse", "PRESETS", "RemoteError", "TruncatedFrameError",
    "VersionMismatchError", "VirtualClock", "WallClock", "decode_request", "decode_response",
    "emulate_transfer", "encode_request", "encode_response",
]

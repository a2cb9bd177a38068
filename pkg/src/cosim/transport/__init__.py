"""Frame exchange between federates: TCP sockets, shared files, virtual loopback."""

from .base import FrameEndpoint, SeqTracker, TransportDisconnected, TransportTimeout
from .fileshare import (
    CorruptRecord,
    FileSharePublisher,
    FileShareWatcher,
    PublishConflict,
    SharedFileRecord,
    fileshare_publish,
    fileshare_watch,
)
from .frame import (
    BadMagic,
    Frame,
    FrameBuffer,
    FrameDecodeError,
    FrameKind,
    LengthMismatch,
    TruncatedFrame,
    decode_frame,
    encode_frame,
)
from .latency import LatencyModel, stream_rng
from .loopback import LoopbackEndpoint, LoopbackLink, loopback_pair
from .sockets import DEFAULT_PORT, DelayedSender, FramedConnection, FramedListener, connect

__all__ = [
    "BadMagic",
    "CorruptRecord",
    "DEFAULT_PORT",
    "DelayedSender",
    "FileSharePublisher",
    "FileShareWatcher",
    "Frame",
    "FrameBuffer",
    "FrameDecodeError",
    "FrameEndpoint",
    "FrameKind",
    "FramedConnection",
    "FramedListener",
    "LatencyModel",
    "LengthMismatch",
    "LoopbackEndpoint",
    "LoopbackLink",
    "PublishConflict",
    "SeqTracker",
    "SharedFileRecord",
    "TransportDisconnected",
    "TransportTimeout",
    "TruncatedFrame",
    "connect",
    "decode_frame",
    "encode_frame",
    "fileshare_publish",
    "fileshare_watch",
    "loopback_pair",
    "stream_rng",
]

"""Binary framing for the uplink/downlink link.

Frame layout (little-endian)::

    b"NVFL" | u16 version | u8 type | u32 payload_len | payload | u32 crc32(payload)
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from ..policy import Detection
from ..world import DepthImage, UavState, Vec3, VelocityAction

MAGIC = b"NVFL"
VERSION = 1
MAX_PAYLOAD = 4 * 1024 * 1024

T_UPLINK = 0x01
T_DOWNLINK = 0x02
T_SESSION_INIT = 0x03
T_HEARTBEAT = 0x04
T_ERROR = 0x7F

_HEAD = struct.Struct("<4sHBI")
HEADER_SIZE = _HEAD.size  # 11
CRC_SIZE = 4

_UP_HEAD = struct.Struct("<QQ7dHH")
_DOWN = struct.Struct("<Q3fQ")

E_PROTOCOL = 1
E_ORDER = 2
E_STATE = 3
E_INTERNAL = 4


class ProtocolError(Exception):
    pass


class BadMagicError(ProtocolError):
    pass


class CrcError(ProtocolError):
    pass


class TruncatedError(ProtocolError):
    pass


class OversizeError(ProtocolError):
    pass


class VersionError(ProtocolError):
    pass


class PayloadError(ProtocolError):
    """Well-framed message whose payload does not parse for its type."""


@dataclass(frozen=True, eq=False)
class Uplink:
    frame_id: int
    timestamp_us: int
    state: UavState
    depth: DepthImage
    detection: Detection | None = None  # carried in the two spare state slots; NaN = none

    def __eq__(self, other):
        if not isinstance(other, Uplink):
            return NotImplemented
        return (self.frame_id == other.frame_id and self.timestamp_us == other.timestamp_us
                and self.state == other.state and self.depth == other.depth and self.detection == other.detection)


@dataclass(frozen=True)
class Downlink:
    frame_id: int
    action: VelocityAction
    server_latency_us: int = 0


@dataclass(frozen=True)
class SessionInit:
    instruction: str
    goal_hint: float | None = None
    goal_position: Vec3 | None = None


@dataclass(frozen=True)
class Heartbeat:
    pass


@dataclass(frozen=True)
class ErrorMsg:
    code: int
    message: str


Message = Uplink | Downlink | SessionInit | Heartbeat | ErrorMsg


def _pack_payload(msg) -> tuple[int, bytes]:
    if isinstance(msg, Uplink):
        s, p = msg.state, msg.state.position
        det = msg.detection
        b, r = (det.bearing, det.range) if det is not None else (math.nan, math.nan)
        d = msg.depth
        head = _UP_HEAD.pack(msg.frame_id, msg.timestamp_us, p.x, p.y, p.z, s.yaw, s.clock, b, r, d.width, d.height)
        return T_UPLINK, head + np.ascontiguousarray(d.ranges, dtype="<f4").tobytes()
    if isinstance(msg, Downlink):
        a = msg.action
        return T_DOWNLINK, _DOWN.pack(msg.frame_id, a.v_forward, a.yaw_rate, a.v_vertical, msg.server_latency_us)
    if isinstance(msg, SessionInit):
        text = msg.instruction.encode("utf-8")
        if len(text) > 0xFFFF:
            raise ValueError("instruction too long")
        hint = math.nan if msg.goal_hint is None else msg.goal_hint
        g = msg.goal_position
        tail = struct.pack("<dB3d", hint, g is not None, *((g.x, g.y, g.z) if g is not None else (0.0, 0.0, 0.0)))
        return T_SESSION_INIT, struct.pack("<H", len(text)) + text + tail
    if isinstance(msg, Heartbeat):
        return T_HEARTBEAT, b""
    if isinstance(msg, ErrorMsg):
        text = msg.message.encode("utf-8")[:0xFFFF]
        return T_ERROR, struct.pack("<HH", msg.code, len(text)) + text
    raise TypeError(f"cannot encode {type(msg).__name__}")


def encode_frame(msg) -> bytes:
    mtype, payload = _pack_payload(msg)
    if len(payload) > MAX_PAYLOAD:
        raise OversizeError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return _HEAD.pack(MAGIC, VERSION, mtype, len(payload)) + payload + struct.pack("<I", zlib.crc32(payload))


def parse_header(head: bytes) -> tuple[int, int]:
    """Validate an 11-byte header; returns (msg_type, payload_len)."""
    if len(head) < HEADER_SIZE:
        raise TruncatedError(f"header needs {HEADER_SIZE} bytes, got {len(head)}")
    magic, version, mtype, n = _HEAD.unpack_from(head, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"unsupported protocol version {version}")
    if n > MAX_PAYLOAD:
        raise OversizeError(f"declared payload {n} bytes exceeds {MAX_PAYLOAD}")
    return mtype, n


def _finite_or_none(x: float) -> float | None:
    return None if math.isnan(x) else x


def decode_payload(mtype: int, payload: bytes):
    try:
        if mtype == T_UPLINK:
            fid, ts, x, y, z, yaw, clock, b, r, w, h = _UP_HEAD.unpack_from(payload, 0)
            if len(payload) != _UP_HEAD.size + 4 * w * h or w == 0 or h == 0:
                raise PayloadError("uplink depth block size mismatch")
            ranges = np.frombuffer(payload, dtype="<f4", offset=_UP_HEAD.size).reshape(h, w).astype(np.float32)
            det = None if (math.isnan(b) or math.isnan(r)) else Detection(b, r)
            return Uplink(fid, ts, UavState(Vec3(x, y, z), yaw, clock), DepthImage(w, h, ranges), det)
        if mtype == T_DOWNLINK:
            if len(payload) != _DOWN.size:
                raise PayloadError("downlink payload size mismatch")
            fid, v, wz, vz, lat = _DOWN.unpack(payload)
            return Downlink(fid, VelocityAction(v, wz, vz), lat)
        if mtype == T_SESSION_INIT:
            (n,) = struct.unpack_from("<H", payload, 0)
            text = payload[2:2 + n].decode("utf-8")
            if len(payload) != 2 + n + 33:
                raise PayloadError("session init payload size mismatch")
            hint, has_goal, gx, gy, gz = struct.unpack_from("<dB3d", payload, 2 + n)
            if has_goal not in (0, 1):
                raise PayloadError("bad goal flag")
            return SessionInit(text, _finite_or_none(hint), Vec3(gx, gy, gz) if has_goal else None)
        if mtype == T_HEARTBEAT:
            if payload:
                raise PayloadError("heartbeat carries no payload")
            return Heartbeat()
        if mtype == T_ERROR:
            code, n = struct.unpack_from("<HH", payload, 0)
            if len(payload) != 4 + n:
                raise PayloadError("error payload size mismatch")
            return ErrorMsg(code, payload[4:4 + n].decode("utf-8", errors="replace"))
    except PayloadError:
        raise
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise PayloadError(f"malformed payload for type 0x{mtype:02x}: {exc}") from exc
    raise PayloadError(f"unknown message type 0x{mtype:02x}")


def decode_frame(data: bytes):
    """Decode exactly one frame; trailing bytes are an error."""
    msg, used = decode_prefix(data)
    if used != len(data):
        raise PayloadError(f"{len(data) - used} trailing bytes after frame")
    return msg


def decode_prefix(data: bytes):
    """Decode the frame at the start of ``data``; returns (msg, bytes consumed)."""
    mtype, n = parse_header(data[:HEADER_SIZE])
    end = HEADER_SIZE + n + CRC_SIZE
    if len(data) < end:
        raise TruncatedError(f"frame needs {end} bytes, got {len(data)}")
    payload = data[HEADER_SIZE:HEADER_SIZE + n]
    (crc,) = struct.unpack_from("<I", data, HEADER_SIZE + n)
    if zlib.crc32(payload) != crc:
        raise CrcError("payload crc32 mismatch")
    return decode_payload(mtype, payload), end


def _recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if buf:
                raise TruncatedError(f"connection closed after {len(buf)} of {n} bytes")
            raise ConnectionError("connection closed")
        buf += chunk
    return bytes(buf)


def read_frame(sock):
    """Blocking read of one frame from a stream socket."""
    head = _recv_exact(sock, HEADER_SIZE)
    mtype, n = parse_header(head)
    rest = _recv_exact(sock, n + CRC_SIZE)
    payload = rest[:n]
    (crc,) = struct.unpack_from("<I", rest, n)
    if zlib.crc32(payload) != crc:
        raise CrcError("payload crc32 mismatch")
    return decode_payload(mtype, payload)


def write_frame(sock, msg) -> None:
    sock.sendall(encode_frame(msg))

"""Framed binary protocol for sensor frames, poses and joint commands.

Little-endian layout::

    'F' 'M' 'G' | version 0x31 | type u8 | timestamp_us u64 | length u16 | payload | crc32 u32

The CRC (IEEE, as in zlib) covers every byte before it.
"""

import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

MAGIC = b"FMG"
VERSION = 0x31
_HEADER = struct.Struct("<3sBBQH")
HEADER_SIZE = _HEADER.size  # 15
CRC_SIZE = 4
OVERHEAD = HEADER_SIZE + CRC_SIZE


class FrameType(IntEnum):
    SENSOR = 0x01
    POSE = 0x02
    JOINTCMD = 0x03
    BASELINE_START = 0x04
    BASELINE_END = 0x05
    ERROR = 0x06


_FLOAT_COUNTS = {FrameType.SENSOR: (28,), FrameType.POSE: (10,), FrameType.JOINTCMD: (16, 20)}
_CONTROL = (FrameType.BASELINE_START, FrameType.BASELINE_END)


class FrameDecodeError(ValueError):
    pass


class MagicError(FrameDecodeError):
    pass


class VersionError(FrameDecodeError):
    pass


class FrameTypeError(FrameDecodeError):
    pass


class LengthError(FrameDecodeError):
    pass


class ChecksumError(FrameDecodeError):
    pass


@dataclass(frozen=True, eq=False)
class ProtocolFrame:
    type: FrameType
    timestamp_us: int
    payload: object = None  # float32 array, str (ERROR) or None (control)

    def __post_init__(self):
        t = FrameType(self.type)
        object.__setattr__(self, "type", t)
        if not 0 <= self.timestamp_us < 2 ** 64:
            raise ValueError("timestamp must fit in u64")
        if t in _FLOAT_COUNTS:
            p = np.asarray(self.payload, dtype=np.float32).ravel()
            if len(p) not in _FLOAT_COUNTS[t]:
                raise ValueError(f"{t.name} payload needs {_FLOAT_COUNTS[t]} values, got {len(p)}")
            object.__setattr__(self, "payload", p)
        elif t is FrameType.ERROR:
            text = "" if self.payload is None else str(self.payload)
            if len(text.encode("utf-8")) > 0xFFFF:
                raise ValueError("error text too long")
            object.__setattr__(self, "payload", text)
        elif self.payload not in (None, b"", ()):
            raise ValueError(f"{t.name} frames carry no payload")
        else:
            object.__setattr__(self, "payload", None)

    def payload_bytes(self):
        if self.type in _FLOAT_COUNTS:
            return self.payload.astype("<f4").tobytes()
        if self.type is FrameType.ERROR:
            return self.payload.encode("utf-8")
        return b""

    def __eq__(self, other):
        return (isinstance(other, ProtocolFrame) and self.type == other.type
                and self.timestamp_us == other.timestamp_us and self.payload_bytes() == other.payload_bytes())

    def __hash__(self):
        return hash((self.type, self.timestamp_us, self.payload_bytes()))


def sensor_frame(timestamp_us, values):
    return ProtocolFrame(FrameType.SENSOR, timestamp_us, values)


def control_frame(kind, timestamp_us):
    return ProtocolFrame(kind, timestamp_us)


def error_frame(timestamp_us, message):
    return ProtocolFrame(FrameType.ERROR, timestamp_us, message)


def encode_frame(frame):
    payload = frame.payload_bytes()
    body = _HEADER.pack(MAGIC, VERSION, int(frame.type), frame.timestamp_us, len(payload)) + payload
    return body + struct.pack("<I", zlib.crc32(body))


def _check_header(buf):
    """Validate a header; returns (type, timestamp, payload length)."""
    magic, version, ftype, ts, length = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise MagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"unsupported protocol version 0x{version:02x}")
    try:
        ftype = FrameType(ftype)
    except ValueError:
        raise FrameTypeError(f"unknown frame type 0x{ftype:02x}") from None
    if ftype in _FLOAT_COUNTS and length not in [4 * n for n in _FLOAT_COUNTS[ftype]]:
        raise LengthError(f"{ftype.name} payload of {length} bytes")
    if ftype in _CONTROL and length != 0:
        raise LengthError(f"{ftype.name} payload of {length} bytes")
    return ftype, ts, length


def _build(ftype, ts, payload):
    if ftype in _FLOAT_COUNTS:
        return ProtocolFrame(ftype, ts, np.frombuffer(payload, dtype="<f4").astype(np.float32))
    if ftype is FrameType.ERROR:
        try:
            return ProtocolFrame(ftype, ts, payload.decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise LengthError(f"ERROR payload is not UTF-8: {exc}") from None
    return ProtocolFrame(ftype, ts)


def decode_frame(data):
    """Decode exactly one frame from ``data``."""
    data = bytes(data)
    if len(data) < OVERHEAD:
        raise LengthError(f"frame of {len(data)} bytes is shorter than the {OVERHEAD}-byte minimum")
    ftype, ts, length = _check_header(data)
    if len(data) != OVERHEAD + length:
        raise LengthError(f"declared payload {length} bytes, frame holds {len(data) - OVERHEAD}")
    (crc,) = struct.unpack_from("<I", data, HEADER_SIZE + length)
    if crc != zlib.crc32(data[: HEADER_SIZE + length]):
        raise ChecksumError("CRC mismatch")
    return _build(ftype, ts, data[HEADER_SIZE : HEADER_SIZE + length])


class StreamDecoder:
    """Incremental decoder that resynchronizes on the magic after any error.

    ``feed`` returns decoded frames interleaved with the errors met on the
    way (as exception instances). ``skipped`` counts discarded bytes.
    """

    def __init__(self):
        self._buf = bytearray()
        self.skipped = 0

    def feed(self, data):
        self._buf += data
        return self._drain(final=False)

    def finish(self):
        """Flush at end of stream: frames whose declared length overruns the data are given up."""
        return self._drain(final=True)

    def _discard(self, n):
        del self._buf[:n]
        self.skipped += n

    def _drain(self, final):
        out = []
        buf = self._buf
        while True:
            i = buf.find(MAGIC)
            if i < 0:
                keep = 0 if final else min(len(buf), len(MAGIC) - 1)
                self._discard(len(buf) - keep)
                return out
            if i:
                self._discard(i)
            if len(buf) < HEADER_SIZE:
                if final:
                    out.append(LengthError("truncated header at end of stream"))
                    self._discard(len(buf))
                return out
            try:
                ftype, ts, length = _check_header(buf)
            except FrameDecodeError as exc:
                out.append(exc)
                self._discard(1)
                continue
            total = OVERHEAD + length
            if len(buf) < total:
                if not final:
                    return out
                out.append(LengthError(f"truncated frame: need {total} bytes, have {len(buf)}"))
                self._discard(1)
                continue
            frame_bytes = bytes(buf[:total])
            try:
                frame = decode_frame(frame_bytes)
            except FrameDecodeError as exc:
                out.append(exc)
                self._discard(1)
                continue
            del buf[:total]
            out.append(frame)


def decode_stream(data):
    """Decode a complete byte string; returns the list of frames and errors."""
    dec = StreamDecoder()
    return dec.feed(data) + dec.finish()

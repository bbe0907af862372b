"""Wire protocol shared by the data server and the acquisition client.

On connect the server sends one handshake line: a UTF-8 JSON object
{"name", "sample_rate", "channels", "content_type"} terminated by '\\n'.
After that the stream is fixed-size binary frames with no delimiter:
a 4-byte little-endian unsigned sequence counter followed by
channel_count 4-byte little-endian IEEE-754 float32 values.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from rsvpbci.core import DeviceSpec

MAX_HANDSHAKE_BYTES = 65536


class HandshakeMalformed(ConnectionError):
    pass


def handshake_bytes(spec: DeviceSpec) -> bytes:
    obj = {
        "name": spec.name,
        "sample_rate": spec.sample_rate,
        "channels": list(spec.channels),
        "content_type": spec.content_type,
    }
    return (json.dumps(obj) + "\n").encode("utf-8")


def parse_handshake(line: bytes) -> DeviceSpec:
    try:
        obj = json.loads(line.decode("utf-8"))
        return DeviceSpec(
            name=obj["name"],
            sample_rate=float(obj["sample_rate"]),
            channels=tuple(obj["channels"]),
            content_type=obj["content_type"],
        )
    except (ValueError, KeyError, TypeError) as exc:
        raise HandshakeMalformed(f"bad handshake: {exc}") from None


def read_handshake(sock) -> tuple[DeviceSpec, bytes]:
    """Read up to the first newline and parse the device description;
    returns (spec, leftover bytes belonging to the first frames)."""
    buf = bytearray()
    while b"\n" not in buf:
        if len(buf) > MAX_HANDSHAKE_BYTES:
            raise HandshakeMalformed("handshake line too long")
        chunk = sock.recv(4096)
        if not chunk:
            raise HandshakeMalformed("connection closed during handshake")
        buf.extend(chunk)
    line, _, rest = bytes(buf).partition(b"\n")
    return parse_handshake(line), bytes(rest)


def frame_size(channel_count: int) -> int:
    return 4 + 4 * channel_count


def pack_frame(seq: int, values) -> bytes:
    vals = np.asarray(values, dtype="<f4")
    return struct.pack("<I", seq & 0xFFFFFFFF) + vals.tobytes()


def unpack_frame(raw: bytes, channel_count: int):
    seq = struct.unpack_from("<I", raw)[0]
    values = np.frombuffer(raw, dtype="<f4", count=channel_count, offset=4)
    return seq, values.astype(np.float64)

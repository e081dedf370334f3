"""Byte-exact uplink payload codec.

Application payload layout (big-endian), sized for the 51-byte limit of
SF12 uplinks in EU868:

    byte 0      version (high nibble, =1) | msg_type (low nibble)
    bytes 1-2   device id (u16)
    byte 3      sequence number (u8, wraps)
    byte 4      record count (u8, ≤ 11)
    5 + 4k      peer anchor id (u16) and distance in cm (u16) per record;
                0xFFFF marks an invalid/lost measurement
    last 2      battery millivolts (u16)

Total length is 7 + 4 * record_count bytes, at most 51. Distances are
rounded to the nearest centimeter; 0xFFFE cm = 655.34 m is the largest
encodable distance.

Golden vector: device 0x0007, msg_type 1, seq 3, records [(1, 523 cm),
(2, 1187 cm)], battery 3700 mV encodes to
11 00 07 03 02 00 01 02 0B 00 02 04 A3 0E 74 (15 bytes).
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

VERSION = 1
MAX_PAYLOAD_BYTES = 51
MAX_RECORDS = (MAX_PAYLOAD_BYTES - 7) // 4  # = 11
INVALID_DISTANCE_CM = 0xFFFF
MAX_DISTANCE_CM = 0xFFFE
HEADER_LEN = 5
FOOTER_LEN = 2


class MsgType(enum.IntEnum):
    ANCHOR_SELFLOC = 0
    TAG_LOC = 1
    STATUS = 2


class EncodeError(Exception):
    pass


class DecodeError(Exception):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class UplinkFrame:
    """One distance-report payload. Records pair a peer anchor id with a
    centimeter distance; None marks an invalid/lost measurement."""

    msg_type: MsgType
    device_id: int
    seq: int
    records: tuple[tuple[int, int | None], ...] = field(default_factory=tuple)
    battery_mv: int = 3700
    version: int = VERSION

    def encoded_length(self) -> int:
        return HEADER_LEN + 4 * len(self.records) + FOOTER_LEN


def cm_from_m(distance_m: float) -> int:
    """Round a meter distance to wire centimeters; EncodeError on overflow."""
    cm = round(distance_m * 100.0)
    if cm < 0 or cm > MAX_DISTANCE_CM:
        raise EncodeError(f"distance {distance_m} m outside encodable range")
    return cm


def m_from_cm(cm: int) -> float:
    return cm / 100.0


def encode(frame: UplinkFrame) -> bytes:
    if frame.version != VERSION:
        raise EncodeError(f"unsupported version {frame.version}")
    if not 0 <= int(frame.msg_type) <= 0xF:
        raise EncodeError(f"msg_type {frame.msg_type} outside nibble range")
    if len(frame.records) > MAX_RECORDS:
        raise EncodeError(
            f"{len(frame.records)} records exceed the {MAX_RECORDS}-record budget; "
            "split across frames"
        )
    if not 0 <= frame.device_id <= 0xFFFF:
        raise EncodeError(f"device id {frame.device_id} outside u16 range")
    if not 0 <= frame.battery_mv <= 0xFFFF:
        raise EncodeError(f"battery {frame.battery_mv} mV outside u16 range")

    out = bytearray()
    out.append((frame.version << 4) | int(frame.msg_type))
    out += struct.pack(">HBB", frame.device_id, frame.seq & 0xFF, len(frame.records))
    for peer_id, dist_cm in frame.records:
        if not 0 <= peer_id <= 0xFFFF:
            raise EncodeError(f"peer id {peer_id} outside u16 range")
        if dist_cm is None:
            wire = INVALID_DISTANCE_CM
        else:
            if not 0 <= dist_cm <= MAX_DISTANCE_CM:
                raise EncodeError(f"distance {dist_cm} cm outside encodable range")
            wire = dist_cm
        out += struct.pack(">HH", peer_id, wire)
    out += struct.pack(">H", frame.battery_mv)
    assert len(out) == frame.encoded_length() <= MAX_PAYLOAD_BYTES
    return bytes(out)


def decode(data: bytes) -> UplinkFrame:
    if len(data) < HEADER_LEN + FOOTER_LEN:
        raise DecodeError("truncated frame", offset=len(data))
    version = data[0] >> 4
    if version != VERSION:
        raise DecodeError(f"unsupported version {version}", offset=0)
    raw_type = data[0] & 0x0F
    try:
        msg_type = MsgType(raw_type)
    except ValueError:
        raise DecodeError(f"unknown msg_type {raw_type}", offset=0) from None
    device_id, seq, count = struct.unpack_from(">HBB", data, 1)
    expected = HEADER_LEN + 4 * count + FOOTER_LEN
    if len(data) != expected:
        raise DecodeError(
            f"length {len(data)} does not match record_count {count} (expected {expected})",
            offset=min(len(data), expected),
        )
    records = []
    for k in range(count):
        peer_id, wire = struct.unpack_from(">HH", data, HEADER_LEN + 4 * k)
        records.append((peer_id, None if wire == INVALID_DISTANCE_CM else wire))
    (battery_mv,) = struct.unpack_from(">H", data, HEADER_LEN + 4 * count)
    return UplinkFrame(
        msg_type=msg_type,
        device_id=device_id,
        seq=seq,
        records=tuple(records),
        battery_mv=battery_mv,
        version=version,
    )


def split_report(
    device_id: int,
    msg_type: MsgType,
    records: list[tuple[int, int | None]],
    battery_mv: int,
    first_seq: int,
    max_records: int = MAX_RECORDS,
) -> list[UplinkFrame]:
    """Partition a distance report into frames of at most max_records,
    numbered with consecutive (wrapping) sequence numbers. An empty report
    still produces one status-bearing frame."""
    if not records:
        return [
            UplinkFrame(
                msg_type=msg_type,
                device_id=device_id,
                seq=first_seq & 0xFF,
                records=(),
                battery_mv=battery_mv,
            )
        ]
    frames = []
    for k, start in enumerate(range(0, len(records), max_records)):
        frames.append(
            UplinkFrame(
                msg_type=msg_type,
                device_id=device_id,
                seq=(first_seq + k) & 0xFF,
                records=tuple(records[start : start + max_records]),
                battery_mv=battery_mv,
            )
        )
    return frames

"""Recorded point-stream files.

Little-endian layout::

    b"CTMLO1" | u16 version | u8 lidar_count
    lidar_count x 12 f64 (sensor-to-body rotation row-major, then translation)
    records to EOF: f64 stamp | u8 lidar_id | 3 x f32 xyz (sensor frame)
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import StreamFormatError
from .sync import LidarExtrinsic

MAGIC = b"CTMLO1"
VERSION = 1
_HEAD = struct.Struct("<6sHB")
RECORD = np.dtype([("stamp", "<f8"), ("lidar_id", "u1"), ("xyz", "<f4", (3,))])
assert RECORD.itemsize == 21


def make_records(stamps, lidar_ids, xyz) -> np.ndarray:
    stamps = np.asarray(stamps, dtype=float).reshape(-1)
    rec = np.empty(len(stamps), dtype=RECORD)
    rec["stamp"] = stamps
    rec["lidar_id"] = np.asarray(lidar_ids).reshape(-1)
    rec["xyz"] = np.asarray(xyz, dtype=float).reshape(-1, 3)
    return rec


def write_stream(path, extrinsics, records: np.ndarray) -> int:
    """Write a stream file; ``extrinsics`` is a sequence or ``{id: extrinsic}``
    with ids ``0..n-1``. Returns the number of records written."""
    if isinstance(extrinsics, dict):
        if sorted(extrinsics) != list(range(len(extrinsics))):
            raise ValueError("lidar ids must be 0..n-1")
        extrinsics = [extrinsics[i] for i in range(len(extrinsics))]
    if len(extrinsics) > 255:
        raise ValueError("at most 255 LiDARs fit in the header")
    records = np.asarray(records, dtype=RECORD)
    if len(records) and int(records["lidar_id"].max()) >= len(extrinsics):
        raise ValueError("record refers to a lidar missing from the header")
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, len(extrinsics)))
        for e in extrinsics:
            fh.write(np.concatenate([e.rotation.reshape(-1), e.translation]).astype("<f8").tobytes())
        fh.write(records.tobytes())
    return len(records)


def read_stream(path):
    """Returns ``({id: LidarExtrinsic}, records)``."""
    data = Path(path).read_bytes()
    if len(data) < _HEAD.size:
        raise StreamFormatError("file too short for a stream header")
    magic, version, count = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise StreamFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise StreamFormatError(f"unsupported stream version {version}")
    off = _HEAD.size
    need = off + count * 96
    if len(data) < need:
        raise StreamFormatError("truncated extrinsic header")
    ext = {}
    for i in range(count):
        v = np.frombuffer(data, dtype="<f8", count=12, offset=off + 96 * i)
        try:
            ext[i] = LidarExtrinsic(v[:9].reshape(3, 3), v[9:])
        except ValueError as exc:
            raise StreamFormatError(f"lidar {i}: {exc}") from None
    body = len(data) - need
    if body % RECORD.itemsize:
        raise StreamFormatError(
            f"truncated record: {body % RECORD.itemsize} trailing bytes")
    records = np.frombuffer(data, dtype=RECORD, offset=need).copy()
    if len(records) and int(records["lidar_id"].max()) >= count:
        raise StreamFormatError("record refers to a lidar missing from the header")
    return ext, records

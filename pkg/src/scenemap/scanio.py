"""Binary scan stream files.

Little-endian layout: 7-byte magic, one version byte, then per record a
float64 timestamp, translation (3 x float64), unit quaternion wxyz
(4 x float64), a uint32 point count, and that many (x, y, z, label)
tuples as three float32 plus one int32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterator

import numpy as np

from .geometry import pose_to_quat_trans, quat_trans_to_pose
from .volumetric import PosedLabeledCloud

MAGIC = b"SCNSTRM"
VERSION = 1

_HEADER = struct.Struct("<7sB")
_RECORD_FIXED = struct.Struct("<d3d4dI")


class ScanStreamError(IOError):
    pass


@dataclass
class ScanRecord:
    timestamp: float
    cloud: PosedLabeledCloud


def write_scan_stream(path, records) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION))
        for record in records:
            _write_record(fh, record)


def _write_record(fh: BinaryIO, record: ScanRecord) -> None:
    q, t = pose_to_quat_trans(record.cloud.pose)
    n = record.cloud.points.shape[0]
    fh.write(_RECORD_FIXED.pack(record.timestamp, *t.tolist(), *q.tolist(), n))
    payload = np.empty((n, 4), dtype="<f4")
    payload[:, :3] = record.cloud.points.astype("<f4")
    fh.write(payload[:, :3].tobytes())
    fh.write(record.cloud.labels.astype("<i4").tobytes())


def read_scan_stream(path) -> Iterator[ScanRecord]:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise ScanStreamError("truncated header")
        magic, version = _HEADER.unpack(header)
        if magic != MAGIC:
            raise ScanStreamError(f"bad magic {magic!r}")
        if version != VERSION:
            raise ScanStreamError(f"unsupported scan stream version {version}")
        while True:
            fixed = fh.read(_RECORD_FIXED.size)
            if not fixed:
                return
            if len(fixed) < _RECORD_FIXED.size:
                raise ScanStreamError("truncated record")
            values = _RECORD_FIXED.unpack(fixed)
            timestamp = values[0]
            t = np.array(values[1:4])
            q = np.array(values[4:8])
            n = values[8]
            pts_raw = fh.read(12 * n)
            lab_raw = fh.read(4 * n)
            if len(pts_raw) < 12 * n or len(lab_raw) < 4 * n:
                raise ScanStreamError("truncated point payload")
            points = np.frombuffer(pts_raw, dtype="<f4").reshape(n, 3).astype(float)
            labels = np.frombuffer(lab_raw, dtype="<i4").astype(np.int64)
            yield ScanRecord(
                timestamp=timestamp,
                cloud=PosedLabeledCloud(
                    pose=quat_trans_to_pose(q, t), points=points, labels=labels
                ),
            )

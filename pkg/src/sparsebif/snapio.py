"""Binary snapshot files and on-disk snapshot sets.

SnapFile layout (all little endian)::

    "SBIF" | u32 version=1 | u64 rows | u64 cols | rows*cols f64 row-major | u32 crc32(payload)
"""
from __future__ import annotations

import datetime as _dt
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .datagen import SnapshotSet
from .errors import FormatError, VersionError
from .numkit import TimeGrid

MAGIC = b"SBIF"
VERSION = 1
_HEADER = struct.Struct("<4sIQQ")
MANIFEST = "manifest.json"
DATASET_FORMAT = "sparsebif-dataset-v1"


def encode_snap(matrix):
    a = np.ascontiguousarray(np.atleast_2d(np.asarray(matrix, dtype=np.float64)), dtype="<f8")
    if a.ndim != 2:
        raise ValueError("SnapFile holds a 2-D matrix")
    payload = a.tobytes()
    return (_HEADER.pack(MAGIC, VERSION, a.shape[0], a.shape[1]) + payload
            + struct.pack("<I", zlib.crc32(payload)))


def decode_snap(raw):
    if len(raw) < _HEADER.size:
        raise FormatError(f"file too short for a SnapFile header ({len(raw)} bytes)", len(raw))
    magic, version, rows, cols = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise VersionError(f"SnapFile version {version}, this build reads {VERSION}")
    start = _HEADER.size
    end = start + 8 * rows * cols
    if len(raw) < end + 4:
        raise FormatError(f"truncated payload: need {end + 4} bytes, have {len(raw)}", len(raw))
    if len(raw) > end + 4:
        raise FormatError(f"{len(raw) - end - 4} trailing bytes after the checksum", end + 4)
    payload = raw[start:end]
    (crc,) = struct.unpack_from("<I", raw, end)
    if zlib.crc32(payload) != crc:
        raise FormatError("payload CRC32 mismatch", start)
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(np.float64)


def write_snap(path, matrix):
    Path(path).write_bytes(encode_snap(matrix))


def read_snap(path):
    return decode_snap(Path(path).read_bytes())


def snap_name(m):
    return f"snap_{m:04d}.snap"


def save_dataset(ds: SnapshotSet, out_dir, created=None):
    """One SnapFile per parameter plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for m, tr in enumerate(ds.trajectories):
        name = snap_name(m)
        write_snap(out / name, tr)
        files.append(name)
    manifest = {
        "format": DATASET_FORMAT,
        "params": [float(p) for p in ds.params],
        "grid": ds.grid.to_dict(),
        "field_layout": {k: [int(a), int(b)] for k, (a, b) in ds.field_layout.items()},
        "stop_indices": [None if s is None else int(s) for s in ds.stop_indices],
        "seed": ds.metadata.get("seed"),
        "metadata": ds.metadata,
        "files": files,
        "created": created or _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return out / MANIFEST


def load_dataset(data_dir):
    d = Path(data_dir)
    raw = (d / MANIFEST).read_bytes()
    try:
        man = json.loads(raw.decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc.msg}", exc.pos) from exc
    if man.get("format") != DATASET_FORMAT:
        raise FormatError(f"unknown dataset format {man.get('format')!r}", 0)
    trajs = []
    for name in man["files"]:
        try:
            trajs.append(read_snap(d / name))
        except FormatError as exc:
            raise FormatError(f"{name}: {exc.args[0]}", exc.offset) from exc
    return SnapshotSet(
        params=list(man["params"]),
        grid=TimeGrid.from_dict(man["grid"]),
        trajectories=trajs,
        field_layout={k: tuple(v) for k, v in man["field_layout"].items()},
        metadata=man.get("metadata", {}),
        stop_indices=man.get("stop_indices"),
    )

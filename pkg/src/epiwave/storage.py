"""On-disk container for recordings and segment sets.

Byte layout (all little-endian)::

    magic    4 bytes   b"EPWK"
    version  u16
    kind     u8        1 = Recording, 2 = SegmentSet
    pad      u8        zero
    meta_len u32
    meta     meta_len bytes of UTF-8 JSON (shapes, dtypes, block order,
                       channel map, sample rate, segmentation config,
                       generator provenance)
    blocks   raw array bytes in the order listed in meta["blocks"];
             samples/data are <f4, labels are <u1
    crc32    u32 over every preceding byte

A human-readable copy of the metadata is written next to the file as
``<path>.meta.json``; the embedded block is authoritative on load.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .data import ChannelMap, Recording, SegmentationConfig, SegmentSet
from .errors import ChecksumError, FormatVersionError, StorageError, TruncatedFileError

MAGIC = b"EPWK"
FORMAT_VERSION = 1

_KIND_RECORDING = 1
_KIND_SEGMENTSET = 2

_DTYPES = {"<f4": np.dtype("<f4"), "<u1": np.dtype("<u1")}


def _block_spec(obj) -> list[tuple[str, np.ndarray, str]]:
    if isinstance(obj, Recording):
        return [("samples", obj.samples, "<f4"), ("labels", obj.labels, "<u1")]
    return [
        ("data", obj.data, "<f4"),
        ("channel_labels", obj.channel_labels, "<u1"),
        ("region_labels", obj.region_labels, "<u1"),
        ("patient_labels", obj.patient_labels, "<u1"),
    ]


def store(obj: Recording | SegmentSet, path: str | Path) -> Path:
    """Write a Recording or SegmentSet; returns the path written."""
    path = Path(path)
    if isinstance(obj, Recording):
        kind = _KIND_RECORDING
        meta = {
            "sample_rate": obj.sample_rate,
            "channel_map": obj.channel_map.to_dict(),
            "provenance": obj.provenance,
        }
    elif isinstance(obj, SegmentSet):
        kind = _KIND_SEGMENTSET
        meta = {
            "sample_rate": obj.sample_rate,
            "channel_map": obj.channel_map.to_dict(),
            "config": {"window_k": obj.config.window_k, "stride_l": obj.config.stride_l},
            "provenance": obj.provenance,
        }
    else:
        raise StorageError(f"cannot store object of type {type(obj).__name__}")

    blocks = _block_spec(obj)
    meta["blocks"] = [
        {"name": name, "dtype": dtype, "shape": list(arr.shape)}
        for name, arr, dtype in blocks
    ]
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")

    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<HBB", FORMAT_VERSION, kind, 0)
    buf += struct.pack("<I", len(meta_bytes))
    buf += meta_bytes
    for _, arr, dtype in blocks:
        buf += np.ascontiguousarray(arr).astype(dtype, copy=False).tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))

    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(buf))
    sidecar = path.with_name(path.name + ".meta.json")
    sidecar.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return path


def load(path: str | Path) -> Recording | SegmentSet:
    """Read back a stored value; inverse of store, bit-exact on arrays."""
    path = Path(path)
    raw = path.read_bytes()
    header_len = 4 + 4 + 4
    if len(raw) < header_len + 4:
        raise TruncatedFileError(f"{path}: file shorter than header")
    if raw[:4] != MAGIC:
        raise StorageError(f"{path}: bad magic, not an epiwave dataset")
    version, kind, _ = struct.unpack("<HBB", raw[4:8])
    if version > FORMAT_VERSION:
        raise FormatVersionError(
            f"{path}: format version {version} newer than supported {FORMAT_VERSION}")
    (meta_len,) = struct.unpack("<I", raw[8:12])
    body_end = len(raw) - 4
    if 12 + meta_len > body_end:
        raise TruncatedFileError(f"{path}: metadata block truncated")
    (stored_crc,) = struct.unpack("<I", raw[body_end:])
    if zlib.crc32(raw[:body_end]) != stored_crc:
        raise ChecksumError(f"{path}: checksum mismatch")
    meta = json.loads(raw[12:12 + meta_len].decode("utf-8"))

    arrays = {}
    offset = 12 + meta_len
    for block in meta["blocks"]:
        dtype = _DTYPES[block["dtype"]]
        count = int(np.prod(block["shape"], dtype=np.int64)) if block["shape"] else 1
        nbytes = count * dtype.itemsize
        if offset + nbytes > body_end:
            raise TruncatedFileError(f"{path}: block {block['name']} truncated")
        arrays[block["name"]] = np.frombuffer(
            raw, dtype=dtype, count=count, offset=offset).reshape(block["shape"])
        offset += nbytes
    if offset != body_end:
        raise StorageError(f"{path}: {body_end - offset} unexpected trailing bytes")

    channel_map = ChannelMap.from_dict(meta["channel_map"])
    if kind == _KIND_RECORDING:
        return Recording(
            samples=arrays["samples"],
            labels=arrays["labels"],
            sample_rate=meta["sample_rate"],
            channel_map=channel_map,
            provenance=meta.get("provenance", {}),
        )
    if kind == _KIND_SEGMENTSET:
        cfg = SegmentationConfig(**meta["config"])
        return SegmentSet(
            data=arrays["data"],
            channel_labels=arrays["channel_labels"],
            region_labels=arrays["region_labels"],
            patient_labels=arrays["patient_labels"],
            config=cfg,
            channel_map=channel_map,
            sample_rate=meta["sample_rate"],
            provenance=meta.get("provenance", {}),
        )
    raise StorageError(f"{path}: unknown kind byte {kind}")

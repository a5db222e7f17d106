"""Versioned binary model bundle.

Layout (all integers little-endian)::

    b"PSAN"  u16 version  u16 section_count
    repeated: 4-byte tag  u64 payload_length  u32 crc32(payload)  payload

Sections:

``CONF``  UTF-8 JSON: network config, similarity kind, epsilon, class names,
          parameter layout and prototype class assignments.
``CONV``  float64 payload of every network parameter, in layer order.
``PROT``  per prototype: u32 index, i64 source image id, i32 h, i32 w, D float64.
``HEAD``  u32 rows, u32 cols, then rows*cols float64 (row-major).
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import BundleChecksumError, BundleFormatError, BundleTruncatedError, BundleVersionError
from .network import Network
from .prototypes import PrototypeModel

MAGIC = b"PSAN"
VERSION = 1
_HEADER = struct.Struct("<4sHH")
_SECTION = struct.Struct("<4sQI")
_F64 = np.dtype("<f8")


def _prototype_dtype(d):
    return np.dtype([("index", "<u4"), ("source", "<i8"), ("h", "<i4"), ("w", "<i4"), ("vector", "<f8", (d,))])


def model_to_bytes(model: PrototypeModel) -> bytes:
    params = model.network.parameters()
    conf = {
        "network": model.network.config(),
        "kind": model.kind,
        "epsilon": model.epsilon,
        "class_names": list(model.class_names),
        "class_identity": [int(v) for v in model.class_identity],
        "param_layout": [[i, name, list(arr.shape)] for i, name, arr in params],
    }
    conv = b"".join(np.ascontiguousarray(arr, dtype=_F64).tobytes() for _, _, arr in params)
    p, d = model.prototypes.shape
    table = np.zeros(p, dtype=_prototype_dtype(d))
    table["index"] = np.arange(p)
    table["source"] = model.source_ids
    table["h"] = model.locations[:, 0]
    table["w"] = model.locations[:, 1]
    table["vector"] = model.prototypes
    head = struct.pack("<II", *model.head.shape) + np.ascontiguousarray(model.head, dtype=_F64).tobytes()
    sections = [
        (b"CONF", json.dumps(conf, sort_keys=True).encode("utf-8")),
        (b"CONV", conv),
        (b"PROT", table.tobytes()),
        (b"HEAD", head),
    ]
    out = [_HEADER.pack(MAGIC, VERSION, len(sections))]
    for tag, payload in sections:
        out.append(_SECTION.pack(tag, len(payload), zlib.crc32(payload)))
        out.append(payload)
    return b"".join(out)


def model_from_bytes(blob: bytes) -> PrototypeModel:
    if len(blob) < _HEADER.size:
        raise BundleTruncatedError("file is shorter than the bundle header")
    magic, version, count = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise BundleFormatError(f"bad magic bytes {magic!r}; not a model bundle")
    if version != VERSION:
        raise BundleVersionError(f"bundle format version {version} is not supported (expected {VERSION})")
    pos = _HEADER.size
    sections = {}
    for _ in range(count):
        if pos + _SECTION.size > len(blob):
            raise BundleTruncatedError("section header runs past the end of the file")
        tag, length, crc = _SECTION.unpack_from(blob, pos)
        pos += _SECTION.size
        if pos + length > len(blob):
            raise BundleTruncatedError(f"section {tag!r} runs past the end of the file")
        payload = blob[pos : pos + length]
        pos += length
        if zlib.crc32(payload) != crc:
            raise BundleChecksumError(f"checksum mismatch in section {tag.decode('ascii', 'replace')}")
        sections[tag] = payload
    missing = {b"CONF", b"CONV", b"PROT", b"HEAD"} - set(sections)
    if missing:
        raise BundleFormatError(f"missing sections {sorted(t.decode() for t in missing)}")
    try:
        conf = json.loads(sections[b"CONF"].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BundleFormatError(f"unreadable config section: {exc}") from exc

    conv = np.frombuffer(sections[b"CONV"], dtype=_F64)
    arrays, offset = {}, 0
    for i, name, shape in conf["param_layout"]:
        size = int(np.prod(shape))
        if offset + size > conv.size:
            raise BundleFormatError("weight section is shorter than the declared layout")
        arrays[(i, name)] = conv[offset : offset + size].reshape(shape).copy()
        offset += size
    if offset != conv.size:
        raise BundleFormatError("weight section is longer than the declared layout")
    network = Network.from_config(conf["network"], arrays)

    d = network.output_dims[0]
    dtype = _prototype_dtype(d)
    if len(sections[b"PROT"]) % dtype.itemsize:
        raise BundleFormatError("prototype table size is not a whole number of records")
    table = np.frombuffer(sections[b"PROT"], dtype=dtype)
    head_blob = sections[b"HEAD"]
    rows, cols = struct.unpack_from("<II", head_blob, 0)
    head = np.frombuffer(head_blob, dtype=_F64, offset=8)
    if head.size != rows * cols or cols != table.shape[0]:
        raise BundleFormatError("head weights do not match the prototype table")
    return PrototypeModel(
        network=network,
        prototypes=table["vector"].copy(),
        head=head.reshape(rows, cols).copy(),
        kind=conf["kind"],
        epsilon=conf["epsilon"],
        class_identity=np.asarray(conf["class_identity"], dtype=np.int64),
        source_ids=table["source"].astype(np.int64),
        locations=np.stack([table["h"], table["w"]], axis=1).astype(np.int64),
        class_names=conf["class_names"],
    )


def save_model(model: PrototypeModel, path):
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> PrototypeModel:
    return model_from_bytes(Path(path).read_bytes())


def file_digest(path):
    """SHA-256 of a file, used to show that commands leave their inputs untouched."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()

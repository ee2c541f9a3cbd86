"""On-disk formats: model checkpoints, PGM images, reports, config files.

All formats are byte-specified and pinned by golden tests. Writes are atomic
(temp file in the target directory, then rename).
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import re
import struct
import tempfile

import numpy as np

from .errors import (
    CheckpointCorruptError,
    CheckpointFormatError,
    CheckpointVersionError,
    ParameterError,
    PgmParseError,
)
from .models import ConvClassifier, ConvDenoiser, LinearClassifier, MlpClassifier, MlpDenoiser

__all__ = [
    "save_checkpoint",
    "load_checkpoint",
    "write_pgm",
    "read_pgm",
    "write_report",
    "read_report",
    "write_config",
    "read_config",
]

MAGIC = b"FCF1"
VERSION = 1

_MODEL_KINDS = {
    "mlp_denoiser": lambda d: MlpDenoiser(d[0], d[2], hidden=d[1]),
    "conv_denoiser": lambda d: ConvDenoiser(d[0], d[2], hidden=d[1]),
    "mlp_classifier": lambda d: MlpClassifier(d[0], d[2], hidden=d[1]),
    "conv_classifier": lambda d: ConvClassifier(d[0], d[1], side=d[2]),
    "linear_classifier": lambda d: LinearClassifier(d[0], d[1]),
}


def _checksum(blob: bytes) -> bytes:
    return hashlib.blake2b(blob, digest_size=8).digest()


def _atomic_write(path, blob: bytes):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model, path) -> None:
    """Serialize a model: magic, version, kind, dimension table, float32
    weights, and a trailing 64-bit digest of everything before it."""
    kind = model.kind
    if kind not in _MODEL_KINDS:
        raise CheckpointFormatError(f"model kind {kind!r} is not checkpointable")
    dims = model.dims()
    weights = model.weight_vector().astype("<f4")
    head = bytearray()
    head += MAGIC
    head += struct.pack("<H", VERSION)
    kb = kind.encode("ascii")
    head += struct.pack("<B", len(kb)) + kb
    head += struct.pack("<I", len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
    head += struct.pack("<Q", weights.size) + weights.tobytes()
    blob = bytes(head) + _checksum(bytes(head))
    _atomic_write(path, blob)


def load_checkpoint(path):
    """Rebuild a model from a checkpoint; the weights round-trip bit-exactly."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise CheckpointFormatError("bad magic; not a model checkpoint")
    body, digest = blob[:-8], blob[-8:]
    if _checksum(body) != digest:
        raise CheckpointCorruptError("checksum mismatch; checkpoint is corrupted")
    off = 4
    (version,) = struct.unpack_from("<H", body, off)
    off += 2
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    (klen,) = struct.unpack_from("<B", body, off)
    off += 1
    kind = body[off : off + klen].decode("ascii")
    off += klen
    (ndims,) = struct.unpack_from("<I", body, off)
    off += 4
    dims = list(struct.unpack_from(f"<{ndims}I", body, off))
    off += 4 * ndims
    (nweights,) = struct.unpack_from("<Q", body, off)
    off += 8
    weights = np.frombuffer(body, dtype="<f4", count=nweights, offset=off)
    off += 4 * nweights
    if off != len(body):
        raise CheckpointFormatError("trailing bytes after weight payload")
    if kind not in _MODEL_KINDS:
        raise CheckpointFormatError(f"unknown model kind {kind!r}")
    model = _MODEL_KINDS[kind](dims)
    model.load_weight_vector(weights)
    return model.freeze()


def write_pgm(image: np.ndarray, path) -> None:
    """Binary PGM (P5, maxval 255); values map linearly from [-1, 1]."""
    image = np.asarray(image, np.float64)
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    if image.ndim != 2:
        raise ParameterError(f"PGM wants a 2-D grayscale image, got shape {image.shape}")
    h, w = image.shape
    scaled = np.clip(np.rint((image + 1.0) * 0.5 * 255.0), 0, 255).astype(np.uint8)
    _atomic_write(path, f"P5\n{w} {h}\n255\n".encode("ascii") + scaled.tobytes())


_PGM_HEADER = re.compile(rb"^P5\s+(\d+)\s+(\d+)\s+(\d+)\s", re.S)


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    m = _PGM_HEADER.match(blob)
    if not m:
        raise PgmParseError("malformed PGM header")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise PgmParseError(f"unsupported maxval {maxval}")
    payload = blob[m.end():]
    if len(payload) != w * h:
        raise PgmParseError(f"payload has {len(payload)} bytes, expected {w * h}")
    img = np.frombuffer(payload, np.uint8).reshape(h, w)
    return (img.astype(np.float32) / 255.0) * 2.0 - 1.0


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_report(report: dict, path) -> None:
    """Canonical JSON (stable key order) plus a flat CSV companion.

    The report must embed the run's config and seed; the CSV lists one
    (seed, level, metric, value) row per scalar metric.
    """
    if "config" not in report or "seed" not in report.get("config", {}):
        raise ParameterError("report must embed its config with the seed")
    path = str(path)
    _atomic_write(path, _canonical_json(report).encode("utf-8"))
    rows = []
    for entry in report.get("results", []):
        for key, value in sorted(entry.items()):
            if key in ("seed", "level"):
                continue
            rows.append((entry.get("seed", ""), entry.get("level", ""), key, value))
    csv_path = os.path.splitext(path)[0] + ".csv"
    buf = ["seed,level,metric,value"]
    for seed, level, key, value in rows:
        buf.append(f"{seed},{level},{key},{value}")
    _atomic_write(csv_path, ("\n".join(buf) + "\n").encode("utf-8"))


def read_report(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    return str(v)


def write_config(values: dict, path) -> None:
    """Flat `key = value` lines; comments start with #."""
    lines = [f"{k} = {_format_value(v)}" for k, v in values.items()]
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


_INT_RE = re.compile(r"^[+-]?\d+$")
_FLOAT_RE = re.compile(r"^[+-]?(\d+\.\d*|\.\d+|\d+([eE][+-]?\d+)|\d+\.\d*[eE][+-]?\d+)$")


def read_config(path) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParameterError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if value in ("true", "false"):
                out[key] = value == "true"
            elif _INT_RE.match(value):
                out[key] = int(value)
            elif _FLOAT_RE.match(value):
                out[key] = float(value)
            else:
                out[key] = value
    return out

"""On-disk formats: binary f64 arrays, CSV tables, plain PGM heatmaps."""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from . import __version__

MAGIC = b"BCND"
DTYPE_F64 = 1
# magic, dtype code, ndim, reserved
_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    pass


def save_array(path, array) -> None:
    """Write ``array`` as little-endian f64 with a 16-byte header and u64 dims."""
    a = np.array(array, dtype="<f8", order="C")  # ascontiguousarray would promote 0-d to 1-d
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, DTYPE_F64, a.ndim, 0))
        fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        fh.write(a.tobytes(order="C"))


def load_array(path) -> np.ndarray:
    """Read a binary array written by :func:`save_array`, or a plain-text array (``.txt``)."""
    path = Path(path)
    if path.suffix in (".txt", ".csv"):
        return np.loadtxt(path, dtype=np.float64, delimiter="," if path.suffix == ".csv" else None)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, dtype, ndim, _ = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if dtype != DTYPE_F64:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    off = _HEADER.size
    dims = struct.unpack_from(f"<{ndim}Q", raw, off)
    off += 8 * ndim
    count = int(np.prod(dims)) if ndim else 1
    if len(raw) - off != 8 * count:
        raise FormatError(f"{path}: payload size does not match dims {dims}")
    return np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(dims).astype(np.float64)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def provenance(config: dict, seed: int) -> dict:
    return {"seed": int(seed), "config_hash": config_hash(config), "version": __version__}


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path, header, rows, meta: dict | None = None) -> None:
    """Comma-separated, LF endings, 17 significant digits.

    ``meta`` is written as a single leading ``#`` comment line.
    """
    with open(path, "w", newline="\n") as fh:
        if meta:
            fh.write("# " + " ".join(f"{k}={meta[k]}" for k in sorted(meta)) + "\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def read_csv(path):
    """Return ``(meta, header, rows)`` with float-converted rows where possible."""
    meta, header, rows = {}, None, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            for kv in line[1:].split():
                k, _, v = kv.partition("=")
                meta[k] = v
        elif header is None:
            header = line.split(",")
        else:
            row = []
            for cell in line.split(","):
                try:
                    row.append(float(cell))
                except ValueError:
                    row.append(cell)
            rows.append(row)
    return meta, header, rows


def heat_levels(values: np.ndarray) -> np.ndarray:
    """Gray levels 0..255, linear in ``log(1 + value)`` and scaled to the panel max."""
    v = np.log1p(np.asarray(values, dtype=np.float64))
    top = v.max()
    if not top > 0:
        return np.zeros(v.shape, dtype=np.int64)
    return np.rint(255.0 * v / top).astype(np.int64)


def write_pgm(path, levels: np.ndarray, comment: str | None = None) -> None:
    """Plain (P2) PGM with max value 255; row 0 is the top of the image."""
    levels = np.asarray(levels)
    h, w = levels.shape
    with open(path, "w", newline="\n") as fh:
        fh.write("P2\n")
        if comment:
            fh.write(f"# {comment}\n")
        fh.write(f"{w} {h}\n255\n")
        for row in levels:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")


def read_pgm(path) -> np.ndarray:
    tokens = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0]
        tokens += line.split()
    if tokens[0] != "P2":
        raise FormatError(f"{path}: not a plain PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.array([int(t) for t in tokens[4:]], dtype=np.int64)
    if data.size != w * h or data.max(initial=0) > maxval:
        raise FormatError(f"{path}: malformed payload")
    return data.reshape(h, w)

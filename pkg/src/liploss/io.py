"""On-disk formats: the LIPT tensor container, dataset manifests, flat configs, PGM.

LIPT layout (all integers little-endian)::

    b"LIPT" | u8 version (1) | u32 entry count
    per entry: u32 name length | name (utf-8) | u8 dtype (0 float64, 1 float32)
               | u8 rank | u32 extent * rank | raw data, C order
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigError, FormatError

MAGIC = b"LIPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}


def encode_tensors(entries: Mapping[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<BI", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            arr = arr.astype(np.float64)
        code = _CODES[arr.dtype]
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BB", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(out)


def decode_tensors(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    if blob[:4] != MAGIC:
        raise FormatError("not a LIPT tensor container (bad magic)")
    if len(blob) < 9:
        raise FormatError("truncated LIPT header")
    version, count = struct.unpack_from("<BI", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported LIPT version {version}")
    pos = 9
    entries: OrderedDict[str, np.ndarray] = OrderedDict()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            code, rank = struct.unpack_from("<BB", blob, pos)
            pos += 2
            if code not in _DTYPES:
                raise FormatError(f"entry {name!r}: unknown dtype code {code}")
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(blob):
                raise FormatError(f"entry {name!r}: truncated data")
            arr = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=pos)
            entries[name] = arr.reshape(shape).astype(dt.newbyteorder("="))
            pos += nbytes
    except struct.error as exc:
        raise FormatError(f"truncated LIPT container: {exc}") from None
    if pos != len(blob):
        raise FormatError("trailing bytes after last LIPT entry")
    return entries


def write_tensors(path, entries: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_tensors(entries))


def read_tensors(path) -> "OrderedDict[str, np.ndarray]":
    return decode_tensors(Path(path).read_bytes())


# ----------------------------------------------------------------------
# dataset manifest
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRecord:
    id: str
    path: str
    seed: int


MANIFEST_NAME = "manifest.txt"


def write_manifest(path, records) -> None:
    lines = ["# id\tpath\tseed"]
    lines += [f"{r.id}\t{r.path}\t{r.seed}" for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[ManifestRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
        try:
            records.append(ManifestRecord(parts[0], parts[1], int(parts[2])))
        except ValueError:
            raise FormatError(f"{path}:{lineno}: seed is not an integer") from None
    return records


# ----------------------------------------------------------------------
# flat key = value configs
# ----------------------------------------------------------------------

def parse_config_text(text: str, source: str = "<config>") -> list[tuple[int, str, str]]:
    """``key = value`` lines; ``#`` starts a comment.  Returns (line, key, value)."""
    items = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        items.append((lineno, key, value))
    return items


def _coerce(value: str, target, where: str):
    try:
        if target is bool:
            if value.lower() in ("1", "true", "yes"):
                return True
            if value.lower() in ("0", "false", "no"):
                return False
            raise ValueError(value)
        if target is int:
            return int(value)
        if target is float:
            return float(value)
        if target is str:
            return value
        if isinstance(target, tuple):
            inner = target[0]
            return tuple(_coerce(v.strip(), inner, where) for v in value.split(","))
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {value!r}") from None
    raise ConfigError(f"{where}: unsupported field type")


def apply_config(items, targets: Mapping[str, object], types: Mapping[str, Mapping[str, object]],
                 source: str = "<config>") -> dict[str, dict]:
    """Route parsed items to dataclasses; unknown keys are errors.

    ``targets`` maps a section name to a dataclass type, ``types`` maps the
    section to ``{field: python type}``.  Returns per-section kwargs.
    """
    owners = {}
    for section, names in types.items():
        for name in names:
            owners.setdefault(name, section)
    result: dict[str, dict] = {s: {} for s in targets}
    for lineno, key, value in items:
        where = f"{source}:{lineno}"
        if key not in owners:
            raise ConfigError(f"{where}: unknown key {key!r}")
        section = owners[key]
        result[section][key] = _coerce(value, types[section][key], where)
    return result


def field_types(cls) -> dict[str, object]:
    """Coercion types for a dataclass's fields, inferred from their defaults."""
    out = {}
    for f in fields(cls):
        default = f.default
        if isinstance(default, bool):
            out[f.name] = bool
        elif isinstance(default, int):
            out[f.name] = int
        elif isinstance(default, float):
            out[f.name] = float
        elif isinstance(default, str):
            out[f.name] = str
        elif isinstance(default, tuple) and default:
            out[f.name] = (type(default[0]),)
    return out


# ----------------------------------------------------------------------
# PGM dumps
# ----------------------------------------------------------------------

def to_gray8(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    if hi <= lo:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.rint((a - lo) / (hi - lo) * 255).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    """Binary 8-bit PGM, linearly windowed to the image's own range."""
    img = to_gray8(image)
    if img.ndim != 2:
        raise ConfigError("PGM output needs a 2D image")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise FormatError("not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)

"""Named float32 tensor maps, elementwise kernels and the ``.ntm`` checkpoint format.

File layout::

    u64 little-endian  manifest byte length (includes the trailing newline)
    manifest           UTF-8 JSON + "\\n"
    payload            little-endian float32 data, tensors back to back

The manifest lists ``name``, ``shape``, ``dtype``, ``offset`` and ``nbytes``
for every tensor (offsets are relative to the payload start) plus a flat
string->string ``metadata`` map.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from collections.abc import Iterable, Iterator, Mapping
from typing import Union

import numpy as np

DTYPE = np.dtype("<f4")
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<Q")


class TensorError(ValueError):
    """Shape mismatches and non-finite values."""


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint files."""


def as_tensor(values, name: str = "tensor") -> np.ndarray:
    """Return a read-only, C-contiguous float32 copy of ``values``."""
    arr = np.array(values, dtype=np.float32, copy=True, order="C")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if any(s <= 0 for s in arr.shape):
        raise TensorError(f"{name}: shape {list(arr.shape)} has a non-positive dimension")
    if not np.all(np.isfinite(arr)):
        raise TensorError(f"{name}: contains non-finite values")
    arr.setflags(write=False)
    return arr


class NamedTensorMap(Mapping):
    """Ordered, immutable name -> float32 array mapping with string metadata."""

    def __init__(self, entries: Union[Mapping, Iterable, None] = None, metadata: Mapping | None = None):
        items = entries.items() if isinstance(entries, Mapping) else (entries or [])
        self._entries: dict[str, np.ndarray] = {}
        for name, values in items:
            if not isinstance(name, str) or not name:
                raise TensorError(f"tensor names must be non-empty strings, got {name!r}")
            if name in self._entries:
                raise TensorError(f"duplicate tensor name {name!r}")
            self._entries[name] = as_tensor(values, name)
        self.metadata: dict[str, str] = {str(k): str(v) for k, v in (metadata or {}).items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}: {list(v.shape)}" for k, v in self._entries.items())
        return f"NamedTensorMap({{{shapes}}}, metadata={self.metadata})"

    def __eq__(self, other) -> bool:
        """Bit-exact equality of names, order, shapes, values and metadata."""
        if not isinstance(other, NamedTensorMap):
            return NotImplemented
        if list(self) != list(other) or self.metadata != other.metadata:
            return False
        return all(
            self[k].shape == other[k].shape and self[k].tobytes() == other[k].tobytes() for k in self
        )

    __hash__ = None

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._entries.items()}

    def num_elements(self) -> int:
        return int(sum(v.size for v in self._entries.values()))

    def with_metadata(self, **updates) -> "NamedTensorMap":
        meta = dict(self.metadata)
        meta.update({k: str(v) for k, v in updates.items()})
        return NamedTensorMap(self._entries, meta)

    def select(self, names: Iterable[str]) -> "NamedTensorMap":
        return NamedTensorMap([(n, self._entries[n]) for n in names], self.metadata)

    def replace(self, updates: Mapping[str, np.ndarray]) -> "NamedTensorMap":
        """Copy with some tensors swapped out; shapes must be preserved."""
        out = []
        for name, value in self._entries.items():
            if name in updates:
                new = np.asarray(updates[name])
                if new.shape != value.shape:
                    raise TensorError(f"{name}: replacement shape {list(new.shape)} != {list(value.shape)}")
                value = new
            out.append((name, value))
        unknown = set(updates) - set(self._entries)
        if unknown:
            raise TensorError(f"unknown tensor names {sorted(unknown)}")
        return NamedTensorMap(out, self.metadata)


def fingerprint(tmap: NamedTensorMap) -> str:
    """Content hash over names, shapes and raw bytes (metadata excluded)."""
    h = hashlib.sha256()
    for name, arr in tmap.items():
        h.update(name.encode())
        h.update(json.dumps(list(arr.shape)).encode())
        h.update(arr.astype(DTYPE, copy=False).tobytes())
    return h.hexdigest()


# -- elementwise kernels -----------------------------------------------------

_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def ew(op: str, a: np.ndarray, b=None) -> np.ndarray:
    """Elementwise float32 kernel.

    ``add``/``sub``/``mul`` take two equally shaped tensors, ``scale`` a scalar,
    ``abs``/``sign`` are unary and ``compare_gt`` returns a 0/1 tensor.
    """
    a = np.asarray(a, dtype=np.float32)
    if op in ("abs", "sign"):
        out = np.abs(a) if op == "abs" else np.sign(a)
    elif op == "scale":
        if np.ndim(b) != 0:
            raise TensorError("scale expects a scalar operand")
        with np.errstate(over="ignore", invalid="ignore"):
            out = a * np.float32(b)
    elif op in _BINARY or op == "compare_gt":
        b = np.asarray(b, dtype=np.float32)
        if b.ndim != 0 and b.shape != a.shape:
            raise TensorError(f"shape mismatch: {list(a.shape)} vs {list(b.shape)}")
        with np.errstate(over="ignore", invalid="ignore"):
            out = (a > b).astype(np.float32) if op == "compare_gt" else _BINARY[op](a, b)
    else:
        raise TensorError(f"unknown elementwise op {op!r}")
    out = np.asarray(out, dtype=np.float32)
    if not np.all(np.isfinite(out)):
        raise TensorError(f"{op}: result contains non-finite values")
    return out


# -- checkpoint I/O ----------------------------------------------------------

def save_checkpoint(tmap: NamedTensorMap, path) -> None:
    tensors = []
    offset = 0
    for name, arr in tmap.items():
        if not np.all(np.isfinite(arr)):
            raise TensorError(f"refusing to save non-finite tensor {name!r}")
        nbytes = arr.size * DTYPE.itemsize
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset, "nbytes": nbytes})
        offset += nbytes
    manifest = {"format": "ntm", "version": FORMAT_VERSION, "metadata": tmap.metadata, "tensors": tensors}
    header = (json.dumps(manifest, sort_keys=True, ensure_ascii=False) + "\n").encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(_PREFIX.pack(len(header)))
            fh.write(header)
            for arr in tmap.values():
                fh.write(arr.astype(DTYPE, copy=False).tobytes(order="C"))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {os.fspath(path)}: {exc.strerror}") from exc


def load_checkpoint(path) -> NamedTensorMap:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: file shorter than the 8-byte length prefix")
    (hlen,) = _PREFIX.unpack_from(raw)
    start = _PREFIX.size
    if start + hlen > len(raw):
        raise CheckpointError(f"{path}: manifest length {hlen} exceeds file size {len(raw)}")
    try:
        manifest = json.loads(raw[start:start + hlen].decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{path}: manifest is not UTF-8 at byte {start + exc.start}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: malformed manifest at byte {start + exc.pos}: {exc.msg}") from exc
    if not isinstance(manifest, dict) or not isinstance(manifest.get("tensors"), list):
        raise CheckpointError(f"{path}: manifest lacks a tensor list")

    payload = memoryview(raw)[start + hlen:]
    entries = []
    expected = 0
    for spec in manifest["tensors"]:
        try:
            name, shape, offset, nbytes = spec["name"], spec["shape"], spec["offset"], spec["nbytes"]
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"{path}: tensor entry missing field {exc}") from exc
        if spec.get("dtype", "float32") != "float32":
            raise CheckpointError(f"{path}: {name}: unsupported dtype {spec.get('dtype')!r}")
        count = int(np.prod(shape)) if shape else 1
        if nbytes != count * DTYPE.itemsize:
            raise CheckpointError(f"{path}: {name}: length mismatch, shape {shape} needs {count * 4} bytes, manifest says {nbytes}")
        if offset != expected:
            raise CheckpointError(f"{path}: {name}: offset {offset} overlaps or leaves a gap (expected {expected})")
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: {name}: length mismatch, needs bytes [{offset}, {offset + nbytes}) but payload has {len(payload)}")
        arr = np.frombuffer(payload, dtype=DTYPE, count=count, offset=offset).reshape(shape)
        entries.append((name, arr))
        expected = offset + nbytes
    if expected != len(payload):
        raise CheckpointError(f"{path}: length mismatch, manifest covers {expected} payload bytes, file has {len(payload)}")
    return NamedTensorMap(entries, manifest.get("metadata") or {})

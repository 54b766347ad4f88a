"""Named parameter storage with gradient slots and checkpoint round-tripping."""

from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np

from .precision import active_dtype
from .tensor import DiffcoreError, ShapeError


def _entry_rng(seed: int, name: str) -> np.random.Generator:
    # Per-name streams so initialization does not depend on creation order.
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


class ParamStore:
    """Flat map of name -> (value, gradient) arrays of identical shape.

    Iteration order is always lexicographic in the entry name. Values may be
    read concurrently; mutation (backward, optimizer steps) needs exclusive
    access.
    """

    def __init__(self, rng_seed: int = 0):
        self.rng_seed = int(rng_seed)
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        self.opt_state: dict[str, dict] = {}

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> list[str]:
        return sorted(self._values)

    def value(self, name: str) -> np.ndarray:
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def add(self, name: str, shape, init="zeros") -> np.ndarray:
        """Create an entry. init: 'zeros', 'glorot', ('lstm_bias', m), or an array."""
        if name in self._values:
            raise DiffcoreError(f"duplicate parameter name {name!r}")
        dtype = active_dtype()
        shape = tuple(int(d) for d in shape)
        if isinstance(init, str) and init == "zeros":
            value = np.zeros(shape, dtype=dtype)
        elif isinstance(init, str) and init == "glorot":
            if len(shape) != 2:
                raise ShapeError(f"glorot init needs a 2-d shape, got {shape}")
            s = np.sqrt(6.0 / (shape[0] + shape[1]))
            value = _entry_rng(self.rng_seed, name).uniform(-s, s, size=shape).astype(dtype)
        elif isinstance(init, tuple) and init[0] == "lstm_bias":
            m = init[1]
            if shape != (4 * m,):
                raise ShapeError(f"lstm_bias init expects shape {(4 * m,)}, got {shape}")
            value = np.zeros(shape, dtype=dtype)
            value[m:2 * m] = 1.0  # forget gate opens at init
        elif isinstance(init, str) and init.startswith("const:"):
            value = np.full(shape, float(init.split(":", 1)[1]), dtype=dtype)
        else:
            value = np.asarray(init, dtype=dtype)
            if value.shape != shape:
                raise ShapeError(f"init array shape {value.shape} != declared {shape}")
            value = value.copy()
        self._values[name] = value
        self._grads[name] = np.zeros_like(value)
        return value

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0

    def grad_global_norm(self) -> float:
        total = 0.0
        for name in self.names():
            g = self._grads[name]
            total += float(np.dot(g.ravel(), g.ravel()))
        return float(np.sqrt(total))

    def clip_grads(self, max_norm: float) -> float:
        norm = self.grad_global_norm()
        if norm > max_norm and norm > 0.0:
            scale = max_norm / norm
            for g in self._grads.values():
                g *= scale
        return norm

    # ---- checkpoints ---------------------------------------------------
    # Manifest JSON lists (name, shape, dtype, offset) in lexicographic
    # order; the .bin blob holds little-endian raw values in the same order.

    def save(self, path: str | Path) -> None:
        path = Path(path)
        entries = []
        blobs = []
        offset = 0
        for name in self.names():
            v = self._values[name]
            code = "<f8" if v.dtype == np.float64 else "<f4"
            raw = v.astype(code, copy=False).tobytes(order="C")
            entries.append({"name": name, "shape": list(v.shape),
                            "dtype": code, "offset": offset})
            blobs.append(raw)
            offset += len(raw)
        manifest = {"rng_seed": self.rng_seed, "entries": entries}
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=1) + "\n")
        path.with_suffix(".bin").write_bytes(b"".join(blobs))

    @classmethod
    def load(cls, path: str | Path) -> "ParamStore":
        path = Path(path)
        manifest = json.loads(path.with_suffix(".json").read_text())
        blob = path.with_suffix(".bin").read_bytes()
        store = cls(rng_seed=manifest["rng_seed"])
        for e in manifest["entries"]:
            shape = tuple(e["shape"])
            dt = np.dtype(e["dtype"])
            count = int(np.prod(shape)) if shape else 1
            raw = blob[e["offset"]:e["offset"] + count * dt.itemsize]
            arr = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
            store._values[e["name"]] = arr
            store._grads[e["name"]] = np.zeros_like(arr)
        return store

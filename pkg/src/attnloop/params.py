"""Named parameter segments with a canonical flat view.

A ``ParamVector`` is an immutable-by-convention mapping from segment name to
a float64 array. Flattening concatenates segments in sorted-name order, so
flatten/unflatten round-trips exactly and digests are stable.
"""

from __future__ import annotations

import hashlib
from typing import Iterator, Mapping

import numpy as np

from .errors import NonFiniteError, ShapeError, ValidationError
from .tensor import Tensor


class ParamVector(Mapping[str, np.ndarray]):
    def __init__(self, segments: Mapping[str, np.ndarray], validate: bool = True):
        self._segments: dict[str, np.ndarray] = {
            name: np.asarray(arr, dtype=np.float64) for name, arr in segments.items()
        }
        if len(self._segments) != len(segments):
            raise ValidationError("segment names must be unique")
        if validate:
            for name, arr in self._segments.items():
                if not np.all(np.isfinite(arr)):
                    raise NonFiniteError(f"segment {name!r} contains non-finite values",
                                         segment=name)

    # -- mapping protocol ---------------------------------------------------
    def __getitem__(self, name: str) -> np.ndarray:
        return self._segments[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._segments)

    def __len__(self) -> int:
        return len(self._segments)

    # -- canonical order ------------------------------------------------------
    @property
    def names(self) -> list[str]:
        return sorted(self._segments)

    @property
    def n_params(self) -> int:
        return sum(arr.size for arr in self._segments.values())

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: self._segments[name].shape for name in self.names}

    def flatten(self) -> np.ndarray:
        if not self._segments:
            return np.zeros(0)
        return np.concatenate([self._segments[n].ravel() for n in self.names])

    def unflatten(self, flat: np.ndarray) -> "ParamVector":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ShapeError(f"expected {self.n_params} values, got {flat.size}")
        out, off = {}, 0
        for name in self.names:
            shape = self._segments[name].shape
            size = self._segments[name].size
            out[name] = flat[off:off + size].reshape(shape).copy()
            off += size
        return ParamVector(out, validate=False)

    # -- construction helpers ---------------------------------------------------
    def copy(self) -> "ParamVector":
        return ParamVector({n: a.copy() for n, a in self._segments.items()},
                           validate=False)

    def zeros_like(self) -> "ParamVector":
        return ParamVector({n: np.zeros_like(a) for n, a in self._segments.items()},
                           validate=False)

    def with_updates(self, updates: Mapping[str, np.ndarray]) -> "ParamVector":
        merged = dict(self._segments)
        for name, arr in updates.items():
            if name not in merged:
                raise ValidationError(f"unknown segment {name!r}")
            if merged[name].shape != np.shape(arr):
                raise ShapeError(f"segment {name!r} shape mismatch")
            merged[name] = np.asarray(arr, dtype=np.float64)
        return ParamVector(merged, validate=False)

    def as_tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {n: Tensor(a, requires_grad=requires_grad)
                for n, a in self._segments.items()}

    # -- algebra (used by CG and optimizers) ----------------------------------
    def dot(self, other: "ParamVector") -> float:
        return float(sum(np.vdot(self._segments[n], other[n]) for n in self.names))

    def norm(self) -> float:
        return float(np.sqrt(max(self.dot(self), 0.0)))

    def axpy(self, alpha: float, other: "ParamVector") -> "ParamVector":
        """self + alpha * other."""
        return ParamVector(
            {n: self._segments[n] + alpha * other[n] for n in self.names},
            validate=False)

    def scale(self, alpha: float) -> "ParamVector":
        return ParamVector({n: alpha * a for n, a in self._segments.items()},
                           validate=False)

    # -- identity ------------------------------------------------------------------
    def digest(self) -> str:
        h = hashlib.sha256()
        for name in self.names:
            arr = self._segments[name]
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def allclose(self, other: "ParamVector", rtol: float = 0.0, atol: float = 0.0) -> bool:
        return self.names == other.names and all(
            np.allclose(self._segments[n], other[n], rtol=rtol, atol=atol)
            for n in self.names)

    def __repr__(self) -> str:
        return f"ParamVector({len(self)} segments, {self.n_params} params)"

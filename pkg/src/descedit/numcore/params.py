"""Named parameter collections with per-entry frozen flags."""

from __future__ import annotations

import hashlib
from collections.abc import Mapping
from typing import Iterable, Iterator

import numpy as np

from .tensor import ShapeError, Tensor


class ParamSet(Mapping):
    """Ordered name -> Tensor map. Frozen entries carry ``requires_grad=False``.

    Entries are replaced, never mutated: assigning a new array to a name
    builds a fresh Tensor with the entry's tracking flag.
    """

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._frozen: dict[str, bool] = {}

    def add(self, name: str, value, frozen: bool = False) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        data = value.data if isinstance(value, Tensor) else value
        t = Tensor(np.array(data, copy=True), requires_grad=not frozen)
        self._tensors[name] = t
        self._frozen[name] = bool(frozen)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def set(self, name: str, data: np.ndarray) -> None:
        old = self._tensors[name]
        data = np.asarray(data, dtype=old.dtype)
        if data.shape != old.shape:
            raise ShapeError(f"{name}: new shape {data.shape} != {old.shape}")
        self._tensors[name] = Tensor(data, requires_grad=not self._frozen[name])

    def restore(self, name: str, tensor: Tensor) -> None:
        """Put back a tensor previously obtained from this set."""
        if tensor.shape != self._tensors[name].shape:
            raise ShapeError(f"{name}: shape {tensor.shape} != {self._tensors[name].shape}")
        self._tensors[name] = tensor

    def remove(self, name: str) -> None:
        del self._tensors[name]
        del self._frozen[name]

    def is_frozen(self, name: str) -> bool:
        return self._frozen[name]

    def set_frozen(self, names: Iterable[str], frozen: bool) -> None:
        for name in names:
            if self._frozen[name] != frozen:
                self._frozen[name] = frozen
                self._tensors[name] = Tensor(self._tensors[name].data, requires_grad=not frozen)

    def trainable(self) -> "ParamSet":
        """Sub-collection of the non-frozen entries, sharing tensors."""
        out = ParamSet()
        for name, t in self._tensors.items():
            if not self._frozen[name]:
                out._tensors[name] = t
                out._frozen[name] = False
        return out

    def frozen_names(self) -> list[str]:
        return [n for n, f in self._frozen.items() if f]

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def num_scalars(self, trainable_only: bool = False) -> int:
        return int(sum(t.size for n, t in self._tensors.items()
                       if not (trainable_only and self._frozen[n])))

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet()
        for name, t in self._tensors.items():
            out.add(name, t.data.astype(dtype), frozen=self._frozen[name])
        return out

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, t in self._tensors.items():
            out.add(name, t.data, frozen=self._frozen[name])
        return out

    def checksum(self, names: Iterable[str] | None = None) -> str:
        h = hashlib.sha256()
        for name in (self._tensors if names is None else names):
            t = self._tensors[name]
            h.update(name.encode())
            h.update(str(t.shape).encode())
            h.update(t.data.tobytes())
        return h.hexdigest()

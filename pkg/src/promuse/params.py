"""Named parameter collections with a per-entry trainable flag."""
from __future__ import annotations

import hashlib
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from .tensor import Tensor


class ParameterSet:
    """Ordered mapping of dotted names to parameter tensors.

    The ``trainable`` flag is mirrored onto ``Tensor.requires_grad`` so a
    frozen entry never enters the autodiff graph and never gets a grad slot.
    """

    def __init__(self):
        self._entries: Dict[str, Tensor] = {}

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64, copy=True), requires_grad=trainable)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._entries.items())

    def is_trainable(self, name: str) -> bool:
        return self._entries[name].requires_grad

    def set_trainable(self, name: str, flag: bool) -> None:
        t = self._entries[name]
        t.requires_grad = bool(flag)
        if not flag:
            t.grad = None

    def freeze(self, prefix: str = "") -> None:
        for name in self._entries:
            if name.startswith(prefix):
                self.set_trainable(name, False)

    def unfreeze(self, prefix: str = "") -> None:
        for name in self._entries:
            if name.startswith(prefix):
                self.set_trainable(name, True)

    def trainable_names(self):
        return [n for n, t in self._entries.items() if t.requires_grad]

    def frozen_names(self):
        return [n for n, t in self._entries.items() if not t.requires_grad]

    def zero_grad(self) -> None:
        """Give every trainable entry a zeroed grad slot; clear frozen ones."""
        for t in self._entries.values():
            t.grad = np.zeros_like(t.data) if t.requires_grad else None

    def clear_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def n_values(self, trainable: Optional[bool] = None) -> int:
        return int(sum(t.size for t in self._entries.values()
                       if trainable is None or t.requires_grad == trainable))

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._entries.items()}

    def restore(self, snap: Dict[str, np.ndarray]) -> None:
        for n, arr in snap.items():
            self._entries[n].data[...] = arr

    def tensor_hash(self, names=None) -> str:
        """sha256 over (name, shape, raw float64 bytes) in sorted-name order."""
        h = hashlib.sha256()
        for n in sorted(self._entries if names is None else names):
            t = self._entries[n]
            h.update(n.encode("utf-8"))
            h.update(repr(t.shape).encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def frozen_hash(self, prefix: str = "") -> str:
        return self.tensor_hash([n for n in self.frozen_names() if n.startswith(prefix)])

    def subset(self, prefix: str) -> "ParameterSet":
        """A view sharing tensors whose names start with ``prefix``."""
        ps = ParameterSet()
        for n, t in self._entries.items():
            if n.startswith(prefix):
                ps._entries[n] = t
        return ps

    def attach(self, name: str, tensor: Tensor) -> None:
        """Register an existing tensor (used when merging sub-models)."""
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._entries[name] = tensor

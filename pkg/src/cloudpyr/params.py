"""Named parameter registry shared by the model, optimizer, and checkpoints."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


class Param:
    """One named tensor with an optional gradient slot.

    trainable=False entries are skipped by the optimizer; the gradient
    slot stays zero for them.  Batch-norm running statistics are stored
    as non-trainable entries (mutated by the forward pass, never by the
    optimizer).
    """

    __slots__ = ("data", "trainable", "grad")

    def __init__(self, data: np.ndarray, trainable: bool = True):
        self.data = data
        self.trainable = trainable
        self.grad = np.zeros_like(data)


class ParamStore:
    """Flat map from hierarchical names (a/b/c) to Param entries."""

    def __init__(self):
        self._entries: dict[str, Param] = {}
        # set by a completed backward pass, cleared by the optimizer step
        self.grads_ready = False

    def register(self, name: str, data: np.ndarray, trainable: bool = True) -> Param:
        if name in self._entries:
            raise ValueError(f"parameter {name!r} already registered")
        p = Param(np.ascontiguousarray(data), trainable)
        self._entries[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def trainable_names(self) -> list[str]:
        return [n for n, p in self._entries.items() if p.trainable]

    def items(self):
        return self._entries.items()

    def add_to_grad(self, name: str, g: np.ndarray) -> None:
        p = self._entries[name]
        if g.shape != p.data.shape:
            raise ShapeError(
                f"gradient dims {g.shape} do not match parameter {name!r} dims {p.data.shape}"
            )
        if p.trainable:
            p.grad += g

    def zero_grads(self) -> None:
        for p in self._entries.values():
            p.grad[...] = 0.0
        self.grads_ready = False

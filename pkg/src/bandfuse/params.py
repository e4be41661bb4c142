"""Ordered registry of learnable tensors with freeze support."""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from .autodiff import Tensor
from .errors import UsageError


class ParamStore:
    """Name -> learnable Tensor, in registration order.

    Names are unique; optimizers keep their per-parameter slots keyed by
    these names. Frozen parameters keep receiving gradients but are
    skipped by optimizer steps.
    """

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self._frozen: set[str] = set()

    def register(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise UsageError(f"parameter {name!r} registered twice")
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def add(self, name: str, data: np.ndarray) -> Tensor:
        return self.register(name, Tensor(data, requires_grad=True))

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def tensors(self) -> Iterator[Tensor]:
        return iter(self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def total_params(self) -> int:
        return sum(p.data.size for p in self._params.values())

    # freezing ---------------------------------------------------------

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def freeze(self, predicate: Callable[[str], bool]) -> None:
        for name in self._params:
            if predicate(name):
                self._frozen.add(name)

    def unfreeze(self, predicate: Callable[[str], bool]) -> None:
        self._frozen = {n for n in self._frozen if not predicate(n)}

    def freeze_all(self) -> None:
        self._frozen = set(self._params)

    def unfreeze_all(self) -> None:
        self._frozen = set()

    def trainable_items(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self._params.items() if n not in self._frozen]

    def trainable_param_count(self) -> int:
        return sum(p.data.size for _, p in self.trainable_items())

    # (de)serialization helpers ----------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        if missing:
            raise UsageError(f"missing arrays for parameters: {sorted(missing)[:4]} ...")
        for name, p in self._params.items():
            arr = arrays[name]
            if tuple(arr.shape) != p.shape:
                raise UsageError(
                    f"array for {name!r} has shape {tuple(arr.shape)}, expected {p.shape}"
                )
            p.data = arr.astype(p.data.dtype, copy=True)

from __future__ import annotations

from typing import Iterator, Mapping

import numpy as np

from ..autodiff import Tensor


class ParamTree:
    """Ordered mapping from canonical dotted path to a parameter tensor."""

    def __init__(self, tensors: Mapping[str, Tensor] | None = None):
        self._t: dict[str, Tensor] = dict(tensors or {})

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], requires_grad: bool = True) -> "ParamTree":
        return cls({k: Tensor(np.array(v, copy=True), requires_grad=requires_grad, name=k) for k, v in arrays.items()})

    def __getitem__(self, path: str) -> Tensor:
        return self._t[path]

    def __setitem__(self, path: str, value: Tensor) -> None:
        self._t[path] = value

    def __contains__(self, path: object) -> bool:
        return path in self._t

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def items(self):
        return self._t.items()

    def paths(self) -> list[str]:
        return list(self._t)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: t.shape for k, t in self._t.items()}

    def numel(self) -> int:
        return int(sum(t.size for t in self._t.values()))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._t.items()}

    def copy(self) -> "ParamTree":
        return ParamTree(
            {k: Tensor(np.array(t.data, copy=True), requires_grad=t.requires_grad, name=k) for k, t in self._t.items()}
        )

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        """Overwrite values in place (shapes must agree)."""
        for k, v in arrays.items():
            tgt = self._t[k]
            if tgt.shape != v.shape:
                raise ValueError(f"{k}: shape {v.shape} does not match {tgt.shape}")
            tgt.data = np.array(v, dtype=tgt.data.dtype, copy=True)

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.grad = None

    def astype(self, dtype) -> "ParamTree":
        return ParamTree(
            {k: Tensor.wrap(t.data.astype(dtype), requires_grad=t.requires_grad) for k, t in self._t.items()}
        )

    def equal(self, other: "ParamTree") -> bool:
        """Bit-level equality of paths, shapes, dtypes and contents."""
        if self.paths() != other.paths():
            return False
        for k, t in self._t.items():
            o = other[k].data
            if t.data.dtype != o.dtype or t.shape != o.shape or t.data.tobytes() != o.tobytes():
                return False
        return True

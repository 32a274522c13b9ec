"""Parameter storage and the Adam optimizer."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Ordered name -> parameter map plus Adam moments and non-trainable buffers.

    Buffers hold state such as batch-norm running statistics; they are saved
    with checkpoints but never touched by the optimizer.
    """

    def __init__(self):
        self.entries: "OrderedDict[str, Tensor]" = OrderedDict()
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.step_count = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.entries:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self.entries[name] = t
        self.adam_m[name] = np.zeros_like(t.data)
        self.adam_v[name] = np.zeros_like(t.data)
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self.buffers[name] = value
        return value

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.entries.values())

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return list(self.entries)

    def zero_grad(self) -> None:
        for t in self.entries.values():
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.size for t in self.entries.values())


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamStore:
    """One bias-corrected Adam update over every entry, then clear gradients."""
    missing = [name for name, t in store.entries.items() if t.grad is None]
    if missing:
        raise ValueError(f"adam_step: no gradient for {', '.join(missing[:5])}{' ...' if len(missing) > 5 else ''}")
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    step_size = lr / bc1
    root_bc2 = np.sqrt(bc2)
    for name, p in store.entries.items():
        g = p.grad.astype(p.data.dtype, copy=False)
        m = store.adam_m[name]
        v = store.adam_v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        # lr * m_hat / (sqrt(v_hat) + eps), computed in place
        denom = np.sqrt(v)
        denom /= root_bc2
        denom += eps
        np.divide(m, denom, out=denom)
        denom *= step_size
        p.data -= denom
        p.grad = None
    return store

"""Named parameter store, Adam updates, and a finite-difference grad checker."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .autodiff import Var


@dataclass
class ParamEntry:
    value: np.ndarray
    grad: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    step_count: int = 0


class ParamStore:
    """All learnable weights, keyed by name, with uniform gradient access.

    ``leaf(name)`` hands out a graph node whose gradient buffer is shared
    with the store, so ``backward()`` accumulates straight into it.
    """

    def __init__(self) -> None:
        self._entries: dict[str, ParamEntry] = {}

    def add(self, name: str, value) -> None:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name '{name}'")
        v = np.array(value, dtype=np.float64)
        self._entries[name] = ParamEntry(v, np.zeros_like(v), np.zeros_like(v),
                                         np.zeros_like(v))

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def entry(self, name: str) -> ParamEntry:
        return self._entries[name]

    def value(self, name: str) -> np.ndarray:
        return self._entries[name].value

    def items(self) -> Iterator[tuple[str, ParamEntry]]:
        return iter(self._entries.items())

    def leaf(self, name: str) -> Var:
        e = self._entries[name]
        v = Var(e.value)
        v.grad = e.grad
        return v

    def leaves(self) -> dict[str, Var]:
        return {name: self.leaf(name) for name in self._entries}

    def zero_grad(self) -> None:
        for e in self._entries.values():
            e.grad[...] = 0.0

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: e.value.copy() for name, e in self._entries.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for name, v in snap.items():
            self._entries[name].value[...] = v

    def n_scalars(self) -> int:
        return sum(e.value.size for e in self._entries.values())


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update on every entry, in place.

    Validates all gradients up front so a non-finite gradient leaves the
    store untouched.
    """
    for name, e in store.items():
        if not np.isfinite(e.grad).all():
            raise ValueError(f"non-finite gradient for parameter '{name}'")
    for _, e in store.items():
        e.step_count += 1
        t = e.step_count
        e.adam_m[...] = beta1 * e.adam_m + (1.0 - beta1) * e.grad
        e.adam_v[...] = beta2 * e.adam_v + (1.0 - beta2) * e.grad * e.grad
        m_hat = e.adam_m / (1.0 - beta1 ** t)
        v_hat = e.adam_v / (1.0 - beta2 ** t)
        e.value -= lr * m_hat / (np.sqrt(v_hat) + eps)


def grad_check(loss_fn: Callable[[ParamStore], Var], store: ParamStore,
               h: float = 1e-5) -> dict[str, float]:
    """Max relative error of analytic vs central-difference gradients.

    ``loss_fn`` must build a fresh scalar graph from the store's leaves and
    be deterministic.  Returns one worst-case error per parameter, where the
    error is |a - n| / max(|a|, |n|, 1e-8).
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("h outside [1e-7, 1e-3]")
    store.zero_grad()
    loss = loss_fn(store)
    loss.backward()
    analytic = {name: e.grad.copy() for name, e in store.items()}
    errs: dict[str, float] = {}
    for name, e in store.items():
        worst = 0.0
        for idx in np.ndindex(e.value.shape):
            orig = e.value[idx]
            e.value[idx] = orig + h
            lp = float(loss_fn(store).data)
            e.value[idx] = orig - h
            lm = float(loss_fn(store).data)
            e.value[idx] = orig
            num = (lp - lm) / (2.0 * h)
            a = float(analytic[name][idx])
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
        errs[name] = worst
    return errs

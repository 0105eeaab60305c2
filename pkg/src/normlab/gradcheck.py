"""Central finite-difference checks against tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from .tensor import Tape, Tensor


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    n_coords: int
    n_kinks: int = 0

    def passed(self, tol: float) -> bool:
        return self.n_coords > 0 and bool(self.max_rel_error <= tol)


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def tape_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor]) -> list[np.ndarray]:
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    return [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]


def _evaluate(loss_fn, replay=None):
    with F.branch_patterns(replay) as log:
        value = loss_fn().item()
    return value, log


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], names=None,
                    h: float = 1e-4, max_coords: int | None = None, seed: int = 0,
                    pin_kinks: bool = True) -> list[GradCheckResult]:
    """Compare tape gradients of ``loss_fn()`` to central differences.

    ``loss_fn`` must rebuild its graph from the current ``.data`` of
    ``tensors`` on every call. With ``max_coords`` set, only that many
    randomly chosen coordinates per tensor are perturbed.

    With ``pin_kinks``, a stencil whose ``+h`` or ``-h`` evaluation flips a
    relu mask or max-pool argmax is re-evaluated with those patterns pinned
    to the unperturbed point, i.e. on the linear piece the tape
    differentiates. Such coordinates are counted in ``n_kinks``.
    """
    names = names or [t.name or f"arg{i}" for i, t in enumerate(tensors)]
    analytic = tape_gradients(loss_fn, tensors)
    _, base = _evaluate(loss_fn)
    rng = np.random.default_rng(seed)
    results = []
    for name, t, ga in zip(names, tensors, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(coords.size)
        kinks = 0
        for n, idx in enumerate(coords):
            orig = flat[idx]
            flat[idx] = orig + h
            fp, pp = _evaluate(loss_fn)
            flat[idx] = orig - h
            fm, pm = _evaluate(loss_fn)
            if pin_kinks and not (_same_branches(pp, base) and _same_branches(pm, base)):
                kinks += 1
                fm, _ = _evaluate(loss_fn, base)
                flat[idx] = orig + h
                fp, _ = _evaluate(loss_fn, base)
            flat[idx] = orig
            numeric[n] = (fp - fm) / (2.0 * h)
        err = relative_error(ga.reshape(-1)[coords], numeric)
        results.append(GradCheckResult(name, float(err.max()) if err.size else 0.0, int(coords.size), kinks))
    return results

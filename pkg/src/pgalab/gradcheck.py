"""Central finite differences and gradient comparison helpers."""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from . import tensor as _tensor
from .tensor import Tensor, backward


def numeric_gradient(fn: Callable[[], float], param: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``fn()`` w.r.t. ``param.data``, perturbed in place."""
    flat = param.data.reshape(-1)
    out = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn()
        flat[i] = orig - step
        down = fn()
        flat[i] = orig
        out[i] = (up - down) / (2.0 * step)
    return out.reshape(param.shape)


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Max elementwise relative error; differences within ``floor`` count as zero."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    diff = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    rel = np.where(diff <= floor, 0.0, diff / np.where(scale > 0, scale, 1.0))
    return float(np.max(rel))


@contextmanager
def _patched_stop_gradient(replacement):
    original = _tensor.stop_gradient
    _tensor.stop_gradient = replacement
    try:
        yield
    finally:
        _tensor.stop_gradient = original


def frozen_surrogate(loss_fn: Callable[[], Tensor]) -> Callable[[], Tensor]:
    """Version of ``loss_fn`` whose stop_gradient outputs are pinned.

    Every ``stop_gradient`` result is recorded at the current parameters and
    replayed, in call order, on later evaluations. The surrogate's true
    derivative is therefore the routed gradient that ``backward`` returns,
    which makes it the right target for finite differences.
    """
    recorded = []
    original = _tensor.stop_gradient

    def record(a):
        out = original(a)
        recorded.append(out.data.copy())
        return out

    with _patched_stop_gradient(record):
        loss_fn()

    def replay():
        values = iter(recorded)
        with _patched_stop_gradient(lambda a: _tensor.constant(next(values))):
            return loss_fn()

    return replay


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                    step: float = 1e-5, floor: float = 1e-8) -> float:
    """Max relative error between backward() and central differences.

    ``loss_fn`` must rebuild the loss from the current parameter values and
    be deterministic (fix any noise seeds inside it). Stop-gradient values are
    held at the unperturbed point, see :func:`frozen_surrogate`.
    """
    analytic = backward(loss_fn(), params)
    surrogate = frozen_surrogate(loss_fn)
    worst = 0.0
    for p, g in zip(params, analytic):
        num = numeric_gradient(lambda: surrogate().item(), p, step)
        worst = max(worst, relative_error(g, num, floor))
    return worst

"""Central finite-difference checks against the autodiff tape."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, step: float = 1e-5,
                   indices: Optional[Sequence[tuple]] = None) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. entries of ``t``.

    Only ``indices`` are perturbed when given; other entries stay NaN.
    """
    out = np.full(t.shape, np.nan)
    flat = t.data.reshape(-1)
    if indices is None:
        positions = range(flat.size)
    else:
        positions = [np.ravel_multi_index(ix, t.shape) for ix in indices]
    with no_grad():
        for pos in positions:
            orig = flat[pos]
            flat[pos] = orig + step
            up = fn().item()
            flat[pos] = orig - step
            down = fn().item()
            flat[pos] = orig
            out.reshape(-1)[pos] = (up - down) / (2 * step)
    return out


def max_relative_error(auto: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| over the checked entries, relative to the larger max magnitude."""
    keep = ~np.isnan(numeric)
    a, n = auto[keep], numeric[keep]
    if a.size == 0:
        return 0.0
    scale = max(np.abs(n).max(), np.abs(a).max(), 1e-12)
    return float(np.abs(a - n).max() / scale)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5,
                    max_entries: Optional[int] = None, rng=None) -> float:
    """Worst relative error between autodiff and finite differences over ``inputs``.

    ``fn`` must rebuild the scalar from the inputs on every call.  With
    ``max_entries`` set, a random subset of entries per input is checked.
    """
    for t in inputs:
        t.requires_grad = True
    loss = fn()
    backward(loss)
    auto = [np.array(t.grad if t.grad is not None else np.zeros(t.shape)) for t in inputs]
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for t, a in zip(inputs, auto):
        indices = None
        if max_entries is not None and t.data.size > max_entries:
            flat = rng.choice(t.data.size, size=max_entries, replace=False)
            indices = [np.unravel_index(i, t.shape) for i in flat]
        num = numerical_grad(fn, t, step, indices)
        worst = max(worst, max_relative_error(a, num))
    return worst

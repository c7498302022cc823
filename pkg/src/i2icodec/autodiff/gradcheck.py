"""Central-difference gradient probes."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def probe_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], n_probes: int = 100,
                    step: float = 1e-5, rng: np.random.Generator | None = None) -> float:
    """Largest relative error between analytic and central-difference partials.

    ``fn`` must rebuild its graph from the current ``inputs`` data on every call
    and return a scalar.  ``n_probes`` elements are drawn uniformly over all
    input elements.
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    fn().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    sizes = np.array([t.data.size for t in inputs])
    flat = rng.integers(0, sizes.sum(), size=n_probes)
    worst = 0.0
    for k in flat:
        which = int(np.searchsorted(np.cumsum(sizes), k, side="right"))
        idx = int(k - (sizes[:which].sum() if which else 0))
        t = inputs[which]
        view = t.data.reshape(-1)
        orig = view[idx]
        view[idx] = orig + step
        fp = fn().item()
        view[idx] = orig - step
        fm = fn().item()
        view[idx] = orig
        numeric = (fp - fm) / (2 * step)
        worst = max(worst, relative_error(numeric, float(analytic[which].reshape(-1)[idx])))
    return worst

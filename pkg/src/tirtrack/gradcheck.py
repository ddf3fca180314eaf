"""Central finite-difference checks for the tensor core."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad

DEFAULT_STEP = 1e-4
# denominators below this are treated as absolute error
REL_FLOOR = 1e-6


@dataclass
class GradReport:
    name: str
    probes: int
    max_rel_error: float
    worst_probe: tuple[int, int]

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_FLOOR)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], probes: int = 100,
                    rng: np.random.Generator | None = None, step: float = DEFAULT_STEP,
                    name: str = "") -> GradReport:
    """Compare analytic gradients of ``fn()`` w.r.t. ``inputs`` at random coordinates.

    ``fn`` must rebuild its graph from the current ``inputs`` data on every call.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    loss = fn()
    loss.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    sizes = np.array([t.size for t in inputs])
    worst, worst_at = 0.0, (-1, -1)
    for _ in range(probes):
        i = int(rng.choice(len(inputs), p=sizes / sizes.sum()))
        j = int(rng.integers(inputs[i].size))
        flat = inputs[i].data.reshape(-1)
        orig = flat[j]
        with no_grad():
            flat[j] = orig + step
            fp = fn().item()
            flat[j] = orig - step
            fm = fn().item()
        flat[j] = orig
        numeric = (fp - fm) / (2 * step)
        err = relative_error(float(analytic[i].reshape(-1)[j]), numeric)
        if err > worst:
            worst, worst_at = err, (i, j)
    return GradReport(name, probes, worst, worst_at)

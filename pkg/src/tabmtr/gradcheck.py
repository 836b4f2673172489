"""Central finite-difference checks against the tape's analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .tensor import Tensor

STEP = 1e-5
# floor on the denominator so exactly-zero gradients compare on absolute error
REL_FLOOR = 1e-6


@dataclass
class GradCheck:
    max_rel_error: float
    n_checked: int
    worst: tuple  # (parameter index, flat entry, analytic, numeric)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_FLOOR)


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], n_entries: int = 20,
                    rng: np.random.Generator | None = None, step: float = STEP) -> GradCheck:
    """Compare d loss / d params at ``n_entries`` random entries (all entries
    when there are fewer). ``loss_fn`` must be deterministic and rebuild the
    graph from the current parameter values on each call."""
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None  # backward accumulates into .grad
    with tn.recording():
        loss = loss_fn()
        grads = tn.backward(loss, wrt=list(params))
    sizes = [p.data.size for p in params]
    total = sum(sizes)
    picks = rng.choice(total, size=min(n_entries, total), replace=False)
    offsets = np.cumsum([0] + sizes)
    worst, max_err = None, 0.0
    for flat in np.sort(picks):
        pi = int(np.searchsorted(offsets, flat, side="right") - 1)
        j = int(flat - offsets[pi])
        view = params[pi].data.reshape(-1)
        if not np.shares_memory(view, params[pi].data):
            raise ValueError("parameter data must be contiguous for in-place perturbation")
        orig = view[j]
        with tn.no_grad():
            view[j] = orig + step
            up = loss_fn().item()
            view[j] = orig - step
            down = loss_fn().item()
        view[j] = orig
        numeric = (up - down) / (2 * step)
        analytic = float(grads[pi].reshape(-1)[j])
        err = relative_error(analytic, numeric)
        if worst is None or err > max_err:
            max_err, worst = err, (pi, j, analytic, numeric)
    return GradCheck(max_err, len(picks), worst)

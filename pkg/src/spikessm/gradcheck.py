"""Central finite-difference audits for the gradient engine.

Every differentiable path in the package is checked the same way:
compute analytic gradients on the tape, then probe random entries with
a symmetric difference quotient at 64-bit precision.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Graph, Tensor

FD_STEP = 1e-5
REL_TOL = 1e-4
# below this magnitude the quotient |a - n| / max(|a|, |n|) is dominated by
# roundoff of the difference quotient itself, so the floor takes over
DENOM_FLOOR = 1e-6


def analytic_grads(loss_fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    with Graph() as g:
        loss = loss_fn()
    grads = g.backward(loss, wrt=params)
    return [grads[id(p)] for p in params]


def numeric_grad_entry(loss_fn: Callable[[], Tensor], param: Tensor, flat_index: int,
                       step: float = FD_STEP) -> float:
    flat = param.data.reshape(-1)
    orig = flat[flat_index]
    flat[flat_index] = orig + step
    hi = float(loss_fn().data)
    flat[flat_index] = orig - step
    lo = float(loss_fn().data)
    flat[flat_index] = orig
    return (hi - lo) / (2.0 * step)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    rng: np.random.Generator,
    probes: int = 100,
    step: float = FD_STEP,
) -> float:
    """Max relative error between tape and finite-difference gradients.

    ``probes`` entries are drawn at random across all parameters; the run
    precision should be float64 for the stated tolerances to hold.
    """
    analytic = analytic_grads(loss_fn, params)
    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    worst = 0.0
    for _ in range(probes):
        pick = int(rng.integers(total))
        pi = int(np.searchsorted(np.cumsum(sizes), pick, side="right"))
        fi = pick - int(np.cumsum(sizes)[pi - 1]) if pi > 0 else pick
        a = float(analytic[pi].reshape(-1)[fi])
        n = numeric_grad_entry(loss_fn, params[pi], fi, step=step)
        rel = abs(a - n) / max(abs(a), abs(n), DENOM_FLOOR)
        worst = max(worst, rel)
    return worst

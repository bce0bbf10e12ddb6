"""Shared test utilities: finite-difference oracle and tiny fixtures."""
import numpy as np

from araml import tensor as T


def numeric_gradients(loss_fn, params: dict, step: float = 1e-3) -> dict:
    """Central finite differences of a scalar-valued closure.

    `loss_fn` must evaluate the forward pass from the current parameter
    values; parameters are perturbed in place and restored.
    """
    grads = {}
    for name, p in params.items():
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            hi = loss_fn()
            flat[i] = saved - step
            lo = loss_fn()
            flat[i] = saved
            gf[i] = (hi - lo) / (2.0 * step)
        grads[name] = g
    return grads


def max_relative_error(analytic: dict, numeric: dict, floor: float = 1e-6) -> float:
    """Worst elementwise relative disagreement.

    The denominator is floored at the resolution of central differences with
    step 1e-3 (truncation error ~ step^2): gradients smaller than that can
    only be compared in absolute terms.
    """
    worst = 0.0
    for name, num in numeric.items():
        ana = analytic[name]
        denom = np.maximum(np.abs(ana) + np.abs(num), floor)
        worst = max(worst, float((np.abs(ana - num) / denom).max()))
    return worst


def analytic_gradients(build_loss, params: dict) -> dict:
    """Run one taped forward/backward pass and harvest parameter gradients."""
    for p in params.values():
        p.grad = None
    with T.Tape() as tape:
        loss = build_loss()
        T.backward(tape, loss)
    return {name: p.grad.copy() for name, p in params.items()}


def no_grad_value(build_loss) -> float:
    with T.no_grad():
        return build_loss().item()

"""
Finite-difference verification of tape gradients
"""

import logging
from dataclasses import dataclass

import numpy as np

from core.autodiff import Tape, Tensor, grad
from core.errors import ContractViolation, DeterminismError
from core.rng import SeededRng

logger = logging.getLogger(__name__)

# relative errors are measured against max(|analytic|, |numeric|, floor)
ERROR_FLOOR = 1e-3


@dataclass
class GradCheckResult:
    max_error: float
    param: str = None
    index: tuple = None
    analytic: float = 0.0
    numeric: float = 0.0
    checked: int = 0

    def passed(self, tolerance):
        return self.max_error <= tolerance


def _with_value(params, name, data):
    out = dict(params)
    p = params[name]
    out[name] = Tensor(data, requires_grad=p.requires_grad, name=p.name)
    return out


def finite_difference_check(loss_builder, params, eps=1e-5, max_coords=None, seed=0):
    """Compare analytic gradients with central differences

    ``loss_builder(params)`` must return a scalar Tensor. Frozen parameters
    are skipped. With ``max_coords`` only that many seeded coordinates of
    each parameter are probed.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ContractViolation(f"finite difference step must lie in [1e-6, 1e-3], got {eps}")

    first = loss_builder(params).item()
    second = loss_builder(params).item()
    if first != second:
        raise DeterminismError(f"loss builder returned {first!r} then {second!r} for the same inputs")

    with Tape():
        loss = loss_builder(params)
        analytic = grad(loss, params)

    rng = SeededRng(seed, "gradcheck")
    result = GradCheckResult(max_error=0.0)
    for name in sorted(analytic):
        base = params[name].data
        flat_count = base.size
        coords = np.arange(flat_count)
        if max_coords is not None and flat_count > max_coords:
            coords = np.sort(rng.split(name).permutation(flat_count)[:max_coords])
        g = analytic[name].data.reshape(-1)
        for flat in coords:
            plus = base.copy().reshape(-1)
            minus = base.copy().reshape(-1)
            plus[flat] += eps
            minus[flat] -= eps
            f_plus = loss_builder(_with_value(params, name, plus.reshape(base.shape))).item()
            f_minus = loss_builder(_with_value(params, name, minus.reshape(base.shape))).item()
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(g[flat])
            error = abs(a - numeric) / max(abs(a), abs(numeric), ERROR_FLOOR)
            result.checked += 1
            if error >= result.max_error:
                result.max_error = error
                result.param = name
                result.index = tuple(int(i) for i in np.unravel_index(flat, base.shape))
                result.analytic = a
                result.numeric = numeric
    logger.debug("gradcheck: %d coordinates, worst %.3e at %s%s",
                 result.checked, result.max_error, result.param, result.index)
    return result

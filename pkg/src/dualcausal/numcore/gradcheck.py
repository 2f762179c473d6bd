"""Central-difference gradient checking."""

import numpy as np

from ..errors import ContractError
from .tensor import Tensor


def _value(f, x_data):
    return float(f(Tensor(x_data)).data)


def grad_check(f, x, eps=1e-6):
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    Returns ``max_i |analytic_i - numeric_i| / max(1, |numeric_i|)``.

    Raises
    ------
    ContractError
        If two evaluations of ``f`` at the same point disagree, or ``eps``
        is outside ``(0, 1e-3]``.
    """
    if not (0 < eps <= 1e-3):
        raise ContractError(f"eps must lie in (0, 1e-3], got {eps}")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if _value(f, x0) != _value(f, x0):
        raise ContractError("f is not deterministic: two evaluations disagree")

    xt = Tensor(x0.copy(), requires_grad=True)
    f(xt).backward()
    analytic = np.zeros_like(x0) if xt.grad is None else xt.grad

    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = _value(f, x0)
        flat[i] = orig - eps
        fm = _value(f, x0)
        flat[i] = orig
        numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def numeric_grad(f, params, eps=1e-6):
    """Central differences of a zero-argument loss ``f`` w.r.t. each tensor in ``params``."""
    out = []
    for p in params:
        g = np.empty_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            g.reshape(-1)[i] = (fp - fm) / (2 * eps)
        out.append(g)
    return out

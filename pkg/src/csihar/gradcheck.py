"""Central finite-difference checks of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from csihar import autodiff as ad
from csihar.autodiff import Tensor
from csihar.errors import ContractError, GradCheckError

EPS_RANGE = (1e-7, 1e-4)
# magnitudes below this are compared absolutely rather than relatively
REL_FLOOR = 1e-4


def relative_error(analytic, numeric, floor: float = REL_FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / scale))


def _check_eps(eps: float) -> None:
    lo, hi = EPS_RANGE
    if not lo <= eps <= hi:
        raise ContractError(f"eps must lie in [{lo}, {hi}], got {eps}")


def _scalar(value: Tensor) -> float:
    if not isinstance(value, Tensor) or value.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    return float(value.data.reshape(()))


def grad_check_params(f: Callable[[], Tensor], params: Mapping[str, Tensor],
                      eps: float = 1e-5) -> dict:
    """Worst relative error per named tensor for a closure ``f()`` over ``params``.

    Each tensor's ``data`` is perturbed coordinate by coordinate and restored
    afterwards.  ``f`` is evaluated twice at the base point; differing
    results raise :class:`GradCheckError`.
    """
    _check_eps(eps)
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ContractError(f"{name}: gradient checks need 64-bit values, got {p.dtype}")
        p.requires_grad = True
        p.zero_grad()

    out = f()
    base = _scalar(out)
    ad.backward(out)
    analytic = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for n, p in params.items()}
    with ad.no_grad():
        again = _scalar(f())
        if again != base:
            raise GradCheckError(f"f is not deterministic: {base!r} then {again!r}")

        errors = {}
        for name, p in params.items():
            original = p.data
            numeric = np.zeros_like(original)
            work = original.copy()
            flat, nflat = work.reshape(-1), numeric.reshape(-1)
            p.data = work
            try:
                for i in range(flat.size):
                    keep = flat[i]
                    flat[i] = keep + eps
                    up = _scalar(f())
                    flat[i] = keep - eps
                    down = _scalar(f())
                    flat[i] = keep
                    nflat[i] = (up - down) / (2.0 * eps)
            finally:
                p.data = original
            errors[name] = relative_error(analytic[name], numeric)
    return errors


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Worst-case relative error between ``backward`` and central differences.

    >>> round(grad_check(lambda t: t.sum(), np.ones(3)), 12)
    0.0
    """
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    t = Tensor(np.array(t.data, dtype=np.float64), requires_grad=True)
    return grad_check_params(lambda: f(t), {"x": t}, eps)["x"]

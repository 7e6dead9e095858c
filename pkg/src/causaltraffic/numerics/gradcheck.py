"""Central finite-difference checks for autodiff gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import NonFiniteError, Tensor

FLOOR = 1e-8


def relative_error(autodiff: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(autodiff - numeric) / (np.abs(numeric) + FLOOR)


def finite_difference_check(f: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``f`` maps a tensor shaped like ``point`` to a scalar tensor.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(point, dtype=np.float64)
    x = Tensor(x0, requires_grad=True)
    out = f(x)
    out.backward()
    ad = x.grad if x.grad is not None else np.zeros_like(x0)
    num = np.zeros_like(x0)
    for i in np.ndindex(x0.shape):
        vals = []
        for sgn in (1.0, -1.0):
            xp = x0.copy()
            xp[i] += sgn * step
            try:
                v = float(f(Tensor(xp)).value)
            except NonFiniteError as exc:
                raise NonFiniteError(f"coordinate {i}: {exc}") from None
            if not np.isfinite(v):
                raise NonFiniteError(f"coordinate {i}: non-finite objective")
            vals.append(v)
        num[i] = (vals[0] - vals[1]) / (2.0 * step)
    return float(relative_error(ad, num).max()) if x0.size else 0.0


def check_parameters(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
                     step: float = 1e-5) -> tuple[float, str, tuple[int, ...]]:
    """Finite-difference check over every coordinate of every parameter.

    ``loss_fn`` must rebuild the graph from the current ``params`` values on
    each call. Returns ``(max_rel_error, param_name, index)`` of the worst
    coordinate.
    """
    for p in params.values():
        p.zero_grad()
    loss_fn().backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros(p.shape))
                for k, p in params.items()}
    worst = (0.0, "", ())
    for name, p in params.items():
        base = p.value.copy()
        for i in np.ndindex(base.shape):
            vals = []
            for sgn in (1.0, -1.0):
                pert = base.copy()
                pert[i] += sgn * step
                p.value = pert
                try:
                    vals.append(float(loss_fn().value))
                except NonFiniteError as exc:
                    raise NonFiniteError(f"{name}{list(i)}: {exc}") from None
            p.value = base
            num = (vals[0] - vals[1]) / (2.0 * step)
            err = abs(analytic[name][i] - num) / (abs(num) + FLOOR)
            if err > worst[0]:
                worst = (float(err), name, i)
        p.value = base
    for p in params.values():
        p.zero_grad()
    return worst

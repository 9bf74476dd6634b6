from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor, get_dtype, no_grad


class EvaluationError(RuntimeError):
    pass


def _evaluate(f, arrays: Mapping[str, np.ndarray]) -> float:
    with no_grad():
        val = f({k: Tensor.wrap(v) for k, v in arrays.items()})
    out = float(np.asarray(val.data).reshape(-1)[0])
    if not np.isfinite(out):
        raise EvaluationError(f"objective is not finite ({out})")
    return out


def analytic_grads(f: Callable[[dict[str, Tensor]], Tensor], point: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    leaves = {k: Tensor.wrap(np.array(v, copy=True), requires_grad=True) for k, v in point.items()}
    with Tape() as tape:
        root = f(leaves)
    if not np.all(np.isfinite(root.data)):
        raise EvaluationError("objective is not finite at the evaluation point")
    names = list(leaves)
    grads = tape.backward(root, [leaves[k] for k in names])
    return dict(zip(names, grads))


def grad_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    point: Mapping[str, np.ndarray],
    h: float = 1e-6,
    n_samples: int | None = 40,
    seed: int = 0,
) -> float:
    """Max relative error between taped gradients and central differences.

    The error for one element is |analytic - numeric| / max(1, |analytic|).
    ``n_samples`` elements are drawn per input (all of them when None or
    when the input is smaller). Requires 64-bit precision.
    """
    if get_dtype() != np.float64:
        raise RuntimeError("grad_check must run in wide precision")
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"step {h} outside [1e-6, 1e-4]")
    point = {k: np.asarray(v, dtype=np.float64) for k, v in point.items()}
    _evaluate(f, point)
    grads = analytic_grads(f, point)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, base in point.items():
        n = base.size
        if n_samples is None or n <= n_samples:
            idx = np.arange(n)
        else:
            idx = rng.choice(n, size=n_samples, replace=False)
        for i in idx:
            shifted = dict(point)
            plus = base.copy().reshape(-1)
            plus[i] += h
            shifted[name] = plus.reshape(base.shape)
            fp = _evaluate(f, shifted)
            minus = base.copy().reshape(-1)
            minus[i] -= h
            shifted[name] = minus.reshape(base.shape)
            fm = _evaluate(f, shifted)
            numeric = (fp - fm) / (2.0 * h)
            analytic = float(grads[name].reshape(-1)[i])
            worst = max(worst, abs(analytic - numeric) / max(1.0, abs(analytic)))
    return worst

"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tape, Tensor, no_record

__all__ = ["grad_check", "numerical_gradient", "relu_margin"]


def relu_margin(f: Callable[[], Tensor]) -> float:
    """Smallest |pre-activation| seen by any ReLU during one forward of ``f``.

    Central differences are only meaningful when this exceeds the probe step.
    """
    from . import ops

    seen = [np.inf]

    def observe(arr):
        seen[0] = min(seen[0], float(np.abs(arr).min()))

    ops.relu_observers.append(observe)
    try:
        with no_record():
            f()
    finally:
        ops.relu_observers.remove(observe)
    return seen[0]


def _scalarize(out: Tensor, weights: np.ndarray | None):
    from . import ops

    if out.shape == ():
        return out
    return ops.sum(ops.mul(out, Tensor(weights, dtype=out.dtype)))


def numerical_gradient(
    f: Callable[[], Tensor], tensor: Tensor, eps: float, coords: Sequence[tuple] | None = None,
    weights: np.ndarray | None = None,
) -> dict[tuple, float]:
    """Central differences of ``f`` w.r.t. selected coordinates of ``tensor``."""
    data = tensor.data
    writeable = data.flags.writeable
    data.flags.writeable = True
    result = {}
    try:
        with no_record():
            for idx in coords if coords is not None else np.ndindex(data.shape):
                orig = data[idx]
                data[idx] = orig + eps
                plus = _scalarize(f(), weights).item()
                data[idx] = orig - eps
                minus = _scalarize(f(), weights).item()
                data[idx] = orig
                result[idx] = (plus - minus) / (2.0 * eps)
    finally:
        data.flags.writeable = writeable
    return result


def grad_check(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` takes no arguments and closes over ``inputs`` (tensors or parameters,
    all 64-bit).  Non-scalar outputs are reduced with a fixed random weighting
    so every output coordinate contributes.  The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.  ``max_coords`` caps the
    number of coordinates probed per input (chosen by ``seed``); ``None``
    probes all of them.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError(f"grad_check requires 64-bit inputs, got {t.dtype}")
    rng = np.random.default_rng(seed)

    with no_record():
        probe = f()
    weights = None if probe.shape == () else rng.standard_normal(probe.shape)

    saved = []
    for t in inputs:
        saved.append((t.requires_grad, t.grad))
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    try:
        tape = Tape()
        with tape:
            loss = _scalarize(f(), weights)
        if not np.isfinite(loss.data).all():
            raise NonFiniteError("grad_check: non-finite output")
        tape.backward(loss)
        analytic = [t.grad.copy() for t in inputs]
    finally:
        for t, (req, grad) in zip(inputs, saved):
            t.requires_grad = req
            t.grad = grad

    worst = 0.0
    for t, ga in zip(inputs, analytic):
        coords = list(np.ndindex(t.shape))
        if max_coords is not None and len(coords) > max_coords:
            pick = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        numeric = numerical_gradient(f, t, eps, coords, weights)
        for idx, gn in numeric.items():
            a = float(ga[idx])
            err = abs(a - gn) / max(1.0, abs(a))
            worst = max(worst, err)
    return worst

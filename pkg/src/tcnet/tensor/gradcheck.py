from __future__ import annotations

from typing import Callable

import numpy as np

from .core import Tensor, backward


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    step: float = 1e-5,
    max_elements: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative disagreement between the taped gradient and central differences.

    The error per element is ``|analytic - numeric| / max(1, |numeric|)``.
    ``max_elements`` restricts the finite-difference sweep to a seeded random
    subset of coordinates, which keeps checks on large parameter tensors cheap.
    """
    if step <= 0:
        raise ValueError(f"grad_check: step must be positive, got {step}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    y = f(leaf)
    if y.size != 1:
        raise ValueError(f"grad_check: f must return a scalar, got shape {y.shape}")
    if not np.isfinite(y.data).all():
        raise ValueError("grad_check: f(x) is not finite")
    analytic = backward(y, wrt=[leaf])[leaf].reshape(-1)

    flat = base.reshape(-1)
    coords = np.arange(flat.size)
    if max_elements is not None and flat.size > max_elements:
        coords = np.sort(np.random.default_rng(seed).choice(flat.size, max_elements, replace=False))
    worst = 0.0
    for i in coords:
        probe = flat.copy()
        probe[i] = flat[i] + step
        up = f(Tensor(probe.reshape(base.shape))).item()
        probe[i] = flat[i] - step
        down = f(Tensor(probe.reshape(base.shape))).item()
        numeric = (up - down) / (2.0 * step)
        err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return float(worst)


def param_grad_check(
    loss_fn: Callable[[], Tensor],
    param: Tensor,
    step: float = 1e-5,
    max_elements: int | None = None,
    seed: int = 0,
) -> float:
    """Like :func:`grad_check` but perturbs an existing leaf in place.

    ``loss_fn`` rebuilds the graph from scratch on every call, so parameters
    buried inside a model can be checked without rewiring it.
    """
    if step <= 0:
        raise ValueError(f"grad_check: step must be positive, got {step}")
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise ValueError("grad_check: f(x) is not finite")
    analytic = backward(loss, wrt=[param])[param].reshape(-1)
    param.grad = None
    flat = param.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_elements is not None and flat.size > max_elements:
        coords = np.sort(np.random.default_rng(seed).choice(flat.size, max_elements, replace=False))
    worst = 0.0
    for i in coords:
        keep = flat[i]
        flat[i] = keep + step
        up = loss_fn().item()
        flat[i] = keep - step
        down = loss_fn().item()
        flat[i] = keep
        numeric = (up - down) / (2.0 * step)
        worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(numeric)))
    return float(worst)

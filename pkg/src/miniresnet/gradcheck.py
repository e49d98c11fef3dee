"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor
from . import tensor as T


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def _pick_indices(params: Sequence[Tensor], samples: int | None, rng: np.random.Generator):
    if samples is None:
        return [(p, i) for p in params for i in range(p.size)]
    total = sum(p.size for p in params)
    if samples >= total:
        return [(p, i) for p in params for i in range(p.size)]
    # Every tensor contributes at least one entry; the rest are spread by size,
    # with the rounding shortfall filled by the largest remainders.
    budget = samples - len(params)
    exact = [budget * p.size / total for p in params]
    shares = [min(1 + int(e), p.size) for e, p in zip(exact, params)]
    order = sorted(range(len(params)), key=lambda i: int(exact[i]) - exact[i])
    for i in order:
        if sum(shares) >= samples:
            break
        if shares[i] < params[i].size:
            shares[i] += 1
    picks = []
    for p, share in zip(params, shares):
        picks += [(p, int(i)) for i in rng.choice(p.size, size=share, replace=False)]
    return picks


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-5,
    samples: int | None = None,
    seed: int = 0,
    return_count: bool = False,
):
    """Max relative error between tape gradients and central differences.

    ``loss_fn`` must build a scalar loss from the current values of ``params``
    and be deterministic (batch norm in a fixed mode, no shuffling). Each
    sampled entry is perturbed by ``±epsilon`` in place and restored after.
    The error per entry is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    params = list(params)
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {id(p): np.array(p.grad if p.grad is not None else np.zeros_like(p.data)) for p in params}

    rng = np.random.default_rng(seed)
    worst = 0.0
    picks = _pick_indices(params, samples, rng)
    for p, flat in picks:
        view = p.data.reshape(-1)
        orig = view[flat]
        view[flat] = orig + epsilon
        up = float(loss_fn().data)
        view[flat] = orig - epsilon
        down = float(loss_fn().data)
        view[flat] = orig
        numeric = (up - down) / (2 * epsilon)
        worst = max(worst, relative_error(float(analytic[id(p)].reshape(-1)[flat]), numeric))
    if return_count:
        return worst, len(picks)
    return worst


def check_network(network, x: np.ndarray, epsilon: float = 1e-5, samples: int | None = 200, seed: int = 0, **kw):
    """Gradient check of a network's parameters under a random linear probe loss.

    The network keeps whatever mode it is in; train mode is deterministic for a
    fixed batch, its running-statistic updates do not affect the output.
    """
    xt = Tensor(x)
    probe = np.random.default_rng(seed + 1).standard_normal(network.forward(xt).shape).astype(x.dtype)

    def loss_fn():
        return T.sum(T.mul(network.forward(xt), probe))

    return finite_difference_check(loss_fn, network.parameter_list(), epsilon=epsilon, samples=samples, seed=seed, **kw)

"""Central finite-difference check of tape gradients."""
from __future__ import annotations

from typing import Callable, Dict, Mapping, Optional

import numpy as np

from ..errors import ValidationError
from .autodiff import Tape, Var, precision, value_of


def _scalar(out) -> float:
    v = value_of(out)
    if v.size != 1:
        raise ValidationError(f"grad_check needs a scalar function, got output shape {v.shape}")
    return float(v.reshape(()))


def grad_check(
    f: Callable[[Mapping[str, object]], object],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    n_coords: Optional[int] = None,
    seed: int = 0,
    return_details: bool = False,
):
    """Compare tape gradients of ``f`` with central differences.

    ``f`` receives a dict of parameters (``Var`` while differentiating, plain
    arrays while probing) and must return a scalar. Everything runs in float64.

    ``n_coords=None`` checks every coordinate; otherwise that many coordinates
    are sampled, spread round-robin so each tensor is visited at least once.
    The result is ``max |a - n| / max(|a|, |n|, 1e-8)``.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    with precision(np.float64):
        leaves = {k: Var(v, name=k) for k, v in base.items()}
        with Tape() as tape:
            out = f(leaves)
        _scalar(out)
        if not isinstance(out, Var):
            raise ValidationError("f output does not depend on any parameter")
        tape.backward(out)
        analytic = {k: leaves[k].grad for k in base}

        coords = _pick_coords(base, n_coords, np.random.default_rng(seed))
        worst = 0.0
        details = []
        for name, idx in coords:
            arr = base[name]
            orig = arr[idx]
            arr[idx] = orig + h
            fp = _scalar(f(base))
            arr[idx] = orig - h
            fm = _scalar(f(base))
            arr[idx] = orig
            num = (fp - fm) / (2.0 * h)
            ana = float(analytic[name][idx])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
            details.append((name, idx, ana, num, err))
    if return_details:
        return worst, details
    return worst


def _pick_coords(params: Dict[str, np.ndarray], n: Optional[int], rng):
    if n is None:
        return [(k, idx) for k, v in params.items() for idx in np.ndindex(v.shape)]
    names = list(params)
    coords = []
    for i in range(max(n, len(names))):
        name = names[i % len(names)]
        shape = params[name].shape
        coords.append((name, tuple(int(rng.integers(s)) for s in shape)))
    return coords

"""Adam with bias correction, over dicts of named arrays."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple

import numpy as np

from ..errors import DimensionError, NonFiniteGradientError, ValidationError


@dataclass
class AdamState:
    lr: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ValidationError(f"lr must be non-negative, got {self.lr}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 < b < 1.0:
                raise ValidationError(f"{name} must lie in (0, 1), got {b}")
        if self.eps <= 0:
            raise ValidationError(f"eps must be positive, got {self.eps}")


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One Adam update.

    Returns a new parameter dict; the input arrays are left untouched. ``state``
    is advanced in place and returned for convenience. The whole update is
    rejected (nothing changes) if any gradient is non-finite.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise ValidationError(f"missing gradient for parameter {name!r}")
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, param {p.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteGradientError(
                f"non-finite gradient in {name!r} ({bad} of {g.size} entries); "
                f"update at step {state.step + 1} rejected"
            )

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new = {}
    for name, p in params.items():
        g = grads[name].astype(p.dtype, copy=False)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        else:
            v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        new[name] = (p - update).astype(p.dtype, copy=False)
    return new, state

"""Adadelta optimizer and gradient-norm clipping."""

import numpy as np

from . import kernels
from .errors import ConfigurationError, DimensionError


class AdadeltaState:
    """Per-parameter running averages E[g^2] and E[dx^2].

    rho is the decay in (0,1); eps keeps the ratio of the two RMS terms
    defined when either accumulator is still near zero.
    """

    def __init__(self, params, rho=0.95, eps=1e-6):
        if not 0.0 < rho < 1.0:
            raise ConfigurationError("rho must be in (0,1), got %r" % rho)
        if eps <= 0.0:
            raise ConfigurationError("eps must be positive, got %r" % eps)
        self.rho = float(rho)
        self.eps = float(eps)
        self.eg2 = {name: np.zeros_like(t.values) for name, t in params.items()}
        self.edx2 = {name: np.zeros_like(t.values) for name, t in params.items()}


def adadelta_step(params, grads, state):
    """Apply one Adadelta update in place.

    E[g^2]  <- rho E[g^2] + (1-rho) g^2
    dx       = -(sqrt(E[dx^2]+eps) / sqrt(E[g^2]+eps)) g
    E[dx^2] <- rho E[dx^2] + (1-rho) dx^2
    x       <- x + dx

    A missing gradient counts as zero (accumulators still decay).
    """
    for name, param in params.items():
        if name not in state.eg2:
            raise DimensionError("no optimizer state for parameter %r" % name)
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(param.values)
        if g.shape != param.values.shape:
            raise DimensionError("gradient shape %s does not match parameter %s %s"
                                 % (g.shape, name, param.values.shape))
        kernels.adadelta_update(
            param.values.ravel(), np.ascontiguousarray(g).ravel(),
            state.eg2[name].ravel(), state.edx2[name].ravel(),
            state.rho, state.eps)


def clip_global_norm(grads, max_norm):
    """Scale all gradients so their joint L2 norm is at most max_norm.

    Returns the pre-clip norm.  max_norm of None or <= 0 disables clipping.
    """
    total = 0.0
    for g in grads.values():
        if g is not None:
            total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    norm = float(np.sqrt(total))
    if max_norm is not None and max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            if g is not None:
                g *= factor
    return norm

"""Layer-interpolated dropout and L1/L2 activation penalties.

Both methods take a value for the first activation layer and one for the last;
the layers in between receive points on the straight line joining them.
"""

from fractions import Fraction

import numpy as np

from . import tensor as T
from .models import dropout_sites


def interpolate(first, last, n):
    """``n`` values on the line through ``(1, first)`` and ``(n, last)``.

    Arithmetic is exact on the shortest decimal form of the endpoints, so
    ``interpolate(0.6, 0.2, 5)`` gives exactly ``[0.6, 0.5, 0.4, 0.3, 0.2]``.
    """
    if n < 1:
        raise ValueError("need at least one site")
    a, b = Fraction(repr(float(first))), Fraction(repr(float(last)))
    if n == 1:
        return [float(a)]
    return [float(a + (b - a) * (x - 1) / (n - 1)) for x in range(1, n + 1)]


def configure_dropout(model, p_first, p_last):
    """Return ``model`` with interpolated dropout before every ReLU."""
    n = len(dropout_sites(model))
    if n == 0:
        return model
    return model.with_dropout(interpolate(p_first, p_last, n))


def configure_penalty(model, mode, first, last):
    n = len(dropout_sites(model))
    if n == 0:
        return model
    return model.with_penalty(mode, interpolate(first, last, n))


def activation_penalty(activations, factors, mode):
    """Mean over layers of ``factor_l * A_l``.

    ``A_l`` is the mean of ``|a|`` (mode ``l1``) or ``a**2`` (``l2``) over all
    units and samples of layer ``l``. ``activations`` may be tape variables
    (the result is then a tape variable) or plain arrays (a float is returned).
    """
    mode = mode.lower()
    if mode not in ("l1", "l2"):
        raise ValueError(f"unknown penalty mode {mode!r}")
    if len(factors) != len(activations):
        raise ValueError("need one factor per layer")
    if any(f < 0 for f in factors):
        raise ValueError("penalty factors must be non-negative")
    if not activations:
        return 0.0
    plain = not isinstance(activations[0], T.Var)
    if plain:
        tape = T.Tape()
        activations = [tape.constant(np.asarray(a, dtype=np.float64)) for a in activations]
    reduce = T.abs_ if mode == "l1" else T.square
    total = None
    for act, factor in zip(activations, factors):
        term = T.mean(reduce(act)) * float(factor)
        total = term if total is None else total + term
    out = total * (1.0 / len(activations))
    return float(out.value) if plain else out

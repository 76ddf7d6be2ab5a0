"""Shared test helpers."""

import numpy as np

from paratime import tensor as T
from paratime.tensor import Tensor


def randomize_params(named_params, rng, scale=0.3):
    """Re-draw parameter values at a scale that exercises the nonlinearities.

    The production init is deliberately small (0.02-scale), which makes
    finite differences ill-conditioned for deep compositions: the loss
    baseline dwarfs per-coordinate sensitivity. Tests bump the scale.
    """
    for _, p in named_params:
        p.data[:] = rng.normal(0.0, scale, size=p.shape)


def probe_loss(out: Tensor, rng) -> Tensor:
    """Random linear functional of the output; well-conditioned for FD checks."""
    r = Tensor(np.asarray(rng.standard_normal(out.shape), dtype=out.dtype))
    return T.tsum(T.mul(out, r))

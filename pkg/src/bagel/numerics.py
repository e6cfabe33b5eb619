"""Shared numerical kernels: stable normal-interval log probabilities and a
vectorized truncated-normal sampler.

Both routines work on standardized quantities (unit standard deviation) and
are exact down to the representable tail, roughly |bound| < 37; beyond that
the interval probability underflows double precision entirely.
"""

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri

# Floor on interval probabilities so log-likelihood sums stay finite.
PROB_FLOOR = 1e-300
LOG_PROB_FLOOR = np.log(PROB_FLOOR)


def log_interval_prob(lower, upper):
    """log(Phi(upper) - Phi(lower)) for standardized bounds, tail-stable.

    Works elementwise on broadcastable arrays; bounds may be +/-inf. The
    difference is taken between log CDFs on whichever side of zero the
    interval's midpoint falls, mirroring through the survival function in
    the right tail, so intervals far from zero keep full relative precision.
    Results are floored at log(1e-300); a true zero-width interval comes
    back exactly at the floor.
    """
    lower, upper = np.broadcast_arrays(np.asarray(lower, float), np.asarray(upper, float))
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        la, lb = log_ndtr(lower), log_ndtr(upper)
        sa, sb = log_ndtr(-lower), log_ndtr(-upper)
        # lower + upper is NaN only for (-inf, inf), where the survival
        # branch gives the exact answer 0
        use_cdf = (lower + upper) <= 0
        cdf_side = lb + np.log1p(-np.exp(np.minimum(la - lb, 0.0)))
        surv_side = sa + np.log1p(-np.exp(np.minimum(sb - sa, 0.0)))
        out = np.where(use_cdf, cdf_side, surv_side)
    out = np.nan_to_num(out, nan=LOG_PROB_FLOOR, neginf=LOG_PROB_FLOOR, posinf=LOG_PROB_FLOOR)
    return np.maximum(out, LOG_PROB_FLOOR)


def _trunc_std_normal(rng, a, b):
    """Standard normal truncated to (a, b], sampled by inverse CDF.

    Uses the CDF parameterization when the interval touches the left half and
    the survival parameterization when it sits in the right tail, so accuracy
    holds out to |bound| ~ 37. Degenerate intervals (probability underflow)
    collapse to the bound nearer the mode.
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    u = rng.random(a.shape)
    out = np.empty(a.shape)

    right = a >= 0  # whole interval in the right tail: use survival function
    if right.any():
        sa, sb = ndtr(-a[right]), ndtr(-b[right])
        p = sa - u[right] * (sa - sb)
        x = -ndtri(np.maximum(p, 5e-324))
        out[right] = np.where(sa > sb, x, a[right])

    left = ~right
    if left.any():
        fa, fb = ndtr(a[left]), ndtr(b[left])
        p = fa + u[left] * (fb - fa)
        x = ndtri(np.minimum(np.maximum(p, 5e-324), 1.0 - 1e-17))
        out[left] = np.where(fb > fa, x, b[left])

    return np.clip(out, a, b)


def truncated_normal(rng, mean, lower, upper):
    """Draw X ~ Normal(mean, 1) conditioned on lower < X <= upper.

    All arguments broadcast; bounds may be infinite. `rng` is a
    numpy.random.Generator.
    """
    mean, lower, upper = np.broadcast_arrays(
        np.asarray(mean, float), np.asarray(lower, float), np.asarray(upper, float)
    )
    if np.any(lower >= upper):
        raise ValueError("truncated_normal requires lower < upper")
    return mean + _trunc_std_normal(rng, lower - mean, upper - mean)

"""Cubic B-spline basis over visit times and the second-order difference
penalty used by the smoothness prior on spline coefficients."""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

from .errors import TimeOutOfDomain, TooFewBases

log = logging.getLogger(__name__)

DEGREE = 3  # cubic, fixed


@dataclass(frozen=True)
class SplineBasis:
    """Clamped cubic B-spline basis with equally spaced interior knots.

    The end knots are repeated degree+1 times, so each design row is a
    partition of unity and the first/last basis functions hit 1 at the
    domain edges.
    """

    num_bases: int
    domain: tuple[float, float]
    knots: np.ndarray = field(repr=False)
    degree: int = DEGREE

    def design(self, times, clamp=False):
        """Design matrix (len(times), num_bases) of basis values.

        With ``clamp=True``, out-of-domain times are clipped to the domain
        edge (logged once per call); otherwise they raise TimeOutOfDomain.
        B-splines extrapolate wildly, so clamping is the only supported way
        to evaluate beyond the fitted range.
        """
        t = np.atleast_1d(np.asarray(times, float))
        lo, hi = self.domain
        if clamp:
            n_out = int(np.sum((t < lo) | (t > hi)))
            if n_out:
                log.warning("clamping %d time(s) outside basis domain [%g, %g]", n_out, lo, hi)
            t = np.clip(t, lo, hi)
        elif np.any(t < lo) or np.any(t > hi):
            raise TimeOutOfDomain(f"times outside basis domain [{lo}, {hi}]")
        return BSpline.design_matrix(t, self.knots, self.degree).toarray()


@dataclass(frozen=True)
class PenaltyMatrix:
    """Second-order difference penalty K = D2' D2 with its pseudo-inverse.

    K is positive semidefinite with rank num_bases - 2; its null space is
    spanned by constant and linear coefficient sequences. ``null_basis``
    holds an orthonormal basis of that null space.
    """

    matrix: np.ndarray
    pinv: np.ndarray
    rank: int
    null_basis: np.ndarray


def make_basis(num_bases, domain):
    """Construct a SplineBasis on ``domain = (t_min, t_max)``."""
    if num_bases < 4:
        raise TooFewBases(f"need at least 4 basis functions, got {num_bases}")
    lo, hi = float(domain[0]), float(domain[1])
    if not hi > lo:
        raise TimeOutOfDomain(f"degenerate domain [{lo}, {hi}]")
    interior = np.linspace(lo, hi, num_bases - 2)[1:-1]
    knots = np.concatenate([[lo] * (DEGREE + 1), interior, [hi] * (DEGREE + 1)])
    return SplineBasis(num_bases=num_bases, domain=(lo, hi), knots=knots)


def build_basis(times, num_bases, domain):
    """Basis matrix for ``times``: rows sum to 1, at most 4 nonzeros each."""
    return make_basis(num_bases, domain).design(times)


def penalty(num_bases, eig_tol=1e-10):
    """PenaltyMatrix for ``num_bases`` coefficients.

    The pseudo-inverse comes from an eigendecomposition with eigenvalues
    below ``eig_tol * max_eigenvalue`` zeroed; the analytic rank deficiency
    is exactly 2, the tolerance only guards rounding.
    """
    if num_bases < 4:
        raise TooFewBases(f"need at least 4 basis functions, got {num_bases}")
    d2 = np.diff(np.eye(num_bases), n=2, axis=0)
    k = d2.T @ d2
    evals, evecs = np.linalg.eigh(k)
    cutoff = eig_tol * evals.max()
    keep = evals > cutoff
    inv = np.where(keep, 1.0 / np.where(keep, evals, 1.0), 0.0)
    pinv = (evecs * inv) @ evecs.T
    return PenaltyMatrix(
        matrix=k,
        pinv=pinv,
        rank=int(keep.sum()),
        null_basis=evecs[:, ~keep],
    )

"""Model state containers and the core likelihood algebra.

The latent-score regression for participant i at visit j is

    Y_ij = x_ij beta + z_ij (r o Lambda_ij) + omega_ij + eps_ij,

with Lambda_ij[d, q] = x_ij alpha[d, q] + tbasis_ij gamma[d, q], eps unit
variance, omega ~ MN(0, C_omega), and the ordinal score U = k exactly when
Y falls in (a_k, a_{k+1}]; a_1 = 0 for identifiability.
"""

import copy
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionMismatch, NumericalUnderflow
from .numerics import LOG_PROB_FLOOR, log_interval_prob

VARIANTS = ("bagel", "homogeneous", "nosparsity")


@dataclass
class Hyperparams:
    """Prior settings and model-variant switches.

    Defaults are the reference analysis settings: DP concentration 1,
    inv-Gamma(3, 10) on all three coefficient variances, Beta(1, 10) on the
    edge-inclusion probability.
    """

    m0: float = 1.0
    a_beta: float = 3.0
    b_beta: float = 10.0
    a_alpha: float = 3.0
    b_alpha: float = 10.0
    a_gamma: float = 3.0
    b_gamma: float = 10.0
    alpha_rho: float = 1.0
    beta_rho: float = 10.0
    variant: str = "bagel"
    num_bases: int = 10
    cutpoints: tuple[float, float] = (8.0, 16.0)
    update_cutpoints: bool = False

    def __post_init__(self):
        for name in ("m0", "a_beta", "b_beta", "a_alpha", "b_alpha",
                     "a_gamma", "b_gamma", "alpha_rho", "beta_rho"):
            if getattr(self, name) <= 0:
                raise ValueError(f"hyperparameter {name} must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.num_bases < 4:
            raise ValueError("num_bases must be at least 4")
        a2, a3 = self.cutpoints
        if not (0.0 < a2 < a3):
            raise ValueError(f"cutpoints must satisfy 0 < a2 < a3, got {self.cutpoints}")

    def to_dict(self):
        return {
            "m0": self.m0,
            "a_beta": self.a_beta, "b_beta": self.b_beta,
            "a_alpha": self.a_alpha, "b_alpha": self.b_alpha,
            "a_gamma": self.a_gamma, "b_gamma": self.b_gamma,
            "alpha_rho": self.alpha_rho, "beta_rho": self.beta_rho,
            "variant": self.variant, "num_bases": self.num_bases,
            "cutpoints": list(self.cutpoints),
            "update_cutpoints": self.update_cutpoints,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "cutpoints" in d:
            d["cutpoints"] = tuple(d["cutpoints"])
        return cls(**d)


@dataclass
class ClusterParams:
    """Parameters shared by every participant assigned to one cluster."""

    beta: np.ndarray   # (S, Q) covariate effects
    r: np.ndarray      # (D, Q) binary edge matrix
    alpha: np.ndarray  # (D, Q, S) drug-covariate interaction coefficients
    gamma: np.ndarray  # (D, Q, B) spline coefficients per edge

    def copy(self):
        return ClusterParams(
            beta=self.beta.copy(), r=self.r.copy(),
            alpha=self.alpha.copy(), gamma=self.gamma.copy(),
        )

    def to_dict(self):
        return {
            "beta": self.beta.tolist(), "r": self.r.astype(int).tolist(),
            "alpha": self.alpha.tolist(), "gamma": self.gamma.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            beta=np.asarray(d["beta"], float),
            r=np.asarray(d["r"], float),
            alpha=np.asarray(d["alpha"], float),
            gamma=np.asarray(d["gamma"], float),
        )


@dataclass
class ChainState:
    """Full MCMC state. latent_y and omega are stored flat over visits in
    dataset storage order, shape (total_visits, Q)."""

    assignments: np.ndarray            # (n,) cluster index per participant
    clusters: list                     # occupied ClusterParams, index = label
    c_omega: np.ndarray                # (Q, Q) item correlation, unit diagonal
    cutpoints: np.ndarray              # (a2, a3); a1 = 0 fixed
    sigma2_beta: float
    sigma2_alpha: float
    sigma2_gamma: float
    rho: float
    latent_y: np.ndarray               # (V, Q)
    omega: np.ndarray                  # (V, Q)
    sigma2_eps: float = 1.0            # fixed for identifiability

    @property
    def n_clusters(self):
        return len(self.clusters)

    def copy(self):
        return ChainState(
            assignments=self.assignments.copy(),
            clusters=[c.copy() for c in self.clusters],
            c_omega=self.c_omega.copy(),
            cutpoints=self.cutpoints.copy(),
            sigma2_beta=self.sigma2_beta,
            sigma2_alpha=self.sigma2_alpha,
            sigma2_gamma=self.sigma2_gamma,
            rho=self.rho,
            latent_y=self.latent_y.copy(),
            omega=self.omega.copy(),
            sigma2_eps=self.sigma2_eps,
        )


def cutpoint_edges(cutpoints):
    """All interval edges (-inf, 0, a2, a3, +inf) from the free pair."""
    a2, a3 = float(cutpoints[0]), float(cutpoints[1])
    return np.array([-np.inf, 0.0, a2, a3, np.inf])


def compute_lambda(cp, x, t_basis):
    """Edge-strength matrix Lambda (D, Q): covariate part plus spline part."""
    x = np.asarray(x, float)
    t_basis = np.asarray(t_basis, float)
    if cp.alpha.shape[2] != x.shape[0]:
        raise DimensionMismatch(f"alpha expects S={cp.alpha.shape[2]}, got {x.shape[0]}")
    if cp.gamma.shape[2] != t_basis.shape[0]:
        raise DimensionMismatch(f"gamma expects B={cp.gamma.shape[2]}, got {t_basis.shape[0]}")
    return cp.alpha @ x + cp.gamma @ t_basis


def compute_B(cp, x, t_basis):
    """Drug-effect matrix B = r o Lambda; zero wherever the edge is absent."""
    return cp.r * compute_lambda(cp, x, t_basis)


def latent_mean(cp, visit, t_basis):
    """Mean of the latent score vector for one visit, excluding the
    visit-level random effect (added by the sampler)."""
    x = np.asarray(visit.covariates, float)
    z = np.asarray(visit.drugs, float)
    if cp.beta.shape[0] != x.shape[0]:
        raise DimensionMismatch(f"beta expects S={cp.beta.shape[0]}, got {x.shape[0]}")
    if cp.r.shape[0] != z.shape[0]:
        raise DimensionMismatch(f"r expects D={cp.r.shape[0]}, got {z.shape[0]}")
    return x @ cp.beta + z @ compute_B(cp, x, t_basis)


def score_from_latent(y, cutpoints):
    """Ordinal score k such that y in (a_k, a_{k+1}]; half-open on the left."""
    inner = cutpoint_edges(cutpoints)[1:4]
    return np.searchsorted(inner, np.asarray(y, float), side="left")


def loglik_visit(mu, omega, scores, cutpoints):
    """Log-likelihood of one visit's observed ordinal scores given omega.

    Sums log[Phi(a_{u+1} - mu_q - omega_q) - Phi(a_u - mu_q - omega_q)] over
    observed items; missing items contribute 0. Raises NumericalUnderflow
    only when an item's interval probability is a true floating-point zero.
    """
    mu = np.asarray(mu, float)
    omega = np.asarray(omega, float)
    scores = np.asarray(scores, float)
    obs = ~np.isnan(scores)
    if not obs.any():
        return 0.0
    u = scores[obs].astype(int)
    edges = cutpoint_edges(cutpoints)
    center = mu[obs] + omega[obs]
    ll = log_interval_prob(edges[u] - center, edges[u + 1] - center)
    if np.any(ll <= LOG_PROB_FLOOR):
        raise NumericalUnderflow(
            "ordinal interval probability underflowed; latent mean is "
            f"{center[ll <= LOG_PROB_FLOOR]} against cutpoints {cutpoints}"
        )
    return float(ll.sum())


def apply_variant(hp, state):
    """Impose the variant's constraints on a chain state, in place.

    homogeneous collapses everything onto the first cluster; nosparsity pins
    every edge indicator to 1; bagel leaves the state untouched.
    """
    if hp.variant == "homogeneous":
        state.clusters = [state.clusters[0]]
        state.assignments = np.zeros_like(state.assignments)
    elif hp.variant == "nosparsity":
        for cp in state.clusters:
            cp.r = np.ones_like(cp.r)
    return state

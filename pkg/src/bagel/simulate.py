"""Scenario-based simulation of longitudinal drug/symptom panels.

Generation follows the reference simulation design: Poisson visit counts,
near-annual visit gaps, Bernoulli(0.8) drug exposure, participants split
uniformly across a small number of true clusters, a linear-in-time drug
effect, and ordinal scores thresholded at (0, a2, a3).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, Participant, Visit
from .errors import InvalidConfig
from .model import score_from_latent

GAP_FLOOR = 0.05  # years; keeps visit times strictly increasing

CESD_ITEMS = [
    "bothered", "appetite", "blues", "good", "concentration", "depressed",
    "effort", "hopeful", "failure", "fearful", "restless", "happy",
    "talked_less", "lonely", "unfriendly", "enjoyed_life", "crying", "sad",
    "disliked", "energy",
]

ART_DRUGS = [
    "TDF", "FTC", "3TC", "ABC", "AZT", "D4T", "DDI",          # NRTI
    "EFV", "NVP", "ETR", "RPV",                               # NNRTI
    "ATV", "DRV", "LPV", "NFV", "SQV", "TPV",                 # PI
    "MVC", "T20",                                             # EI
    "RAL", "EVG", "DTG",                                      # INSTI
    "RTV",                                                    # booster
]


@dataclass
class ScenarioConfig:
    """Everything the simulator needs; deterministic given ``seed``.

    ``beta_truth`` has shape (H0, S, Q) and ``alpha_truth`` (H0, D, Q, S);
    ``cutpoints_truth`` is the free pair (a2, a3) with a1 = 0.
    """

    n: int
    n_drugs: int
    n_items: int
    n_covariates: int
    n_clusters_true: int
    beta_truth: np.ndarray
    alpha_truth: np.ndarray
    cluster_probs: np.ndarray | None = None
    visit_count_mean: float = 10.0
    gap_mean: float = 1.0
    gap_sd: float = 0.2
    drug_use_prob: float = 0.8
    r_density: float = 0.4
    spline_truth_slope: float = 6.0
    c_omega_truth: np.ndarray | None = None
    cutpoints_truth: tuple[float, float] = (8.0, 16.0)
    seed: int = 0
    drug_names: list[str] | None = None
    item_names: list[str] | None = None

    def __post_init__(self):
        if self.cluster_probs is None:
            self.cluster_probs = np.full(self.n_clusters_true, 1.0 / self.n_clusters_true)
        self.cluster_probs = np.asarray(self.cluster_probs, float)
        if self.c_omega_truth is None:
            self.c_omega_truth = np.eye(self.n_items)
        self.c_omega_truth = np.asarray(self.c_omega_truth, float)
        self.beta_truth = np.asarray(self.beta_truth, float)
        self.alpha_truth = np.asarray(self.alpha_truth, float)
        if self.drug_names is None:
            self.drug_names = default_drug_names(self.n_drugs)
        if self.item_names is None:
            self.item_names = default_item_names(self.n_items)
        self.validate()

    def validate(self):
        h, d, q, s = self.n_clusters_true, self.n_drugs, self.n_items, self.n_covariates
        if min(self.n, h, d, q, s) < 1:
            raise InvalidConfig("counts n, H0, D, Q, S must all be >= 1")
        if self.cluster_probs.shape != (h,) or abs(self.cluster_probs.sum() - 1.0) > 1e-9:
            raise InvalidConfig("cluster_probs must be a length-H0 simplex vector")
        if np.any(self.cluster_probs < 0):
            raise InvalidConfig("cluster_probs must be nonnegative")
        if self.visit_count_mean <= 0 or self.gap_mean <= 0 or self.gap_sd <= 0:
            raise InvalidConfig("visit_count_mean, gap_mean, gap_sd must be positive")
        if not 0 <= self.drug_use_prob <= 1 or not 0 <= self.r_density <= 1:
            raise InvalidConfig("drug_use_prob and r_density must be probabilities")
        if self.beta_truth.shape != (h, s, q):
            raise InvalidConfig(f"beta_truth must have shape {(h, s, q)}, got {self.beta_truth.shape}")
        if self.alpha_truth.shape != (h, d, q, s):
            raise InvalidConfig(f"alpha_truth must have shape {(h, d, q, s)}, got {self.alpha_truth.shape}")
        c = self.c_omega_truth
        if c.shape != (q, q) or not np.allclose(c, c.T) or not np.allclose(np.diag(c), 1.0):
            raise InvalidConfig("c_omega_truth must be symmetric with unit diagonal")
        if np.linalg.eigvalsh(c).min() <= 0:
            raise InvalidConfig("c_omega_truth must be positive definite")
        a2, a3 = self.cutpoints_truth
        if not 0 < a2 < a3:
            raise InvalidConfig(f"cutpoints_truth must satisfy 0 < a2 < a3, got {self.cutpoints_truth}")
        if len(self.drug_names) != d or len(self.item_names) != q:
            raise InvalidConfig("drug_names / item_names lengths must match D / Q")


@dataclass
class GroundTruth:
    """Generating parameters kept for recovery scoring.

    Cluster-level matrices are indexed by true cluster; per-participant
    views follow from ``cluster_labels``. ``b_trajectories``, ``latent_y``
    and ``omega`` are flat over visits in dataset storage order.
    """

    cluster_labels: np.ndarray          # (n,)
    beta: np.ndarray                    # (H0, S, Q)
    alpha: np.ndarray                   # (H0, D, Q, S)
    r: np.ndarray                       # (H0, D, Q)
    b_trajectories: np.ndarray          # (V, D, Q)
    latent_y: np.ndarray                # (V, Q)
    omega: np.ndarray                   # (V, Q)
    cutpoints: np.ndarray               # (a2, a3)
    c_omega: np.ndarray                 # (Q, Q)

    @property
    def n_clusters(self):
        return self.beta.shape[0]

    def beta_for(self, i):
        return self.beta[self.cluster_labels[i]]

    def alpha_for(self, i):
        return self.alpha[self.cluster_labels[i]]

    def r_for(self, i):
        return self.r[self.cluster_labels[i]]


def default_item_names(q):
    if q <= len(CESD_ITEMS):
        return CESD_ITEMS[:q]
    return CESD_ITEMS + [f"item{k}" for k in range(len(CESD_ITEMS), q)]


def default_drug_names(d):
    if d <= len(ART_DRUGS):
        return ART_DRUGS[:d]
    return ART_DRUGS + [f"drug{k}" for k in range(len(ART_DRUGS), d)]


def default_covariate_names(s):
    base = ["intercept", "group", "score_ti", "age_std", "bmi_std", "smoking"]
    if s <= len(base):
        return base[:s]
    return base + [f"covar{k}" for k in range(len(base), s)]


def _covariates(rng, times, s):
    """Covariate rows for one participant: intercept, one binary and one
    continuous time-invariant covariate, then standardized age/BMI-like and
    binary smoking-like time-varying ones; any further columns are iid
    standard normal per visit."""
    j = len(times)
    x = np.ones((j, s))
    if s > 1:
        x[:, 1] = rng.binomial(1, 0.5)
    if s > 2:
        x[:, 2] = rng.normal(0.0, 2.0)
    if s > 3:
        age0 = rng.uniform(25.0, 65.0)
        x[:, 3] = (age0 + times - 45.0) / 10.0
    if s > 4:
        x[:, 4] = rng.normal(0.0, 1.0, size=j)
    if s > 5:
        x[:, 5] = rng.binomial(1, 0.6, size=j)
    for col in range(6, s):
        x[:, col] = rng.normal(0.0, 1.0, size=j)
    return x


def default_truth_tables(h, s, q, d, spacing=2.0):
    """Deterministic well-separated truth tables.

    Every (cluster, entry) pair differs by at least ``spacing`` between any
    two clusters, which keeps simulated clusters identifiable at small n.
    """
    offsets = spacing * (np.arange(h) - (h - 1) / 2.0)
    sign_sq = np.fromfunction(lambda i, j: (-1.0) ** (i + j), (s, q))
    base_sq = 0.5 * ((np.arange(s)[:, None] + 2 * np.arange(q)[None, :]) % 3 - 1)
    beta = np.stack([base_sq + off * sign_sq for off in offsets])

    sign_dqs = np.fromfunction(lambda i, j, k: (-1.0) ** (i + j + k), (d, q, s))
    base_dqs = 0.5 * (
        (np.arange(d)[:, None, None] + np.arange(q)[None, :, None] + np.arange(s)[None, None, :]) % 3 - 1
    )
    alpha = np.stack([base_dqs + off * sign_dqs for off in offsets])
    return beta, alpha


def simulate_dataset(cfg):
    """Generate a (Dataset, GroundTruth) pair from a ScenarioConfig.

    Deterministic given the seed: one generator drives a fixed draw order
    (labels, per-participant visit structure and covariates, drug exposure,
    cluster edge matrices, then latent noise).
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n, d, q, s = cfg.n, cfg.n_drugs, cfg.n_items, cfg.n_covariates

    labels = rng.choice(cfg.n_clusters_true, size=n, p=cfg.cluster_probs)

    times_all, x_all, z_all = [], [], []
    for i in range(n):
        j_i = max(1, int(rng.poisson(cfg.visit_count_mean)))
        gaps = np.maximum(rng.normal(cfg.gap_mean, cfg.gap_sd, size=j_i - 1), GAP_FLOOR)
        times = np.concatenate([[0.0], np.cumsum(gaps)])
        times_all.append(times)
        x_all.append(_covariates(rng, times, s))
        z_all.append(rng.binomial(1, cfg.drug_use_prob, size=(j_i, d)).astype(float))

    r_true = rng.binomial(1, cfg.r_density, size=(cfg.n_clusters_true, d, q)).astype(float)

    chol = np.linalg.cholesky(cfg.c_omega_truth)
    participants = []
    b_rows, y_rows, w_rows = [], [], []
    for i in range(n):
        h = labels[i]
        times, x, z = times_all[i], x_all[i], z_all[i]
        j_i = len(times)
        # Lambda[j, d, q] = x_j alpha[d, q] + slope * t_j
        lam = np.einsum("dqs,js->jdq", cfg.alpha_truth[h], x) + (
            cfg.spline_truth_slope * times
        )[:, None, None]
        b = r_true[h][None, :, :] * lam
        mu = x @ cfg.beta_truth[h] + np.einsum("jd,jdq->jq", z, b)
        omega = rng.standard_normal((j_i, q)) @ chol.T
        eps = rng.standard_normal((j_i, q))
        y = mu + omega + eps
        u = score_from_latent(y, cfg.cutpoints_truth).astype(float)
        visits = [
            Visit(time_years=float(times[j]), covariates=x[j], drugs=z[j], scores=u[j])
            for j in range(j_i)
        ]
        participants.append(Participant(id=f"p{i:04d}", visits=visits))
        b_rows.append(b)
        y_rows.append(y)
        w_rows.append(omega)

    ds = Dataset(
        participants=participants,
        drug_names=list(cfg.drug_names),
        item_names=list(cfg.item_names),
        covariate_names=default_covariate_names(s),
    )
    truth = GroundTruth(
        cluster_labels=labels,
        beta=cfg.beta_truth.copy(),
        alpha=cfg.alpha_truth.copy(),
        r=r_true,
        b_trajectories=np.concatenate(b_rows),
        latent_y=np.concatenate(y_rows),
        omega=np.concatenate(w_rows),
        cutpoints=np.asarray(cfg.cutpoints_truth, float),
        c_omega=cfg.c_omega_truth.copy(),
    )
    return ds, truth


def scenario_1(n=200, seed=0):
    """Reference simulation scenario: D=5 drugs, Q=3 items, 3 true clusters,
    item correlations (0.3, 0.35, 0.4), cutpoints (0, 8, 16)."""
    beta, alpha = default_truth_tables(h=3, s=6, q=3, d=5)
    return ScenarioConfig(
        n=n, n_drugs=5, n_items=3, n_covariates=6, n_clusters_true=3,
        beta_truth=beta, alpha_truth=alpha,
        c_omega_truth=np.array([
            [1.0, 0.3, 0.35],
            [0.3, 1.0, 0.4],
            [0.35, 0.4, 1.0],
        ]),
        seed=seed,
    )


def scenario_2(n=500, seed=0):
    """Same design as scenario_1 at the larger sample size."""
    return scenario_1(n=n, seed=seed)


def wihs_like(n=200, seed=0):
    """Synthetic panel at registry scale: 23 drugs, 20 CES-D items, 9
    covariates, 4 true clusters. Exercises the full pipeline; no published
    numbers are attached to it."""
    h, d_, q, s = 4, 23, 20, 9
    beta, alpha = default_truth_tables(h=h, s=s, q=q, d=d_)
    # denser item correlation, exchangeable at 0.3
    c = np.full((q, q), 0.3)
    np.fill_diagonal(c, 1.0)
    return ScenarioConfig(
        n=n, n_drugs=d_, n_items=q, n_covariates=s, n_clusters_true=h,
        beta_truth=beta, alpha_truth=alpha, c_omega_truth=c,
        r_density=0.2, seed=seed,
    )

"""Gibbs/Metropolis sampler for the clustered longitudinal graph model.

One sweep is a fixed systematic scan:

1. cluster assignments (Dirichlet-process move with auxiliary components,
   participant likelihood conditioned on the current random effects and
   marginal over the latent scores),
2. latent scores (truncated normals),
3. item-correlation Metropolis block (random-effect-marginal likelihood),
4. random effects,
5. per-cluster regression, edge, and edge-coefficient updates,
6. cutpoint Metropolis block when cutpoints are free (latent-score-marginal
   likelihood, with a latent refresh on acceptance),
7. variances and the edge-inclusion probability.

Steps 1, 3, and 6 marginalize a block of latent variables; in each case the
marginalized block is redrawn before anything else conditions on it, which
keeps the scan a valid partially collapsed Gibbs sampler. All randomness
flows through named, independently seeded streams so that checkpointed
chains resume bit-exactly.
"""

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .dataset import validate
from .errors import (
    DivergentState,
    InvalidConfig,
    SingularCorrelation,
    ValidationFailed,
)
from .model import (
    ChainState,
    ClusterParams,
    Hyperparams,
    cutpoint_edges,
)
from .numerics import log_interval_prob, truncated_normal
from .splines import make_basis, penalty

log = logging.getLogger(__name__)

# Fixed prior variance on the penalty's null space (constant and linear
# coefficient directions). Makes the spline prior proper while leaving
# sigma2_gamma to govern curvature alone; tying the null space to
# sigma2_gamma instead lets fitted trends inflate it until the smoothness
# penalty vanishes and clusters interpolate their members, freezing all
# partition moves. The value is deliberately diffuse: level and linear
# trend must be close to data-priced, or the posterior prefers bending
# fitted effects flat across the saturated score range (where the ordinal
# likelihood is flat), which buys curvature, inflates sigma2_gamma, and
# reopens the interpolation failure.
NULL_SPACE_VAR = 1.0e4

STREAM_NAMES = (
    "init", "latent_y", "omega", "assign", "aux_prior",
    "beta", "edges", "coeffs", "slice", "c_omega", "cutpoints", "variances",
    "consolidate",
)


@dataclass
class SamplerConfig:
    n_iter: int
    burn_in: int
    thin: int = 1
    seed: int = 0
    dp_aux_components: int = 3
    mh_step_c_omega: float = 0.05
    mh_step_cutpoints: float = 0.25
    checkpoint_every: int = 500
    init: str = "kmeans"          # or "single" / "singletons"
    init_clusters: int = 8
    anneal_t0: float = 10.0       # initial assignment temperature
    anneal_frac: float = 0.5      # fraction of burn-in spent annealing to 1
    consolidate: bool = True       # agglomeration pass at the end of the anneal
    consolidate_tol: float = 15.0  # accepted integrated-evidence loss per dissolve
    adapt_mh: bool = True
    progress_every: int = 100
    debug_checks: bool = False

    def __post_init__(self):
        if self.burn_in >= self.n_iter:
            raise InvalidConfig("burn_in must be smaller than n_iter")
        if self.thin < 1:
            raise InvalidConfig("thin must be >= 1")
        if self.dp_aux_components < 1:
            raise InvalidConfig("dp_aux_components must be >= 1")
        if self.mh_step_c_omega <= 0 or self.mh_step_cutpoints <= 0:
            raise InvalidConfig("MH step sizes must be positive")
        if self.init not in ("kmeans", "singletons", "single"):
            raise InvalidConfig("init must be 'kmeans', 'singletons', or 'single'")
        if self.init_clusters < 1:
            raise InvalidConfig("init_clusters must be >= 1")
        if self.anneal_t0 < 1.0 or not 0.0 <= self.anneal_frac < 1.0:
            raise InvalidConfig("anneal_t0 must be >= 1 and anneal_frac in [0, 1)")

    @property
    def n_retained(self):
        return (self.n_iter - self.burn_in) // self.thin

    def to_dict(self):
        return {
            "n_iter": self.n_iter, "burn_in": self.burn_in, "thin": self.thin,
            "seed": self.seed, "dp_aux_components": self.dp_aux_components,
            "mh_step_c_omega": self.mh_step_c_omega,
            "mh_step_cutpoints": self.mh_step_cutpoints,
            "checkpoint_every": self.checkpoint_every, "init": self.init,
            "init_clusters": self.init_clusters,
            "anneal_t0": self.anneal_t0, "anneal_frac": self.anneal_frac,
            "consolidate": self.consolidate, "consolidate_tol": self.consolidate_tol,
            "adapt_mh": self.adapt_mh, "progress_every": self.progress_every,
            "debug_checks": self.debug_checks,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class DrawRecord:
    """One retained posterior draw (cluster-level state only)."""

    iteration: int
    assignments: np.ndarray
    clusters: list
    c_omega: np.ndarray
    cutpoints: np.ndarray
    sigma2_beta: float
    sigma2_alpha: float
    sigma2_gamma: float
    rho: float

    @property
    def n_clusters(self):
        return len(self.clusters)

    def to_dict(self):
        return {
            "kind": "draw",
            "iteration": self.iteration,
            "assignments": self.assignments.astype(int).tolist(),
            "clusters": [c.to_dict() for c in self.clusters],
            "c_omega": self.c_omega.tolist(),
            "cutpoints": self.cutpoints.tolist(),
            "sigma2_beta": self.sigma2_beta,
            "sigma2_alpha": self.sigma2_alpha,
            "sigma2_gamma": self.sigma2_gamma,
            "rho": self.rho,
        }

    @classmethod
    def from_dict(cls, d, loglik=None):
        return cls(
            iteration=d["iteration"],
            assignments=np.asarray(d["assignments"], int),
            clusters=[ClusterParams.from_dict(c) for c in d["clusters"]],
            c_omega=np.asarray(d["c_omega"], float),
            cutpoints=np.asarray(d["cutpoints"], float),
            sigma2_beta=d["sigma2_beta"],
            sigma2_alpha=d["sigma2_alpha"],
            sigma2_gamma=d["sigma2_gamma"],
            rho=d["rho"],
        )


@dataclass
class ChainSamples:
    """Thinned post-burn-in draws plus per-draw pointwise log-likelihoods."""

    draws: list
    pointwise_loglik: np.ndarray     # (n_draws, total_visits)
    acceptance_rates: dict
    meta: dict = field(default_factory=dict)

    @property
    def n_draws(self):
        return len(self.draws)

    def assignment_matrix(self):
        return np.stack([d.assignments for d in self.draws])

    def cluster_counts(self):
        return np.array([d.n_clusters for d in self.draws])

    def trace(self, name):
        """Scalar trace across retained draws, by dotted name."""
        if name == "H":
            return self.cluster_counts().astype(float)
        if name.startswith("c_omega"):
            _, q1, q2 = name.split(":")
            return np.array([d.c_omega[int(q1), int(q2)] for d in self.draws])
        if name.startswith("cutpoint"):
            k = int(name.split(":")[1])
            return np.array([d.cutpoints[k] for d in self.draws])
        return np.array([getattr(d, name) for d in self.draws])


class GibbsSampler:
    """Holds the dataset layout, chain state, and all update blocks.

    The public update methods implement single full-conditional (or MH)
    moves and can be driven individually; ``sweep`` runs the systematic
    scan; ``run`` produces retained draws with checkpointing.
    """

    def __init__(self, ds, hp, cfg, basis=None):
        violations = validate(ds)
        if violations:
            raise ValidationFailed(violations)
        self.ds = ds
        self.hp = hp
        self.cfg = cfg

        n = ds.n
        vq = ds.n_items
        times = np.array([v.time_years for _, _, v in ds.iter_visits()])
        self.basis = basis if basis is not None else make_basis(
            hp.num_bases, (0.0, max(ds.max_time(), 1e-6))
        )
        if self.basis.num_bases != hp.num_bases:
            raise InvalidConfig("basis size does not match hyperparams.num_bases")

        self.X = np.array([v.covariates for _, _, v in ds.iter_visits()], float)
        self.Z = np.array([v.drugs for _, _, v in ds.iter_visits()], float)
        self.T = self.basis.design(times)
        scores = np.array([v.scores for _, _, v in ds.iter_visits()], float)
        self.obs = ~np.isnan(scores)
        self.U = np.where(self.obs, np.nan_to_num(scores), 0).astype(int)
        self.n, self.V = n, self.X.shape[0]
        self.S, self.D, self.Q, self.B = (
            self.X.shape[1], self.Z.shape[1], vq, self.T.shape[1]
        )
        counts = np.array([p.n_visits for p in ds.participants])
        self.vis_start = np.concatenate([[0], np.cumsum(counts)])[:-1]
        self.vis_stop = self.vis_start + counts
        self.vis_pid = np.repeat(np.arange(n), counts)

        pen = penalty(hp.num_bases)
        self.penalty = pen
        self.null_basis = pen.null_basis                       # (B, 2)
        evals, evecs = np.linalg.eigh(pen.matrix)
        keep = evals > 1e-10 * evals.max()
        self.pen_evals = evals[keep]                           # (B-2,)
        self.pen_evecs = evecs[:, keep]                        # (B, B-2)
        self.pen_rank = int(keep.sum())
        self.logdet_k_row = float(np.log(self.pen_evals).sum())

        self.rng = self._spawn_streams(cfg.seed)
        self.iteration = 0
        self.mh_step = {
            "c_omega": cfg.mh_step_c_omega,
            "cutpoints": cfg.mh_step_cutpoints,
        }
        self._mh_accept = {"c_omega": 0, "cutpoints": 0}
        self._mh_total = {"c_omega": 0, "cutpoints": 0}
        self._mh_window = {"c_omega": [0, 0], "cutpoints": [0, 0]}
        self.state = self._init_state()

    @staticmethod
    def _spawn_streams(seed):
        children = np.random.SeedSequence(seed).spawn(len(STREAM_NAMES))
        return {name: np.random.default_rng(s) for name, s in zip(STREAM_NAMES, children)}

    # ------------------------------------------------------------------ init

    def _zero_cluster(self):
        # edges start absent (except under nosparsity): a true edge switches
        # on from accumulated residual signal, while an edge that starts on
        # can entrench itself by inflating the latent draws it then explains
        r0 = np.ones((self.D, self.Q)) if self.hp.variant == "nosparsity" else np.zeros((self.D, self.Q))
        return ClusterParams(
            beta=np.zeros((self.S, self.Q)),
            r=r0,
            alpha=np.zeros((self.D, self.Q, self.S)),
            gamma=np.zeros((self.D, self.Q, self.B)),
        )

    def _init_partition(self, rng):
        """Initial partition. The default overclusters with a small Lloyd
        k-means on per-participant score profiles; auxiliary-component moves
        can only prune clusters in practice (fresh base-measure draws almost
        never fit), so starting above the plausible cluster count and letting
        the scan merge is what mixes."""
        cfg = self.cfg
        if self.hp.variant == "homogeneous" or cfg.init == "single" or self.n == 1:
            return np.zeros(self.n, int)
        if cfg.init == "singletons":
            return np.arange(self.n)
        k = min(cfg.init_clusters, self.n)
        feats = np.zeros((self.n, 2 * self.Q))
        for i in range(self.n):
            rows = slice(self.vis_start[i], self.vis_stop[i])
            sc = np.where(self.obs[rows], self.U[rows], np.nan).astype(float)
            with np.errstate(invalid="ignore"):
                full = np.nanmean(sc, axis=0)
                half = np.nanmean(sc[: max(1, sc.shape[0] // 2)], axis=0)
            feats[i, :self.Q] = np.nan_to_num(full, nan=1.5)
            feats[i, self.Q:] = np.nan_to_num(half, nan=1.5)
        centers = feats[rng.choice(self.n, size=k, replace=False)]
        labels = np.zeros(self.n, int)
        for _ in range(25):
            dist = ((feats[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            labels = dist.argmin(axis=1)
            for c in range(k):
                sel = labels == c
                if sel.any():
                    centers[c] = feats[sel].mean(axis=0)
        # compact labels of non-empty clusters, stable order
        kept = np.unique(labels)
        remap = {old: new for new, old in enumerate(kept)}
        return np.array([remap[v] for v in labels])

    def _init_state(self):
        hp, cfg = self.hp, self.cfg
        edges = cutpoint_edges(hp.cutpoints)
        mids = np.array([
            edges[1] - 0.5,
            0.5 * (edges[1] + edges[2]),
            0.5 * (edges[2] + edges[3]),
            edges[3] + 0.5,
        ])
        y0 = np.where(self.obs, mids[self.U], 0.0)

        assignments = self._init_partition(self.rng["init"])
        n_clusters = int(assignments.max()) + 1
        state = ChainState(
            assignments=assignments,
            clusters=[self._zero_cluster() for _ in range(n_clusters)],
            c_omega=np.eye(self.Q),
            cutpoints=np.asarray(hp.cutpoints, float),
            sigma2_beta=hp.b_beta / (hp.a_beta - 1) if hp.a_beta > 1 else hp.b_beta,
            sigma2_alpha=hp.b_alpha / (hp.a_alpha - 1) if hp.a_alpha > 1 else hp.b_alpha,
            sigma2_gamma=hp.b_gamma / (hp.a_gamma - 1) if hp.a_gamma > 1 else hp.b_gamma,
            rho=hp.alpha_rho / (hp.alpha_rho + hp.beta_rho),
            latent_y=y0,
            omega=np.zeros((self.V, self.Q)),
        )
        self.state = state
        # one parameter pass so initial clusters fit their members before the
        # first assignment scan (otherwise identical params collapse the
        # partition on sweep one)
        for h in range(state.n_clusters):
            self._update_cluster(h)
        return state

    # --------------------------------------------------------------- helpers

    def _member_visits(self, h):
        return np.flatnonzero(self.state.assignments[self.vis_pid] == h)

    def _lambda_rows(self, cp, x, t):
        """Edge strengths (v, D, Q) for design rows x, t."""
        lam = x @ cp.alpha.reshape(self.D * self.Q, self.S).T
        lam += t @ cp.gamma.reshape(self.D * self.Q, self.B).T
        return lam.reshape(x.shape[0], self.D, self.Q)

    def _mu_rows(self, cp, idx):
        x, t, z = self.X[idx], self.T[idx], self.Z[idx]
        rlam = cp.r[None, :, :] * self._lambda_rows(cp, x, t)
        return x @ cp.beta + np.matmul(z[:, None, :], rlam)[:, 0, :]

    def mu_all(self):
        """Latent mean (V, Q) under the current clustering, no random effect."""
        mu = np.empty((self.V, self.Q))
        for h, cp in enumerate(self.state.clusters):
            idx = self._member_visits(h)
            mu[idx] = self._mu_rows(cp, idx)
        return mu

    def _loglik_rows(self, center, rows=None):
        """Per-visit ordinal log-likelihood given centers mu + omega."""
        u = self.U if rows is None else self.U[rows]
        obs = self.obs if rows is None else self.obs[rows]
        edges = cutpoint_edges(self.state.cutpoints)
        ll = log_interval_prob(edges[u] - center, edges[u + 1] - center)
        return np.where(obs, ll, 0.0).sum(axis=1)

    def loglik_visit(self, i, j):
        """Ordinal log-likelihood of visit j of participant i, conditional on
        the current random effect."""
        row = self.vis_start[i] + j
        cp = self.state.clusters[self.state.assignments[i]]
        center = self._mu_rows(cp, np.array([row]))[0] + self.state.omega[row]
        return float(self._loglik_rows(center[None, :], rows=np.array([row]))[0])

    def pointwise_loglik(self):
        """Per-visit log-likelihood vector (V,) under the current state."""
        center = self.mu_all() + self.state.omega
        return self._loglik_rows(center)

    def _participant_loglik(self, cp, i=None):
        """Summed visit log-likelihood under params ``cp``: all participants
        (vector) or a single participant (scalar)."""
        if i is None:
            center = self._mu_rows(cp, slice(None)) + self.state.omega
            ll = self._loglik_rows(center)
            return np.add.reduceat(ll, self.vis_start)
        rows = np.arange(self.vis_start[i], self.vis_stop[i])
        center = self._mu_rows(cp, rows) + self.state.omega[rows]
        return float(self._loglik_rows(center, rows=rows).sum())

    def _draw_gamma_prior(self, count, rng):
        """Draws from the proper spline prior: N(0, sigma2_gamma K^-) on the
        penalized row space plus N(0, NULL_SPACE_VAR I) on the null space."""
        st = self.state
        z_row = rng.standard_normal((count, self.pen_rank))
        z_null = rng.standard_normal((count, self.B - self.pen_rank))
        row = (z_row * np.sqrt(st.sigma2_gamma / self.pen_evals)) @ self.pen_evecs.T
        null = (z_null * math.sqrt(NULL_SPACE_VAR)) @ self.null_basis.T
        return row + null

    def _draw_prior_batch(self, count, rng):
        """``count`` base-measure draws as stacked arrays, one RNG call per
        parameter family (keeps assignment scans cheap and replayable)."""
        st = self.state
        if self.hp.variant == "nosparsity":
            r = np.ones((count, self.D, self.Q))
        else:
            r = (rng.random((count, self.D, self.Q)) < st.rho).astype(float)
        gamma = self._draw_gamma_prior(count * self.D * self.Q, rng).reshape(
            count, self.D, self.Q, self.B
        )
        return {
            "beta": rng.normal(0.0, math.sqrt(st.sigma2_beta), (count, self.S, self.Q)),
            "r": r,
            "alpha": rng.normal(0.0, math.sqrt(st.sigma2_alpha), (count, self.D, self.Q, self.S)),
            "gamma": gamma,
        }

    @staticmethod
    def _batch_params(batch, j):
        return ClusterParams(
            beta=batch["beta"][j].copy(), r=batch["r"][j].copy(),
            alpha=batch["alpha"][j].copy(), gamma=batch["gamma"][j].copy(),
        )

    def draw_prior_cluster(self, rng=None):
        """One draw of cluster parameters from the base measure, under the
        current variance and edge-probability state."""
        rng = self.rng["aux_prior"] if rng is None else rng
        return self._batch_params(self._draw_prior_batch(1, rng), 0)

    # ------------------------------------------------------- latent variables

    def sample_latent_y(self, rows=None):
        """Truncated-normal refresh of the latent scores (all rows, or a
        visit-row subset).

        Observed scores truncate to their cutpoint interval; missing scores
        draw from the untruncated normal.
        """
        st = self.state
        if rows is None:
            center = self.mu_all() + st.omega
            u, obs = self.U, self.obs
        else:
            center = np.empty((len(rows), self.Q))
            for h, cp in enumerate(st.clusters):
                sel = st.assignments[self.vis_pid[rows]] == h
                if sel.any():
                    center[sel] = self._mu_rows(cp, rows[sel])
            center += st.omega[rows]
            u, obs = self.U[rows], self.obs[rows]
        edges = cutpoint_edges(st.cutpoints)
        lower = np.where(obs, edges[u], -np.inf)
        upper = np.where(obs, edges[u + 1], np.inf)
        draws = truncated_normal(self.rng["latent_y"], center, lower, upper)
        if self.cfg.debug_checks:
            assert np.all(draws >= lower) and np.all(draws <= upper)
        if rows is None:
            st.latent_y = draws
        else:
            st.latent_y[rows] = draws
        return st.latent_y

    def _omega_posterior_cov(self):
        c = self.state.c_omega
        evals, evecs = np.linalg.eigh(c)
        if evals.min() <= 0:
            raise SingularCorrelation(f"item correlation not PD: eigmin={evals.min()}")
        sig_vals = evals / (1.0 + evals)
        sigma = (evecs * sig_vals) @ evecs.T
        chol = evecs * np.sqrt(sig_vals)
        return sigma, chol

    def sample_omega(self):
        """Conjugate refresh of the visit-level random effects:
        omega | rest ~ MN(Sigma (y - mu), Sigma), Sigma = (I + C^-1)^-1."""
        st = self.state
        sigma, chol = self._omega_posterior_cov()
        resid = st.latent_y - self.mu_all()
        st.omega = resid @ sigma + self.rng["omega"].standard_normal((self.V, self.Q)) @ chol.T
        return st.omega

    # ------------------------------------------------------------ assignments

    def _aux_loglik(self, batch, m_aux):
        """Likelihood of each participant under its own auxiliary candidates.

        ``batch`` holds n * m_aux base-measure draws, candidate (i, a) at row
        i * m_aux + a; returns an (n, m_aux) matrix of summed visit
        log-likelihoods, each candidate scored only on its participant.
        """
        out = np.empty((self.n, m_aux))
        for a in range(m_aux):
            sel = self.vis_pid * m_aux + a
            mu = np.einsum("vs,vsq->vq", self.X, batch["beta"][sel])
            lam = np.einsum("vs,vdqs->vdq", self.X, batch["alpha"][sel])
            lam += np.einsum("vb,vdqb->vdq", self.T, batch["gamma"][sel])
            mu += np.matmul(self.Z[:, None, :], batch["r"][sel] * lam)[:, 0, :]
            ll = self._loglik_rows(mu + self.state.omega)
            out[:, a] = np.add.reduceat(ll, self.vis_start)
        return out

    def in_anneal_phase(self):
        return self.iteration < self.cfg.anneal_frac * self.cfg.burn_in

    def assignment_temperature(self):
        """Likelihood temperature for the assignment scan.

        During the first ``anneal_frac`` of burn-in the participant
        log-likelihoods are divided by a temperature decaying geometrically
        from ``anneal_t0`` to 1, and the coefficient variances are clamped
        at 1 so small clusters cannot interpolate their members.
        Conditional-likelihood reassignment carries no integrated-likelihood
        penalty for overfit small clusters, so an overclustered start is
        metastable at temperature 1; the anneal is a burn-in-only
        initialization device and every retained draw comes from the exact
        (T = 1) kernel.
        """
        cfg = self.cfg
        end = cfg.anneal_frac * cfg.burn_in
        if end <= 0 or self.iteration >= end:
            return 1.0
        return cfg.anneal_t0 ** (1.0 - self.iteration / end)

    def update_assignments(self):
        """Dirichlet-process reassignment scan with auxiliary components.

        Participant likelihoods are ordinal, conditional on the current
        random effects, with latent scores integrated out; the latent-score
        refresh that completes the joint move is the next sweep step. All
        auxiliary candidates for the scan are drawn up front (still one
        independent set per participant, as the algorithm requires).
        """
        st = self.state
        m_aux = self.cfg.dp_aux_components
        log_m0 = math.log(self.hp.m0) - math.log(m_aux)
        rng = self.rng["assign"]
        inv_t = 1.0 / self.assignment_temperature()

        batch = self._draw_prior_batch(self.n * m_aux, self.rng["aux_prior"])
        aux_ll = self._aux_loglik(batch, m_aux)
        ll = np.column_stack([self._participant_loglik(cp) for cp in st.clusters])
        counts = np.bincount(st.assignments, minlength=st.n_clusters).astype(float)

        for i in range(self.n):
            h_old = st.assignments[i]
            counts[h_old] -= 1
            singleton = counts[h_old] == 0

            # singleton: its current params occupy auxiliary slot 0 and the
            # last fresh candidate goes unused
            if singleton:
                slot_ll = np.concatenate([[ll[i, h_old]], aux_ll[i, : m_aux - 1]])
            else:
                slot_ll = aux_ll[i]

            with np.errstate(divide="ignore"):
                logw = np.concatenate(
                    [np.log(counts) + inv_t * ll[i], log_m0 + inv_t * slot_ll]
                )
            w = np.exp(logw - logw.max())
            cum = np.cumsum(w)
            pick = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
            pick = min(pick, len(w) - 1)

            if pick < st.n_clusters:
                st.assignments[i] = pick
                counts[pick] += 1
            else:
                k = pick - st.n_clusters
                if singleton and k == 0:
                    st.assignments[i] = h_old
                    counts[h_old] += 1
                    continue
                cp = self._batch_params(batch, i * m_aux + (k - 1 if singleton else k))
                st.clusters.append(cp)
                st.assignments[i] = st.n_clusters - 1
                counts = np.append(counts, 1.0)
                ll = np.column_stack([ll, self._participant_loglik(cp)])

            if singleton and st.assignments[i] != h_old:
                del st.clusters[h_old]
                st.assignments[st.assignments > h_old] -= 1
                counts = np.delete(counts, h_old)
                ll = np.delete(ll, h_old, axis=1)

        if self.cfg.debug_checks:
            assert counts.sum() == self.n
            assert np.bincount(st.assignments, minlength=st.n_clusters).min() >= 1
        return st.assignments

    # --------------------------------------------------- cluster-level blocks

    def update_beta(self, h):
        """Conjugate multivariate-normal refresh of one cluster's covariate
        effects, one draw per item column."""
        cp = self.state.clusters[h]
        ws = self._workspace(h)
        self._beta_step(cp, ws)
        return cp.beta

    def update_r(self, h, d, q):
        """Gibbs refresh of one edge indicator with its coefficients
        analytically marginalized, followed by a coefficient refresh."""
        cp = self.state.clusters[h]
        ws = self._workspace(h)
        design = self._edge_design(ws, d)
        self._edge_step(cp, ws, d, q, design, update_edge=self.hp.variant != "nosparsity")
        return cp.r[d, q]

    def update_alpha_gamma(self, h, d, q):
        """Conditional refresh of one edge's coefficients with the edge
        indicator held fixed."""
        cp = self.state.clusters[h]
        ws = self._workspace(h)
        design = self._edge_design(ws, d)
        self._edge_step(cp, ws, d, q, design, update_edge=False)
        return cp.alpha[d, q], cp.gamma[d, q]

    def _workspace(self, h):
        cp = self.state.clusters[h]
        idx = self._member_visits(h)
        x, t, z = self.X[idx], self.T[idx], self.Z[idx]
        lam = self._lambda_rows(cp, x, t)
        eff = np.matmul(z[:, None, :], cp.r[None, :, :] * lam)[:, 0, :]
        yo = self.state.latent_y[idx] - self.state.omega[idx]
        xb = x @ cp.beta
        return {"idx": idx, "x": x, "t": t, "z": z, "lam": lam, "eff": eff,
                "yo": yo, "xb": xb, "resid": yo - xb - eff,
                "omega": self.state.omega[idx]}

    def _beta_step(self, cp, ws):
        st = self.state
        x = ws["x"]
        prec = x.T @ x + np.eye(self.S) / st.sigma2_beta
        chol = np.linalg.cholesky(prec)
        mean = cho_solve((chol, True), x.T @ (ws["yo"] - ws["eff"]), check_finite=False)
        z = self.rng["beta"].standard_normal((self.S, self.Q))
        cp.beta = mean + solve_triangular(chol, z, lower=True, trans="T", check_finite=False)
        ws["xb"] = x @ cp.beta
        ws["resid"] = ws["yo"] - ws["xb"] - ws["eff"]

    def _prior_precision(self):
        """Block prior precision for one edge's stacked (alpha, gamma)
        coefficients, cached per (sigma2_alpha, sigma2_gamma) pair."""
        st = self.state
        key = (st.sigma2_alpha, st.sigma2_gamma)
        if getattr(self, "_prior_cache_key", None) != key:
            p = np.zeros((self.S + self.B, self.S + self.B))
            p[:self.S, :self.S] = np.eye(self.S) / st.sigma2_alpha
            p[self.S:, self.S:] = (
                (self.pen_evecs * (self.pen_evals / st.sigma2_gamma)) @ self.pen_evecs.T
                + (self.null_basis @ self.null_basis.T) / NULL_SPACE_VAR
            )
            logdet = (
                -self.S * math.log(st.sigma2_alpha)
                + self.logdet_k_row - self.pen_rank * math.log(st.sigma2_gamma)
                - (self.B - self.pen_rank) * math.log(NULL_SPACE_VAR)
            )
            self._prior_cache_key = key
            self._prior_cache = (p, logdet)
        return self._prior_cache

    def _edge_design(self, ws, d):
        """Design, posterior Cholesky, and row set shared by all items of
        one (cluster, drug) pair."""
        rows = np.flatnonzero(ws["z"][:, d] == 1.0)
        g = np.concatenate([ws["x"][rows], ws["t"][rows]], axis=1)
        prior_prec, prior_logdet = self._prior_precision()
        chol = np.linalg.cholesky(g.T @ g + prior_prec)
        logdet_post = 2.0 * np.log(np.diag(chol)).sum()
        return {"rows": rows, "g": g, "chol": chol,
                "prior_logdet": prior_logdet, "logdet_post": logdet_post}

    def _edge_step(self, cp, ws, d, q, design, update_edge):
        """Shared edge machinery: marginal Bayes factor, indicator draw,
        coefficient refresh, and residual bookkeeping."""
        st = self.state
        rows, g, chol = design["rows"], design["g"], design["chol"]
        r_old = cp.r[d, q]

        v = ws["resid"][rows, q] + r_old * ws["lam"][rows, d, q]
        b = g.T @ v
        w = solve_triangular(chol, b, lower=True, check_finite=False)

        if update_edge:
            log_bf = 0.5 * (design["prior_logdet"] - design["logdet_post"]) + 0.5 * (w @ w)
            logit = math.log(st.rho) - math.log1p(-st.rho) + log_bf
            if logit > 40:
                p1 = 1.0
            elif logit < -40:
                p1 = 0.0
            else:
                p1 = 1.0 / (1.0 + math.exp(-logit))
            cp.r[d, q] = 1.0 if self.rng["edges"].random() < p1 else 0.0

        rng = self.rng["coeffs"]
        if cp.r[d, q] == 1.0:
            zdraw = rng.standard_normal(self.S + self.B)
            coef = solve_triangular(chol, w + zdraw, lower=True, trans="T", check_finite=False)
            alpha_new, gamma_new = coef[:self.S], coef[self.S:]
        else:
            alpha_new = rng.normal(0.0, math.sqrt(st.sigma2_alpha), self.S)
            gamma_new = self._draw_gamma_prior(1, rng)[0]
        lam_old = ws["lam"][rows, d, q]
        cp.alpha[d, q] = alpha_new
        cp.gamma[d, q] = gamma_new

        lam_new = ws["x"][rows] @ alpha_new + ws["t"][rows] @ gamma_new
        ws["resid"][rows, q] = v - cp.r[d, q] * lam_new
        ws["eff"][rows, q] += cp.r[d, q] * lam_new - r_old * lam_old
        ws["lam"][rows, d, q] = lam_new

    # --------------------------------------------- collapsed edge moves

    def _edge_ordinal_parts(self, cp, ws, d, q, rows):
        """Pieces for latent-score-collapsed edge moves: observed scores,
        cutpoint edges, the center without the edge's own contribution, and
        the edge design, restricted to observed (drug-taken) rows."""
        obs_col = self.obs[ws["idx"][rows], q]
        if not obs_col.any():
            return None
        u_obs = self.U[ws["idx"][rows], q][obs_col]
        edges = cutpoint_edges(self.state.cutpoints)
        base = (
            ws["xb"][rows, q] + ws["eff"][rows, q] + ws["omega"][rows, q]
            - cp.r[d, q] * ws["lam"][rows, d, q]
        )[obs_col]
        g = np.concatenate([ws["x"][rows], ws["t"][rows]], axis=1)[obs_col]
        return u_obs, edges, base, g

    @staticmethod
    def _ordinal_loglik(u_obs, edges, center):
        return float(log_interval_prob(edges[u_obs] - center, edges[u_obs + 1] - center).sum())

    def _edge_indicator_move(self, cp, ws, d, q, design):
        """Reversible jump between presence and absence of one edge, moving
        the indicator, its coefficients, and the latent scores on the edge's
        rows together.

        The conjugate indicator draw conditions on latent scores, which
        track whatever an active edge currently claims wherever scores sit
        in an unbounded cutpoint interval, so it can switch a spurious edge
        on but essentially never off again. This kernel evaluates the
        ordinal likelihood itself: switching off proposes prior coefficients
        and conditionally redrawn latents; switching on proposes
        coefficients from their latent-conditional Gaussian. The proposal-
        density correction carries the parameter-space penalty, so an edge
        with no support in the identified score range is removed at the
        prior odds rate and re-enters with vanishing probability.
        """
        st = self.state
        rng = self.rng["edges"]
        rows, g, chol = design["rows"], design["g"], design["chol"]
        dim = self.S + self.B
        prior_prec, _ = self._prior_precision()
        vis_rows = ws["idx"][rows]
        u_rows = self.U[vis_rows, q]
        obs_rows = self.obs[vis_rows, q]
        edges = cutpoint_edges(st.cutpoints)
        cur = np.concatenate([cp.alpha[d, q], cp.gamma[d, q]])
        # center of the edge's rows without its own contribution
        base = (
            ws["xb"][rows, q] + ws["eff"][rows, q] + ws["omega"][rows, q]
            - cp.r[d, q] * ws["lam"][rows, d, q]
        )
        log_u = math.log(1.0 - rng.random())

        def ordinal(center):
            if not obs_rows.any():
                return 0.0
            c = center[obs_rows]
            u = u_rows[obs_rows]
            return float(log_interval_prob(edges[u] - c, edges[u + 1] - c).sum())

        def log_prior(coef):
            return -0.5 * float(coef @ prior_prec @ coef)

        def draw_latent_rows(center):
            lower = np.where(obs_rows, edges[u_rows], -np.inf)
            upper = np.where(obs_rows, edges[u_rows + 1], np.inf)
            return truncated_normal(rng, center, lower, upper)

        if cp.r[d, q] == 1.0:
            # propose removal: prior coefficients, latents refreshed without
            # the edge; reverse proposal is the conjugate Gaussian given the
            # refreshed latents
            coef_new = np.concatenate([
                rng.normal(0.0, math.sqrt(st.sigma2_alpha), self.S),
                self._draw_gamma_prior(1, rng)[0],
            ])
            y_new = draw_latent_rows(base)
            v_new = y_new - base
            w_new = solve_triangular(chol, g.T @ v_new, lower=True, check_finite=False)
            resid_q = chol.T @ cur - w_new
            log_q_rev = -0.5 * float(resid_q @ resid_q)  # + logdet/2, cancels below
            log_accept = (
                math.log1p(-st.rho) - math.log(st.rho)
                + ordinal(base) - ordinal(base + g @ cur)
                + (log_q_rev + design["logdet_post"] / 2.0)
                - (log_prior(cur) + design["prior_logdet"] / 2.0)
            )
            if log_u < log_accept:
                lam_old = ws["lam"][rows, d, q]
                cp.r[d, q] = 0.0
                cp.alpha[d, q] = coef_new[:self.S]
                cp.gamma[d, q] = coef_new[self.S:]
                st.latent_y[vis_rows, q] = y_new
                ws["yo"][rows, q] = y_new - ws["omega"][rows, q]
                ws["eff"][rows, q] -= lam_old
                lam_new = ws["x"][rows] @ coef_new[:self.S] + ws["t"][rows] @ coef_new[self.S:]
                ws["lam"][rows, d, q] = lam_new
                ws["resid"][rows, q] = ws["yo"][rows, q] - ws["xb"][rows, q] - ws["eff"][rows, q]
        else:
            # propose addition: conjugate coefficients given current latents,
            # latents then refreshed under the new edge
            v = ws["yo"][rows, q] - ws["xb"][rows, q] - ws["eff"][rows, q]
            w = solve_triangular(chol, g.T @ v, lower=True, check_finite=False)
            z = rng.standard_normal(dim)
            coef_new = solve_triangular(chol, w + z, lower=True, trans="T", check_finite=False)
            log_q_fwd = -0.5 * float(z @ z)
            log_accept = (
                math.log(st.rho) - math.log1p(-st.rho)
                + ordinal(base + g @ coef_new) - ordinal(base)
                + (log_prior(coef_new) + design["prior_logdet"] / 2.0)
                - (log_q_fwd + design["logdet_post"] / 2.0)
            )
            if log_u < log_accept:
                cp.r[d, q] = 1.0
                cp.alpha[d, q] = coef_new[:self.S]
                cp.gamma[d, q] = coef_new[self.S:]
                lam_new = ws["x"][rows] @ coef_new[:self.S] + ws["t"][rows] @ coef_new[self.S:]
                y_new = draw_latent_rows(base + lam_new)
                st.latent_y[vis_rows, q] = y_new
                ws["yo"][rows, q] = y_new - ws["omega"][rows, q]
                ws["eff"][rows, q] += lam_new
                ws["lam"][rows, d, q] = lam_new
                ws["resid"][rows, q] = ws["yo"][rows, q] - ws["xb"][rows, q] - ws["eff"][rows, q]

    def _update_cluster(self, h):
        """Parameter scan for one cluster: beta, then per edge the
        latent-conditional conjugate indicator/coefficient refresh followed
        by the reversible ordinal-likelihood indicator jump."""
        cp = self.state.clusters[h]
        ws = self._workspace(h)
        self._beta_step(cp, ws)
        update_edges = self.hp.variant != "nosparsity"
        for d in range(self.D):
            design = self._edge_design(ws, d)
            for q in range(self.Q):
                self._edge_step(cp, ws, d, q, design, update_edge=update_edges)
                if update_edges:
                    self._edge_indicator_move(cp, ws, d, q, design)

    # ----------------------------------------------------------- MH blocks

    def update_c_omega(self):
        """Random-walk Metropolis on each off-diagonal correlation entry.

        The acceptance ratio integrates the random effects out of the
        residuals (covariance I + C); the subsequent random-effect refresh
        completes the joint move.
        """
        st = self.state
        if self.Q < 2:
            return st.c_omega
        resid = st.latent_y - self.mu_all()
        e = resid.T @ resid
        rng = self.rng["c_omega"]
        step = self.mh_step["c_omega"]

        def marglik(c):
            chol, lower = cho_factor(np.eye(self.Q) + c, lower=True, check_finite=False)
            logdet = 2.0 * np.log(np.diag(chol)).sum()
            quad = np.trace(cho_solve((chol, lower), e, check_finite=False))
            return -0.5 * (self.V * logdet + quad)

        cur = marglik(st.c_omega)
        for q1 in range(self.Q):
            for q2 in range(q1 + 1, self.Q):
                self._mh_total["c_omega"] += 1
                self._mh_window["c_omega"][1] += 1
                prop = st.c_omega.copy()
                val = prop[q1, q2] + rng.normal(0.0, step)
                u = rng.random()
                if abs(val) >= 1.0:
                    continue
                prop[q1, q2] = prop[q2, q1] = val
                if np.linalg.eigvalsh(prop).min() <= 0:
                    continue
                new = marglik(prop)
                if math.log(u) < new - cur:
                    st.c_omega = prop
                    cur = new
                    self._mh_accept["c_omega"] += 1
                    self._mh_window["c_omega"][0] += 1
        return st.c_omega

    def update_cutpoints(self):
        """Joint random-walk Metropolis on (log a2, log(a3 - a2)) with the
        latent scores integrated out (conditional on the random effects).
        On acceptance the latent scores are refreshed under the new
        cutpoints."""
        st = self.state
        rng = self.rng["cutpoints"]
        step = self.mh_step["cutpoints"]
        self._mh_total["cutpoints"] += 1
        self._mh_window["cutpoints"][1] += 1

        a2, a3 = st.cutpoints
        l_cur = np.array([math.log(a2), math.log(a3 - a2)])
        l_prop = l_cur + rng.normal(0.0, step, 2)
        a2_new = math.exp(l_prop[0])
        a3_new = a2_new + math.exp(l_prop[1])
        u = rng.random()

        center = self.mu_all() + st.omega

        def data_loglik(cutpoints):
            edges = cutpoint_edges(cutpoints)
            ll = log_interval_prob(edges[self.U] - center, edges[self.U + 1] - center)
            return np.where(self.obs, ll, 0.0).sum()

        # flat prior on (a2, a3); Jacobian of the log-increment map
        log_accept = (
            data_loglik((a2_new, a3_new)) - data_loglik((a2, a3))
            + (l_prop.sum() - l_cur.sum())
        )
        if math.log(u) < log_accept:
            st.cutpoints = np.array([a2_new, a3_new])
            self._mh_accept["cutpoints"] += 1
            self._mh_window["cutpoints"][0] += 1
            self.sample_latent_y()
        return st.cutpoints

    # ------------------------------------------------------------- variances

    def update_variances_and_rho(self):
        """Conjugate inverse-gamma / Beta refresh of the three coefficient
        variances and the edge-inclusion probability, pooled over occupied
        clusters."""
        st, hp = self.state, self.hp
        rng = self.rng["variances"]
        n_h = st.n_clusters

        ssq_beta = sum(float((cp.beta ** 2).sum()) for cp in st.clusters)
        ssq_alpha = sum(float((cp.alpha ** 2).sum()) for cp in st.clusters)
        # sigma2_gamma sees only the penalized row space (rank B-2 per edge);
        # the null space carries a fixed variance and drops out
        qf_gamma = sum(
            float((((cp.gamma.reshape(-1, self.B) @ self.pen_evecs) ** 2) * self.pen_evals).sum())
            for cp in st.clusters
        )
        if self.in_anneal_phase():
            # burn-in shrinkage clamp; see assignment_temperature. The
            # spline-curvature variance is clamped hard and the edge
            # probability pinned at its prior mean: score categories are
            # half-open at the extremes, so a curved spurious effect living
            # where scores saturate is likelihood-free and self-confirming
            # through the latent draws once it forms; keeping curvature and
            # edge seeding tight through burn-in starts the chain in the
            # sparse mode instead.
            st.sigma2_beta = st.sigma2_alpha = 1.0
            st.sigma2_gamma = 0.1
            st.rho = hp.alpha_rho / (hp.alpha_rho + hp.beta_rho)
            return st.sigma2_beta, st.sigma2_alpha, st.sigma2_gamma, st.rho
        else:
            st.sigma2_beta = _inv_gamma(rng, hp.a_beta + n_h * self.S * self.Q / 2.0,
                                        hp.b_beta + ssq_beta / 2.0)
            st.sigma2_alpha = _inv_gamma(rng, hp.a_alpha + n_h * self.D * self.Q * self.S / 2.0,
                                         hp.b_alpha + ssq_alpha / 2.0)
            st.sigma2_gamma = _inv_gamma(rng, hp.a_gamma + n_h * self.D * self.Q * self.pen_rank / 2.0,
                                         hp.b_gamma + qf_gamma / 2.0)

        ones = sum(float(cp.r.sum()) for cp in st.clusters)
        total = n_h * self.D * self.Q
        st.rho = rng.beta(hp.alpha_rho + ones, hp.beta_rho + total - ones)
        return st.sigma2_beta, st.sigma2_alpha, st.sigma2_gamma, st.rho

    # ------------------------------------------------------------------ sweep

    def _snapshot(self):
        return {
            "state": self.state.copy(),
            "rng": {name: dict(gen.bit_generator.state) for name, gen in self.rng.items()},
        }

    def _rollback(self, snap):
        self.state = snap["state"]
        for name, gen_state in snap["rng"].items():
            self.rng[name].bit_generator.state = gen_state

    def _merge_candidates(self, h_from):
        """Other clusters ordered by their fit to h_from's members."""
        members = np.flatnonzero(self.state.assignments == h_from)
        scores = []
        for h in range(self.state.n_clusters):
            if h == h_from:
                continue
            ll = self._participant_loglik(self.state.clusters[h])
            scores.append((float(ll[members].sum()), h))
        scores.sort(reverse=True)
        return [h for _, h in scores]

    def consolidate_clusters(self):
        """Burn-in agglomeration: tentatively dissolve clusters, scattering
        each member to its best-fitting other cluster, and keep dissolutions
        the integrated comparison favors.

        One-at-a-time reassignment cannot drain a redundant cluster (its
        parameters keep refitting to the members that remain, and plug-in
        likelihood always rewards an extra cluster by roughly half its
        parameter count), so same-truth splits and straggler clusters
        survive the anneal. The dissolve criterion therefore compares
        Gaussian marginal evidence (coefficients integrated out, conditional
        on the refit latent state) plus the partition-prior term, which
        carries the parameter-space penalty a plug-in comparison lacks.
        Genuinely distinct clusters fail it by large margins. Runs once, at
        the end of the anneal phase; never part of the post-burn-in kernel.
        """
        changed = True
        while changed and self.state.n_clusters > 1:
            changed = False
            sizes = np.bincount(self.state.assignments, minlength=self.state.n_clusters)
            for h_from in np.argsort(sizes):
                if self._try_dissolve(int(h_from)):
                    changed = True
                    break
        return self.state.assignments

    def _try_dissolve(self, h_from):
        st = self.state
        snap = self._snapshot()
        members = np.flatnonzero(st.assignments == h_from)
        rows_from = np.flatnonzero(st.assignments[self.vis_pid] == h_from)

        # best other cluster per member by current fit
        ll = np.column_stack([self._participant_loglik(cp) for cp in st.clusters])
        ll[:, h_from] = -np.inf
        dest = np.argmax(ll[members], axis=1)
        targets = sorted(set(int(t) for t in dest))

        n_before = np.bincount(st.assignments, minlength=st.n_clusters)
        evidence_before = self.cluster_evidence(h_from) + sum(
            self.cluster_evidence(t) for t in targets
        )
        crp_before = math.log(self.hp.m0) + math.lgamma(len(members)) + sum(
            math.lgamma(n_before[t]) for t in targets
        )

        st.assignments[members] = dest
        del st.clusters[h_from]
        st.assignments[st.assignments > h_from] -= 1
        targets_shifted = [t if t < h_from else t - 1 for t in targets]
        union_rows = np.flatnonzero(
            np.isin(st.assignments[self.vis_pid], targets_shifted)
        )
        for _ in range(15):
            self.sample_latent_y(rows=union_rows)
            self._sample_omega_rows(union_rows)
            for t in targets_shifted:
                self._update_cluster(t)

        n_after = np.bincount(st.assignments, minlength=st.n_clusters)
        evidence_after = sum(self.cluster_evidence(t) for t in targets_shifted)
        crp_after = sum(math.lgamma(n_after[t]) for t in targets_shifted)

        delta = (evidence_after + crp_after) - (evidence_before + crp_before)
        if delta >= -self.cfg.consolidate_tol:
            log.info(
                "consolidation: dissolved cluster of %d into %d target(s), delta %.1f",
                len(members), len(targets), delta,
            )
            return True
        self._rollback(snap)
        return False

    def cluster_evidence(self, h):
        """Log marginal likelihood of cluster h's latent regression with all
        Gaussian coefficients integrated out, conditional on the current
        latent scores, random effects, and edge matrix.

        Per item, the response (y - omega) regresses on the covariate block
        plus one (covariate, spline) block per active edge; the evidence has
        the usual closed form through the posterior Cholesky.
        """
        st = self.state
        cp = st.clusters[h]
        idx = self._member_visits(h)
        x, t, z = self.X[idx], self.T[idx], self.Z[idx]
        w_all = st.latent_y[idx] - st.omega[idx]
        m = len(idx)
        _, edge_logdet = self._prior_precision()
        total = 0.0
        for q in range(self.Q):
            blocks = [x]
            logdet_prior = -self.S * math.log(st.sigma2_beta)
            for d in range(self.D):
                if cp.r[d, q] == 1.0:
                    blocks.append(z[:, d:d + 1] * np.concatenate([x, t], axis=1))
                    logdet_prior += edge_logdet
            g = np.concatenate(blocks, axis=1)
            p = np.zeros((g.shape[1], g.shape[1]))
            p[:self.S, :self.S] = np.eye(self.S) / st.sigma2_beta
            off = self.S
            eprec, _ = self._prior_precision()
            while off < g.shape[1]:
                p[off:off + self.S + self.B, off:off + self.S + self.B] = eprec
                off += self.S + self.B
            chol = np.linalg.cholesky(g.T @ g + p)
            wv = w_all[:, q]
            b = g.T @ wv
            u = solve_triangular(chol, b, lower=True, check_finite=False)
            logdet_post = 2.0 * np.log(np.diag(chol)).sum()
            total += (
                -0.5 * m * math.log(2.0 * math.pi)
                - 0.5 * (wv @ wv - u @ u)
                + 0.5 * (logdet_prior - logdet_post)
            )
        return total

    def _union_mu(self, rows):
        st = self.state
        mu = np.empty((len(rows), self.Q))
        for h, cp in enumerate(st.clusters):
            sel = st.assignments[self.vis_pid[rows]] == h
            if sel.any():
                mu[sel] = self._mu_rows(cp, rows[sel])
        return mu

    def _sample_omega_rows(self, rows):
        st = self.state
        sigma, chol = self._omega_posterior_cov()
        resid = st.latent_y[rows] - self._union_mu(rows)
        st.omega[rows] = (
            resid @ sigma
            + self.rng["omega"].standard_normal((len(rows), self.Q)) @ chol.T
        )

    def sweep(self):
        """One systematic scan; see the module docstring for the order and
        the partial-collapsing argument."""
        if self.hp.variant != "homogeneous":
            self.update_assignments()
        self.sample_latent_y()
        self.update_c_omega()
        self.sample_omega()
        for h in range(self.state.n_clusters):
            self._update_cluster(h)
        if self.hp.update_cutpoints:
            self.update_cutpoints()
        self.update_variances_and_rho()
        self.iteration += 1
        if (
            self.cfg.consolidate
            and self.hp.variant != "homogeneous"
            and self.iteration == max(1, int(self.cfg.anneal_frac * self.cfg.burn_in))
        ):
            self.consolidate_clusters()
        if self.cfg.adapt_mh and self.iteration <= self.cfg.burn_in:
            self._adapt_steps()
        self._check_finite()

    def _adapt_steps(self):
        # nudge proposal scales toward 30-40% acceptance, frozen after burn-in
        for name, (acc, tot) in self._mh_window.items():
            if tot >= 50:
                rate = acc / tot
                if rate < 0.30:
                    self.mh_step[name] *= 0.8
                elif rate > 0.40:
                    self.mh_step[name] *= 1.25
                self._mh_window[name] = [0, 0]

    def _check_finite(self):
        st = self.state
        bad = not (np.isfinite(st.latent_y).all() and np.isfinite(st.omega).all())
        for cp in st.clusters:
            bad = bad or not (
                np.isfinite(cp.beta).all() and np.isfinite(cp.alpha).all()
                and np.isfinite(cp.gamma).all()
            )
        if bad:
            raise DivergentState(f"non-finite state at iteration {self.iteration}")

    def simulate_scores(self, rng):
        """Predictive replication of the panel under the current state:
        returns (scores, latent, omega) drawn from the observation model."""
        st = self.state
        mu = self.mu_all()
        chol = np.linalg.cholesky(st.c_omega)
        omega = rng.standard_normal((self.V, self.Q)) @ chol.T
        y = mu + omega + rng.standard_normal((self.V, self.Q))
        edges = cutpoint_edges(st.cutpoints)[1:4]
        scores = np.searchsorted(edges, y, side="left")
        return scores, y, omega

    def set_scores(self, scores, obs=None):
        """Replace the observed panel (used by calibration harnesses)."""
        self.U = np.asarray(scores, int)
        if obs is not None:
            self.obs = np.asarray(obs, bool)

    # ------------------------------------------------------------ run control

    def acceptance_rates(self):
        return {
            name: (self._mh_accept[name] / self._mh_total[name] if self._mh_total[name] else None)
            for name in self._mh_accept
        }

    def retained_record(self):
        st = self.state
        return DrawRecord(
            iteration=self.iteration,
            assignments=st.assignments.copy(),
            clusters=[cp.copy() for cp in st.clusters],
            c_omega=st.c_omega.copy(),
            cutpoints=st.cutpoints.copy(),
            sigma2_beta=st.sigma2_beta,
            sigma2_alpha=st.sigma2_alpha,
            sigma2_gamma=st.sigma2_gamma,
            rho=st.rho,
        )

    def checkpoint_dict(self):
        st = self.state
        return {
            "iteration": self.iteration,
            "state": {
                "assignments": st.assignments.tolist(),
                "clusters": [cp.to_dict() for cp in st.clusters],
                "c_omega": st.c_omega.tolist(),
                "cutpoints": st.cutpoints.tolist(),
                "sigma2_beta": st.sigma2_beta,
                "sigma2_alpha": st.sigma2_alpha,
                "sigma2_gamma": st.sigma2_gamma,
                "rho": st.rho,
                "latent_y": st.latent_y.tolist(),
                "omega": st.omega.tolist(),
            },
            "rng": {name: gen.bit_generator.state for name, gen in self.rng.items()},
            "mh_step": dict(self.mh_step),
            "mh_accept": dict(self._mh_accept),
            "mh_total": dict(self._mh_total),
            "mh_window": {k: list(v) for k, v in self._mh_window.items()},
        }

    def restore_checkpoint(self, ck):
        s = ck["state"]
        self.state = ChainState(
            assignments=np.asarray(s["assignments"], int),
            clusters=[ClusterParams.from_dict(c) for c in s["clusters"]],
            c_omega=np.asarray(s["c_omega"], float),
            cutpoints=np.asarray(s["cutpoints"], float),
            sigma2_beta=s["sigma2_beta"],
            sigma2_alpha=s["sigma2_alpha"],
            sigma2_gamma=s["sigma2_gamma"],
            rho=s["rho"],
            latent_y=np.asarray(s["latent_y"], float),
            omega=np.asarray(s["omega"], float),
        )
        self.iteration = ck["iteration"]
        for name, gen_state in ck["rng"].items():
            self.rng[name].bit_generator.state = gen_state
        self.mh_step = dict(ck["mh_step"])
        self._mh_accept = dict(ck["mh_accept"])
        self._mh_total = dict(ck["mh_total"])
        self._mh_window = {k: list(v) for k, v in ck["mh_window"].items()}


def _inv_gamma(rng, shape, rate):
    return rate / rng.gamma(shape)


def run_chain(ds, hp, cfg, basis=None, store=None, resume=False, abort_after=None):
    """Run a full chain and return ChainSamples.

    ``store`` is an optional bagel.store.SampleStore for streaming retained
    draws to disk with checkpointing; with ``resume=True`` the chain picks up
    bit-exactly from the store's checkpoint. ``abort_after`` stops the loop
    after that many completed iterations (used to exercise resume).
    """
    sampler = GibbsSampler(ds, hp, cfg, basis=basis)
    draws, logliks = [], []

    start_iter = 0
    if store is not None:
        if resume and store.has_checkpoint():
            ck = store.load_checkpoint()
            sampler.restore_checkpoint(ck)
            start_iter = sampler.iteration
            draws, logliks = store.reload_draws(ck["retained"])
            log.info("resumed at iteration %d with %d retained draws", start_iter, len(draws))
        else:
            store.write_header(ds, hp, cfg, sampler.basis)

    while sampler.iteration < cfg.n_iter:
        sampler.sweep()
        it = sampler.iteration
        if it > cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0:
            rec = sampler.retained_record()
            pll = sampler.pointwise_loglik()
            draws.append(rec)
            logliks.append(pll)
            if store is not None:
                store.append_draw(rec, pll)
        if store is not None and (it % cfg.checkpoint_every == 0 or it == cfg.n_iter):
            store.write_checkpoint(sampler.checkpoint_dict(), len(draws))
        if cfg.progress_every and it % cfg.progress_every == 0:
            log.info(
                "iter %d/%d H=%d loglik=%.1f acc=%s",
                it, cfg.n_iter, sampler.state.n_clusters,
                float(sampler.pointwise_loglik().sum()),
                {k: (f"{v:.2f}" if v is not None else "-") for k, v in sampler.acceptance_rates().items()},
            )
        if abort_after is not None and it >= abort_after:
            return None

    samples = ChainSamples(
        draws=draws,
        pointwise_loglik=np.array(logliks) if logliks else np.empty((0, sampler.V)),
        acceptance_rates=sampler.acceptance_rates(),
        meta={
            "n": ds.n,
            "participant_ids": [p.id for p in ds.participants],
            "visit_counts": [p.n_visits for p in ds.participants],
            "variant": hp.variant,
            "seed": cfg.seed,
        },
    )
    if store is not None:
        store.write_footer(samples)
    return samples

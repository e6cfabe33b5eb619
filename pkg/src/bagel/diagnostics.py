"""Convergence diagnostics: split R-hat and autocorrelation-based effective
sample size for scalar traces."""

from dataclasses import dataclass

import numpy as np

from .errors import TooFewDraws


@dataclass
class DiagnosticRow:
    name: str
    mean: float
    ess: float
    rhat: float
    flag: str = ""  # "constant" when the trace is degenerate


def effective_sample_size(x):
    """ESS via the initial positive sequence of paired autocorrelations.

    Returns 0.0 for a constant trace (degenerate, flagged by callers).
    """
    x = np.asarray(x, float)
    n = x.size
    if n < 4:
        raise TooFewDraws("need at least 4 draws for ESS")
    var = x.var()
    if var == 0:
        return 0.0
    xc = x - x.mean()
    # autocovariance via FFT
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, m)
    acov = np.fft.irfft(f * np.conj(f), m)[:n].real / n
    rho = acov / acov[0]
    # Geyer: sum consecutive pairs while positive
    tau = 1.0
    t = 1
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
        t += 2
    return float(n / tau)


def split_rhat(chains):
    """Classic split R-hat. ``chains`` is (n_chains, n_draws) or a single
    1-D trace (split into halves). Returns 1.0 with no between-chain
    variance; 0.0-variance traces report exactly 1.0."""
    chains = np.atleast_2d(np.asarray(chains, float))
    n = chains.shape[1]
    if n < 4:
        raise TooFewDraws("need at least 4 draws for split R-hat")
    half = n // 2
    split = np.concatenate([chains[:, :half], chains[:, half: 2 * half]], axis=0)
    m, n2 = split.shape
    means = split.mean(axis=1)
    within = split.var(axis=1, ddof=1).mean()
    if within == 0:
        return 1.0
    between = n2 * means.var(ddof=1)
    var_plus = (n2 - 1) / n2 * within + between / n2
    return float(np.sqrt(var_plus / within))


TRACE_NAMES = ("sigma2_beta", "sigma2_alpha", "sigma2_gamma", "rho", "H")


def diagnostics(samples, extra_chains=None):
    """ESS and split R-hat for the traced scalars of a ChainSamples.

    ``extra_chains`` may hold further ChainSamples from independent seeds;
    their traces enter R-hat as separate chains and ESS as pooled draws.
    Constant traces come back flagged rather than as NaN.
    """
    all_samples = [samples] + list(extra_chains or [])
    if min(s.n_draws for s in all_samples) < 4:
        raise TooFewDraws("need at least 4 retained draws per chain")

    names = list(TRACE_NAMES)
    q = samples.draws[0].c_omega.shape[0]
    for q1 in range(q):
        for q2 in range(q1 + 1, q):
            names.append(f"c_omega:{q1}:{q2}")
    if samples.meta.get("hyperparams", {}).get("update_cutpoints"):
        names += ["cutpoint:0", "cutpoint:1"]

    rows = []
    for name in names:
        traces = [s.trace(name) for s in all_samples]
        pooled = np.concatenate(traces)
        if pooled.var() == 0:
            rows.append(DiagnosticRow(name=name, mean=float(pooled.mean()),
                                      ess=0.0, rhat=1.0, flag="constant"))
            continue
        n_min = min(t.size for t in traces)
        stacked = np.stack([t[:n_min] for t in traces])
        ess = float(sum(effective_sample_size(t) for t in traces))
        rows.append(DiagnosticRow(
            name=name, mean=float(pooled.mean()), ess=ess, rhat=split_rhat(stacked)
        ))
    return rows

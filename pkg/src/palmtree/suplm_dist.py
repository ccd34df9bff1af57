"""Limiting distribution of the supLM statistic.

Under parameter stability the supLM statistic converges to

    sup_{t in [trim, 1 - trim]} ||B(t)||^2 / (t (1 - t))

for a K-dimensional Brownian bridge B. With t = e^s / (1 + e^s) the
normalised bridge becomes a stationary Ornstein-Uhlenbeck process with
correlation exp(-|s| / 2), so the distribution depends on the trimming only
through the window length log(lambda), lambda = ((1 - trim) / trim)^2.

The shipped table holds simulated upper quantiles for K = 1..KMAX over a grid
of trims. p-values are interpolated on the log scale; beyond the last
tabulated quantile the tail uses the classical Bessel-process approximation

    P(sup > x) ~ x^{K/2} e^{-x/2} / (2^{K/2} Gamma(K/2)) * ((1 - K/x) log(lambda) + 4/x)

rescaled to agree with the table at its edge.
"""

from __future__ import annotations

from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.signal import lfilter
from scipy.special import gammaln

TABLE_PATH = Path(__file__).with_name("suplm_table.npz")

TRIMS = (0.05, 0.075, 0.1, 0.125, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45)
KMAX = 20
SURVIVAL = np.unique(np.concatenate([
    np.logspace(-3.5, -1, 120),
    np.linspace(0.1, 0.999, 181),
]))


def log_lambda(trim: float) -> float:
    return 2.0 * np.log((1.0 - trim) / trim)


def bessel_tail(x, k: int, trim: float):
    """Asymptotic upper-tail probability of the supLM limit."""
    x = np.asarray(x, dtype=float)
    lead = (k / 2) * np.log(x) - x / 2 - (k / 2) * np.log(2) - gammaln(k / 2)
    bracket = (1 - k / x) * log_lambda(trim) + 4 / x
    return np.exp(lead) * np.maximum(bracket, 1e-300)


def simulate_table(n_paths=200_000, ds=0.005, kmax=KMAX, trims=TRIMS, seed=20170501, chunk=1000):
    """Simulate supLM limit quantiles.

    Returns an array of shape (len(trims), kmax, len(SURVIVAL)) with the
    critical values exceeded with probability SURVIVAL.
    """
    rng = np.random.default_rng(seed)
    half = int(np.ceil(log_lambda(min(trims)) / 2 / ds))
    steps = 2 * half + 1
    rho = np.exp(-ds / 2)
    innov = np.sqrt(1 - rho**2)
    windows = [int(np.floor(log_lambda(t) / 2 / ds + 1e-9)) for t in trims]
    stats = np.empty((len(trims), kmax, n_paths), dtype=np.float32)
    done = 0
    while done < n_paths:
        m = min(chunk, n_paths - done)
        eps = rng.standard_normal((m, kmax, steps))
        eps[..., 0] /= innov
        proc = lfilter([innov], [1.0, -rho], eps, axis=-1)
        np.square(proc, out=proc)
        np.cumsum(proc, axis=1, out=proc)
        for i, w in enumerate(windows):
            stats[i, :, done:done + m] = proc[..., half - w:half + w + 1].max(axis=-1).T
        done += m
    q = np.quantile(stats, 1 - SURVIVAL, axis=-1)  # (len(SURVIVAL), trims, k)
    return np.moveaxis(q, 0, -1)


def save_table(path=TABLE_PATH, **kwargs):
    crit = simulate_table(**kwargs)
    np.savez_compressed(path, crit=crit, trims=np.array(TRIMS), survival=SURVIVAL)
    return crit


@lru_cache(maxsize=1)
def _table():
    with np.load(TABLE_PATH) as z:
        return z["crit"], tuple(z["trims"].tolist()), z["survival"]


@lru_cache(maxsize=256)
def _tail_mode(k: int, trim: float) -> float:
    res = minimize_scalar(lambda x: -np.log(bessel_tail(x, k, trim)), bounds=(max(k / 2, 1.0), 3.0 * k + 20),
                          method="bounded", options={"xatol": 1e-8})
    return float(res.x)


def _pvalue_tabulated(stat: float, k: int, trim_index: int) -> float:
    crit, trims, surv = _table()
    cv = crit[trim_index, k - 1]
    if stat <= cv[-1]:
        # below the 0.999 quantile: p is essentially one
        return float(1.0 - (1 - surv[-1]) * max(stat, 0.0) / cv[-1]) if cv[-1] > 0 else 1.0
    if stat >= cv[0]:
        ratio = surv[0] / bessel_tail(cv[0], k, trims[trim_index])
        return float(min(surv[0], ratio * bessel_tail(stat, k, trims[trim_index])))
    # cv is decreasing in survival order
    return float(np.exp(np.interp(stat, cv[::-1], np.log(surv[::-1]))))


def suplm_pvalue(stat: float, k: int, trim: float = 0.1) -> float:
    """Asymptotic p-value of a supLM statistic with ``k`` degrees of freedom."""
    if not np.isfinite(stat):
        return 0.0
    if stat <= 0:
        return 1.0
    if not 0 < trim < 0.5:
        raise ValueError("trim must lie in (0, 0.5)")
    _, trims, _ = _table()
    if k > KMAX:
        # the tail formula rises to ~1 below its mode; clamp to keep p monotone
        if stat <= _tail_mode(k, trim):
            return 1.0
        return float(min(1.0, bessel_tail(stat, k, trim)))
    ll = log_lambda(trim)
    grid = np.array([log_lambda(t) for t in trims])  # decreasing
    if ll >= grid[0]:
        return _pvalue_tabulated(stat, k, 0)
    if ll <= grid[-1]:
        return _pvalue_tabulated(stat, k, len(trims) - 1)
    j = int(np.searchsorted(-grid, -ll))  # grid[j-1] > ll >= grid[j]
    if np.isclose(ll, grid[j]):
        return _pvalue_tabulated(stat, k, j)
    lo = np.log(_pvalue_tabulated(stat, k, j))
    hi = np.log(_pvalue_tabulated(stat, k, j - 1))
    frac = (ll - grid[j]) / (grid[j - 1] - grid[j])
    return float(np.exp(lo + frac * (hi - lo)))

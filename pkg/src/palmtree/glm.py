"""Maximum-likelihood GLM fitting with offsets, observation-wise scores and
subgroup interaction designs."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import qr, solve_triangular
from scipy.special import expit, gammaln, xlogy

from .data import Dataset, RoleSpec, check_response, design_matrix

log = logging.getLogger(__name__)

RANK_TOL = 1e-10
IRLS_MAXIT = 25
IRLS_GRAD_TOL = 1e-8
_MIN_SIGMA2 = 1e-300


class SingularDesignError(ValueError):
    """Model matrix is rank deficient."""

    def __init__(self, collinear: Sequence[str]):
        self.collinear = list(collinear)
        super().__init__(f"singular design; collinear column(s): {', '.join(self.collinear)}")


class DegeneratePartitionError(ValueError):
    pass


@dataclass(frozen=True)
class Family:
    """Exponential family with its (canonical) link."""

    kind: str

    def linkfun(self, mu):
        if self.kind == "gaussian":
            return mu
        if self.kind == "binomial":
            return np.log(mu) - np.log1p(-mu)
        return np.log(mu)

    def linkinv(self, eta):
        if self.kind == "gaussian":
            return eta
        if self.kind == "binomial":
            return expit(eta)
        return np.exp(np.minimum(eta, 700.0))

    def mu_eta(self, eta):
        """d mu / d eta."""
        if self.kind == "gaussian":
            return np.ones_like(eta)
        if self.kind == "binomial":
            p = expit(eta)
            return np.maximum(p * (1 - p), np.finfo(float).tiny)
        return np.maximum(np.exp(np.minimum(eta, 700.0)), np.finfo(float).tiny)

    def variance(self, mu):
        if self.kind == "gaussian":
            return np.ones_like(mu)
        if self.kind == "binomial":
            return mu * (1 - mu)
        return mu

    def loglik_obs(self, y, mu, dispersion=1.0, weights=None):
        """Per-observation log-likelihood contributions."""
        if self.kind == "gaussian":
            ll = -0.5 * np.log(2 * np.pi * dispersion) - (y - mu) ** 2 / (2 * dispersion)
        elif self.kind == "binomial":
            ll = xlogy(y, mu) + xlogy(1 - y, 1 - mu)
        else:
            ll = xlogy(y, mu) - mu - gammaln(y + 1)
        return ll if weights is None else weights * ll

    def start_mu(self, y):
        if self.kind == "binomial":
            return (y + 0.5) / 2
        if self.kind == "poisson":
            return y + 0.1
        return y


def get_family(family: str | Family) -> Family:
    if isinstance(family, Family):
        return family
    if family not in ("gaussian", "binomial", "poisson"):
        raise ValueError(f"unknown family {family!r}")
    return Family(family)


@dataclass(frozen=True)
class FitResult:
    coefficients: np.ndarray
    dispersion: float
    loglik: float
    scores: np.ndarray
    n_obs: int
    converged: bool
    column_names: tuple[str, ...]
    family: Family
    fitted: np.ndarray = field(repr=False)
    iterations: int = 0

    @property
    def k(self) -> int:
        return len(self.coefficients)

    def coef_dict(self) -> dict[str, float]:
        return dict(zip(self.column_names, map(float, self.coefficients)))


def gaussian_loglik(rss, n):
    """Profile log-likelihood of a gaussian model with ML variance RSS/n."""
    sigma2 = np.maximum(np.asarray(rss, dtype=float) / n, _MIN_SIGMA2)
    return -0.5 * n * (np.log(2 * np.pi * sigma2) + 1.0)


def _pivoted_qr(Xw: np.ndarray, names: Sequence[str]):
    Q, R, piv = qr(Xw, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0:
        return Q, R, piv
    rank = int(np.sum(diag > RANK_TOL * diag[0]))
    if rank < Xw.shape[1]:
        raise SingularDesignError([names[j] for j in piv[rank:]])
    return Q, R, piv


def _wls(X, z, w, names):
    sw = np.sqrt(w)
    Q, R, piv = _pivoted_qr(X * sw[:, None], names)
    beta = np.empty(X.shape[1])
    beta[piv] = solve_triangular(R, Q.T @ (z * sw))
    return beta


def fit_glm(
    X: np.ndarray,
    y: np.ndarray,
    family: str | Family = "gaussian",
    offset: np.ndarray | None = None,
    weights: np.ndarray | None = None,
    column_names: Sequence[str] | None = None,
) -> FitResult:
    """Fit a GLM by maximum likelihood.

    Gaussian models are solved in closed form by (weighted) least squares on
    ``y - offset`` with the ML variance estimate. Binomial and Poisson models
    use IRLS until the score norm drops below 1e-8 or 25 iterations.

    Raises
    ------
    SingularDesignError
        If ``X`` does not have full column rank.
    """
    fam = get_family(family)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    names = tuple(column_names) if column_names is not None else tuple(f"x{j}" for j in range(k))
    if len(names) != k:
        raise ValueError("column_names length does not match X")
    if n <= k:
        raise SingularDesignError(names[n:] if n < k else names[-1:])
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if (w < 0).any():
        raise ValueError("weights must be nonnegative")
    n_obs = int(np.count_nonzero(w))

    if fam.kind == "gaussian":
        beta = _wls(X, y - off, w, names)
        eta = X @ beta + off
        resid = y - eta
        sigma2 = max(float(np.sum(w * resid**2) / np.sum(w)), _MIN_SIGMA2)
        scores = (w * resid / sigma2)[:, None] * X
        loglik = float(np.sum(fam.loglik_obs(y, eta, sigma2, w)))
        return FitResult(beta, sigma2, loglik, scores, n_obs, True, names, fam, eta, 1)

    beta, eta, converged, it = _irls(X, y, fam, off, w, names)
    mu = fam.linkinv(eta)
    scores = (w * (y - mu))[:, None] * X
    loglik = float(np.sum(fam.loglik_obs(y, mu, 1.0, w)))
    if fam.kind == "binomial" and np.max(np.abs(beta)) > 25 and np.any(np.minimum(mu, 1 - mu) < 1e-10):
        log.warning("binomial fit looks separated (diverging coefficients)")
        converged = False
    if not converged:
        log.warning("IRLS did not converge in %d iterations", it)
    return FitResult(beta, 1.0, loglik, scores, n_obs, converged, names, fam, mu, it)


def _irls(X, y, fam, off, w, names):
    mu = fam.start_mu(y)
    eta = fam.linkfun(mu)
    beta = None
    dev_old = np.inf
    converged = False
    it = 0
    for it in range(1, IRLS_MAXIT + 1):
        me = fam.mu_eta(eta)
        var = np.maximum(fam.variance(mu), np.finfo(float).tiny)
        z = eta - off + (y - mu) / me
        wt = w * me**2 / var
        beta_new = _wls(X, z, wt, names)
        eta_new = X @ beta_new + off
        mu_new = fam.linkinv(eta_new)
        dev = -2 * np.sum(fam.loglik_obs(y, mu_new, 1.0, w))
        # step halving guards against overshooting from the start values
        halvings = 0
        while beta is not None and (not np.isfinite(dev) or dev > dev_old + 1e-10) and halvings < 20:
            beta_new = 0.5 * (beta_new + beta)
            eta_new = X @ beta_new + off
            mu_new = fam.linkinv(eta_new)
            dev = -2 * np.sum(fam.loglik_obs(y, mu_new, 1.0, w))
            halvings += 1
        beta, eta, mu, dev_old = beta_new, eta_new, mu_new, dev
        grad = X.T @ (w * (y - mu))
        if np.linalg.norm(grad) < IRLS_GRAD_TOL * max(1.0, np.sqrt(np.sum(w))):
            converged = True
            break
    return beta, eta, converged, it


def loglik_at(X, y, beta, family="gaussian", offset=None, weights=None, dispersion=None) -> float:
    """Log-likelihood at arbitrary coefficients.

    For the gaussian family ``dispersion=None`` profiles the variance out
    (ML estimate RSS/n at ``beta``).
    """
    fam = get_family(family)
    off = 0.0 if offset is None else offset
    eta = X @ beta + off
    mu = fam.linkinv(eta)
    if fam.kind == "gaussian" and dispersion is None:
        w = np.ones(len(y)) if weights is None else weights
        dispersion = max(float(np.sum(w * (y - mu) ** 2) / np.sum(w)), _MIN_SIGMA2)
    return float(np.sum(fam.loglik_obs(y, mu, 1.0 if dispersion is None else dispersion, weights)))


def predict(fit: FitResult, X: np.ndarray, offset: np.ndarray | float | None = None) -> np.ndarray:
    """Mean prediction g^{-1}(X beta + offset)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != fit.k:
        raise ValueError(f"X has {X.shape[1]} columns, model has {fit.k}")
    eta = X @ fit.coefficients
    if offset is not None:
        eta = eta + offset
    return fit.family.linkinv(eta)


def relabel(partition) -> tuple[np.ndarray, np.ndarray]:
    """Map arbitrary labels to 0..B-1 in sorted order; returns (codes, labels)."""
    labels, codes = np.unique(np.asarray(partition), return_inverse=True)
    return codes, labels


def interaction_design(Xv: np.ndarray, codes: np.ndarray, n_groups: int) -> np.ndarray:
    """Block design with I(subgroup_b) * x_V for every subgroup b."""
    n, kv = Xv.shape
    out = np.zeros((n, n_groups * kv))
    for b in range(n_groups):
        rows = codes == b
        out[rows, b * kv:(b + 1) * kv] = Xv[rows]
    return out


def fit_interaction_glm(ds: Dataset, partition, spec: RoleSpec, offset=None) -> FitResult:
    """Joint GLM with subgroup-specific x_V blocks and global x_F coefficients.

    ``partition`` holds labels 1..B. Coefficients are ordered block by block
    followed by the global block; names are ``"<label>:<column>"`` for the
    subgroup blocks.
    """
    part = np.asarray(partition)
    if part.shape != (ds.n,):
        raise DegeneratePartitionError("partition length does not match data")
    labels = np.unique(part)
    if np.issubdtype(labels.dtype, np.integer) and labels.size and labels.min() >= 1:
        empty = sorted(set(range(1, int(labels.max()) + 1)) - set(labels.tolist()))
        if empty:
            raise DegeneratePartitionError(f"empty subgroup(s) {empty}")
    codes, labels = relabel(part)
    y = check_response(ds, spec)
    Xv, vnames = design_matrix(ds, spec.varying, spec.intercept)
    Xf, fnames = design_matrix(ds, spec.fixed, intercept=False)
    counts = np.bincount(codes, minlength=len(labels))
    small = [str(labels[b]) for b in range(len(labels)) if counts[b] <= Xv.shape[1]]
    if small:
        raise DegeneratePartitionError(f"subgroup(s) {small} have too few observations")
    X = np.hstack([interaction_design(Xv, codes, len(labels)), Xf])
    names = [f"{lab}:{v}" for lab in labels for v in vnames] + list(fnames)
    return fit_glm(X, y, spec.family, offset=offset, column_names=names)

"""Gaussian-process surrogate and acquisition functions for policy search.

Inputs are box-normalised to [0, 1]^p and outputs standardised before
fitting; ``posterior`` reports mean and variance in the original units.
Kernel: squared exponential with one lengthscale per input dimension.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla
from scipy.stats import norm, qmc

log = logging.getLogger(__name__)

JITTER_START = 1e-10
JITTER_MAX = 1e-4
# hyperparameter search box, in normalised/standardised units
LOG_ELL_BOUNDS = (math.log(1e-2), math.log(10.0))
LOG_SF2_BOUNDS = (math.log(1e-2), math.log(1e2))
LOG_SN2_BOUNDS = (math.log(1e-8), math.log(1.0))
NOISE_FREE_SN2 = 0.0


class GPFitError(np.linalg.LinAlgError):
    pass


def normalize(X, lower, upper) -> np.ndarray:
    lower, upper = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
    return (np.asarray(X, dtype=float) - lower) / (upper - lower)


def denormalize(Z, lower, upper) -> np.ndarray:
    lower, upper = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
    return lower + np.asarray(Z, dtype=float) * (upper - lower)


def se_kernel(A: np.ndarray, B: np.ndarray, ell: np.ndarray, sf2: float) -> np.ndarray:
    d = (A[:, None, :] - B[None, :, :]) / ell
    return sf2 * np.exp(-0.5 * np.sum(d * d, axis=-1))


def dedup(X: np.ndarray, y: np.ndarray, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Merge rows closer than ``tol`` (infinity norm), averaging their outputs."""
    keep_X, keep_y, counts = [], [], []
    for x, v in zip(X, y):
        for i, kx in enumerate(keep_X):
            if np.max(np.abs(kx - x)) < tol:
                keep_y[i] += v
                counts[i] += 1
                break
        else:
            keep_X.append(x.copy())
            keep_y.append(float(v))
            counts.append(1)
    return np.array(keep_X).reshape(len(keep_X), X.shape[1]), np.array(keep_y) / np.array(counts)


@dataclass
class GPModel:
    X: np.ndarray          # normalised inputs (N, p)
    y: np.ndarray          # standardised outputs (N,)
    lower: np.ndarray
    upper: np.ndarray
    y_mean: float
    y_std: float
    ell: np.ndarray        # lengthscales (normalised units)
    sf2: float             # signal variance (standardised units)
    sn2: float             # noise variance (standardised units)
    jitter: float
    L: np.ndarray          # Cholesky factor of K + (sn2 + jitter) I
    alpha: np.ndarray      # (K + ...)^{-1} y
    log_marginal: float

    @property
    def signal_variance(self) -> float:
        """Prior variance in the original output units."""
        return self.sf2 * self.y_std**2

    @property
    def noise_variance(self) -> float:
        return self.sn2 * self.y_std**2

    def gram(self) -> np.ndarray:
        return se_kernel(self.X, self.X, self.ell, self.sf2) + (self.sn2 + self.jitter) * np.eye(len(self.X))

    def posterior(self, theta) -> tuple[np.ndarray, np.ndarray]:
        return gp_posterior(self, theta)


def _chol(K: np.ndarray) -> tuple[np.ndarray, float]:
    jitter = JITTER_START
    n = K.shape[0]
    scale = max(1.0, float(np.max(np.diag(K)))) if n else 1.0
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            return sla.cholesky(K + jitter * scale * np.eye(n), lower=True, check_finite=False), jitter * scale
        except sla.LinAlgError:
            jitter *= 10.0
    ev = np.linalg.eigvalsh(K)
    raise GPFitError(f"Cholesky failed with jitter up to {JITTER_MAX:g}: eigenvalues in [{ev[0]:.3e}, {ev[-1]:.3e}], "
                     f"condition {abs(ev[-1] / ev[0]) if ev[0] else float('inf'):.3e}")


def _nlml(X, y, log_ell, log_sf2, sn2) -> float:
    ell, sf2 = np.exp(log_ell), math.exp(log_sf2)
    K = se_kernel(X, X, ell, sf2) + sn2 * np.eye(len(X))
    try:
        L, _ = _chol(K)
    except GPFitError:
        return math.inf
    a = sla.cho_solve((L, True), y, check_finite=False)
    return 0.5 * float(y @ a) + float(np.sum(np.log(np.diag(L)))) + 0.5 * len(y) * math.log(2 * math.pi)


def _coordinate_search(f: Callable, x0: np.ndarray, lo: np.ndarray, hi: np.ndarray,
                       step: float = 1.0, min_step: float = 1e-3, max_evals: int = 400) -> tuple[np.ndarray, float]:
    x, fx = x0.copy(), f(x0)
    evals = 1
    while step >= min_step and evals < max_evals:
        improved = False
        for i in range(x.size):
            for sgn in (1.0, -1.0):
                c = x.copy()
                c[i] = min(max(c[i] + sgn * step, lo[i]), hi[i])
                if c[i] == x[i]:
                    continue
                fc = f(c)
                evals += 1
                if fc < fx:
                    x, fx, improved = c, fc, True
                    break
        if not improved:
            step *= 0.5
    return x, fx


def gp_fit(X, y, lower, upper, strategy: str = "ml", noise_free: bool = False, n_starts: int = 4,
           hyper: dict | None = None) -> GPModel:
    """Fit the surrogate.

    strategy "ml": multi-start coordinate search on the log marginal
    likelihood over log-lengthscales, log signal variance and (unless
    ``noise_free``) log noise variance, inside the module-level bounds.
    strategy "fixed": use ``hyper = {"ell": ..., "sf2": ..., "sn2": ...}``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.shape[0] < 1 or X.shape[0] != y.size:
        raise ValueError("need N >= 1 rows with one output each")
    if not np.all(np.isfinite(y)):
        raise ValueError("non-finite outputs")
    lower, upper = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
    Z, y = dedup(normalize(X, lower, upper), y)
    p = Z.shape[1]
    y_mean = float(y.mean())
    y_std = float(y.std())
    if not y_std > 1e-12 * max(1.0, abs(y_mean)):
        y_std = 1.0
    ys = (y - y_mean) / y_std

    if strategy == "fixed":
        if hyper is None:
            raise ValueError("strategy 'fixed' needs hyper")
        ell = np.broadcast_to(np.asarray(hyper["ell"], dtype=float), (p,)).copy()
        sf2, sn2 = float(hyper["sf2"]), float(hyper.get("sn2", 0.0))
    elif strategy == "ml":
        fit_noise = not noise_free
        lo = np.r_[np.full(p, LOG_ELL_BOUNDS[0]), LOG_SF2_BOUNDS[0], LOG_SN2_BOUNDS[0]]
        hi = np.r_[np.full(p, LOG_ELL_BOUNDS[1]), LOG_SF2_BOUNDS[1], LOG_SN2_BOUNDS[1]]
        if not fit_noise:
            lo, hi = lo[:-1], hi[:-1]

        def f(v):
            sn2 = math.exp(v[-1]) if fit_noise else NOISE_FREE_SN2
            return _nlml(Z, ys, v[:p], v[p], sn2)

        # deterministic starts: a spread of common lengthscales
        starts = []
        for ell0 in np.geomspace(0.1, 1.0, max(n_starts, 1)):
            v = np.r_[np.full(p, math.log(ell0)), 0.0]
            if fit_noise:
                v = np.r_[v, math.log(1e-3)]
            starts.append(v)
        best, fbest = None, math.inf
        for v0 in starts:
            v, fv = _coordinate_search(f, v0, lo, hi)
            if fv < fbest:
                best, fbest = v, fv
        if best is None:
            raise GPFitError("marginal likelihood is not finite at any start")
        ell, sf2 = np.exp(best[:p]), math.exp(best[p])
        sn2 = math.exp(best[-1]) if fit_noise else NOISE_FREE_SN2
    else:
        raise ValueError(f"unknown strategy {strategy!r}")

    K = se_kernel(Z, Z, ell, sf2) + sn2 * np.eye(len(Z))
    L, jitter = _chol(K)
    alpha = sla.cho_solve((L, True), ys, check_finite=False)
    lml = -(0.5 * float(ys @ alpha) + float(np.sum(np.log(np.diag(L)))) + 0.5 * len(ys) * math.log(2 * math.pi))
    return GPModel(Z, ys, lower, upper, y_mean, y_std, ell, sf2, sn2, jitter, L, alpha, lml)


def gp_posterior(model: GPModel, theta) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and latent variance at one or more points (original units)."""
    th = np.atleast_2d(np.asarray(theta, dtype=float))
    Z = normalize(th, model.lower, model.upper)
    Ks = se_kernel(Z, model.X, model.ell, model.sf2)
    mu = Ks @ model.alpha
    v = sla.solve_triangular(model.L, Ks.T, lower=True, check_finite=False)
    var = model.sf2 - np.sum(v * v, axis=0)
    neg = var < 0
    if np.any(var < -1e-8 * model.sf2):
        log.debug("clamped negative posterior variance %.3e", float(var.min()))
    var = np.where(neg, 0.0, var)
    return model.y_mean + model.y_std * mu, var * model.y_std**2


# -- acquisitions ------------------------------------------------------------

SIGMA_ZERO = 1e-12


def ei_from_moments(mu, sigma, incumbent) -> np.ndarray:
    """Expected improvement for maximisation; deterministic improvement where sigma = 0."""
    mu, sigma = np.asarray(mu, dtype=float), np.asarray(sigma, dtype=float)
    imp = mu - incumbent
    out = np.maximum(imp, 0.0)
    pos = sigma > SIGMA_ZERO
    z = imp[pos] / sigma[pos]
    out = out.astype(float).copy()
    out[pos] = imp[pos] * norm.cdf(z) + sigma[pos] * norm.pdf(z)
    return np.maximum(out, 0.0)


def expected_improvement(model: GPModel, theta, incumbent_y: float) -> np.ndarray:
    mu, var = gp_posterior(model, theta)
    return ei_from_moments(mu, np.sqrt(var), incumbent_y)


def ucb(model: GPModel, theta, beta: float) -> np.ndarray:
    mu, var = gp_posterior(model, theta)
    return mu + beta * np.sqrt(var)


def prob_feasible(model: GPModel, theta) -> np.ndarray:
    """Pr(c(theta) <= 0) under the posterior of the constraint GP."""
    mu, var = gp_posterior(model, theta)
    sd = np.sqrt(var)
    out = (mu <= 0).astype(float)
    pos = sd > SIGMA_ZERO
    out[pos] = norm.cdf(-mu[pos] / sd[pos])
    return out


def constrained_ei(model: GPModel, feasibility_gps: Sequence[GPModel], theta, incumbent_y: float) -> np.ndarray:
    if not feasibility_gps:
        raise ValueError("need at least one feasibility GP")
    val = expected_improvement(model, theta, incumbent_y)
    for g in feasibility_gps:
        val = val * prob_feasible(g, theta)
    return val


def maximize_acquisition(acq: Callable[[np.ndarray], np.ndarray], lower, upper, rng: np.random.Generator,
                         n_candidates: int = 1024, n_refine: int = 8) -> np.ndarray:
    """Best of scrambled-Sobol candidates refined by coordinate pattern search.

    ``acq`` maps an (N, p) array of points in original units to N values.
    """
    lower, upper = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
    if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper)) and np.all(upper > lower)):
        raise ValueError("bounds must be finite with upper > lower")
    p = lower.size
    sobol = qmc.Sobol(p, scramble=True, seed=int(rng.integers(2**63)))
    U = sobol.random(n_candidates)
    vals = np.asarray(acq(denormalize(U, lower, upper)), dtype=float)
    vals = np.where(np.isfinite(vals), vals, -np.inf)
    order = np.argsort(-vals, kind="stable")[:n_refine]
    best_u, best_v = U[order[0]].copy(), vals[order[0]]
    f = lambda u: float(np.asarray(acq(denormalize(u[None, :], lower, upper)))[0])
    for i in order:
        u, v = _coordinate_search(lambda x: -f(x), U[i].copy(), np.zeros(p), np.ones(p),
                                  step=0.05, min_step=1e-4, max_evals=200)
        if -v > best_v:
            best_u, best_v = u, -v
    return denormalize(np.clip(best_u, 0.0, 1.0), lower, upper)

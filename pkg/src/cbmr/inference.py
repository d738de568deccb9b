"""Voxelwise homogeneity tests, covariate contrasts and FDR control."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps
from scipy.linalg import solve_triangular

from cbmr.errors import NumericalError, SingularInformationError, ValidationError
from cbmr.optimizer import FitResult
from cbmr.stochastic_models import SufficientStats

LGR = logging.getLogger(__name__)

SIDES = ("one", "two")
ROW_CHUNK = 65536


@dataclass(frozen=True, eq=False)
class FdrResult:
    """Benjamini-Hochberg outcome on raw and on floored p-values."""

    rejected: np.ndarray
    adjusted: np.ndarray
    rejected_raw: np.ndarray
    adjusted_raw: np.ndarray
    q: float
    truncation_floor: float


@dataclass(frozen=True, eq=False)
class StatMapSet:
    """Voxelwise homogeneity test output, one entry per in-mask voxel.

    ``z`` is the log-scale statistic and ``z_mu`` its intensity-scale
    counterpart. ``p`` is derived from ``z``.
    """

    eta_x: np.ndarray
    mu_x: np.ndarray
    se_eta: np.ndarray
    se_mu: np.ndarray
    z: np.ndarray
    z_mu: np.ndarray
    p: np.ndarray
    p_truncated: np.ndarray
    fdr: FdrResult
    mu0: float
    eta0: float
    sided: str

    @property
    def fdr_rejected(self) -> np.ndarray:
        return self.fdr.rejected

    def summary(self) -> dict:
        return {
            "mu0": self.mu0,
            "eta0": self.eta0,
            "sided": self.sided,
            "q": self.fdr.q,
            "truncation_floor": self.fdr.truncation_floor,
            "n_voxels": int(self.p.size),
            "n_p_below_0.05": int((self.p < 0.05).sum()),
            "n_rejected_raw": int(self.fdr.rejected_raw.sum()),
            "n_rejected_truncated": int(self.fdr.rejected.sum()),
        }


@dataclass(frozen=True, eq=False)
class GlhResult:
    """Wald test of ``C gamma = 0``; ``z_signed`` only for single-row contrasts."""

    contrast: np.ndarray
    estimate: np.ndarray
    stat: float
    df: int
    p: float
    z_signed: float | None

    def summary(self) -> dict:
        return {
            "contrast": self.contrast.tolist(),
            "estimate": [float(v) for v in self.estimate],
            "stat": float(self.stat),
            "df": int(self.df),
            "p": float(self.p),
            "z_signed": None if self.z_signed is None else float(self.z_signed),
        }


def benjamini_hochberg(p: np.ndarray, q: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Step-up Benjamini-Hochberg procedure.

    Returns
    -------
    rejected : ndarray of bool
    adjusted : ndarray
        BH-adjusted p-values, ``min(1, min_{k >= i} p_(k) n / k)``.
    """
    p = np.asarray(p, dtype=float)
    n = p.size
    order = np.argsort(p, kind="stable")
    ranked = p[order] * n / np.arange(1, n + 1)
    adj_sorted = np.minimum.accumulate(ranked[::-1])[::-1]
    adjusted = np.empty(n)
    adjusted[order] = np.minimum(adj_sorted, 1.0)
    below = np.nonzero(p[order] <= q * np.arange(1, n + 1) / n)[0]
    rejected = np.zeros(n, dtype=bool)
    if below.size:
        rejected[order[: below[-1] + 1]] = True
    return rejected, adjusted


def bh_fdr(p: np.ndarray, q: float = 0.05, truncation_floor: float = 1e-3) -> FdrResult:
    """BH at level ``q`` after flooring p-values at ``truncation_floor``.

    Flooring removes the influence of overly liberal extreme tails; the
    result on the raw p-values is returned alongside.
    """
    p = np.asarray(p, dtype=float)
    if p.size == 0:
        raise ValidationError("bh_fdr needs at least one p-value")
    if np.any(~(p > 0)) or np.any(p > 1):
        raise ValidationError("p-values must lie in (0, 1]")
    if not 0 < q < 1:
        raise ValidationError("q must lie in (0, 1)")
    truncated = np.maximum(p, truncation_floor)
    rej, adj = benjamini_hochberg(truncated, q)
    rej_raw, adj_raw = benjamini_hochberg(p, q)
    return FdrResult(rej, adj, rej_raw, adj_raw, float(q), float(truncation_floor))


def _p_from_z(z: np.ndarray, sided: str) -> np.ndarray:
    if sided == "one":
        p = sps.norm.sf(z)
    else:
        p = 2 * sps.norm.sf(np.abs(z))
    return np.clip(p, np.finfo(float).tiny, 1.0)


def rowwise_quadratic(x, cov: np.ndarray) -> np.ndarray:
    """``diag(X cov X^T)`` computed in row blocks without forming X cov X^T."""
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise SingularInformationError("covariance is not positive definite") from None
    n = x.shape[0]
    out = np.empty(n)
    for start in range(0, n, ROW_CHUNK):
        block = x[start : start + ROW_CHUNK] @ chol
        block = np.asarray(block)
        out[start : start + ROW_CHUNK] = (block * block).sum(axis=1)
    return out


def homogeneity_test(
    fit: FitResult,
    stats: SufficientStats,
    sided: str = "one",
    q: float = 0.05,
    truncation_floor: float = 1e-3,
) -> StatMapSet:
    """Wald tests of ``mu_x[j] = mu0`` at every voxel.

    ``mu0 = total foci / (M N)`` is the homogeneous rate. The covariance of
    beta is the beta block of the inverse joint information, so uncertainty
    in the covariate and dispersion parameters is accounted for. The
    intensity-scale standard error follows from the delta method.

    Raises
    ------
    SingularInformationError
        If the fit's information matrix is singular.
    """
    if sided not in SIDES:
        raise ValidationError(f"sided must be one of {SIDES}")
    cov = fit.covariance()
    p_dim = stats.p
    cov_beta = cov[:p_dim, :p_dim]
    cov_beta = (cov_beta + cov_beta.T) / 2
    eta = np.asarray(stats.x @ fit.params.beta).ravel()
    mu = np.exp(eta)
    se_eta = np.sqrt(rowwise_quadratic(stats.x, cov_beta))
    if not np.all(np.isfinite(se_eta)) or np.any(se_eta <= 0):
        raise NumericalError("non-positive or non-finite standard errors")
    se_mu = mu * se_eta
    mu0 = stats.total / (stats.m * stats.n)
    eta0 = float(np.log(mu0))
    z = (eta - eta0) / se_eta
    z_mu = (mu - mu0) / se_mu
    p = _p_from_z(z, sided)
    fdr = bh_fdr(p, q, truncation_floor)
    return StatMapSet(
        eta, mu, se_eta, se_mu, z, z_mu, p, np.maximum(p, truncation_floor), fdr, float(mu0), eta0, sided
    )


def glh_test(fit: FitResult, contrast) -> GlhResult:
    """Chi-square Wald test of a linear hypothesis on the covariate effects.

    Parameters
    ----------
    fit : FitResult
        Fit with at least one covariate.
    contrast : array_like, shape (m, R) or (R,)
        Full row rank contrast matrix.
    """
    p_dim = fit.params.beta.size
    r = fit.params.gamma.size
    if r == 0:
        raise ValidationError("the fit has no covariates to test")
    c = np.atleast_2d(np.asarray(contrast, dtype=float))
    if c.shape[1] != r:
        raise ValidationError(f"contrast has {c.shape[1]} columns, the fit has {r} covariates")
    m = c.shape[0]
    if np.linalg.matrix_rank(c) < m:
        raise ValidationError("contrast matrix is rank deficient")
    cov = fit.covariance()[p_dim : p_dim + r, p_dim : p_dim + r]
    est = c @ fit.params.gamma
    middle = c @ cov @ c.T
    middle = (middle + middle.T) / 2
    try:
        chol = np.linalg.cholesky(middle)
    except np.linalg.LinAlgError:
        raise SingularInformationError("C Cov(gamma) C^T is singular") from None
    w = solve_triangular(chol, est, lower=True)
    stat = float(w @ w)
    p = float(sps.chi2.sf(stat, m))
    z = float(est[0] / np.sqrt(middle[0, 0])) if m == 1 else None
    return GlhResult(c, est, stat, m, p, z)

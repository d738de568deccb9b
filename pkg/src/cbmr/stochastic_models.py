"""Factorized count models over sufficient statistics.

The expected count for study ``i`` at voxel ``j`` factorizes as
``mu[i, j] = mu_x[j] * mu_z[i]`` with ``mu_x = exp(X beta)`` and
``mu_z = exp(Z gamma)``. All likelihoods below are written in terms of the
per-voxel sums ``Y.j``, the per-study sums ``Yi.`` and these two factors, so
their cost is O(N + M) rather than O(N M).

Four models are provided:

* ``poisson``: independent Poisson counts.
* ``nb``: independent negative binomial counts with shared dispersion
  ``alpha``. The voxel sum over studies is approximated by a single negative
  binomial with matched mean and variance.
* ``clustered_nb``: a Gamma frailty per study shared by all its voxels, giving
  an exact factorization in terms of study totals.
* ``quasi_poisson``: Poisson mean model with variance ``theta * mu``, fitted
  by iteratively reweighted least squares.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import gammaln

from cbmr.errors import NumericalError, ValidationError

POISSON = "poisson"
NB = "nb"
CLUSTERED_NB = "clustered_nb"
QUASI_POISSON = "quasi_poisson"
MODEL_KINDS = (POISSON, NB, CLUSTERED_NB, QUASI_POISSON)
DISPERSION_MODELS = (NB, CLUSTERED_NB)

ETA_MIN = -30.0  # clamp for the spatial linear predictor
ETA_MAX = 700.0  # exp overflows just above this


def check_kind(kind: str) -> str:
    if kind not in MODEL_KINDS:
        raise ValidationError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    return kind


def _rising_index(counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For counts c, return (owner, k) listing k = 0..c-1 for every entry."""
    counts = np.asarray(counts, dtype=np.int64)
    owner = np.repeat(np.arange(counts.size), counts)
    starts = np.cumsum(counts) - counts
    k = np.arange(owner.size) - np.repeat(starts, counts)
    return owner, k.astype(float)


@dataclass(frozen=True, eq=False)
class SufficientStats:
    """Data entering the factorized likelihoods.

    Parameters
    ----------
    x : sparse matrix, shape (N, P)
        Spatial design matrix.
    y_per_voxel : array, shape (N,)
        Foci per voxel summed over studies.
    y_per_study : array, shape (M,)
        Foci per study.
    z : array, shape (M, R), optional
        Study covariates. ``None`` means R = 0 and ``mu_z`` is all ones.
    """

    x: sp.csr_matrix
    y_per_voxel: np.ndarray
    y_per_study: np.ndarray
    z: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        x = sp.csr_matrix(self.x, dtype=float)
        yv = np.asarray(self.y_per_voxel, dtype=float)
        ys = np.asarray(self.y_per_study, dtype=float)
        m = ys.shape[0]
        z = np.zeros((m, 0)) if self.z is None else np.asarray(self.z, dtype=float).reshape(m, -1)
        if yv.shape != (x.shape[0],):
            raise ValidationError(f"y_per_voxel has shape {yv.shape}, expected ({x.shape[0]},)")
        if np.any(yv < 0) or np.any(ys < 0) or np.any(yv % 1) or np.any(ys % 1):
            raise ValidationError("counts must be nonnegative integers")
        if abs(yv.sum() - ys.sum()) > 0.5:
            raise ValidationError("per-voxel and per-study totals disagree")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y_per_voxel", yv)
        object.__setattr__(self, "y_per_study", ys)
        object.__setattr__(self, "z", z)
        nz = np.nonzero(yv)[0]
        owner, k = _rising_index(yv[nz].astype(np.int64))
        s_owner, s_k = _rising_index(ys.astype(np.int64))
        self._cache.update(
            xt_y=np.asarray(x.T @ yv).ravel(),
            zt_y=z.T @ ys,
            nz=nz,
            rise_owner=nz[owner],
            rise_k=k,
            study_owner=s_owner,
            study_k=s_k,
        )

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def m(self) -> int:
        return self.y_per_study.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def r(self) -> int:
        return self.z.shape[1]

    @property
    def total(self) -> float:
        return float(self.y_per_study.sum())

    def n_params(self, kind: str) -> int:
        return self.p + self.r + (1 if kind in DISPERSION_MODELS else 0)


def sufficient_stats(counts, design, covariates=None) -> SufficientStats:
    """Assemble stats from ``CountData``, ``DesignMatrix`` and ``CovariateMatrix``."""
    z = None if covariates is None or covariates.n_covariates == 0 else covariates.z
    if z is not None and z.shape[0] != counts.n_studies:
        raise ValidationError("covariate rows do not match the number of studies")
    return SufficientStats(design.matrix, counts.y_per_voxel, counts.y_per_study, z)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Model coefficients; ``log_alpha`` for NB models, ``theta`` for quasi-Poisson."""

    beta: np.ndarray
    gamma: np.ndarray
    log_alpha: float | None = None
    theta: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).ravel())
        object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=float).ravel())
        if self.theta is not None and not self.theta >= 1.0:
            raise ValidationError(f"theta must be >= 1, got {self.theta}")

    @property
    def alpha(self) -> float | None:
        return None if self.log_alpha is None else float(np.exp(self.log_alpha))

    def to_vector(self, kind: str) -> np.ndarray:
        parts = [self.beta, self.gamma]
        if kind in DISPERSION_MODELS:
            if self.log_alpha is None:
                raise ValidationError(f"{kind} requires log_alpha")
            parts.append([self.log_alpha])
        return np.concatenate(parts)

    @classmethod
    def from_vector(cls, vec: np.ndarray, kind: str, p: int, r: int, theta: float | None = None):
        vec = np.asarray(vec, dtype=float)
        log_alpha = float(vec[p + r]) if kind in DISPERSION_MODELS else None
        return cls(vec[:p].copy(), vec[p : p + r].copy(), log_alpha, theta)


@dataclass(frozen=True, eq=False)
class IntensityFactors:
    """Spatial and study factors of the expected counts."""

    eta_x: np.ndarray
    mu_x: np.ndarray
    mu_z: np.ndarray
    n_clamped: int

    @property
    def sum_x(self) -> float:
        return float(self.mu_x.sum())

    @property
    def sum_z(self) -> float:
        return float(self.mu_z.sum())

    @property
    def mu_study_total(self) -> np.ndarray:
        return self.sum_x * self.mu_z

    @property
    def mu_voxel_total(self) -> np.ndarray:
        return self.mu_x * self.sum_z


def intensity_factors(params: ModelParams, stats: SufficientStats) -> IntensityFactors:
    """Evaluate ``mu_x = exp(X beta)`` and ``mu_z = exp(Z gamma)``.

    The spatial predictor is clamped below at ``ETA_MIN``; the number of
    clamped voxels is recorded. Overflow raises :class:`NumericalError`.
    """
    if params.beta.shape != (stats.p,) or params.gamma.shape != (stats.r,):
        raise ValidationError(
            f"parameter sizes ({params.beta.size}, {params.gamma.size}) do not match "
            f"design ({stats.p}, {stats.r})"
        )
    eta = np.asarray(stats.x @ params.beta).ravel()
    zeta = stats.z @ params.gamma
    for name, lin in (("spatial", eta), ("covariate", zeta)):
        if lin.size and not (np.all(np.isfinite(lin)) and lin.max() < ETA_MAX):
            raise NumericalError(
                f"{name} linear predictor overflows exp(): max value {np.nanmax(lin):.6g}"
            )
    low = eta < ETA_MIN
    n_clamped = int(low.sum())
    if n_clamped:
        eta = np.where(low, ETA_MIN, eta)
    return IntensityFactors(eta, np.exp(eta), np.exp(zeta), n_clamped)


# ---------------------------------------------------------------- Poisson


def poisson_loglik(params: ModelParams, stats: SufficientStats) -> float:
    """Factorized Poisson log-likelihood (binary per-study counts assumed)."""
    f = intensity_factors(params, stats)
    return float(
        stats.y_per_voxel @ f.eta_x + stats.y_per_study @ np.log(f.mu_z) - f.sum_x * f.sum_z
    )


def poisson_grad(params: ModelParams, stats: SufficientStats) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of :func:`poisson_loglik` with respect to (beta, gamma)."""
    f = intensity_factors(params, stats)
    d_beta = stats._cache["xt_y"] - np.asarray(stats.x.T @ f.mu_x).ravel() * f.sum_z
    d_gamma = stats._cache["zt_y"] - stats.z.T @ f.mu_z * f.sum_x
    return d_beta, d_gamma


def poisson_summed_loglik(params: ModelParams, stats: SufficientStats) -> float:
    """Poisson log-likelihood of the voxel sums ``Y.j`` alone.

    Differs from :func:`poisson_loglik` by the multinomial allocation of each
    voxel's foci to studies.
    """
    f = intensity_factors(params, stats)
    mu = f.mu_voxel_total
    y = stats.y_per_voxel
    return float(y @ (f.eta_x + np.log(f.sum_z)) - mu.sum() - gammaln(y + 1).sum())


def allocation_loglik(params: ModelParams, stats: SufficientStats) -> float:
    """Log-probability of splitting each voxel's foci across studies.

    Given the voxel sums, binary per-study counts are multinomial with study
    probabilities ``mu_z / sum(mu_z)``. Depends on gamma only.
    """
    zeta = stats.z @ params.gamma
    log_s1 = _logsumexp(zeta)
    y = stats.y_per_voxel
    return float(stats.y_per_study @ zeta - stats.total * log_s1 + gammaln(y + 1).sum())


def _logsumexp(v: np.ndarray) -> float:
    if v.size == 0:
        return 0.0
    c = v.max()
    return float(c + np.log(np.exp(v - c).sum()))


# ---------------------------------------------------------------- NB


@dataclass(frozen=True)
class MatchedNB:
    """Per-voxel moment-matched negative binomial for the study sum.

    ``size`` is the NB size parameter (shared by all voxels); ``odds`` is
    ``p / (1 - p)`` for the success probability ``p``; ``mean`` and ``var``
    are the matched moments.
    """

    size: float
    odds: np.ndarray
    mean: np.ndarray

    @property
    def prob(self) -> np.ndarray:
        return self.odds / (1.0 + self.odds)

    @property
    def var(self) -> np.ndarray:
        return self.mean * (1.0 + self.odds)


def nb_moment_match(mu_x: np.ndarray, mu_z: np.ndarray, alpha: float) -> MatchedNB:
    """Match a single NB to a sum over studies of independent NB counts.

    With ``S1 = sum(mu_z)`` and ``S2 = sum(mu_z**2)`` the matched size is
    ``S1**2 / (alpha S2)`` at every voxel and the odds are
    ``alpha mu_x S2 / S1``; mean ``mu_x S1`` and variance
    ``mu_x S1 + alpha mu_x**2 S2`` then agree with the exact sum.
    """
    mu_x = np.asarray(mu_x, dtype=float)
    mu_z = np.asarray(mu_z, dtype=float)
    s1 = mu_z.sum()
    s2 = (mu_z**2).sum()
    return MatchedNB(s1**2 / (alpha * s2), alpha * mu_x * s2 / s1, mu_x * s1)


def _nb_parts(params: ModelParams, stats: SufficientStats):
    if params.log_alpha is None:
        raise ValidationError("NB models require log_alpha")
    f = intensity_factors(params, stats)
    alpha = np.exp(params.log_alpha)
    if not (np.isfinite(alpha) and alpha > 0):
        raise NumericalError(f"dispersion alpha={alpha} is not a positive finite number")
    return f, alpha


def nb_voxel_sum_loglik(params: ModelParams, stats: SufficientStats) -> float:
    """Moment-matched NB log-likelihood of the voxel sums ``Y.j``."""
    return nb_loglik(params, stats) - allocation_loglik(params, stats)


def nb_loglik(params: ModelParams, stats: SufficientStats) -> float:
    """NB log-likelihood on the per-study data scale.

    The moment-matched NB density of the voxel sums, plus the multinomial
    allocation of foci to studies (:func:`allocation_loglik`). The second
    term is constant in (beta, alpha) and, without covariates, in everything;
    it makes gamma identifiable and lets NB be compared with the Poisson and
    clustered NB likelihoods. As ``alpha -> 0`` this tends to
    :func:`poisson_loglik`.
    """
    f, alpha = _nb_parts(params, stats)
    s1, s2 = f.sum_z, float((f.mu_z**2).sum())
    size = s1**2 / (alpha * s2)
    odds = alpha * f.mu_x * s2 / s1
    mean = f.mu_x * s1
    y = stats.y_per_voxel
    owner, k = stats._cache["rise_owner"], stats._cache["rise_k"]
    # sum_{k<y} log(size + k) + y log(odds) == sum_{k<y} log(mean + k odds)
    rising = np.log(mean[owner] + k * odds[owner]).sum()
    val = rising - ((size + y) * np.log1p(odds)).sum()
    val += stats.y_per_study @ np.log(f.mu_z) - stats.total * np.log(s1)
    if not np.isfinite(val):
        raise NumericalError("NB log-likelihood is not finite")
    return float(val)


def nb_grad(params: ModelParams, stats: SufficientStats):
    """Gradient of :func:`nb_loglik` with respect to (beta, gamma, log_alpha)."""
    f, alpha = _nb_parts(params, stats)
    s1, s2 = f.sum_z, float((f.mu_z**2).sum())
    size = s1**2 / (alpha * s2)
    odds = alpha * f.mu_x * s2 / s1
    mean = f.mu_x * s1
    y = stats.y_per_voxel
    owner, k = stats._cache["rise_owner"], stats._cache["rise_k"]

    # derivative in log(odds) at fixed size, and in log(size) at fixed odds
    g_odds = y - (size + y) * (odds / (1.0 + odds))
    ratio = mean[owner] / (mean[owner] + k * odds[owner])  # size / (size + k)
    g_size = ratio.sum() - (size * np.log1p(odds)).sum()
    sum_g_odds = g_odds.sum()

    d_beta = np.asarray(stats.x.T @ g_odds).ravel()
    d_log_alpha = sum_g_odds - g_size
    d_log_s1 = -sum_g_odds + 2.0 * g_size
    d_log_s2 = sum_g_odds - g_size
    z = stats.z
    d_gamma = (
        d_log_s1 * (z.T @ f.mu_z) / s1
        + d_log_s2 * 2.0 * (z.T @ f.mu_z**2) / s2
        + stats._cache["zt_y"]
        - stats.total * (z.T @ f.mu_z) / s1
    )
    return d_beta, d_gamma, float(d_log_alpha)


# ---------------------------------------------------------------- clustered NB


def _x_over_1px_minus_log1p(x: np.ndarray) -> np.ndarray:
    """x/(1+x) - log(1+x), accurate for small x."""
    x = np.asarray(x, dtype=float)
    out = x / (1.0 + x) - np.log1p(x)
    small = x < 1e-2
    if np.any(small):
        s = x[small]
        out[small] = s**2 * (-0.5 + s * (2 / 3 + s * (-0.75 + s * (0.8 + s * (-5 / 6 + s * 6 / 7)))))
    return out


def clustered_nb_loglik(params: ModelParams, stats: SufficientStats) -> float:
    """Clustered NB log-likelihood: Gamma frailty shared within each study."""
    f, alpha = _nb_parts(params, stats)
    v = 1.0 / alpha
    mu_i = f.mu_study_total
    owner, k = stats._cache["study_owner"], stats._cache["study_k"]
    # log Gamma(Y+v) - log Gamma(v) + v log v - (Y+v) log(v+mu), rearranged
    rising = np.log1p((k - mu_i[owner]) / (v + mu_i[owner])).sum()
    val = rising - (v * np.log1p(mu_i / v)).sum()
    val += stats.y_per_voxel @ f.eta_x + stats.y_per_study @ np.log(f.mu_z)
    if not np.isfinite(val):
        raise NumericalError("clustered NB log-likelihood is not finite")
    return float(val)


def clustered_nb_grad(params: ModelParams, stats: SufficientStats):
    """Gradient of :func:`clustered_nb_loglik` in (beta, gamma, log_alpha)."""
    f, alpha = _nb_parts(params, stats)
    v = 1.0 / alpha
    mu_i = f.mu_study_total
    y_i = stats.y_per_study
    c = -(y_i + v) / (v + mu_i)  # d loglik / d mu_i
    d_beta = stats._cache["xt_y"] + (c @ f.mu_z) * np.asarray(stats.x.T @ f.mu_x).ravel()
    d_gamma = stats._cache["zt_y"] + stats.z.T @ (c * mu_i)
    owner, k = stats._cache["study_owner"], stats._cache["study_k"]
    mo = mu_i[owner]
    d_v = ((mo - k) / ((v + k) * (v + mo))).sum() + _x_over_1px_minus_log1p(mu_i / v).sum()
    return d_beta, d_gamma, float(-v * d_v)


def clustered_nb_covariance(params: ModelParams, stats: SufficientStats, i: int, j: int, j2: int) -> float:
    """Within-study covariance ``alpha mu_ij mu_ij'`` of two distinct voxels."""
    if j == j2:
        raise ValidationError("covariance requires distinct voxels; the variance is mu + alpha mu^2")
    f, alpha = _nb_parts(params, stats)
    return float(alpha * f.mu_x[j] * f.mu_x[j2] * f.mu_z[i] ** 2)


# ---------------------------------------------------------------- quasi-Poisson


def quasi_poisson_irls_step(params: ModelParams, stats: SufficientStats, theta: float = 1.0):
    """One block IRLS update for the quasi-Poisson mean model.

    Updates beta first, then gamma using the refreshed beta. Each block is a
    Fisher scoring step on the factorized Poisson score with weights
    ``mu / theta``; theta cancels, so the update does not depend on it.

    Returns
    -------
    (beta, gamma) : tuple of ndarray
    """
    if not theta >= 1.0:
        raise ValidationError(f"theta must be >= 1, got {theta}")
    f = intensity_factors(params, stats)
    w = f.mu_x * f.sum_z / theta
    xtwx = np.asarray((stats.x.T @ stats.x.multiply(w[:, None])).todense())
    score = (stats._cache["xt_y"] - np.asarray(stats.x.T @ f.mu_x).ravel() * f.sum_z) / theta
    beta = params.beta + _solve_spd(xtwx, score, "X'WX")
    gamma = params.gamma
    if stats.r:
        f = intensity_factors(ModelParams(beta, gamma), stats)
        v = f.mu_z * f.sum_x / theta
        ztvz = stats.z.T @ (stats.z * v[:, None])
        score = (stats._cache["zt_y"] - stats.z.T @ f.mu_z * f.sum_x) / theta
        gamma = gamma + _solve_spd(ztvz, score, "Z'VZ")
    return beta, gamma


def _solve_spd(a: np.ndarray, b: np.ndarray, name: str) -> np.ndarray:
    try:
        factor = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise NumericalError(f"{name} is singular or not positive definite") from None
    return np.linalg.solve(factor.T, np.linalg.solve(factor, b))


def pearson_dispersion(params: ModelParams, stats: SufficientStats) -> float:
    """Pearson statistic of the voxel sums over residual degrees of freedom."""
    f = intensity_factors(params, stats)
    mu = f.mu_voxel_total
    dof = stats.n - stats.p
    if dof <= 0:
        raise ValidationError("need more voxels than spline bases to estimate dispersion")
    return float(((stats.y_per_voxel - mu) ** 2 / mu).sum() / dof)


# ---------------------------------------------------------------- dispatch

_LOGLIK = {POISSON: poisson_loglik, NB: nb_loglik, CLUSTERED_NB: clustered_nb_loglik}
_GRAD = {POISSON: poisson_grad, NB: nb_grad, CLUSTERED_NB: clustered_nb_grad}


def loglik(kind: str, params: ModelParams, stats: SufficientStats) -> float:
    if kind not in _LOGLIK:
        raise ValidationError(f"model {kind!r} has no log-likelihood")
    return _LOGLIK[kind](params, stats)


def gradient(kind: str, params: ModelParams, stats: SufficientStats) -> np.ndarray:
    """Gradient as a flat vector in the layout of :meth:`ModelParams.to_vector`."""
    if kind not in _GRAD:
        raise ValidationError(f"model {kind!r} has no log-likelihood")
    parts = _GRAD[kind](params, stats)
    return np.concatenate([parts[0], parts[1], np.atleast_1d(parts[2:]).ravel()])


# ---------------------------------------------------------------- test oracle


def expanded_loglik_oracle(kind: str, params: ModelParams, x_dense: np.ndarray, z: np.ndarray | None, y_full: np.ndarray) -> float:
    """Per-(study, voxel) log-likelihood evaluated on the full M x N table.

    For checking the factorized forms on small instances only. The clustered
    NB uses each study's joint density under the Gamma frailty.
    """
    y = np.asarray(y_full, dtype=float)
    m, n = y.shape
    if m * n > 10**4:
        raise ValidationError("instance too large for the expanded oracle")
    x_dense = np.asarray(x_dense, dtype=float)
    z = np.zeros((m, 0)) if z is None else np.asarray(z, dtype=float).reshape(m, -1)
    log_mu = (x_dense @ params.beta)[None, :] + (z @ params.gamma)[:, None]
    mu = np.exp(log_mu)
    if kind == POISSON:
        return float((y * log_mu - mu - gammaln(y + 1)).sum())
    alpha = np.exp(params.log_alpha)
    v = 1.0 / alpha
    if kind == NB:
        return float(
            (gammaln(y + v) - gammaln(v) - gammaln(y + 1)
             + v * np.log(v / (v + mu)) + y * np.log(mu / (v + mu))).sum()
        )
    if kind == CLUSTERED_NB:
        yi = y.sum(axis=1)
        mi = mu.sum(axis=1)
        per_study = (
            gammaln(yi + v) - gammaln(v) + v * np.log(v) - (yi + v) * np.log(v + mi)
            + (y * log_mu - gammaln(y + 1)).sum(axis=1)
        )
        return float(per_study.sum())
    raise ValidationError(f"no expanded form for {kind!r}")

"""Maximum-likelihood fitting for the factorized count models.

Poisson fits use Fisher scoring with step halving, the negative binomial
models use limited-memory BFGS on the log-likelihood with ``log(alpha)`` as
a free parameter, and quasi-Poisson uses block IRLS followed by a Pearson
estimate of the dispersion.
"""

from __future__ import annotations

import logging
import warnings
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.sparse.linalg as spla
from scipy.linalg import solve_triangular
from scipy.optimize import line_search

from cbmr import stochastic_models as sm
from cbmr.errors import NumericalError, SingularInformationError, ValidationError
from cbmr.stochastic_models import ModelParams, SufficientStats

LGR = logging.getLogger(__name__)

INIT_STRATEGIES = ("homogeneous", "random", "poisson")
LOW_FOCI_WARNING = 200
MAX_PRECONDITIONER_REFRESH = 3
BOUNDARY_CURVATURE = 1e-8  # relative log-alpha curvature treated as zero
MAX_STEP = 10.0  # largest change of any coordinate in one line search
ALPHA_INIT_RANGE = (1e-4, 1e2)


@dataclass(frozen=True)
class FitConfig:
    """Optimizer settings.

    Attributes
    ----------
    max_iter : int
        Iteration cap for every optimizer.
    tol_loglik : float
        Stop once the absolute log-likelihood change stays below this for
        several consecutive iterations.
    tol_grad : float
        Converged when the sup-norm of the log-likelihood gradient is at
        most this.
    lbfgs_memory : int
        Number of correction pairs kept by L-BFGS.
    init_strategy : {"homogeneous", "random", "poisson"}
        Homogeneous intensity start, the same with seeded jitter, or (for NB
        models) a warm start from the Poisson fit.
    seed : int, optional
        Seed for the random start.
    init_log_alpha : float, optional
        Starting ``log(alpha)`` for NB models. By default a moment estimate
        from the homogeneous start (see :func:`moment_log_alpha`).
    singular_condition : float
        Information matrices with a larger condition number are flagged
        singular.
    """

    max_iter: int = 1000
    tol_loglik: float = 1e-8
    tol_grad: float = 1e-6
    lbfgs_memory: int = 10
    init_strategy: str = "homogeneous"
    seed: int | None = None
    init_log_alpha: float | None = None
    singular_condition: float = 1e10

    def __post_init__(self):
        if not (self.tol_loglik > 0 and self.tol_grad > 0):
            raise ValidationError("tolerances must be positive")
        if self.lbfgs_memory < 1 or self.max_iter < 1:
            raise ValidationError("lbfgs_memory and max_iter must be at least 1")
        if self.init_strategy not in INIT_STRATEGIES:
            raise ValidationError(f"init_strategy must be one of {INIT_STRATEGIES}")


@dataclass(eq=False)
class FitResult:
    """Outcome of :func:`fit`.

    ``fisher_info`` is ordered as (beta, gamma[, log_alpha]). For the
    quasi-Poisson model it is the Poisson information divided by the
    dispersion used for standard errors, and ``loglik`` is ``None``.
    """

    model_kind: str
    params: ModelParams
    loglik: float | None
    n_iter: int
    converged: bool
    grad_norm: float
    fisher_info: np.ndarray | None = None
    fisher_condition: float = float("nan")
    singular_flag: bool = False
    theta_hat: float | None = None
    n_clamped: int = 0
    n_obs: int = 0
    dispersion_at_boundary: bool = False
    notes: list[str] = field(default_factory=list)

    @property
    def n_params(self) -> int:
        return self.params.beta.size + self.params.gamma.size + (
            1 if self.model_kind in sm.DISPERSION_MODELS else 0
        )

    def covariance(self) -> np.ndarray:
        """Inverse of the Fisher information; refuses when it is singular."""
        if self.fisher_info is None or self.singular_flag:
            raise SingularInformationError(
                f"{self.model_kind} fit has singular Fisher information "
                f"(condition number {self.fisher_condition:.3g}); standard errors unavailable"
            )
        if not self.dispersion_at_boundary:
            return _inverse_spd(self.fisher_info)
        # alpha on the zero boundary: its row carries no information
        k = self.fisher_info.shape[0] - 1
        cov = np.zeros_like(self.fisher_info)
        cov[:k, :k] = _inverse_spd(self.fisher_info[:k, :k])
        cov[k, k] = np.inf
        return cov

    def summary(self) -> dict:
        """JSON-ready description of the fit."""
        p = self.params
        out = {
            "model_kind": self.model_kind,
            "beta": [float(v) for v in p.beta],
            "gamma": [float(v) for v in p.gamma],
            "loglik": self.loglik,
            "n_iter": int(self.n_iter),
            "converged": bool(self.converged),
            "grad_sup_norm": float(self.grad_norm),
            "fisher_condition": float(self.fisher_condition),
            "singular_flag": bool(self.singular_flag),
            "dispersion_at_boundary": bool(self.dispersion_at_boundary),
            "n_clamped_voxels": int(self.n_clamped),
            "notes": list(self.notes),
        }
        if p.log_alpha is not None:
            out["log_alpha"] = float(p.log_alpha)
            out["alpha"] = float(p.alpha)
            out["excess_variation_cv"] = float(np.sqrt(p.alpha))
        if self.theta_hat is not None:
            out["theta_hat"] = float(self.theta_hat)
            out["theta_used"] = float(p.theta)
        return out


def _inverse_spd(a: np.ndarray) -> np.ndarray:
    try:
        c = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise SingularInformationError("Fisher information is not positive definite") from None
    ci = np.linalg.solve(c, np.eye(a.shape[0]))
    return ci.T @ ci


# ---------------------------------------------------------------- L-BFGS


@dataclass
class LbfgsResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    n_iter: int
    converged: bool
    message: str


def lbfgs_minimize(
    fun_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0: np.ndarray,
    config: FitConfig = FitConfig(),
    precond: np.ndarray | None = None,
) -> LbfgsResult:
    """Minimize a smooth function with limited-memory BFGS.

    Search directions come from the two-loop recursion over the last
    ``config.lbfgs_memory`` correction pairs; steps satisfy the strong Wolfe
    conditions. When the objective can no longer resolve the expected
    decrease (differences at rounding level), steps are accepted on the
    derivative-only approximate Wolfe conditions instead. If a line search
    fails the memory is discarded and a steepest-descent step is attempted;
    a second consecutive failure ends the run.

    Parameters
    ----------
    fun_grad : callable
        Returns ``(f(x), grad f(x))``. May return ``inf`` or raise
        :class:`NumericalError` for infeasible trial points.
    x0 : ndarray
    config : FitConfig
        ``max_iter``, ``tol_grad``, ``tol_loglik`` and ``lbfgs_memory`` are
        used.
    precond : ndarray, optional
        Fixed preconditioner: either a positive vector of per-coordinate
        scales or a lower-triangular factor ``L`` of an approximate Hessian
        ``L L^T``. The search runs in ``u = L^T x``; the gradient tolerance
        always applies to the gradient in ``x``.
    """
    n = np.size(x0)
    to_u, to_x, grad_to_u, grad_to_x = _preconditioner(precond, n)
    cache: dict = {}

    def evaluate(u):
        key = u.tobytes()
        if key not in cache:
            cache.clear()
            try:
                f, g = fun_grad(to_x(u))
            except NumericalError:
                f, g = np.inf, np.zeros(n)
            if not np.isfinite(f) or not np.all(np.isfinite(g)):
                f, g = np.inf, np.zeros(n)
            cache[key] = (float(f), grad_to_u(np.asarray(g, dtype=float)))
        return cache[key]

    x = to_u(np.array(x0, dtype=float))
    f, g = evaluate(x)
    if not np.isfinite(f):
        raise NumericalError("objective is not finite at the starting point")
    s_hist: deque = deque(maxlen=config.lbfgs_memory)
    y_hist: deque = deque(maxlen=config.lbfgs_memory)
    f_prev = None
    flat = 0
    best_gsup = np.inf
    just_reset = False
    message = "maximum iterations reached"
    n_iter = 0
    for n_iter in range(1, config.max_iter + 1):
        if np.max(np.abs(grad_to_x(g))) <= config.tol_grad:
            message = "gradient tolerance reached"
            n_iter -= 1
            break
        d = _two_loop(g, s_hist, y_hist)
        if g @ d >= 0:
            s_hist.clear()
            y_hist.clear()
            d = -g
        # bound trial steps in the original coordinates, where a poorly
        # scaled preconditioner entry would otherwise allow huge moves
        d_x_sup = np.max(np.abs(to_x(d)))
        if not s_hist:
            d = d / max(1.0, d_x_sup)
            d_x_sup = min(d_x_sup, 1.0)
        amax = MAX_STEP / d_x_sup if d_x_sup > 0 else None
        old_old = f_prev if f_prev is not None else f + np.linalg.norm(g) / 2
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            step = line_search(
                lambda v: evaluate(v)[0], lambda v: evaluate(v)[1], x, d,
                gfk=g, old_fval=f, old_old_fval=old_old, c1=1e-4, c2=0.9, amax=amax, maxiter=50,
            )[0]
        approximate = False
        if step is None:
            step = _approximate_wolfe(evaluate, x, d, f, g)
            approximate = step is not None
        if step is None:
            if just_reset:
                message = "line search failed after steepest-descent restart"
                break
            s_hist.clear()
            y_hist.clear()
            just_reset = True
            f_prev = None
            continue
        just_reset = False
        x_new = x + step * d
        f_new, g_new = evaluate(x_new)
        s, yv = x_new - x, g_new - g
        if s @ yv > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            s_hist.append(s)
            y_hist.append(yv)
        # a flat objective only counts as stagnation while the gradient stops shrinking
        gsup = np.max(np.abs(grad_to_x(g_new)))
        if gsup < 0.5 * best_gsup:
            best_gsup, flat = gsup, 0
        elif abs(f - f_new) < config.tol_loglik and not approximate:
            flat += 1
        else:
            flat = 0
        f_prev, x, f, g = f, x_new, f_new, g_new
        if flat >= 10:
            message = "objective change below tolerance"
            break
    g = grad_to_x(g)
    grad_sup = float(np.max(np.abs(g))) if g.size else 0.0
    return LbfgsResult(to_x(x), f, g, n_iter, grad_sup <= config.tol_grad, message)


def _preconditioner(precond, n: int):
    if precond is None:
        ident = lambda v: v  # noqa: E731
        return ident, ident, ident, ident
    precond = np.asarray(precond, dtype=float)
    if precond.shape == (n,):
        if not np.all(precond > 0):
            raise ValidationError("diagonal preconditioner must be positive")
        return (lambda v: v * precond, lambda u: u / precond,
                lambda g: g / precond, lambda g: g * precond)
    if precond.shape != (n, n):
        raise ValidationError("preconditioner does not match the parameter vector")
    low = np.tril(precond)
    return (
        lambda v: low.T @ v,
        lambda u: solve_triangular(low, u, trans="T", lower=True),
        lambda g: solve_triangular(low, g, lower=True),
        lambda g: low @ g,
    )


def _approximate_wolfe(evaluate, x, d, f0, g0, delta=0.1, sigma=0.9, max_halvings=30):
    """Derivative-only step acceptance for objectives at rounding-level precision."""
    slope0 = g0 @ d
    noise = 1e-10 * max(1.0, abs(f0))
    step = 1.0
    for _ in range(max_halvings):
        f, g = evaluate(x + step * d)
        slope = g @ d
        if np.isfinite(f) and f <= f0 + noise and sigma * slope0 <= slope <= (2 * delta - 1) * slope0:
            return step
        step /= 2
    return None


def _two_loop(g: np.ndarray, s_hist, y_hist) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        q -= a * y
        alphas.append((rho, a))
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= (s @ y) / (y @ y)
    for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


# ---------------------------------------------------------------- initial values


def initial_params(kind: str, stats: SufficientStats, config: FitConfig = FitConfig()) -> ModelParams:
    """Homogeneous starting point ``mu_x = total / (M N)`` with gamma = 0."""
    if stats.total <= 0:
        raise ValidationError("dataset contains no foci inside the mask")
    level = np.log(stats.total / (stats.m * stats.n))
    row_sums = np.asarray(stats.x.sum(axis=1)).ravel()
    if np.allclose(row_sums, 1.0, atol=1e-10):
        beta = np.full(stats.p, level)  # exact least-squares solution for unit row sums
    else:
        beta = spla.lsqr(stats.x, np.full(stats.n, level), atol=1e-12, btol=1e-12)[0]
    gamma = np.zeros(stats.r)
    if config.init_strategy == "random":
        rng = np.random.default_rng(config.seed)
        beta = beta + rng.normal(scale=0.1, size=beta.shape)
        gamma = gamma + rng.normal(scale=0.1, size=gamma.shape)
    log_alpha = _init_log_alpha(kind, stats, config)
    return ModelParams(beta, gamma, log_alpha)


def moment_log_alpha(kind: str, stats: SufficientStats) -> float:
    """Method-of-moments ``log(alpha)`` under homogeneous intensity.

    NB: excess variance of the voxel sums, ``(var - mean) / mean**2`` times
    the number of studies. Clustered NB: the same ratio for the study totals.
    The result is clipped to ``ALPHA_INIT_RANGE``; spatial structure inflates
    the NB estimate, which only matters as a starting value.
    """
    if kind == sm.CLUSTERED_NB:
        y, scale = np.asarray(stats.y_per_study, dtype=float), 1.0
    else:
        y, scale = np.asarray(stats.y_per_voxel, dtype=float), float(stats.m)
    mean = y.mean()
    excess = (y.var(ddof=1) - mean) / mean**2 if y.size > 1 else 0.0
    return float(np.log(np.clip(excess * scale, *ALPHA_INIT_RANGE)))


def _init_log_alpha(kind: str, stats: SufficientStats, config: FitConfig) -> float | None:
    if kind not in sm.DISPERSION_MODELS:
        return None
    if config.init_log_alpha is not None:
        return config.init_log_alpha
    return moment_log_alpha(kind, stats)


# ---------------------------------------------------------------- Fisher information


def poisson_information(params: ModelParams, stats: SufficientStats) -> np.ndarray:
    """Analytic information of the factorized Poisson model, (beta, gamma) blocks."""
    f = sm.intensity_factors(params, stats)
    x = stats.x
    i_bb = np.asarray((x.T @ x.multiply(f.mu_x[:, None])).todense()) * f.sum_z
    xt_mu = np.asarray(x.T @ f.mu_x).ravel()
    zt_mu = stats.z.T @ f.mu_z
    i_bg = np.outer(xt_mu, zt_mu)
    i_gg = stats.z.T @ (stats.z * f.mu_z[:, None]) * f.sum_x
    return np.block([[i_bb, i_bg], [i_bg.T, i_gg]])


def numerical_information(kind: str, params: ModelParams, stats: SufficientStats, rel_step: float = 1e-5) -> np.ndarray:
    """Negative Hessian by central differences of the analytic gradient, symmetrized."""
    v = params.to_vector(kind)
    p, r = stats.p, stats.r
    h = np.empty((v.size, v.size))
    for i in range(v.size):
        step = rel_step * max(1.0, abs(v[i]))
        e = np.zeros_like(v)
        e[i] = step
        g_plus = sm.gradient(kind, ModelParams.from_vector(v + e, kind, p, r), stats)
        g_minus = sm.gradient(kind, ModelParams.from_vector(v - e, kind, p, r), stats)
        h[:, i] = (g_plus - g_minus) / (2 * step)
    info = -(h + h.T) / 2
    if not np.all(np.isfinite(info)):
        raise NumericalError("numerical Fisher information has non-finite entries")
    return info


def fisher_information(fit: FitResult, stats: SufficientStats) -> np.ndarray:
    """Observed information at the fitted parameters."""
    kind = fit.model_kind
    if kind == sm.POISSON:
        return poisson_information(fit.params, stats)
    if kind == sm.QUASI_POISSON:
        return poisson_information(fit.params, stats) / fit.params.theta
    return numerical_information(kind, fit.params, stats)


def _condition(info: np.ndarray) -> tuple[float, bool]:
    eig = np.linalg.eigvalsh(info)
    if eig[0] <= 0:
        return float("inf"), True
    return float(eig[-1] / eig[0]), False


def _finish(fit: FitResult, stats: SufficientStats, config: FitConfig) -> FitResult:
    info = fisher_information(fit, stats)
    core = info
    if fit.model_kind in sm.DISPERSION_MODELS:
        alpha_curv = info[-1, -1]
        if alpha_curv <= BOUNDARY_CURVATURE * max(1.0, float(np.max(np.abs(np.diag(info))))):
            fit.dispersion_at_boundary = True
            core = info[:-1, :-1]
            fit.notes.append(
                f"dispersion estimate at the zero boundary (alpha={fit.params.alpha:.3g}); "
                "standard errors use the remaining parameters"
            )
    cond, not_pd = _condition(core)
    fit.fisher_info = info
    fit.fisher_condition = cond
    fit.singular_flag = fit.singular_flag or not_pd or cond > config.singular_condition
    fit.n_clamped = sm.intensity_factors(fit.params, stats).n_clamped
    fit.n_obs = stats.n
    if fit.n_clamped:
        fit.notes.append(f"linear predictor clamped at {sm.ETA_MIN} in {fit.n_clamped} voxels")
    if stats.total < LOW_FOCI_WARNING:
        fit.notes.append(
            f"only {int(stats.total)} foci; fits with fewer than {LOW_FOCI_WARNING} foci "
            "are often ill-conditioned"
        )
        LGR.warning(fit.notes[-1])
    if fit.singular_flag:
        fit.notes.append(f"Fisher information singular (condition number {cond:.3g})")
        LGR.warning(fit.notes[-1])
    if not fit.converged:
        LGR.warning("%s fit did not converge (gradient sup-norm %.3g)", fit.model_kind, fit.grad_norm)
    return fit


# ---------------------------------------------------------------- fitting routines


def fisher_scoring_poisson(stats: SufficientStats, config: FitConfig = FitConfig(), init: ModelParams | None = None) -> FitResult:
    """Poisson maximum likelihood by Fisher scoring with step halving."""
    kind = sm.POISSON
    params = init if init is not None else initial_params(kind, stats, config)
    params = ModelParams(params.beta, params.gamma)
    ll = sm.poisson_loglik(params, stats)
    p, r = stats.p, stats.r
    n_iter, converged, stalled = 0, False, 0
    g = sm.gradient(kind, params, stats)
    for n_iter in range(1, config.max_iter + 1):
        if np.max(np.abs(g)) <= config.tol_grad:
            converged = True
            n_iter -= 1
            break
        info = poisson_information(params, stats)
        try:
            chol = np.linalg.cholesky(info)
        except np.linalg.LinAlgError:
            LGR.warning("Poisson information singular; switching to L-BFGS")
            fit = _lbfgs_fit(kind, stats, config, params)
            fit.singular_flag = True
            fit.notes.append("Fisher scoring hit a singular information matrix; finished with L-BFGS")
            return fit
        step = np.linalg.solve(chol.T, np.linalg.solve(chol, g))
        v = params.to_vector(kind)
        g_sup = np.max(np.abs(g))
        # near the optimum the expected gain falls below the rounding error of the loglik
        noise = 64 * np.finfo(float).eps * max(1.0, abs(ll))
        t, accepted = 1.0, False
        while t > 1e-10:
            trial = ModelParams.from_vector(v + t * step, kind, p, r)
            try:
                ll_new = sm.poisson_loglik(trial, stats)
            except NumericalError:
                ll_new = -np.inf
            if ll_new >= ll:
                accepted = True
                break
            if ll_new >= ll - noise:
                g_trial = sm.gradient(kind, trial, stats)
                if np.max(np.abs(g_trial)) < g_sup:
                    accepted = True
                    break
            t /= 2
        if not accepted:
            break
        change = ll_new - ll
        params, ll = trial, ll_new
        g = sm.gradient(kind, params, stats)
        shrinking = np.max(np.abs(g)) < 0.5 * g_sup
        stalled = stalled + 1 if change < config.tol_loglik and not shrinking else 0
        if stalled >= 3:
            break
    grad_sup = float(np.max(np.abs(g)))
    converged = grad_sup <= config.tol_grad
    fit = FitResult(kind, params, ll, n_iter, converged, grad_sup)
    return _finish(fit, stats, config)


def _preconditioner_factor(kind: str, params: ModelParams, stats: SufficientStats) -> np.ndarray:
    """Cholesky factor of an approximate information matrix at ``params``.

    The Poisson information covers (beta, gamma); for NB models the
    ``log_alpha`` curvature is added as a diagonal entry from a central
    difference of its gradient component.
    """
    info = poisson_information(params, stats)
    if kind in sm.DISPERSION_MODELS:
        v = params.to_vector(kind)
        e = np.zeros_like(v)
        e[-1] = 1e-4
        g_plus = sm.gradient(kind, ModelParams.from_vector(v + e, kind, stats.p, stats.r), stats)[-1]
        g_minus = sm.gradient(kind, ModelParams.from_vector(v - e, kind, stats.p, stats.r), stats)[-1]
        curv = -(g_plus - g_minus) / 2e-4
        k = info.shape[0]
        info = np.pad(info, ((0, 1), (0, 1)))
        info[k, k] = max(curv, 1e-8 * max(1.0, float(np.max(np.diag(info)))))
    diag = np.sqrt(np.maximum(np.diag(info), 1e-300))
    scaled = info / np.outer(diag, diag) + 1e-10 * np.eye(info.shape[0])
    try:
        return np.linalg.cholesky(scaled) * diag[:, None]
    except np.linalg.LinAlgError:
        return np.diag(diag)


def _lbfgs_fit(kind: str, stats: SufficientStats, config: FitConfig, init: ModelParams) -> FitResult:
    p, r = stats.p, stats.r

    def neg(v):
        prm = ModelParams.from_vector(v, kind, p, r)
        return -sm.loglik(kind, prm, stats), -sm.gradient(kind, prm, stats)

    x, n_iter, budget = init.to_vector(kind), 0, config.max_iter
    # the preconditioner is fixed per run; refresh it at the current point if a run stalls
    for _ in range(MAX_PRECONDITIONER_REFRESH + 1):
        current = ModelParams.from_vector(x, kind, p, r)
        res = lbfgs_minimize(
            neg, x, replace(config, max_iter=budget), _preconditioner_factor(kind, current, stats)
        )
        x, n_iter, budget = res.x, n_iter + res.n_iter, budget - res.n_iter
        if res.converged or budget <= 0:
            break
    params = ModelParams.from_vector(x, kind, p, r)
    fit = FitResult(kind, params, -res.fun, n_iter, res.converged, float(np.max(np.abs(res.grad))))
    fit.notes.append(f"L-BFGS: {res.message}")
    return _finish(fit, stats, config)


def lbfgs_fit(kind: str, stats: SufficientStats, config: FitConfig = FitConfig(), init: ModelParams | None = None) -> FitResult:
    """Fit a likelihood model (any of Poisson, NB, clustered NB) by L-BFGS."""
    if kind not in (sm.POISSON, *sm.DISPERSION_MODELS):
        raise ValidationError(f"L-BFGS fitting needs a likelihood model, got {kind!r}")
    if init is None:
        init = _start(kind, stats, config)
    elif kind in sm.DISPERSION_MODELS and init.log_alpha is None:
        init = ModelParams(init.beta, init.gamma, _init_log_alpha(kind, stats, config))
    return _lbfgs_fit(kind, stats, config, init)


def irls_quasi(stats: SufficientStats, config: FitConfig = FitConfig(), init: ModelParams | None = None) -> FitResult:
    """Quasi-Poisson fit: block IRLS to convergence, then Pearson dispersion.

    Standard errors scale by the square root of the dispersion, which is
    floored at 1 so that apparent under-dispersion never shrinks them.
    """
    kind = sm.QUASI_POISSON
    params = init if init is not None else initial_params(kind, stats, config)
    params = ModelParams(params.beta, params.gamma)
    ll = sm.poisson_loglik(params, stats)
    n_iter, stalled = 0, 0
    for n_iter in range(1, config.max_iter + 1):
        g = sm.gradient(sm.POISSON, params, stats)
        if np.max(np.abs(g)) <= config.tol_grad:
            n_iter -= 1
            break
        beta, gamma = sm.quasi_poisson_irls_step(params, stats, 1.0)
        params = ModelParams(beta, gamma)
        ll_new = sm.poisson_loglik(params, stats)
        stalled = stalled + 1 if abs(ll_new - ll) < config.tol_loglik else 0
        ll = ll_new
        if stalled >= 3:
            break
    grad_sup = float(np.max(np.abs(sm.gradient(sm.POISSON, params, stats))))
    theta_hat = sm.pearson_dispersion(params, stats)
    params = ModelParams(params.beta, params.gamma, theta=max(1.0, theta_hat))
    fit = FitResult(kind, params, None, n_iter, grad_sup <= config.tol_grad, grad_sup, theta_hat=theta_hat)
    return _finish(fit, stats, config)


def _start(kind: str, stats: SufficientStats, config: FitConfig) -> ModelParams:
    if config.init_strategy == "poisson" and kind in sm.DISPERSION_MODELS:
        base = fisher_scoring_poisson(stats, replace(config, init_strategy="homogeneous"))
        return ModelParams(base.params.beta, base.params.gamma, _init_log_alpha(kind, stats, config))
    return initial_params(kind, stats, config)


def fit(model_kind: str, stats: SufficientStats, config: FitConfig = FitConfig()) -> FitResult:
    """Fit ``model_kind`` with the optimizer assigned to it.

    Non-convergence is reported through ``converged=False`` rather than an
    exception, and singular information through ``singular_flag``.
    """
    kind = sm.check_kind(model_kind)
    if kind == sm.POISSON:
        init = initial_params(kind, stats, config)
        return fisher_scoring_poisson(stats, config, init)
    if kind == sm.QUASI_POISSON:
        return irls_quasi(stats, config)
    return lbfgs_fit(kind, stats, config)

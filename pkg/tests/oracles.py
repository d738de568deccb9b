"""Independent reference computations for the test suite.

Everything here works on the full study-by-voxel count table with
``scipy.stats`` distributions or numerical integration, without touching the
package's factorized code.
"""

import numpy as np
import scipy.sparse as sp
from scipy import integrate, stats


def random_instance(rng, m_max=5, n_max=16, p_max=3, r_max=2, binary=True):
    """Tiny random problem: nonnegative row-normalized design, covariates, count table."""
    m = int(rng.integers(1, m_max + 1))
    n = int(rng.integers(2, n_max + 1))
    p = int(rng.integers(1, min(p_max, n) + 1))
    r = int(rng.integers(0, r_max + 1))
    x = rng.random((n, p)) + 0.05
    x /= x.sum(axis=1, keepdims=True)
    z = rng.normal(size=(m, r))
    beta = rng.normal(-1.0, 0.5, size=p)
    gamma = rng.normal(0.0, 0.3, size=r)
    log_alpha = float(rng.normal(-0.5, 0.7))
    mu = np.exp(x @ beta)[None, :] * np.exp(z @ gamma)[:, None]
    if binary:
        y = (rng.random((m, n)) < np.clip(mu, 0.05, 0.6)).astype(int)
    else:
        y = rng.poisson(mu * 3)
    return {"x": sp.csr_matrix(x), "x_dense": x, "z": z, "y": y, "beta": beta, "gamma": gamma,
            "log_alpha": log_alpha, "mu": mu}


def poisson_table_loglik(mu, y):
    return float(stats.poisson.logpmf(y, mu).sum())


def nb_table_loglik(mu, y, alpha):
    size = 1.0 / alpha
    return float(stats.nbinom.logpmf(y, size, size / (size + mu)).sum())


def clustered_nb_table_loglik(mu, y, alpha):
    """Study total ~ NB(1/alpha, mean sum mu), split multinomially across voxels."""
    size = 1.0 / alpha
    total = 0.0
    for mu_i, y_i in zip(mu, y):
        m_tot, y_tot = mu_i.sum(), int(y_i.sum())
        total += stats.nbinom.logpmf(y_tot, size, size / (size + m_tot))
        if y_tot:
            total += stats.multinomial.logpmf(y_i, y_tot, mu_i / m_tot)
    return float(total)


def clustered_nb_quadrature(mu, y, alpha):
    """Integrate the shared Gamma frailty out numerically, study by study."""
    shape = 1.0 / alpha
    total = 0.0
    for mu_i, y_i in zip(mu, y):
        def log_integrand(lam):
            return stats.poisson.logpmf(y_i, lam * mu_i).sum() + stats.gamma.logpdf(lam, shape, scale=alpha)

        grid = np.linspace(1e-6, 20, 4001)
        peak = max(log_integrand(g) for g in grid[::40])
        val, _ = integrate.quad(lambda lam: np.exp(log_integrand(lam) - peak), 0, np.inf,
                                epsabs=1e-14, epsrel=1e-12, limit=200)
        total += np.log(val) + peak
    return float(total)


def central_difference(fun, x, rel_step=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        h = rel_step * max(1.0, abs(x[i]))
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


def nb_sum_moments_bruteforce(means, alpha, y_max=400):
    """Mean and variance of a sum of independent NB(mean_i, alpha) by pmf convolution."""
    size = 1.0 / alpha
    support = np.arange(y_max + 1)
    pmf = np.array([1.0])
    for mu in means:
        part = stats.nbinom.pmf(support, size, size / (size + mu))
        pmf = np.convolve(pmf, part)[: y_max + 1]
    k = np.arange(pmf.size)
    mean = (k * pmf).sum()
    return mean, (k**2 * pmf).sum() - mean**2

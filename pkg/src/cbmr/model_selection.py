"""Likelihood-based model comparison and goodness-of-fit bias criteria.

The Poisson model is the ``alpha -> 0`` limit of both NB variants and their
log-likelihoods are on the same data scale, so likelihood-ratio tests and
information criteria compare them directly. Quasi-Poisson has no likelihood
and only takes part in the bias criteria.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as sps

from cbmr import stochastic_models as sm
from cbmr.data_io import BrainMask
from cbmr.errors import NumericalError, ValidationError
from cbmr.optimizer import FitResult
from cbmr.stochastic_models import SufficientStats, intensity_factors

LGR = logging.getLogger(__name__)


@dataclass(frozen=True)
class LrtResult:
    """Likelihood-ratio test of ``alpha = 0``.

    ``p`` uses the chi-square(1) reference. Because the null value lies on
    the boundary of the parameter space, the exact asymptotic reference is
    the 50:50 mixture of a point mass at zero and chi-square(1), whose
    p-value ``p_mixture`` is half as large; ``p`` is therefore conservative.
    """

    stat: float
    p: float
    p_mixture: float
    clamped: bool = False


@dataclass(frozen=True)
class BiasMetrics:
    sum_intensity: float
    std_xyz: tuple[float, float, float]
    voxel_variance: float


@dataclass
class ModelRow:
    model_kind: str
    loglik: float | None
    k: int
    aic: float | None
    bic: float | None
    n_obs: int
    natural_n_obs: int
    bias: BiasMetrics | None = None


@dataclass
class SelectionReport:
    """Per-model criteria and LRTs of each NB variant against Poisson."""

    rows: list[ModelRow]
    lrt_nb_vs_poisson: LrtResult | None = None
    lrt_cnb_vs_poisson: LrtResult | None = None
    notes: list[str] = field(default_factory=list)

    def row(self, kind: str) -> ModelRow:
        for r in self.rows:
            if r.model_kind == kind:
                return r
        raise KeyError(kind)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        header = [
            "model", "loglik", "k", "aic", "bic", "n_obs", "natural_n_obs",
            "lrt_stat", "lrt_p", "lrt_p_mixture",
            "bias_sum_intensity", "bias_std_x", "bias_std_y", "bias_std_z", "bias_voxel_variance",
        ]
        lrts = {sm.NB: self.lrt_nb_vs_poisson, sm.CLUSTERED_NB: self.lrt_cnb_vs_poisson}
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in self.rows:
                lrt = lrts.get(r.model_kind)
                b = r.bias
                w.writerow([
                    r.model_kind, _fmt(r.loglik), r.k, _fmt(r.aic), _fmt(r.bic), r.n_obs, r.natural_n_obs,
                    _fmt(lrt and lrt.stat), _fmt(lrt and lrt.p), _fmt(lrt and lrt.p_mixture),
                    _fmt(b and b.sum_intensity),
                    *(_fmt(v) for v in (b.std_xyz if b else (None, None, None))),
                    _fmt(b and b.voxel_variance),
                ])
        return path

    def summary(self) -> dict:
        def lrt_dict(t):
            return None if t is None else {"stat": t.stat, "p": t.p, "p_mixture": t.p_mixture}

        return {
            "models": {
                r.model_kind: {
                    "loglik": r.loglik, "k": r.k, "aic": r.aic, "bic": r.bic,
                    "n_obs": r.n_obs, "natural_n_obs": r.natural_n_obs,
                    "bias_sum_intensity": r.bias and r.bias.sum_intensity,
                    "bias_std_xyz": r.bias and list(r.bias.std_xyz),
                    "bias_voxel_variance": r.bias and r.bias.voxel_variance,
                }
                for r in self.rows
            },
            "lrt_nb_vs_poisson": lrt_dict(self.lrt_nb_vs_poisson),
            "lrt_cnb_vs_poisson": lrt_dict(self.lrt_cnb_vs_poisson),
            "notes": list(self.notes),
        }


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def lrt(nested_fit: FitResult, full_fit: FitResult) -> LrtResult:
    """Likelihood-ratio test of a Poisson fit against an NB or clustered NB fit.

    Raises
    ------
    ValidationError
        If the pair is not (Poisson, NB variant) or the fits use different data.
    NumericalError
        If either fit did not converge.
    """
    if nested_fit.model_kind != sm.POISSON or full_fit.model_kind not in sm.DISPERSION_MODELS:
        raise ValidationError("lrt compares a Poisson fit (nested) with an NB or clustered NB fit")
    if nested_fit.n_obs != full_fit.n_obs or nested_fit.params.beta.size != full_fit.params.beta.size:
        raise ValidationError("fits were made on different data")
    for f in (nested_fit, full_fit):
        if not f.converged:
            raise NumericalError(f"{f.model_kind} fit did not converge; LRT is not meaningful")
    stat = -2.0 * (nested_fit.loglik - full_fit.loglik)
    clamped = stat < 0
    if clamped:
        warnings.warn(f"negative LRT statistic {stat:.3g} clamped to 0 (optimizer noise)", RuntimeWarning, stacklevel=2)
    stat = float(stat) if stat > 0 else 0.0
    p = float(sps.chi2.sf(stat, 1))
    p_mix = 0.5 * p if stat > 0 else 1.0
    return LrtResult(float(stat), p, p_mix, clamped)


def information_criteria(fit: FitResult, n_obs: int | None = None) -> tuple[float, float]:
    """``(AIC, BIC)`` with ``k = P + R (+1 for alpha)``.

    ``n_obs`` defaults to the number of voxels, the observation count of the
    factorized likelihood.
    """
    if fit.loglik is None or fit.model_kind == sm.QUASI_POISSON:
        raise ValidationError("quasi-Poisson has no likelihood; AIC and BIC are undefined")
    n_obs = fit.n_obs if n_obs is None else n_obs
    if n_obs < 1:
        raise ValidationError("n_obs must be positive")
    k = fit.n_params
    return 2 * k - 2 * fit.loglik, k * np.log(n_obs) - 2 * fit.loglik


def natural_n_obs(fit: FitResult, stats: SufficientStats) -> int:
    """Observation count of the likelihood's own factorization.

    Clustered NB factorizes over studies rather than voxels.
    """
    return stats.m if fit.model_kind == sm.CLUSTERED_NB else stats.n


def _weighted_sd(coords: np.ndarray, w: np.ndarray) -> np.ndarray:
    w = w / w.sum()
    mean = w @ coords
    return np.sqrt(w @ (coords - mean) ** 2)


def bias_metrics(
    fit: FitResult,
    stats: SufficientStats,
    mask: BrainMask,
    y_sq_per_voxel: np.ndarray | None = None,
) -> BiasMetrics:
    """Relative biases of total intensity, spatial spread and voxel variance.

    Parameters
    ----------
    fit, stats
        A fit and the statistics it was made on.
    mask : BrainMask
        Supplies voxel coordinates for the spread criterion.
    y_sq_per_voxel : ndarray, optional
        ``sum_i Y[i, j]**2``. Counts from foci files are binary within a
        study, where this equals the voxel count, which is the default.

    Notes
    -----
    * Sum of intensity: ``(sum_j mu_x[j] * mean_i mu_z[i] - Fbar) / Fbar``
      with ``Fbar`` the mean foci count per study.
    * Spread: per axis, the intensity-weighted coordinate standard deviation
      relative to the count-weighted one.
    * Voxel variance: over voxels with at least one focus, the mean relative
      difference between the model variance averaged over studies and the
      unbiased empirical variance across studies. The model variance is
      ``mu`` (Poisson), ``theta mu`` (quasi-Poisson) or ``mu + alpha mu^2``.
    """
    if mask.n_voxels != stats.n:
        raise ValidationError("mask and statistics have different voxel counts")
    f = intensity_factors(fit.params, stats)
    y_vox = np.asarray(stats.y_per_voxel, dtype=float)
    m = stats.m
    fbar = stats.total / m
    sum_bias = (f.mu_x.sum() * f.mu_z.mean() - fbar) / fbar

    coords = mask.centers_mm
    sd_model = _weighted_sd(coords, f.mu_x)
    sd_emp = _weighted_sd(coords, y_vox)
    with np.errstate(divide="ignore", invalid="ignore"):  # NaN on a flat axis
        std_bias = tuple(float(v) for v in (sd_model - sd_emp) / sd_emp)

    hit = y_vox > 0
    if not hit.any():
        raise ValidationError("no voxel has a nonzero count")
    if m < 2:
        raise ValidationError("voxel variance needs at least two studies")
    y_sq = y_vox if y_sq_per_voxel is None else np.asarray(y_sq_per_voxel, dtype=float)
    mean_y = y_vox[hit] / m
    emp_var = (y_sq[hit] - m * mean_y**2) / (m - 1)
    mu_x = f.mu_x[hit]
    mean_mu = mu_x * f.mu_z.mean()
    kind = fit.model_kind
    if kind == sm.POISSON:
        model_var = mean_mu
    elif kind == sm.QUASI_POISSON:
        model_var = fit.params.theta * mean_mu
    else:
        model_var = mean_mu + fit.params.alpha * mu_x**2 * np.mean(f.mu_z**2)
    ok = emp_var > 0
    var_bias = float(np.mean((model_var[ok] - emp_var[ok]) / emp_var[ok]))
    return BiasMetrics(float(sum_bias), std_bias, var_bias)


def select_models(
    fits: dict[str, FitResult],
    stats: SufficientStats,
    mask: BrainMask | None = None,
    n_obs: int | None = None,
    y_sq_per_voxel: np.ndarray | None = None,
) -> SelectionReport:
    """Tabulate criteria for the given fits and test each NB variant against Poisson."""
    rows = []
    notes = []
    for kind in sm.MODEL_KINDS:
        if kind not in fits:
            continue
        fit = fits[kind]
        nat = natural_n_obs(fit, stats)
        used = stats.n if n_obs is None else n_obs
        if fit.loglik is not None and kind != sm.QUASI_POISSON:
            aic, bic = information_criteria(fit, used)
        else:
            aic = bic = None
        if kind == sm.CLUSTERED_NB and used != nat:
            notes.append(
                f"clustered_nb likelihood factorizes over {nat} studies; BIC uses n_obs={used} for comparability"
            )
        bias = bias_metrics(fit, stats, mask, y_sq_per_voxel) if mask is not None else None
        rows.append(ModelRow(kind, fit.loglik, fit.n_params, aic, bic, used, nat, bias))
    report = SelectionReport(rows, notes=notes)
    pois = fits.get(sm.POISSON)
    if pois is not None:
        for kind, attr in ((sm.NB, "lrt_nb_vs_poisson"), (sm.CLUSTERED_NB, "lrt_cnb_vs_poisson")):
            if kind in fits:
                try:
                    setattr(report, attr, lrt(pois, fits[kind]))
                except NumericalError as exc:
                    notes.append(str(exc))
    return report

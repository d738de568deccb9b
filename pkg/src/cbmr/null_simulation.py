"""Monte Carlo calibration of the homogeneity test under a spatially flat null.

Null datasets keep the template's number of studies and foci per study but
place foci uniformly over the in-mask voxels. Each realization is fitted and
tested, and the sorted p-values are summarized as PP-plot envelopes along
with the voxelwise false positive rate and the frequency of any FDR
rejection.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cbmr import stochastic_models as sm
from cbmr.data_io import BrainMask, CovariateSpec, FociDataset, Study, build_counts, prepare_covariates
from cbmr.errors import SingularInformationError, ValidationError
from cbmr.inference import homogeneity_test
from cbmr.optimizer import FitConfig, fit
from cbmr.spline_basis import DesignMatrix
from cbmr.stochastic_models import sufficient_stats

LGR = logging.getLogger(__name__)

SAMPLERS = ("model_based", "empirical_shuffle")
ENVELOPE_Z = 1.96
PP_GRID_POINTS = 400


@dataclass(frozen=True)
class NullConfig:
    """Settings for :func:`run_calibration`.

    Attributes
    ----------
    template : FociDataset
        Supplies the number of studies, foci per study and covariates.
    sampler : {"model_based", "empirical_shuffle"}
    n_realizations : int
    model_kind : str
        Model fitted to each realization; also the count model used by the
        model-based sampler.
    with_covariates : bool
        Copy the template's covariates into every realization and fit them.
    covariates : tuple of CovariateSpec
        Covariate preparation used when ``with_covariates`` is set.
    seed : int
        Root seed; realization ``r`` uses the ``r``-th spawned substream.
    alpha : float, optional
        Dispersion for NB model-based sampling. Estimated from the template
        when omitted.
    sided, q, truncation_floor
        Passed to :func:`cbmr.inference.homogeneity_test`.
    """

    template: FociDataset
    sampler: str = "model_based"
    n_realizations: int = 100
    model_kind: str = sm.POISSON
    with_covariates: bool = False
    covariates: tuple[CovariateSpec, ...] = ()
    seed: int = 0
    alpha: float | None = None
    sided: str = "one"
    q: float = 0.05
    truncation_floor: float = 1e-3

    def __post_init__(self):
        if self.sampler not in SAMPLERS:
            raise ValidationError(f"sampler must be one of {SAMPLERS}")
        if self.n_realizations < 1:
            raise ValidationError("n_realizations must be at least 1")
        sm.check_kind(self.model_kind)
        if self.with_covariates and not self.covariates:
            raise ValidationError("with_covariates needs at least one covariate spec")


@dataclass(eq=False)
class CalibrationResult:
    """PP-plot envelopes and null error rates.

    ``pp_rank`` lists the p-value ranks on the grid, ``pp_expected`` the
    matching ``-log10(rank / (N + 1))`` and ``pp_mean``, ``pp_lo``,
    ``pp_hi`` the observed ``-log10 p`` mean and ``mean -/+ 1.96 sd`` over
    realizations.
    """

    pp_rank: np.ndarray
    pp_expected: np.ndarray
    pp_mean: np.ndarray
    pp_lo: np.ndarray
    pp_hi: np.ndarray
    fpr_at_05: float
    frac_invalid_fdr_raw: float
    frac_invalid_fdr_truncated: float
    n_used: int
    n_excluded: int
    n_voxels: int
    fpr_per_realization: np.ndarray = field(repr=False)
    alpha_sampled: float | None = None

    def identity_covered(self, min_p: float = 1e-3) -> bool:
        """Whether the envelope contains the identity for expected p >= ``min_p``."""
        sel = self.pp_expected <= -np.log10(min_p)
        e = self.pp_expected[sel]
        return bool(np.all((self.pp_lo[sel] <= e) & (e <= self.pp_hi[sel])))

    def summary(self) -> dict:
        return {
            "fpr_at_05": self.fpr_at_05,
            "frac_invalid_fdr_raw": self.frac_invalid_fdr_raw,
            "frac_invalid_fdr_truncated": self.frac_invalid_fdr_truncated,
            "n_used": self.n_used,
            "n_excluded_singular": self.n_excluded,
            "n_voxels": self.n_voxels,
            "identity_covered_p_ge_1e-3": self.identity_covered(1e-3),
            "alpha_sampled": self.alpha_sampled,
        }

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rank", "expected_neglog10p", "mean_neglog10p", "lo_neglog10p", "hi_neglog10p"])
            for row in zip(self.pp_rank, self.pp_expected, self.pp_mean, self.pp_lo, self.pp_hi):
                w.writerow([int(row[0]), *(repr(float(v)) for v in row[1:])])
        return path


def expected_quantiles(n: int, ranks: np.ndarray | None = None) -> np.ndarray:
    """Expected ``-log10 p`` of the order statistics of ``n`` uniform p-values."""
    ranks = np.arange(1, n + 1) if ranks is None else np.asarray(ranks)
    return -np.log10(ranks / (n + 1))


def _study_counts(template: FociDataset) -> np.ndarray:
    return np.array([s.foci.shape[0] for s in template.studies], dtype=np.int64)


def _place_uniform(template: FociDataset, counts: np.ndarray, mask: BrainMask, rng: np.random.Generator) -> FociDataset:
    """Distinct uniform in-mask voxel centres per study; zero-count studies are left out."""
    n = mask.n_voxels
    centers = mask.centers_mm
    studies = []
    for s, k in zip(template.studies, counts):
        if k <= 0:
            continue
        vox = np.sort(rng.choice(n, size=int(min(k, n)), replace=False))
        studies.append(Study(s.study_id, centers[vox], s.covariates))
    if not studies:
        raise ValidationError("null realization produced no foci")
    return FociDataset(tuple(studies))


def sample_null_model_based(
    template: FociDataset,
    mask: BrainMask,
    rng: np.random.Generator,
    model_kind: str = sm.POISSON,
    alpha: float | None = None,
) -> FociDataset:
    """Draw a homogeneous null dataset from a count model.

    Every study's expected count is the template's mean foci per study.
    Study totals are Poisson for the Poisson and quasi-Poisson models; for
    NB they follow the sum over voxels of independent NB counts (size
    ``N / alpha``); for clustered NB a per-study Gamma frailty gives size
    ``1 / alpha``. Foci then occupy distinct uniformly drawn in-mask voxels.
    """
    kind = sm.check_kind(model_kind)
    m = template.n_studies
    mean = template.n_foci / m
    if kind in sm.DISPERSION_MODELS:
        if alpha is None or not alpha > 0:
            raise ValidationError(f"{kind} sampling needs a positive alpha")
        size = (mask.n_voxels if kind == sm.NB else 1.0) / alpha
        counts = rng.negative_binomial(size, size / (size + mean), size=m)
    else:
        counts = rng.poisson(mean, size=m)
    return _place_uniform(template, counts, mask, rng)


def sample_null_empirical(template: FociDataset, mask: BrainMask, rng: np.random.Generator) -> FociDataset:
    """Reassign every focus to a uniform in-mask voxel, keeping study counts.

    Within a study the voxels are distinct, so counts stay binary.
    """
    counts = _study_counts(template)
    if counts.max() > mask.n_voxels:
        raise ValidationError("a template study has more foci than the mask has voxels")
    return _place_uniform(template, counts, mask, rng)


def _pp_ranks(n: int) -> np.ndarray:
    if n <= 2 * PP_GRID_POINTS:
        return np.arange(1, n + 1)
    ranks = np.unique(np.round(np.logspace(0, np.log10(n), PP_GRID_POINTS)).astype(np.int64))
    return ranks[(ranks >= 1) & (ranks <= n)]


def _template_alpha(config: NullConfig, mask: BrainMask, design: DesignMatrix, fit_config: FitConfig) -> float:
    counts = build_counts(config.template, mask)
    res = fit(config.model_kind, sufficient_stats(counts, design), fit_config)
    return float(res.params.alpha)


def run_calibration(
    config: NullConfig,
    mask: BrainMask,
    design: DesignMatrix,
    fit_config: FitConfig = FitConfig(),
) -> CalibrationResult:
    """Fit and test ``config.n_realizations`` null datasets and summarize.

    Realizations whose information matrix is singular are excluded and
    counted rather than aborting the run.
    """
    alpha = config.alpha
    if config.sampler == "model_based" and config.model_kind in sm.DISPERSION_MODELS and alpha is None:
        alpha = _template_alpha(config, mask, design, fit_config)
        LGR.info("Sampling NB nulls with template alpha %.4g", alpha)

    n = mask.n_voxels
    ranks = _pp_ranks(n)
    children = np.random.SeedSequence(config.seed).spawn(config.n_realizations)
    curves, fprs, raw_any, trunc_any = [], [], [], []
    excluded = 0
    for r, child in enumerate(children):
        rng = np.random.default_rng(child)
        if config.sampler == "model_based":
            data = sample_null_model_based(config.template, mask, rng, config.model_kind, alpha)
        else:
            data = sample_null_empirical(config.template, mask, rng)
        counts = build_counts(data, mask)
        covs = prepare_covariates(data, config.covariates) if config.with_covariates else None
        stats = sufficient_stats(counts, design, covs)
        result = fit(config.model_kind, stats, fit_config)
        try:
            maps = homogeneity_test(result, stats, config.sided, config.q, config.truncation_floor)
        except SingularInformationError:
            excluded += 1
            LGR.warning("realization %d excluded: singular information", r)
            continue
        p_sorted = np.sort(maps.p)
        curves.append(-np.log10(p_sorted[ranks - 1]))
        fprs.append(float((maps.p < 0.05).mean()))
        raw_any.append(bool(maps.fdr.rejected_raw.any()))
        trunc_any.append(bool(maps.fdr.rejected.any()))

    if not curves:
        raise SingularInformationError("every null realization had singular information")
    curves = np.array(curves)
    mean = curves.mean(axis=0)
    sd = curves.std(axis=0, ddof=1) if len(curves) > 1 else np.zeros_like(mean)
    return CalibrationResult(
        pp_rank=ranks,
        pp_expected=expected_quantiles(n, ranks),
        pp_mean=mean,
        pp_lo=mean - ENVELOPE_Z * sd,
        pp_hi=mean + ENVELOPE_Z * sd,
        fpr_at_05=float(np.mean(fprs)),
        frac_invalid_fdr_raw=float(np.mean(raw_any)),
        frac_invalid_fdr_truncated=float(np.mean(trunc_any)),
        n_used=len(curves),
        n_excluded=excluded,
        n_voxels=n,
        fpr_per_realization=np.array(fprs),
        alpha_sampled=alpha,
    )

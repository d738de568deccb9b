"""Activation likelihood estimation (ALE) baseline and mask overlap.

Each study contributes a modeled-activation (MA) map: the voxelwise maximum
over its foci of a Gaussian kernel scaled to a peak of one. The ALE value is
the probabilistic union ``1 - prod(1 - MA)`` over studies. Significance
comes from a Monte Carlo null that scatters every study's foci uniformly in
the mask and pools the resulting ALE values across voxels.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats as sps

from cbmr.data_io import BrainMask, FociDataset
from cbmr.errors import ValidationError
from cbmr.inference import benjamini_hochberg

LGR = logging.getLogger(__name__)

TRUNCATION_SIGMAS = 3.0


@dataclass(frozen=True, eq=False)
class AleMap:
    """ALE values with the survival product ``prod(1 - MA)`` they derive from.

    ``survival`` keeps full relative precision where ``stat`` has rounded to
    1, so it is what the Monte Carlo test ranks on.
    """

    stat: np.ndarray
    fwhm_mm: float
    ma_count: int
    survival: np.ndarray | None = None


def fwhm_to_sigma(fwhm_mm: float) -> float:
    return fwhm_mm / (2.0 * np.sqrt(2.0 * np.log(2.0)))


def kernel_offsets(
    mask: BrainMask, fwhm_mm: float, complement: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    """Lattice offsets within the truncation radius and their kernel values.

    The kernel is centred on a voxel, so it is symmetric under reflection of
    any axis and equals 1 at the zero offset. With ``complement`` the values
    are ``1 - kernel``, computed without cancellation.
    """
    if not fwhm_mm > 0:
        raise ValidationError("fwhm must be positive")
    sigma = fwhm_to_sigma(fwhm_mm)
    radius = TRUNCATION_SIGMAS * sigma
    lin = mask.affine[:3, :3]
    half = np.ceil(radius / mask.voxel_size).astype(int)
    grid = np.stack(
        np.meshgrid(*[np.arange(-h, h + 1) for h in half], indexing="ij"), -1
    ).reshape(-1, 3)
    d2 = ((grid @ lin.T) ** 2).sum(axis=1)
    keep = d2 <= radius**2
    expo = -d2[keep] / (2 * sigma**2)
    return grid[keep], (-np.expm1(expo) if complement else np.exp(expo))


class _KernelPlacer:
    """Place kernels by flat indexing into a padded copy of the lattice.

    Padding by the kernel half-width keeps every offset of an in-mask voxel
    inside the padded array, so placement needs no bounds checks.
    """

    def __init__(self, mask: BrainMask, fwhm_mm: float):
        self.mask = mask
        offsets, self.complement = kernel_offsets(mask, fwhm_mm, complement=True)
        self.pad = np.abs(offsets).max(axis=0).astype(np.int64)
        shape = np.array(mask.dims, dtype=np.int64) + 2 * self.pad
        self.strides = np.array([1, shape[0], shape[0] * shape[1]], dtype=np.int64)
        self.flat_offsets = offsets.astype(np.int64) @ self.strides
        self.in_mask_flat = self.flat(mask.voxel_ijk)
        self._surv = np.ones(int(np.prod(shape)))

    def flat(self, ijk: np.ndarray) -> np.ndarray:
        return (np.asarray(ijk, dtype=np.int64) + self.pad) @ self.strides

    def survival(self, studies_ijk: list[np.ndarray]) -> np.ndarray:
        """``prod_i (1 - MA_i)`` over the in-mask voxels."""
        surv = self._surv  # per-study 1 - MA, reset after each study
        keep = np.ones(surv.size)
        for ijk in studies_ijk:
            if ijk.shape[0] == 0:
                continue
            touched = self.flat(ijk)[:, None] + self.flat_offsets[None, :]
            # max over foci of MA is the min over foci of 1 - MA
            for row in touched:
                surv[row] = np.minimum(surv[row], self.complement)
            keep *= surv
            surv[touched] = 1.0
        return keep[self.in_mask_flat]


def _study_voxels(data: FociDataset, mask: BrainMask) -> list[np.ndarray]:
    """In-mask focus voxels per study; out-of-mask foci are ignored."""
    out = []
    for s in data.studies:
        ijk = mask.mm_to_voxel(s.foci)
        inside = mask.lookup(ijk) >= 0
        out.append(np.unique(ijk[inside], axis=0))
    return out


def ale_map(data: FociDataset, mask: BrainMask, fwhm_mm: float = 14.0) -> AleMap:
    """ALE statistic over the in-mask voxels."""
    placer = _KernelPlacer(mask, fwhm_mm)
    surv = placer.survival(_study_voxels(data, mask))
    return AleMap(1.0 - surv, float(fwhm_mm), data.n_studies, surv)


def _rank_key(survival: np.ndarray) -> np.ndarray:
    """``-log(survival)``, increasing in ALE and unsaturated near 1."""
    with np.errstate(divide="ignore"):
        return -np.log(survival)


def ale_null_test(
    data: FociDataset,
    mask: BrainMask,
    fwhm_mm: float = 14.0,
    n_iter: int = 1000,
    rng: np.random.Generator | int | None = None,
) -> tuple[AleMap, np.ndarray]:
    """Monte Carlo p-values for the ALE map under uniform foci placement.

    Each iteration places every study's in-mask foci at distinct uniformly
    drawn voxels and records the whole ALE map. The p-value of voxel ``j``
    is ``(1 + #{null >= observed_j}) / (1 + n_iter * N)`` over the pooled
    null values. Comparisons use ``-log prod(1 - MA)``, which orders voxels
    like ALE but does not round to a tie where ALE is within 1e-16 of 1.

    Returns
    -------
    observed : AleMap
    p : ndarray, shape (N,)
    """
    if n_iter < 1:
        raise ValidationError("n_iter must be at least 1")
    if n_iter < 1000:
        LGR.warning("ALE null with %d iterations has coarse tail resolution", n_iter)
    rng = np.random.default_rng(rng)
    placer = _KernelPlacer(mask, fwhm_mm)
    studies = _study_voxels(data, mask)
    surv = placer.survival(studies)
    observed = _rank_key(surv)
    counts = [s.shape[0] for s in studies]
    n = mask.n_voxels
    exceed = np.zeros(n, dtype=np.int64)
    obs_order = np.argsort(observed)
    obs_sorted = observed[obs_order]
    for child in np.random.SeedSequence(rng.integers(2**63)).spawn(n_iter):
        r = np.random.default_rng(child)
        null_studies = [mask.voxel_ijk[r.choice(n, size=k, replace=False)] for k in counts]
        null = np.sort(_rank_key(placer.survival(null_studies)))
        # null values >= observed_j, for each observed value
        exceed_sorted = n - np.searchsorted(null, obs_sorted, side="left")
        exceed[obs_order] += exceed_sorted
    p = (1.0 + exceed) / (1.0 + n_iter * n)
    return AleMap(1.0 - surv, float(fwhm_mm), data.n_studies, surv), p


def p_to_z(p: np.ndarray) -> np.ndarray:
    """One-sided probit transform of p-values."""
    return sps.norm.isf(np.asarray(p, dtype=float))


def dice(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """Dice similarity ``2|A & B| / (|A| + |B|)``; 0 when both masks are empty."""
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise ValidationError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 0.0
    return 2.0 * int((a & b).sum()) / total


@dataclass(frozen=True)
class OverlapRow:
    threshold: str
    n_cbmr: int
    n_ale: int
    n_both: int
    dsc: float


def compare_masks(
    cbmr_p: np.ndarray,
    ale_p: np.ndarray,
    alpha: float = 0.05,
    q: float = 0.05,
    cbmr_floor: float = 1e-3,
) -> list[OverlapRow]:
    """Overlap of significant voxels at an uncorrected and an FDR threshold.

    CBMR p-values are floored at ``cbmr_floor`` before BH, as in the
    homogeneity test; ALE p-values are used as they are.
    """
    cbmr_p = np.asarray(cbmr_p, dtype=float)
    ale_p = np.asarray(ale_p, dtype=float)
    rows = []
    pairs = {
        f"uncorrected_p<{alpha:g}": (cbmr_p < alpha, ale_p < alpha),
        f"fdr_q<{q:g}": (
            benjamini_hochberg(np.maximum(cbmr_p, cbmr_floor), q)[0],
            benjamini_hochberg(ale_p, q)[0],
        ),
    }
    for name, (a, b) in pairs.items():
        rows.append(OverlapRow(name, int(a.sum()), int(b.sum()), int((a & b).sum()), dice(a, b)))
    return rows


def write_comparison(rows: list[OverlapRow], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "n_active_cbmr", "n_active_ale", "n_active_both", "dsc"])
        for r in rows:
            w.writerow([r.threshold, r.n_cbmr, r.n_ale, r.n_both, repr(r.dsc)])
    return path

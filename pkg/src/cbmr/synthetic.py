"""Synthetic masks and foci generators for examples and validation."""

from __future__ import annotations

import numpy as np

from cbmr.data_io import BrainMask, FociDataset, Study
from cbmr.errors import ValidationError


def ellipsoid_mask(dims=(30, 36, 30), voxel_size: float = 2.0, radii_fraction: float = 0.95) -> BrainMask:
    """Axis-aligned ellipsoid inscribed in a lattice, centred at the world origin."""
    dims = tuple(int(d) for d in dims)
    centre = (np.array(dims) - 1) / 2
    radii = radii_fraction * np.array(dims) / 2
    grid = np.stack(np.meshgrid(*[np.arange(d) for d in dims], indexing="ij"), -1)
    inside = (((grid - centre) / radii) ** 2).sum(-1) <= 1.0
    affine = np.diag([voxel_size] * 3 + [1.0])
    affine[:3, 3] = -centre * voxel_size
    return BrainMask(inside, affine)


def box_mask(dims=(10, 10, 10), voxel_size: float = 2.0) -> BrainMask:
    """Fully filled lattice."""
    affine = np.diag([voxel_size] * 3 + [1.0])
    return BrainMask(np.ones(dims, dtype=bool), affine)


def gaussian_bump(mask: BrainMask, center_mm, sigma_mm: float, peak_ratio: float) -> np.ndarray:
    """Relative intensity: 1 in the background rising to ``peak_ratio`` at the centre."""
    d2 = ((mask.centers_mm - np.asarray(center_mm, dtype=float)) ** 2).sum(axis=1)
    return 1.0 + (peak_ratio - 1.0) * np.exp(-d2 / (2 * sigma_mm**2))


def sample_foci(
    mask: BrainMask,
    foci_per_study,
    rng: np.random.Generator,
    weights: np.ndarray | None = None,
    covariates: dict[str, np.ndarray] | None = None,
    prefix: str = "study",
) -> FociDataset:
    """Place each study's foci at distinct in-mask voxel centres.

    Voxels are drawn without replacement with probability proportional to
    ``weights`` (uniform when omitted), so counts are binary within a study.
    Studies with a zero count receive one focus, since every study must report
    at least one.
    """
    n = mask.n_voxels
    counts = np.maximum(np.asarray(foci_per_study, dtype=np.int64), 1)
    if counts.max(initial=0) > n:
        raise ValidationError("a study has more foci than the mask has voxels")
    prob = None
    if weights is not None:
        w = np.asarray(weights, dtype=float)
        prob = w / w.sum()
    centers = mask.centers_mm
    studies = []
    for i, k in enumerate(counts):
        vox = rng.choice(n, size=int(k), replace=False, p=prob)
        cov = None if covariates is None else {name: float(v[i]) for name, v in covariates.items()}
        studies.append(Study(f"{prefix}{i:04d}", centers[np.sort(vox)], cov))
    return FociDataset(tuple(studies))


def nb_counts(
    mu_x: np.ndarray,
    mu_z: np.ndarray,
    alpha: float,
    rng: np.random.Generator,
    with_squares: bool = False,
):
    """Draw independent NB counts ``Y[i, j]`` with mean ``mu_x[j] mu_z[i]``.

    Each count is Poisson with a Gamma(1/alpha, 1/alpha) multiplier drawn
    independently per (study, voxel). Only the voxel and study sums are
    returned, which is all the factorized likelihoods need; with
    ``with_squares`` the per-voxel sum of squared counts is appended.
    """
    mu_x = np.asarray(mu_x, dtype=float)
    mu_z = np.asarray(mu_z, dtype=float)
    shape = 1.0 / alpha
    return _accumulate(mu_x, mu_z, rng, lambda: rng.gamma(shape, alpha, size=mu_x.size), with_squares)


def _accumulate(mu_x, mu_z, rng, multiplier, with_squares):
    y_vox = np.zeros(mu_x.size, dtype=np.int64)
    y_sq = np.zeros(mu_x.size, dtype=np.int64)
    y_study = np.zeros(mu_z.size, dtype=np.int64)
    for i, mz in enumerate(mu_z):
        lam = mu_x * mz if multiplier is None else multiplier() * mu_x * mz
        y = rng.poisson(lam)
        y_vox += y
        y_sq += y * y
        y_study[i] = y.sum()
    return (y_vox, y_study, y_sq) if with_squares else (y_vox, y_study)


def poisson_counts(mu_x: np.ndarray, mu_z: np.ndarray, rng: np.random.Generator, with_squares: bool = False):
    """Independent Poisson counts, returned as (voxel sums, study sums[, voxel sums of squares])."""
    return _accumulate(np.asarray(mu_x, dtype=float), np.asarray(mu_z, dtype=float), rng, None, with_squares)


def clustered_nb_counts(mu_x, mu_z, alpha: float, rng: np.random.Generator, with_squares: bool = False):
    """Counts with one Gamma frailty per study shared across its voxels."""
    frail = rng.gamma(1.0 / alpha, alpha, size=np.size(mu_z))
    return poisson_counts(mu_x, np.asarray(mu_z) * frail, rng, with_squares)

"""Input/output for foci tables, brain masks, covariates and stat maps.

Foci are read from delimited text files, binned onto the voxel lattice of a
brain mask, and reduced to the per-voxel and per-study count vectors that all
model fitting operates on.
"""

from __future__ import annotations

import csv
import gzip
import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import nibabel as nib
import numpy as np

from cbmr.errors import ValidationError

LGR = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("study_id", "x", "y", "z")
TRANSFORMS = ("none", "sqrt")


@dataclass(frozen=True)
class Study:
    """One study: identifier, foci in world millimetres, optional covariates."""

    study_id: str
    foci: np.ndarray
    covariates: Mapping[str, float] | None = None

    def __post_init__(self):
        foci = np.asarray(self.foci, dtype=float).reshape(-1, 3)
        foci.setflags(write=False)
        object.__setattr__(self, "foci", foci)
        if self.covariates is not None:
            object.__setattr__(self, "covariates", dict(self.covariates))


@dataclass(frozen=True)
class FociDataset:
    """Ordered collection of studies.

    Parameters
    ----------
    studies : sequence of Study
        Study records. Identifiers must be unique and every study must report
        at least one focus. Covariate maps must share one key set or be absent
        for all studies.
    """

    studies: tuple[Study, ...]

    def __post_init__(self):
        studies = tuple(self.studies)
        object.__setattr__(self, "studies", studies)
        ids = [s.study_id for s in studies]
        if len(set(ids)) != len(ids):
            raise ValidationError("study_id values must be unique")
        for s in studies:
            if s.foci.shape[0] == 0:
                raise ValidationError(f"study {s.study_id!r} has no foci")
        keys = {None if s.covariates is None else tuple(sorted(s.covariates)) for s in studies}
        if len(keys) > 1:
            raise ValidationError("all studies must share the same covariate names")

    @property
    def n_studies(self) -> int:
        return len(self.studies)

    @property
    def n_foci(self) -> int:
        return int(sum(s.foci.shape[0] for s in self.studies))

    @property
    def covariate_names(self) -> tuple[str, ...]:
        if not self.studies or self.studies[0].covariates is None:
            return ()
        return tuple(self.studies[0].covariates)

    def covariate(self, name: str) -> np.ndarray:
        """Return one covariate as an M-vector in study order."""
        if name not in self.covariate_names:
            raise ValidationError(f"covariate {name!r} not present in dataset")
        return np.array([s.covariates[name] for s in self.studies], dtype=float)


def _sniff_delimiter(path: Path, fmt: str | None) -> str:
    if fmt is None:
        fmt = "tsv" if path.suffix.lower() in (".tsv", ".tab") else "csv"
    if fmt not in ("csv", "tsv"):
        raise ValidationError(f"unsupported foci format {fmt!r}; expected csv or tsv")
    return "\t" if fmt == "tsv" else ","


def load_foci(path: str | Path, format: str | None = None) -> FociDataset:
    """Read a foci table.

    Parameters
    ----------
    path : str or Path
        UTF-8 delimited text with a header row. Columns ``study_id``, ``x``,
        ``y`` and ``z`` are required; any further column is read as a numeric
        study-level covariate that must be constant within a study.
    format : {"csv", "tsv"}, optional
        Delimiter style. Inferred from the file extension when omitted.

    Returns
    -------
    FociDataset
        Studies in order of first appearance.
    """
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"foci file not found: {path}")
    delimiter = _sniff_delimiter(path, format)

    foci: dict[str, list[tuple[float, float, float]]] = {}
    covs: dict[str, dict[str, float]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise ValidationError(f"{path}: missing required column(s) {missing}")
        if len(set(header)) != len(header):
            raise ValidationError(f"{path}: duplicate column names in header")
        col = {name: i for i, name in enumerate(header)}
        cov_names = [h for h in header if h not in REQUIRED_COLUMNS]

        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ValidationError(
                    f"{path}:{line}: expected {len(header)} fields, found {len(row)}"
                )
            sid = row[col["study_id"]].strip()
            if not sid:
                raise ValidationError(f"{path}:{line}: empty study_id")
            try:
                xyz = tuple(float(row[col[c]]) for c in ("x", "y", "z"))
                values = {c: float(row[col[c]]) for c in cov_names}
            except ValueError as exc:
                raise ValidationError(f"{path}:{line}: {exc}") from None
            if not all(math.isfinite(v) for v in (*xyz, *values.values())):
                raise ValidationError(f"{path}:{line}: non-finite value")
            if sid not in foci:
                foci[sid] = []
                covs[sid] = values
            elif values != covs[sid]:
                raise ValidationError(
                    f"{path}:{line}: covariates vary within study {sid!r}"
                )
            foci[sid].append(xyz)

    studies = tuple(
        Study(sid, np.array(pts, dtype=float), covs[sid] if cov_names else None)
        for sid, pts in foci.items()
    )
    LGR.info("Loaded %d foci from %d studies", sum(len(v) for v in foci.values()), len(studies))
    return FociDataset(studies)


def write_foci(data: FociDataset, path: str | Path) -> None:
    """Write a dataset back to CSV in the layout accepted by :func:`load_foci`."""
    names = data.covariate_names
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*REQUIRED_COLUMNS, *names])
        for s in data.studies:
            extra = [repr(float(s.covariates[n])) for n in names]
            for x, y, z in s.foci:
                writer.writerow([s.study_id, repr(float(x)), repr(float(y)), repr(float(z)), *extra])


@dataclass(frozen=True, eq=False)
class BrainMask:
    """Boolean voxel mask with its voxel-to-world affine.

    In-mask voxels are enumerated in x-fastest raster order (Fortran order of
    the volume), which fixes the layout of every N-vector in the toolkit.
    """

    inside: np.ndarray
    affine: np.ndarray
    voxel_ijk: np.ndarray = field(init=False, repr=False)
    index_volume: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        inside = np.asarray(self.inside, dtype=bool)
        if inside.ndim != 3:
            raise ValidationError(f"mask must be 3D, got shape {inside.shape}")
        affine = np.asarray(self.affine, dtype=float)
        if affine.shape != (4, 4) or not np.all(np.isfinite(affine)):
            raise ValidationError("affine must be a finite 4x4 matrix")
        if abs(np.linalg.det(affine[:3, :3])) < 1e-12:
            raise ValidationError("mask affine is not invertible")
        ijk = np.argwhere(inside.transpose(2, 1, 0))[:, ::-1].astype(np.int64)
        index = np.full(inside.shape, -1, dtype=np.int64)
        index[ijk[:, 0], ijk[:, 1], ijk[:, 2]] = np.arange(ijk.shape[0])
        for arr in (inside, affine, ijk, index):
            arr.setflags(write=False)
        object.__setattr__(self, "inside", inside)
        object.__setattr__(self, "affine", affine)
        object.__setattr__(self, "voxel_ijk", ijk)
        object.__setattr__(self, "index_volume", index)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.inside.shape)

    @property
    def voxel_size(self) -> np.ndarray:
        return np.sqrt((self.affine[:3, :3] ** 2).sum(axis=0))

    @property
    def n_voxels(self) -> int:
        return int(self.voxel_ijk.shape[0])

    def voxel_to_mm(self, ijk: np.ndarray) -> np.ndarray:
        ijk = np.asarray(ijk, dtype=float).reshape(-1, 3)
        return ijk @ self.affine[:3, :3].T + self.affine[:3, 3]

    def mm_to_voxel(self, xyz: np.ndarray) -> np.ndarray:
        """Map world coordinates to voxel indices, rounding half away from zero."""
        xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
        inv = np.linalg.inv(self.affine)
        cont = xyz @ inv[:3, :3].T + inv[:3, 3]
        return (np.sign(cont) * np.floor(np.abs(cont) + 0.5)).astype(np.int64)

    def lookup(self, ijk: np.ndarray) -> np.ndarray:
        """Return the in-mask index of each voxel, or -1 when outside."""
        ijk = np.asarray(ijk, dtype=np.int64).reshape(-1, 3)
        dims = np.array(self.dims)
        valid = np.all((ijk >= 0) & (ijk < dims), axis=1)
        out = np.full(ijk.shape[0], -1, dtype=np.int64)
        v = ijk[valid]
        out[valid] = self.index_volume[v[:, 0], v[:, 1], v[:, 2]]
        return out

    @property
    def centers_mm(self) -> np.ndarray:
        """World coordinates of in-mask voxel centres, N x 3."""
        return self.voxel_to_mm(self.voxel_ijk)

    def to_volume(self, values: np.ndarray, fill: float = 0.0, dtype=np.float32) -> np.ndarray:
        values = np.asarray(values)
        if values.shape != (self.n_voxels,):
            raise ValidationError(
                f"expected {self.n_voxels} values for this mask, got {values.shape}"
            )
        vol = np.full(self.dims, fill, dtype=dtype)
        ijk = self.voxel_ijk
        vol[ijk[:, 0], ijk[:, 1], ijk[:, 2]] = values
        return vol

    def from_volume(self, volume: np.ndarray) -> np.ndarray:
        ijk = self.voxel_ijk
        return np.asarray(volume)[ijk[:, 0], ijk[:, 1], ijk[:, 2]]


def load_mask(path: str | Path) -> BrainMask:
    """Read a NIfTI-1 mask; nonzero voxels are inside.

    Raises
    ------
    ValidationError
        If the file is missing, not 3D, of a non-numeric datatype, or has a
        singular affine.
    """
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"mask file not found: {path}")
    try:
        img = nib.load(str(path))
    except Exception as exc:  # nibabel raises a variety of types
        raise ValidationError(f"cannot read mask {path}: {exc}") from None
    dtype = img.get_data_dtype()
    if dtype.kind not in "biuf" or dtype.fields is not None:
        raise ValidationError(f"unsupported mask datatype {dtype}")
    shape = img.shape
    if len(shape) == 4 and shape[3] == 1:
        shape = shape[:3]
    if len(shape) != 3:
        raise ValidationError(f"mask must be a single 3D volume, got shape {img.shape}")
    data = np.asarray(img.dataobj).reshape(shape)
    return BrainMask(data != 0, np.asarray(img.affine, dtype=float))


def reference_mask() -> BrainMask:
    """The MNI152 2mm brain mask shipped with the package (91x109x91)."""
    res = resources.files("cbmr").joinpath("data/mni152_2mm_brainmask.nii.gz")
    with resources.as_file(res) as p:
        return load_mask(p)


@dataclass(frozen=True, eq=False)
class CountData:
    """Foci binned onto the mask lattice.

    Attributes
    ----------
    y_per_voxel : ndarray of int, shape (N,)
        Foci per voxel summed over studies.
    y_per_study : ndarray of int, shape (M,)
        Retained foci per study.
    pairs : ndarray of int, shape (K, 2)
        Retained (study index, voxel index) pairs, sorted; each pair appears
        once since counts are binary within a study.
    n_dropped_outside, n_deduplicated, n_foci_in_file : int
        Bookkeeping counters; ``n_foci_in_file`` equals the retained total
        plus both drop counters.
    """

    y_per_voxel: np.ndarray
    y_per_study: np.ndarray
    pairs: np.ndarray
    n_dropped_outside: int
    n_deduplicated: int
    n_foci_in_file: int

    @property
    def n_studies(self) -> int:
        return int(self.y_per_study.shape[0])

    @property
    def total(self) -> int:
        return int(self.y_per_study.sum())


def build_counts(data: FociDataset, mask: BrainMask) -> CountData:
    """Bin foci onto the mask and reduce to per-voxel and per-study sums.

    Out-of-mask foci are dropped and counted. Repeated foci of one study in
    the same voxel are collapsed to a single count.
    """
    n = mask.n_voxels
    m = data.n_studies
    counts = np.array([s.foci.shape[0] for s in data.studies], dtype=np.int64)
    total = int(counts.sum())
    if total:
        xyz = np.concatenate([s.foci for s in data.studies])
        vox = mask.lookup(mask.mm_to_voxel(xyz))
    else:
        vox = np.empty(0, dtype=np.int64)
    study = np.repeat(np.arange(m, dtype=np.int64), counts)
    inside = vox >= 0
    n_out = int((~inside).sum())
    keys = np.unique(study[inside] * n + vox[inside])
    n_dedup = int(inside.sum()) - keys.shape[0]
    pairs = np.stack([keys // n, keys % n], axis=1) if keys.size else np.empty((0, 2), np.int64)
    y_vox = np.bincount(pairs[:, 1], minlength=n).astype(np.int64)
    y_study = np.bincount(pairs[:, 0], minlength=m).astype(np.int64)
    for arr in (y_vox, y_study, pairs):
        arr.setflags(write=False)
    if n_out:
        LGR.info("Dropped %d foci outside the mask", n_out)
    if n_dedup:
        LGR.info("Collapsed %d duplicate foci within studies", n_dedup)
    return CountData(y_vox, y_study, pairs, n_out, n_dedup, total)


@dataclass(frozen=True)
class CovariateSpec:
    name: str
    transform: str = "none"
    standardize: bool = False

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ValidationError(
                f"covariate {self.name!r}: transform must be one of {TRANSFORMS}"
            )


@dataclass(frozen=True, eq=False)
class CovariateMatrix:
    """Prepared study-level covariates, M x R, with the constants used."""

    z: np.ndarray
    names: tuple[str, ...]
    transform_log: tuple[dict, ...]

    @property
    def n_covariates(self) -> int:
        return len(self.names)


def _transform(values: np.ndarray, transform: str, name: str) -> np.ndarray:
    if transform == "sqrt":
        if np.any(values < 0):
            raise ValidationError(f"covariate {name!r}: sqrt of negative value")
        return np.sqrt(values)
    return values.astype(float)


def prepare_covariates(
    data: FociDataset,
    spec: Iterable[CovariateSpec | tuple | Mapping],
    constants: Sequence[Mapping] | None = None,
) -> CovariateMatrix:
    """Transform, centre and optionally standardize study covariates.

    Parameters
    ----------
    data : FociDataset
    spec : iterable
        One entry per column, as ``CovariateSpec``, ``(name, transform,
        standardize)`` tuples or mappings with those keys.
    constants : sequence of mapping, optional
        Previously recorded ``transform_log`` entries. When given, their
        ``center`` and ``scale`` are reused instead of being estimated, so a
        model fitted on one dataset can be applied to another.

    Returns
    -------
    CovariateMatrix
    """
    specs = [_as_spec(s) for s in spec]
    if constants is not None and len(constants) != len(specs):
        raise ValidationError("constants must match the covariate spec one-to-one")
    cols, log = [], []
    for k, s in enumerate(specs):
        col = _transform(data.covariate(s.name), s.transform, s.name)
        if constants is not None:
            center = float(constants[k]["center"])
            scale = float(constants[k]["scale"])
        else:
            center = float(col.mean())
            scale = 1.0
            if s.standardize:
                if col.shape[0] < 2:
                    raise ValidationError(f"covariate {s.name!r}: need 2+ studies to standardize")
                sd = float(np.std(col - center, ddof=1))
                if not sd > 1e-12 * max(1.0, abs(center)):
                    raise ValidationError(f"covariate {s.name!r} has zero variance")
                scale = sd
        cols.append((col - center) / scale)
        log.append(
            {"name": s.name, "transform": s.transform, "standardize": s.standardize,
             "center": center, "scale": scale}
        )
    z = np.column_stack(cols) if cols else np.zeros((data.n_studies, 0))
    z.setflags(write=False)
    return CovariateMatrix(z, tuple(s.name for s in specs), tuple(log))


def _as_spec(s) -> CovariateSpec:
    if isinstance(s, CovariateSpec):
        return s
    if isinstance(s, Mapping):
        return CovariateSpec(s["name"], s.get("transform", "none"), bool(s.get("standardize", False)))
    return CovariateSpec(*s)


def _nifti_bytes(volume: np.ndarray, affine: np.ndarray) -> bytes:
    img = nib.Nifti1Image(volume, affine)
    img.header.set_xyzt_units("mm")
    img.set_sform(affine, code=1)
    img.set_qform(affine, code=1)
    return img.to_bytes()


def write_stat_map(values: np.ndarray, mask: BrainMask, path: str | Path) -> Path:
    """Write an N-vector as a float32 NIfTI-1 volume; outside voxels are 0.

    A ``.gz`` suffix produces a gzip file with a zeroed timestamp so that
    repeated writes are byte-identical.
    """
    path = Path(path)
    vol = mask.to_volume(np.asarray(values, dtype=np.float32))
    payload = _nifti_bytes(vol, mask.affine)
    if path.suffix == ".gz":
        payload = gzip.compress(payload, compresslevel=6, mtime=0)
    try:
        path.write_bytes(payload)
    except OSError as exc:
        raise ValidationError(f"cannot write {path}: {exc}") from None
    return path


def write_mask(mask: BrainMask, path: str | Path) -> Path:
    """Write the mask as a uint8 NIfTI-1 volume (gzip with zeroed timestamp for ``.gz``)."""
    path = Path(path)
    payload = _nifti_bytes(mask.inside.astype(np.uint8), mask.affine)
    if path.suffix == ".gz":
        payload = gzip.compress(payload, compresslevel=6, mtime=0)
    path.write_bytes(payload)
    return path


def read_stat_map(path: str | Path, mask: BrainMask) -> np.ndarray:
    """Read a volume written by :func:`write_stat_map` back into an N-vector."""
    img = nib.load(str(path))
    if tuple(img.shape[:3]) != mask.dims:
        raise ValidationError(f"{path}: shape {img.shape} does not match mask {mask.dims}")
    return mask.from_volume(np.asarray(img.dataobj))


def write_json(obj, path: str | Path) -> Path:
    """Write JSON with sorted keys and a trailing newline for stable diffs."""
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")
    return path

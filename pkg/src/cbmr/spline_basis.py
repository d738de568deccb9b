"""Tensor-product cubic B-spline design matrices over a brain mask.

The spatial log-intensity is expanded in a tensor product of clamped cubic
B-splines with equally spaced knots. Bases whose largest value inside the
mask falls below a support threshold are dropped, and the remaining rows are
renormalized so that each voxel's basis weights sum to one.

Knot placement
--------------
Per array axis, work in world millimetres along that axis. Let ``[lo, hi]``
be the voxel-edge extent of the mask (outermost voxel centres widened by half
a voxel) padded by one knot spacing on each side. Boundary knots sit at
``lo`` and ``hi`` with multiplicity four; interior knots are placed every
``spacing`` from ``lo`` while strictly below ``hi``. The first interior knot
therefore falls on the lower voxel edge of the mask. For the MNI152 2mm mask
at 20mm spacing this gives 456 retained bases.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from cbmr.data_io import BrainMask
from cbmr.errors import ValidationError

LGR = logging.getLogger(__name__)

ORDER = 4  # cubic


def bspline_basis_1d(knots: np.ndarray, points: np.ndarray, order: int = ORDER) -> np.ndarray:
    """Evaluate all B-spline bases at the given points by Cox-de Boor recursion.

    Parameters
    ----------
    knots : array_like
        Nondecreasing knot vector of length ``n_bases + order``.
    points : array_like
        Evaluation positions inside ``[knots[0], knots[-1])``. The right end
        point is also accepted and evaluated as the left limit.
    order : int
        Spline order (4 for cubic).

    Returns
    -------
    ndarray, shape (len(points), len(knots) - order)

    Notes
    -----
    Quotients with a zero denominator are taken as zero, which handles the
    repeated knots of a clamped vector.
    """
    t = np.asarray(knots, dtype=float)
    x = np.atleast_1d(np.asarray(points, dtype=float))
    if t.ndim != 1 or np.any(np.diff(t) < 0):
        raise ValidationError("knots must be a nondecreasing 1D vector")
    n_bases = t.size - order
    if n_bases < 1:
        raise ValidationError(f"need at least {order + 1} knots for order {order}")
    if np.any((x < t[0]) | (x > t[-1])) or not np.all(np.isfinite(x)):
        bad = x[(x < t[0]) | (x > t[-1]) | ~np.isfinite(x)][0]
        raise ValidationError(f"point {bad} outside knot span [{t[0]}, {t[-1]}]")

    # order-1 indicators on half-open spans; the right end belongs to the last nonempty span
    b = ((t[None, :-1] <= x[:, None]) & (x[:, None] < t[None, 1:])).astype(float)
    at_end = x == t[-1]
    if np.any(at_end):
        last = np.nonzero(t[:-1] < t[-1])[0][-1]
        b[at_end] = 0.0
        b[at_end, last] = 1.0

    for k in range(2, order + 1):
        n = t.size - k
        left_den = t[k - 1 : k - 1 + n] - t[:n]
        right_den = t[k : k + n] - t[1 : 1 + n]
        with np.errstate(divide="ignore", invalid="ignore"):
            left_w = np.where(left_den > 0, (x[:, None] - t[None, :n]) / left_den, 0.0)
            right_w = np.where(right_den > 0, (t[None, k : k + n] - x[:, None]) / right_den, 0.0)
        b = left_w * b[:, :n] + right_w * b[:, 1 : n + 1]
    return b


def axis_basis(knots: np.ndarray, points: np.ndarray, order: int = ORDER) -> np.ndarray:
    """Like :func:`bspline_basis_1d` but rows outside the knot span are zero."""
    x = np.asarray(points, dtype=float)
    out = np.zeros((x.size, len(knots) - order))
    ok = (x >= knots[0]) & (x <= knots[-1])
    if np.any(ok):
        out[ok] = bspline_basis_1d(knots, x[ok], order)
    return out


@dataclass(frozen=True)
class KnotGrid:
    """Per-array-axis knot vectors in world millimetres."""

    spacing_mm: tuple[float, float, float]
    knots: tuple[np.ndarray, np.ndarray, np.ndarray]

    @property
    def n_bases(self) -> tuple[int, int, int]:
        return tuple(k.size - ORDER for k in self.knots)

    def to_dict(self) -> dict:
        return {
            "spacing_mm": [float(s) for s in self.spacing_mm],
            "knots_mm": [[float(v) for v in k] for k in self.knots],
        }


def _axis_world_coords(mask: BrainMask) -> list[np.ndarray]:
    """World coordinate along each array axis, for every lattice index."""
    a = mask.affine[:3, :3]
    coords = []
    for ax in range(3):
        col = a[:, ax]
        w = int(np.argmax(np.abs(col)))
        if np.any(np.abs(np.delete(col, w)) > 1e-6 * abs(col[w])):
            raise ValidationError("oblique mask affines are not supported; resample to an axis-aligned grid")
        coords.append(col[w] * np.arange(mask.dims[ax], dtype=float) + mask.affine[w, 3])
    return coords


def make_knots(mask: BrainMask, spacing_mm=20.0) -> KnotGrid:
    """Place clamped cubic knots covering the mask with the given spacing."""
    spacing = np.broadcast_to(np.asarray(spacing_mm, dtype=float), (3,))
    if np.any(spacing <= 0):
        raise ValidationError("knot spacing must be positive")
    if mask.n_voxels == 0:
        raise ValidationError("mask is empty")
    coords = _axis_world_coords(mask)
    vsize = mask.voxel_size
    knots = []
    for ax in range(3):
        c = coords[ax][mask.voxel_ijk[:, ax]]
        s = float(spacing[ax])
        lo = float(c.min()) - vsize[ax] / 2 - s
        hi = float(c.max()) + vsize[ax] / 2 + s
        n_inner = int(np.ceil((hi - lo) / s)) - 1
        inner = lo + s * np.arange(1, n_inner + 1)
        inner = inner[inner < hi]
        knots.append(np.concatenate([[lo] * ORDER, inner, [hi] * ORDER]))
    return KnotGrid(tuple(float(s) for s in spacing), tuple(knots))


class TensorBasis:
    """Lazy tensor product of three per-axis basis matrices.

    Row ``(i, j, k)`` and column ``(a, b, c)`` hold ``cx[i, a] * cy[j, b] *
    cz[k, c]``. Rows and columns are both enumerated x-fastest, so the
    implied dense matrix equals ``kron(cz, kron(cy, cx))``. Nothing of that
    size is ever allocated; rows are produced on demand.
    """

    def __init__(self, cx: np.ndarray, cy: np.ndarray, cz: np.ndarray):
        self.factors = tuple(np.asarray(c, dtype=float) for c in (cx, cy, cz))
        if any(f.ndim != 2 for f in self.factors):
            raise ValidationError("per-axis basis matrices must be 2D")

    @property
    def lattice_shape(self) -> tuple[int, int, int]:
        return tuple(f.shape[0] for f in self.factors)

    @property
    def basis_shape(self) -> tuple[int, int, int]:
        return tuple(f.shape[1] for f in self.factors)

    @property
    def shape(self) -> tuple[int, int]:
        return int(np.prod(self.lattice_shape)), int(np.prod(self.basis_shape))

    def _compact(self, f: np.ndarray):
        """Per lattice position, the column ids and values of nonzero bases."""
        width = max(1, int((f != 0).sum(axis=1).max(initial=0)))
        order = np.argsort(f == 0, axis=1, kind="stable")[:, :width]
        vals = np.take_along_axis(f, order, axis=1)
        return order, vals

    def rows(self, ijk: np.ndarray) -> sp.csr_matrix:
        """Sparse rows for the given lattice positions (K x 3 integer array)."""
        ijk = np.asarray(ijk, dtype=np.int64).reshape(-1, 3)
        lat = self.lattice_shape
        if np.any(ijk < 0) or np.any(ijk >= np.array(lat)):
            raise ValidationError("lattice index out of range")
        (ix, vx), (iy, vy), (iz, vz) = (self._compact(f) for f in self.factors)
        nx, ny, _ = self.basis_shape
        i, j, k = ijk.T
        vals = vx[i][:, :, None, None] * vy[j][:, None, :, None] * vz[k][:, None, None, :]
        cols = ix[i][:, :, None, None] + nx * (iy[j][:, None, :, None] + ny * iz[k][:, None, None, :])
        n_rows = ijk.shape[0]
        per_row = vals[0].size if n_rows else 0
        indptr = np.arange(n_rows + 1, dtype=np.int64) * per_row
        mat = sp.csr_matrix(
            (vals.reshape(-1), cols.reshape(-1), indptr), shape=(n_rows, self.shape[1])
        )
        mat.eliminate_zeros()
        mat.sort_indices()
        return mat

    def dense(self) -> np.ndarray:
        """Materialize the full matrix; only for small lattices and tests."""
        if self.shape[0] * self.shape[1] > 10**7:
            raise ValidationError("tensor basis too large to materialize")
        lat = self.lattice_shape
        grid = np.stack(np.meshgrid(*[np.arange(n) for n in lat], indexing="ij"), -1)
        ijk = grid.transpose(2, 1, 0, 3).reshape(-1, 3)
        return self.rows(ijk).toarray()


def tensor_product_basis(cx: np.ndarray, cy: np.ndarray, cz: np.ndarray) -> TensorBasis:
    """Combine per-axis basis matrices into a lazy tensor-product basis."""
    return TensorBasis(cx, cy, cz)


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Pruned, row-normalized spatial design matrix.

    Attributes
    ----------
    matrix : scipy.sparse.csr_matrix, shape (N, P)
    kept_columns : ndarray of int
        Column ids of the full tensor basis that survived pruning.
    column_max : ndarray
        In-mask maximum of each kept column before renormalization.
    threshold : float
    knots : KnotGrid or None
    """

    matrix: sp.csr_matrix
    kept_columns: np.ndarray
    column_max: np.ndarray
    threshold: float
    knots: KnotGrid | None = None

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_cols(self) -> int:
        return self.matrix.shape[1]

    def export(self, path: str | Path) -> tuple[Path, Path]:
        """Write (row, col, value) triplets as CSV plus a JSON sidecar."""
        path = Path(path)
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        with path.open("w", encoding="utf-8") as fh:
            fh.write("row,col,value\n")
            for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
                fh.write(f"{int(r)},{int(c)},{float(v)!r}\n")
        sidecar = path.with_suffix(".json")
        meta = {
            "n_rows": self.n_rows,
            "n_cols": self.n_cols,
            "threshold": self.threshold,
            "kept_columns": [int(c) for c in self.kept_columns],
        }
        if self.knots is not None:
            meta.update(self.knots.to_dict())
        sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path, sidecar


def mask_and_prune(c: TensorBasis, mask: BrainMask, support_threshold: float = 0.1) -> DesignMatrix:
    """Restrict a tensor basis to the mask, drop weak bases, renormalize rows.

    A column is dropped when its largest in-mask value is strictly below
    ``support_threshold``.
    """
    if c.lattice_shape != mask.dims:
        raise ValidationError(f"basis lattice {c.lattice_shape} does not match mask {mask.dims}")
    x = c.rows(mask.voxel_ijk)
    colmax = np.asarray(x.max(axis=0).todense()).ravel()
    keep = np.nonzero(colmax >= support_threshold)[0]
    x = x[:, keep].tocsr()
    sums = np.asarray(x.sum(axis=1)).ravel()
    empty = np.nonzero(sums <= 0)[0]
    if empty.size:
        ijk = tuple(int(v) for v in mask.voxel_ijk[empty[0]])
        raise ValidationError(
            f"voxel {ijk} is supported by no retained basis ({empty.size} such voxels); "
            "lower the support threshold or the knot spacing"
        )
    x = sp.diags(1.0 / sums) @ x
    x = sp.csr_matrix(x)
    x.sort_indices()
    LGR.info("Kept %d of %d spline bases", keep.size, c.shape[1])
    return DesignMatrix(x, keep, colmax[keep], float(support_threshold))


def build_design(mask: BrainMask, spacing_mm=20.0, support_threshold: float = 0.1) -> DesignMatrix:
    """Knots, per-axis bases, tensor product and pruning in one call."""
    grid = make_knots(mask, spacing_mm)
    coords = _axis_world_coords(mask)
    factors = [axis_basis(k, x) for k, x in zip(grid.knots, coords)]
    design = mask_and_prune(tensor_product_basis(*factors), mask, support_threshold)
    return DesignMatrix(design.matrix, design.kept_columns, design.column_max, design.threshold, grid)

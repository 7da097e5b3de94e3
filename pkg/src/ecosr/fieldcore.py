"""Periodic voxel fields on the unit cell and their finite-difference calculus.

The unit cell has edge length 1.0 at every resolution, so an ``n``-voxel grid
has spacing ``1/n`` and refining the grid refines the same physical cell.
All differential operators use one central first-difference stencil with
periodic wrap; second derivatives are always the composition ``d1 o d1``.
Because shifted copies of a single stencil commute, the discrete conservation
identities (divergence of the equilibrium construction, incompatibility of a
symmetrized gradient) hold to rounding rather than to truncation order.

Symmetric rank-2 tensors are stored as 6 channels in the component order
(11, 22, 33, 23, 13, 12); general rank-2 tensors as 9 channels row-major
(11, 12, 13, 21, 22, 23, 31, 32, 33). Shear channels hold tensor components
(not engineering strain); any factor of 2 belongs to constitutive
contractions, never to storage.

Array-level helpers (``d1``, ``sym_grad``, ``div_sym``, ...) act on the
trailing three axes so batched ``(B, C, n, n, n)`` tensors and bare
``(n, n, n)`` volumes share one code path; ``Field`` wrappers add shape
checking and grid bookkeeping on top.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "FieldKind",
    "GridSpec",
    "Field",
    "VOIGT_PAIRS",
    "VOIGT_INDEX",
    "TENSOR2_PAIRS",
    "d1",
    "d2",
    "fd_grad",
    "fd_div",
    "sym_grad",
    "div_sym",
    "grad_vector",
    "incompatibility",
    "inc_sym",
    "block_mean",
    "downsample",
    "downsample_adjoint",
    "upsample_nearest",
    "upsample_nearest_adjoint",
    "spatial_mean",
]

# Symmetric storage: channel -> (i, j) with i <= j.
VOIGT_PAIRS = ((0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1))
# (i, j) -> channel for symmetric storage.
VOIGT_INDEX = ((0, 5, 4), (5, 1, 3), (4, 3, 2))
# Row-major storage for general rank-2 tensors.
TENSOR2_PAIRS = tuple((i, j) for i in range(3) for j in range(3))


class FieldKind(enum.Enum):
    SCALAR = "scalar"
    VECTOR = "vector"
    SYMTENSOR = "symtensor"
    TENSOR2 = "tensor2"

    @property
    def channels(self) -> int:
        return {"scalar": 1, "vector": 3, "symtensor": 6, "tensor2": 9}[self.value]


@dataclass(frozen=True)
class GridSpec:
    """Cubic periodic grid over the unit cell."""

    n: int
    spacing: float

    @classmethod
    def cubic(cls, n: int) -> "GridSpec":
        if n < 2:
            raise ValueError(f"grid needs at least 2 voxels per edge, got {n}")
        return cls(n=n, spacing=1.0 / n)


@dataclass
class Field:
    """A (C, n, n, n) voxel field with its grid and tensor kind."""

    grid: GridSpec
    kind: FieldKind
    data: np.ndarray

    def __post_init__(self):
        n = self.grid.n
        expected = (self.kind.channels, n, n, n)
        if tuple(self.data.shape) != expected:
            raise ValueError(
                f"{self.kind.value} field on n={n} grid needs shape {expected}, "
                f"got {tuple(self.data.shape)}"
            )

    def copy(self) -> "Field":
        return Field(self.grid, self.kind, self.data.copy())


def _spatial_axis(a: np.ndarray, axis: int) -> int:
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1, or 2, got {axis}")
    if a.ndim < 3:
        raise ValueError("expected at least three trailing spatial axes")
    return a.ndim - 3 + axis

def d1(a: np.ndarray, axis: int, spacing: float) -> np.ndarray:
    """Central periodic first difference along a spatial axis.

    Acts on the trailing three axes of ``a``; adjoint is ``-d1`` under the
    plain voxel-sum inner product.
    """
    ax = _spatial_axis(a, axis)
    return (np.roll(a, -1, ax) - np.roll(a, 1, ax)) * (0.5 / spacing)


def d2(a: np.ndarray, ax1: int, ax2: int, spacing: float) -> np.ndarray:
    """Second difference as the composition d1 o d1 (self-adjoint)."""
    return d1(d1(a, ax1, spacing), ax2, spacing)


def fd_grad(f: Field, axis: int) -> Field:
    """Derivative of a scalar field along one axis."""
    if f.kind is not FieldKind.SCALAR:
        raise ValueError(f"fd_grad expects a scalar field, got {f.kind.value}")
    return Field(f.grid, FieldKind.SCALAR, d1(f.data, axis, f.grid.spacing))


def grad_vector(u: np.ndarray, spacing: float) -> np.ndarray:
    """Full displacement gradient: (..., 3, n, n, n) -> (..., 9, n, n, n).

    Output channel for (i, j) holds u_i,j in row-major TENSOR2 order.
    """
    comps = [
        d1(u[..., i, :, :, :], j, spacing) for i in range(3) for j in range(3)
    ]
    return np.stack(comps, axis=-4)


def sym_grad(u: np.ndarray, spacing: float) -> np.ndarray:
    """Symmetrized gradient: (..., 3, n, n, n) -> (..., 6, n, n, n)."""
    du = [[d1(u[..., i, :, :, :], j, spacing) for j in range(3)] for i in range(3)]
    comps = []
    for i, j in VOIGT_PAIRS:
        if i == j:
            comps.append(du[i][j])
        else:
            comps.append(0.5 * (du[i][j] + du[j][i]))
    return np.stack(comps, axis=-4)


def div_sym(t: np.ndarray, spacing: float) -> np.ndarray:
    """Row divergence of a symmetric tensor field: (..., 6, ...) -> (..., 3, ...)."""
    rows = []
    for i in range(3):
        acc = None
        for j in range(3):
            term = d1(t[..., VOIGT_INDEX[i][j], :, :, :], j, spacing)
            acc = term if acc is None else acc + term
        rows.append(acc)
    return np.stack(rows, axis=-4)


def fd_div(t: Field) -> Field:
    """Discrete divergence of a symmetric tensor field."""
    if t.kind is not FieldKind.SYMTENSOR:
        raise ValueError(f"fd_div expects a symtensor field, got {t.kind.value}")
    return Field(t.grid, FieldKind.VECTOR, div_sym(t.data, t.grid.spacing))


def inc_sym(e: np.ndarray, spacing: float) -> np.ndarray:
    """Saint-Venant incompatibility of a symmetric tensor field.

    inc(e)_ij = -e_ij,kk - e_kk,ij + e_ik,jk + e_jk,ik, all second
    derivatives composed d1 o d1; annihilates symmetrized gradients to
    rounding. (..., 6, n, n, n) -> (..., 6, n, n, n).
    """
    chan = lambda i, j: e[..., VOIGT_INDEX[i][j], :, :, :]
    trace = chan(0, 0) + chan(1, 1) + chan(2, 2)
    cache: dict = {}

    def dd(key, arr, a1, a2):
        a1, a2 = min(a1, a2), max(a1, a2)
        k = (key, a1, a2)
        if k not in cache:
            cache[k] = d2(arr, a1, a2, spacing)
        return cache[k]

    out = []
    for i, j in VOIGT_PAIRS:
        acc = -sum(dd((i, j) if i <= j else (j, i), chan(i, j), k, k) for k in range(3))
        acc = acc - dd("tr", trace, i, j)
        for k in range(3):
            ik = tuple(sorted((i, k)))
            jk = tuple(sorted((j, k)))
            acc = acc + dd(ik, chan(i, k), j, k) + dd(jk, chan(j, k), i, k)
        out.append(acc)
    return np.stack(out, axis=-4)


def incompatibility(e: Field) -> Field:
    if e.kind is not FieldKind.SYMTENSOR:
        raise ValueError(
            f"incompatibility expects a symtensor field, got {e.kind.value}"
        )
    return Field(e.grid, FieldKind.SYMTENSOR, inc_sym(e.data, e.grid.spacing))


def block_mean(a: np.ndarray, factor: int) -> np.ndarray:
    """Windowed-average downsampling of the trailing three axes."""
    n = a.shape[-1]
    if factor < 1 or n % factor != 0:
        raise ValueError(f"factor {factor} does not divide grid size {n}")
    if factor == 1:
        return a.copy()
    m = n // factor
    lead = a.shape[:-3]
    r = a.reshape(lead + (m, factor, m, factor, m, factor))
    return r.mean(axis=(-5, -3, -1))


def downsample(f: Field, factor: int) -> Field:
    """Block-mean a field onto the coarser grid (same unit cell)."""
    out = block_mean(f.data, factor)
    return Field(GridSpec.cubic(f.grid.n // factor), f.kind, out)


def downsample_adjoint(lo: np.ndarray, factor: int) -> np.ndarray:
    """Adjoint of block_mean under voxel-sum inner products."""
    out = lo
    for ax in (-3, -2, -1):
        out = np.repeat(out, factor, axis=ax)
    return out / float(factor**3)


def upsample_nearest(lo: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor upsampling of the trailing three axes."""
    out = lo
    for ax in (-3, -2, -1):
        out = np.repeat(out, factor, axis=ax)
    return out


def upsample_nearest_adjoint(hi: np.ndarray, factor: int) -> np.ndarray:
    """Adjoint of nearest upsampling: per-block sum."""
    return block_mean(hi, factor) * float(factor**3)


def spatial_mean(f: Field) -> np.ndarray:
    """Per-channel mean over all voxels, compensated summation."""
    out = np.empty(f.data.shape[0], dtype=np.float64)
    nvox = f.grid.n**3
    for c in range(f.data.shape[0]):
        out[c] = math.fsum(f.data[c].ravel().tolist()) / nvox
    return out

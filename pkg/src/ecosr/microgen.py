"""Synthetic periodic microstructures and their stiffness featurization.

Two families:

* porous: a homogeneous isotropic matrix with ellipsoidal pores, modeled as a
  very compliant phase (``pore_scale`` times the matrix stiffness) so the
  spectral solver stays contractive;
* polycrystalline: a periodic Voronoi tessellation, one uniformly random
  orientation per grain, cubic single-crystal elasticity rotated into each
  grain frame.

Orientations use intrinsic ZXZ Euler angles, R = Rz(phi1) Rx(Phi) Rz(phi2).
Stiffness tensors live in 6x6 form with tensor-component storage
(shear factors of 2 belong to ``apply_stiffness``, not to the matrix), and
are featurized as the 21 upper-triangle entries in row-major order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ecosr.fieldcore import GridSpec, VOIGT_PAIRS

__all__ = [
    "TRI_PAIRS",
    "CubicConstants",
    "PoreParams",
    "PoreMicrostructure",
    "PolycrystalMicrostructure",
    "euler_to_rotation",
    "random_euler",
    "rotate_stiffness",
    "ellipsoid_indicator",
    "gen_pore",
    "gen_polycrystal",
    "voronoi_assign",
    "downsample_microstructure",
    "featurize",
    "expand_stiffness",
    "apply_stiffness",
    "pore_mask_lr",
]

# 21-channel featurization order: upper triangle of the 6x6, row-major.
TRI_PAIRS = tuple((i, j) for i in range(6) for j in range(i, 6))

# Shear doubling for the constitutive contraction in 6-channel storage.
_VOIGT_WEIGHT = np.array([1.0, 1.0, 1.0, 2.0, 2.0, 2.0])


@dataclass(frozen=True)
class CubicConstants:
    """Cubic single-crystal elastic constants, GPa."""

    c11: float
    c12: float
    c44: float

    @classmethod
    def from_isotropic(cls, e: float, nu: float) -> "CubicConstants":
        lam = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
        mu = e / (2.0 * (1.0 + nu))
        return cls(c11=lam + 2.0 * mu, c12=lam, c44=mu)

    def rank4(self) -> np.ndarray:
        """Full 3x3x3x3 stiffness in the crystal frame."""
        d = np.eye(3)
        c4 = (
            self.c12 * np.einsum("ij,kl->ijkl", d, d)
            + self.c44
            * (np.einsum("ik,jl->ijkl", d, d) + np.einsum("il,jk->ijkl", d, d))
        )
        extra = self.c11 - self.c12 - 2.0 * self.c44
        for m in range(3):
            c4[m, m, m, m] += extra
        return c4


def euler_to_rotation(phi1: float, Phi: float, phi2: float) -> np.ndarray:
    """Intrinsic ZXZ rotation matrix R = Rz(phi1) Rx(Phi) Rz(phi2)."""
    c1, s1 = np.cos(phi1), np.sin(phi1)
    cP, sP = np.cos(Phi), np.sin(Phi)
    c2, s2 = np.cos(phi2), np.sin(phi2)
    rz1 = np.array([[c1, -s1, 0.0], [s1, c1, 0.0], [0.0, 0.0, 1.0]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cP, -sP], [0.0, sP, cP]])
    rz2 = np.array([[c2, -s2, 0.0], [s2, c2, 0.0], [0.0, 0.0, 1.0]])
    return rz1 @ rx @ rz2


def random_euler(rng: np.random.Generator, count: int) -> np.ndarray:
    """Euler triples uniform w.r.t. the Haar measure on rotations."""
    phi1 = rng.uniform(0.0, 2.0 * np.pi, count)
    Phi = np.arccos(rng.uniform(-1.0, 1.0, count))
    phi2 = rng.uniform(0.0, 2.0 * np.pi, count)
    return np.stack([phi1, Phi, phi2], axis=1)


def rotate_stiffness(c: CubicConstants, rotation: np.ndarray) -> np.ndarray:
    """Rotate cubic constants into the sample frame, 6x6 output.

    C'_ijkl = R_ia R_jb R_kc R_ld C_abcd; the rotation must be proper
    orthonormal to 1e-8.
    """
    R = np.asarray(rotation, dtype=np.float64)
    if R.shape != (3, 3) or np.max(np.abs(R.T @ R - np.eye(3))) > 1e-8:
        raise ValueError("rotation must be a 3x3 orthonormal matrix")
    if np.linalg.det(R) < 0.0:
        raise ValueError("rotation must be proper (det = +1)")
    c4 = np.einsum("ia,jb,kc,ld,abcd->ijkl", R, R, R, R, c.rank4(), optimize=True)
    out = np.empty((6, 6))
    for I, (i, j) in enumerate(VOIGT_PAIRS):
        for J, (k, l) in enumerate(VOIGT_PAIRS):
            out[I, J] = c4[i, j, k, l]
    return out


@dataclass(frozen=True)
class PoreParams:
    """Ellipsoidal pore population controls."""

    count_range: tuple = (1, 2)
    semi_axis_range: tuple = (0.10, 0.22)
    vf_range: tuple = (0.004, 0.10)
    smoothing: float = 0.0
    max_tries: int = 64


@dataclass
class PoreMicrostructure:
    grid: GridSpec
    indicator: np.ndarray  # (n, n, n) uint8, 1 = pore

    def __post_init__(self):
        n = self.grid.n
        if self.indicator.shape != (n, n, n):
            raise ValueError("indicator shape does not match grid")


@dataclass
class PolycrystalMicrostructure:
    grid: GridSpec
    grain_ids: np.ndarray  # (n, n, n) int32, ids 1..G
    grain_euler: np.ndarray  # (G, 3) float64

    def __post_init__(self):
        n = self.grid.n
        if self.grain_ids.shape != (n, n, n):
            raise ValueError("grain_ids shape does not match grid")

    @property
    def num_grains(self) -> int:
        return self.grain_euler.shape[0]

    def euler_field(self) -> np.ndarray:
        """(3, n, n, n) per-voxel Euler angles."""
        return self.grain_euler[self.grain_ids - 1].transpose(3, 0, 1, 2)


def _voxel_positions(grid: GridSpec) -> np.ndarray:
    x = np.arange(grid.n) * grid.spacing
    return np.stack(np.meshgrid(x, x, x, indexing="ij"), axis=-1)


def ellipsoid_indicator(grid, center, semi_axes, rotation) -> np.ndarray:
    """Binary voxelization of one periodic ellipsoid.

    A voxel is inside when its minimum-image offset d from the center
    satisfies |diag(1/a) R^T d| <= 1.
    """
    pos = _voxel_positions(grid)
    d = pos - np.asarray(center)
    d -= np.round(d)
    local = np.einsum("ai,xyzi->xyza", np.asarray(rotation).T, d)
    q = np.sum((local / np.asarray(semi_axes)) ** 2, axis=-1)
    return (q <= 1.0).astype(np.uint8)


def gen_pore(seed: int, grid: GridSpec, params: PoreParams) -> PoreMicrostructure:
    """Draw an ellipsoidal-pore microstructure with volume fraction in range.

    Deterministic in (seed, grid, params); redraws until the volume fraction
    lands inside ``params.vf_range``, failing after ``max_tries`` attempts.
    """
    rng = np.random.default_rng(seed)
    lo, hi = params.vf_range
    for _ in range(params.max_tries):
        count = int(rng.integers(params.count_range[0], params.count_range[1] + 1))
        ind = np.zeros((grid.n,) * 3, dtype=np.uint8)
        for _ in range(count):
            center = rng.uniform(0.0, 1.0, 3)
            axes = rng.uniform(*params.semi_axis_range, 3)
            R = euler_to_rotation(*random_euler(rng, 1)[0])
            ind |= ellipsoid_indicator(grid, center, axes, R)
        if params.smoothing > 0.0:
            sm = ndimage.gaussian_filter(
                ind.astype(np.float64), params.smoothing, mode="wrap"
            )
            ind = (sm >= 0.5).astype(np.uint8)
        vf = ind.mean()
        if lo <= vf <= hi:
            return PoreMicrostructure(grid=grid, indicator=ind)
    raise RuntimeError(
        f"gen_pore(seed={seed}): no draw reached volume fraction "
        f"[{lo}, {hi}] in {params.max_tries} tries"
    )


def voronoi_assign(points: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Assign each voxel to the nearest seed point, periodic minimum image.

    Returns 1-based ids; distance ties go to the smallest id, and shifting
    every seed by one voxel shifts the id field by one voxel exactly.
    """
    pos = _voxel_positions(grid).reshape(-1, 3)
    d = pos[:, None, :] - points[None, :, :]
    d -= np.round(d)
    dist2 = np.sum(d * d, axis=-1)
    ids = np.argmin(dist2, axis=1).astype(np.int32) + 1
    return ids.reshape((grid.n,) * 3)


def gen_polycrystal(
    seed: int, grid: GridSpec, target_grains: int = 24
) -> PolycrystalMicrostructure:
    """Periodic Voronoi polycrystal with one random orientation per grain.

    Redraws the seed points if any grain comes out empty so ids 1..G are
    all realized.
    """
    rng = np.random.default_rng(seed)
    for _ in range(64):
        pts = rng.uniform(0.0, 1.0, (target_grains, 3))
        ids = voronoi_assign(pts, grid)
        if len(np.unique(ids)) == target_grains:
            euler = random_euler(rng, target_grains)
            return PolycrystalMicrostructure(
                grid=grid, grain_ids=ids, grain_euler=euler
            )
    raise RuntimeError(
        f"gen_polycrystal(seed={seed}): could not realize {target_grains} "
        f"non-empty grains on an n={grid.n} grid"
    )


def _block_majority(labels: np.ndarray, factor: int, tie_lowest: bool) -> np.ndarray:
    n = labels.shape[-1]
    m = n // factor
    r = (
        labels.reshape(m, factor, m, factor, m, factor)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(m, m, m, factor**3)
    )
    out = np.empty((m, m, m), dtype=labels.dtype)
    for i in range(m):
        for j in range(m):
            for k in range(m):
                counts = np.bincount(r[i, j, k])
                # argmax returns the first maximum, i.e. the smallest label.
                out[i, j, k] = np.argmax(counts)
    return out


def downsample_microstructure(ms, factor: int):
    """Coarsen a microstructure by per-block majority vote.

    Pore ties resolve to matrix (0); grain-id ties resolve to the smallest
    id. Orientations are carried over unchanged (ids keep their meaning).
    """
    n = ms.grid.n
    if factor < 1 or n % factor != 0:
        raise ValueError(f"factor {factor} does not divide grid size {n}")
    lo_grid = GridSpec.cubic(n // factor)
    if isinstance(ms, PoreMicrostructure):
        # Majority with ties to matrix: pore wins only on strict majority.
        counts = ms.indicator.reshape(
            lo_grid.n, factor, lo_grid.n, factor, lo_grid.n, factor
        ).sum(axis=(1, 3, 5))
        ind = (counts > factor**3 / 2.0).astype(np.uint8)
        return PoreMicrostructure(grid=lo_grid, indicator=ind)
    if isinstance(ms, PolycrystalMicrostructure):
        ids = _block_majority(ms.grain_ids, factor, tie_lowest=True)
        return PolycrystalMicrostructure(
            grid=lo_grid, grain_ids=ids, grain_euler=ms.grain_euler.copy()
        )
    raise TypeError(f"unsupported microstructure type {type(ms).__name__}")


def pore_mask_lr(ms: PoreMicrostructure, factor: int) -> np.ndarray:
    """Loss mask g = 1 - m at low resolution (1 keeps a voxel)."""
    lo = downsample_microstructure(ms, factor)
    return (1 - lo.indicator).astype(np.float64)


def _vectorize66(mat: np.ndarray) -> np.ndarray:
    return np.array([mat[i, j] for i, j in TRI_PAIRS])


def featurize(ms, c: CubicConstants, pore_scale: float = 1e-3) -> np.ndarray:
    """Per-voxel stiffness as 21 channels (upper triangle, row-major).

    Pore microstructures get the matrix stiffness everywhere and
    ``pore_scale`` times it inside pores; polycrystals get the cubic
    constants rotated into each grain's frame.
    """
    n = ms.grid.n
    if isinstance(ms, PoreMicrostructure):
        if not 0.0 < pore_scale <= 1.0:
            raise ValueError(f"pore_scale must be in (0, 1], got {pore_scale}")
        vec = _vectorize66(rotate_stiffness(c, np.eye(3)))
        scale = np.where(ms.indicator == 1, pore_scale, 1.0)
        return vec[:, None, None, None] * scale[None]
    if isinstance(ms, PolycrystalMicrostructure):
        table = np.stack(
            [
                _vectorize66(rotate_stiffness(c, euler_to_rotation(*ang)))
                for ang in ms.grain_euler
            ]
        )  # (G, 21)
        return table[ms.grain_ids - 1].transpose(3, 0, 1, 2)
    raise TypeError(f"unsupported microstructure type {type(ms).__name__}")


def expand_stiffness(feat: np.ndarray) -> np.ndarray:
    """(21, n, n, n) featurization -> full symmetric (6, 6, n, n, n)."""
    if feat.shape[0] != 21:
        raise ValueError(f"expected 21 channels, got {feat.shape[0]}")
    n = feat.shape[-1]
    mat = np.empty((6, 6) + feat.shape[1:], dtype=feat.dtype)
    for I, (i, j) in enumerate(TRI_PAIRS):
        mat[i, j] = feat[I]
        mat[j, i] = feat[I]
    return mat


def apply_stiffness(mat: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Voxel-wise sigma = C : eps in 6-channel storage.

    ``mat`` is (6, 6, n, n, n) (or (6, 6) constant), ``eps`` (..., 6, n, n, n)
    with tensor shear components; the factor 2 on shears is applied here.
    """
    w = _VOIGT_WEIGHT.astype(eps.dtype)
    weighted = eps * w[:, None, None, None]
    if mat.ndim == 2:
        return np.einsum("ij,...jxyz->...ixyz", mat, weighted)
    return np.einsum("ijxyz,...jxyz->...ixyz", mat, weighted)

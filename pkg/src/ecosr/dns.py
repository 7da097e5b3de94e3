"""Spectral small-strain elasticity solver on periodic voxel grids.

The Lippmann-Schwinger fixed point is iterated in its basic-scheme form:
the strain update is the isotropic-reference Green operator applied to the
current stress, with the zero-frequency strain pinned to the prescribed
mean. Continuous angular frequencies xi_k = 2 pi k enter the Green operator;
on even grids the Nyquist planes are excluded from the update. The reference
medium (lambda0, mu0) is the isotropic projection, in the Kelvin metric, of
the voxel-averaged stiffness.

Convergence is declared when the relative strain update
||eps_new - eps_old|| / ||eps_bar|| (9-component Frobenius norms, shears
counted twice) drops below ``tol``; growth of the update to ten times its
initial size is reported as a numerics failure naming the phase contrast and
reference moduli. Everything here runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ecosr.fieldcore import Field, FieldKind, GridSpec, VOIGT_INDEX, VOIGT_PAIRS
from ecosr.microgen import apply_stiffness, expand_stiffness

__all__ = [
    "DnsNumericsError",
    "LoadingCondition",
    "DnsSolution",
    "reference_medium",
    "spectral_grids",
    "green_operator_apply",
    "solve_elastic_fft",
]

# Shear channels count twice in tensor contractions.
_W9 = np.array([1.0, 1.0, 1.0, 2.0, 2.0, 2.0])


class DnsNumericsError(RuntimeError):
    """The fixed-point iteration lost contraction or produced non-finite values."""


@dataclass(frozen=True)
class LoadingCondition:
    """Prescribed mean strain, 6-channel tensor components."""

    mean_strain: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.mean_strain, dtype=np.float64)
        if arr.shape != (6,):
            raise ValueError(f"mean_strain must have shape (6,), got {arr.shape}")
        object.__setattr__(self, "mean_strain", arr)

    @classmethod
    def uniaxial(cls, axis: int, magnitude: float) -> "LoadingCondition":
        if axis not in (0, 1, 2):
            raise ValueError(f"axis must be 0, 1, or 2, got {axis}")
        e = np.zeros(6)
        e[axis] = magnitude
        return cls(mean_strain=e)


@dataclass
class DnsSolution:
    grid: GridSpec
    strain: Field
    stress: Field
    iterations: int
    residuals: np.ndarray
    converged: bool
    lam0: float
    mu0: float


def reference_medium(mat: np.ndarray) -> tuple:
    """Isotropic (lambda0, mu0) closest to the voxel-averaged stiffness.

    Kelvin-metric projection of the mean 6x6: with A the sum of the
    upper-left 3x3 block and B = tr(upper 3x3) + 2 tr(shear diagonal),
    kappa = A/9 and mu = (B - A/3)/10.
    """
    m = np.asarray(mat, dtype=np.float64)
    mbar = m if m.ndim == 2 else m.mean(axis=tuple(range(2, m.ndim)))
    if mbar.shape != (6, 6):
        raise ValueError(f"stiffness must be (6, 6, ...), got {np.shape(mat)}")
    a = mbar[:3, :3].sum()
    b = np.trace(mbar[:3, :3]) + 2.0 * (mbar[3, 3] + mbar[4, 4] + mbar[5, 5])
    kappa = a / 9.0
    mu0 = (b - a / 3.0) / 10.0
    lam0 = kappa - 2.0 * mu0 / 3.0
    if mu0 <= 0.0 or kappa <= 0.0:
        raise DnsNumericsError(
            f"reference medium not positive definite (kappa={kappa:.3e}, "
            f"mu={mu0:.3e}); the stiffness field is unphysical"
        )
    return lam0, mu0


def spectral_grids(n: int, rfft: bool = True):
    """Angular frequency arrays and the suppression mask for an n-grid.

    Returns ``(xi, suppress)`` where ``xi`` is a list of three broadcast
    (angular) frequency volumes and ``suppress`` marks the zero mode plus,
    on even grids, every mode with an axis at the Nyquist frequency.
    """
    k = np.fft.fftfreq(n, d=1.0 / n)  # integer cycles per cell
    kz = np.fft.rfftfreq(n, d=1.0 / n) if rfft else k
    kx = k[:, None, None]
    ky = k[None, :, None]
    kzz = kz[None, None, :]
    shape = (n, n, kz.size)
    xi = [
        np.broadcast_to(2.0 * np.pi * kx, shape),
        np.broadcast_to(2.0 * np.pi * ky, shape),
        np.broadcast_to(2.0 * np.pi * kzz, shape),
    ]
    zero = (kx == 0) & (ky == 0) & (kzz == 0)
    suppress = np.broadcast_to(zero, shape).copy()
    if n % 2 == 0:
        nyq = n // 2
        for comp in (kx, ky, kzz):
            suppress |= np.broadcast_to(np.abs(comp) == nyq, shape)
    return xi, suppress


def green_operator_apply(tau_hat, lam0, mu0, freqs, suppress=None):
    """Strain response of the isotropic reference medium, in Fourier space.

    For each mode, t = tau . xi, u = N^-1 t with the acoustic tensor
    N = mu0 |xi|^2 I + (lam0 + mu0) xi xi^T, and the output is
    sym(xi (x) u). Suppressed modes (zero mode; Nyquist planes) return 0.
    """
    if mu0 <= 0.0 or lam0 + 2.0 * mu0 <= 0.0:
        raise DnsNumericsError(
            f"reference medium (lambda0={lam0:.3e}, mu0={mu0:.3e}) is not "
            "strongly elliptic"
        )
    xi = freqs
    xi2 = xi[0] ** 2 + xi[1] ** 2 + xi[2] ** 2
    if suppress is None:
        suppress = xi2 == 0.0
    safe = np.where(xi2 > 0.0, xi2, 1.0)
    t = [
        sum(tau_hat[..., VOIGT_INDEX[i][j], :, :, :] * xi[j] for j in range(3))
        for i in range(3)
    ]
    xt = t[0] * xi[0] + t[1] * xi[1] + t[2] * xi[2]
    c = (lam0 + mu0) / (lam0 + 2.0 * mu0)
    u = [(t[i] - c * xi[i] * xt / safe) / (mu0 * safe) for i in range(3)]
    comps = []
    for i, j in VOIGT_PAIRS:
        if i == j:
            comps.append(xi[i] * u[i])
        else:
            comps.append(0.5 * (xi[i] * u[j] + xi[j] * u[i]))
    out = np.stack(comps, axis=-4)
    out = np.where(suppress, 0.0, out)
    return out


def _tensor_norm(eps: np.ndarray) -> float:
    """Frobenius norm over voxels with shear channels counted twice."""
    w = _W9.reshape(6, 1, 1, 1)
    return float(np.sqrt(np.sum(w * eps * eps)))


def solve_elastic_fft(mat, loading: LoadingCondition, tol=1e-6, max_iter=100):
    """Iterate the basic scheme to the prescribed tolerance.

    ``mat`` is a dense (6, 6, n, n, n) stiffness field or a (21, n, n, n)
    featurization. Returns a :class:`DnsSolution`; raises
    :class:`DnsNumericsError` on divergence or non-finite values.
    """
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim == 4 and mat.shape[0] == 21:
        mat = expand_stiffness(mat)
    if mat.ndim != 5 or mat.shape[:2] != (6, 6):
        raise ValueError(f"stiffness must be (6, 6, n, n, n), got {mat.shape}")
    n = mat.shape[-1]
    grid = GridSpec.cubic(n)
    if tol <= 0.0 or max_iter < 1:
        raise ValueError("tol must be positive and max_iter at least 1")

    lam0, mu0 = reference_medium(mat)
    xi, suppress = spectral_grids(n)
    eps_bar = loading.mean_strain
    norm_ref = _tensor_norm(np.broadcast_to(eps_bar[:, None, None, None], (6, n, n, n)))
    if norm_ref == 0.0:
        raise ValueError("loading has zero mean strain; nothing to solve")

    diag = np.einsum("iixyz->xyz", mat[:3, :3])
    contrast = float(diag.max() / max(diag.min(), np.finfo(np.float64).tiny))

    eps = np.broadcast_to(eps_bar[:, None, None, None], (6, n, n, n)).copy()
    residuals = []
    converged = False
    iterations = 0
    for it in range(1, max_iter + 1):
        iterations = it
        sigma = apply_stiffness(mat, eps)
        sig_hat = np.fft.rfftn(sigma, axes=(-3, -2, -1))
        upd_hat = green_operator_apply(sig_hat, lam0, mu0, xi, suppress)
        upd = np.fft.irfftn(upd_hat, s=(n, n, n), axes=(-3, -2, -1))
        eps = eps - upd
        res = _tensor_norm(upd) / norm_ref
        residuals.append(res)
        if not np.isfinite(res):
            raise DnsNumericsError(
                f"non-finite strain update at iteration {it} "
                f"(contrast {contrast:.3e}, reference lambda0={lam0:.4g}, "
                f"mu0={mu0:.4g})"
            )
        if res <= tol:
            converged = True
            break
        if it > 1 and res > 10.0 * residuals[0]:
            raise DnsNumericsError(
                f"basic scheme diverging: update grew from {residuals[0]:.3e} "
                f"to {res:.3e} by iteration {it}; phase contrast {contrast:.3e} "
                f"is too strong for the voxel-average reference medium "
                f"(lambda0={lam0:.4g}, mu0={mu0:.4g})"
            )

    sigma = apply_stiffness(mat, eps)
    return DnsSolution(
        grid=grid,
        strain=Field(grid, FieldKind.SYMTENSOR, eps),
        stress=Field(grid, FieldKind.SYMTENSOR, sigma),
        iterations=iterations,
        residuals=np.asarray(residuals),
        converged=converged,
        lam0=lam0,
        mu0=mu0,
    )


def defgrad_from_strain(strain, mean_strain=None) -> np.ndarray:
    """Deformation gradient recovered from a compatible strain field.

    The symmetric strain hides the rotation part of the displacement
    gradient; for a periodic compatible field the full gradient is
    recoverable mode by mode, since ``eps_hat = sym(xi (x) u_hat)`` can be
    inverted for ``xi (x) u_hat`` wherever ``xi != 0``. The formula is
    homogeneous of degree zero in ``xi``, so it shares whatever frequency
    convention produced the strain. Suppressed modes (zero mode, Nyquist
    planes), which the solver keeps empty, contribute nothing.

    Returns the row-major 9-channel field ``F = I + mean + grad u`` where
    ``mean`` is ``mean_strain`` (default: the spatial mean of ``strain``)
    placed symmetrically, matching a rotation-free prescribed loading.
    """
    eps = np.asarray(getattr(strain, "data", strain), dtype=np.float64)
    if eps.ndim != 4 or eps.shape[0] != 6:
        raise ValueError(f"strain must be (6, n, n, n), got {eps.shape}")
    n = eps.shape[-1]
    mean = (
        eps.mean(axis=(1, 2, 3))
        if mean_strain is None
        else np.asarray(mean_strain, dtype=np.float64).reshape(6)
    )
    fluct = eps - eps.mean(axis=(1, 2, 3))[:, None, None, None]

    eh = np.fft.rfftn(fluct, axes=(-3, -2, -1))
    xi, suppress = spectral_grids(n)
    q = xi[0] ** 2 + xi[1] ** 2 + xi[2] ** 2
    safe = np.where(q > 0.0, q, 1.0)
    t = [
        sum(eh[VOIGT_INDEX[i][j]] * xi[i] for i in range(3)) for j in range(3)
    ]
    s = t[0] * xi[0] + t[1] * xi[1] + t[2] * xi[2]
    grad = np.empty((9, n, n, n), dtype=np.float64)
    for j in range(3):
        for k in range(3):
            gh = 2.0 * t[j] * xi[k] / safe - xi[j] * xi[k] * s / safe**2
            gh = np.where(suppress, 0.0, gh)
            grad[3 * j + k] = np.fft.irfftn(gh, s=(n, n, n), axes=(-3, -2, -1))

    for j in range(3):
        for k in range(3):
            c = 3 * j + k
            grad[c] += mean[VOIGT_INDEX[j][k]]
            if j == k:
                grad[c] += 1.0
    return grad

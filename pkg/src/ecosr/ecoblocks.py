"""Output blocks that make conservation laws architectural.

The equilibrium block assembles a stress field from three scalar potentials
(f, g, h) so that the discrete row divergence cancels term by term:

    sigma_11 = a f_22 + b g_33      sigma_23 = -c h_23
    sigma_22 = a f_11 + c h_33      sigma_13 = -b g_13
    sigma_33 = b g_11 + c h_22      sigma_12 = -a f_12

with every second derivative the composition d1 o d1, (a, b, c) constant per
sample, plus a constant mean stress. Because shifted copies of one stencil
commute, fd_div of the result is zero to rounding, not to truncation order.

The compatibility block emits the symmetrized discrete gradient of a
displacement potential plus a constant mean strain, so its incompatibility
vanishes identically and its spatial mean is the prescribed loading. The
deformation-gradient variant reuses the unsymmetrized gradient.

The three-potential span is a subspace of all divergence-free fields (the
fully general construction would need six Beltrami potentials); the mean
offsets restore the constant component, and the supervised losses live in
the remaining gap.

All functions act on the trailing three axes, support leading batch axes,
preserve dtype, and ship exact adjoints for reverse-mode differentiation.
"""

from __future__ import annotations

import numpy as np

from ecosr.fieldcore import d1, d2, grad_vector, sym_grad

__all__ = [
    "equilibrium_block",
    "equilibrium_adjoint",
    "compatibility_block",
    "compatibility_adjoint",
    "defgrad_block",
    "defgrad_adjoint",
]


def _expand(vec: np.ndarray, comp: int) -> np.ndarray:
    """(..., k) per-sample vectors -> broadcastable (..., 1, 1, 1) factors."""
    return np.asarray(vec)[..., comp, None, None, None]


def _second_derivs(p: np.ndarray, spacing: float):
    """The nine d1 o d1 fields the equilibrium assembly needs."""
    f = p[..., 0, :, :, :]
    g = p[..., 1, :, :, :]
    h = p[..., 2, :, :, :]
    return {
        "f11": d2(f, 0, 0, spacing),
        "f22": d2(f, 1, 1, spacing),
        "f12": d2(f, 0, 1, spacing),
        "g11": d2(g, 0, 0, spacing),
        "g33": d2(g, 2, 2, spacing),
        "g13": d2(g, 0, 2, spacing),
        "h22": d2(h, 1, 1, spacing),
        "h33": d2(h, 2, 2, spacing),
        "h23": d2(h, 1, 2, spacing),
    }


def equilibrium_block(p, abc, mean_stress, spacing: float) -> np.ndarray:
    """Divergence-free stress from potentials, (..., 3, n, n, n) -> (..., 6, n, n, n).

    ``abc`` has shape (3,) or (..., 3) per sample; ``mean_stress`` likewise
    (6,) or (..., 6). Output channels follow (11, 22, 33, 23, 13, 12).
    """
    p = np.asarray(p)
    s = _second_derivs(p, spacing)
    a = _expand(abc, 0)
    b = _expand(abc, 1)
    c = _expand(abc, 2)
    comps = [
        a * s["f22"] + b * s["g33"],
        a * s["f11"] + c * s["h33"],
        b * s["g11"] + c * s["h22"],
        -c * s["h23"],
        -b * s["g13"],
        -a * s["f12"],
    ]
    sig = np.stack(comps, axis=-4)
    return sig + np.asarray(mean_stress)[..., :, None, None, None]


def equilibrium_adjoint(w, p, abc, spacing: float):
    """Cotangents of the equilibrium block.

    Given the output cotangent ``w`` (..., 6, n, n, n) and the forward
    inputs, returns ``(p_bar, abc_bar, mean_stress_bar)`` with shapes
    matching ``p``, (..., 3), and (..., 6). Uses d1 skew-adjointness, so
    every second difference is its own adjoint.
    """
    w = np.asarray(w)
    p = np.asarray(p)
    a = _expand(abc, 0)
    b = _expand(abc, 1)
    c = _expand(abc, 2)
    w11 = w[..., 0, :, :, :]
    w22 = w[..., 1, :, :, :]
    w33 = w[..., 2, :, :, :]
    w23 = w[..., 3, :, :, :]
    w13 = w[..., 4, :, :, :]
    w12 = w[..., 5, :, :, :]
    f_bar = a * (d2(w11, 1, 1, spacing) + d2(w22, 0, 0, spacing) - d2(w12, 0, 1, spacing))
    g_bar = b * (d2(w11, 2, 2, spacing) + d2(w33, 0, 0, spacing) - d2(w13, 0, 2, spacing))
    h_bar = c * (d2(w22, 2, 2, spacing) + d2(w33, 1, 1, spacing) - d2(w23, 1, 2, spacing))
    p_bar = np.stack([f_bar, g_bar, h_bar], axis=-4)

    s = _second_derivs(p, spacing)
    sum3 = lambda x: np.sum(x, axis=(-3, -2, -1))
    a_bar = sum3(s["f22"] * w11) + sum3(s["f11"] * w22) - sum3(s["f12"] * w12)
    b_bar = sum3(s["g33"] * w11) + sum3(s["g11"] * w33) - sum3(s["g13"] * w13)
    c_bar = sum3(s["h33"] * w22) + sum3(s["h22"] * w33) - sum3(s["h23"] * w23)
    abc_bar = np.stack([a_bar, b_bar, c_bar], axis=-1)
    mean_bar = np.sum(w, axis=(-3, -2, -1))
    return p_bar, abc_bar, mean_bar


def compatibility_block(u, mean_strain, spacing: float) -> np.ndarray:
    """Compatible strain from displacements, (..., 3, n, n, n) -> (..., 6, n, n, n).

    eps = sym_grad(u) + mean_strain; the incompatibility of the output is
    zero to rounding and its spatial mean is exactly the offset.
    """
    eps = sym_grad(np.asarray(u), spacing)
    return eps + np.asarray(mean_strain)[..., :, None, None, None]


def compatibility_adjoint(w, spacing: float):
    """Cotangents (u_bar, mean_strain_bar) of the compatibility block."""
    w = np.asarray(w)
    w11 = w[..., 0, :, :, :]
    w22 = w[..., 1, :, :, :]
    w33 = w[..., 2, :, :, :]
    w23 = w[..., 3, :, :, :]
    w13 = w[..., 4, :, :, :]
    w12 = w[..., 5, :, :, :]
    u1 = -d1(w11, 0, spacing) - 0.5 * (d1(w12, 1, spacing) + d1(w13, 2, spacing))
    u2 = -d1(w22, 1, spacing) - 0.5 * (d1(w12, 0, spacing) + d1(w23, 2, spacing))
    u3 = -d1(w33, 2, spacing) - 0.5 * (d1(w13, 0, spacing) + d1(w23, 1, spacing))
    u_bar = np.stack([u1, u2, u3], axis=-4)
    mean_bar = np.sum(w, axis=(-3, -2, -1))
    return u_bar, mean_bar


def defgrad_block(u, mean_defgrad, spacing: float) -> np.ndarray:
    """Deformation gradient F = Grad u + mean, (..., 3, ...) -> (..., 9, ...).

    Row-major channels; ``mean_defgrad`` carries the identity plus the mean
    displacement gradient, so u = 0 yields a constant F.
    """
    g = grad_vector(np.asarray(u), spacing)
    return g + np.asarray(mean_defgrad)[..., :, None, None, None]


def defgrad_adjoint(w, spacing: float):
    """Cotangents (u_bar, mean_defgrad_bar) of the deformation-gradient block."""
    w = np.asarray(w)
    rows = []
    for i in range(3):
        acc = None
        for j in range(3):
            term = -d1(w[..., 3 * i + j, :, :, :], j, spacing)
            acc = term if acc is None else acc + term
        rows.append(acc)
    u_bar = np.stack(rows, axis=-4)
    mean_bar = np.sum(w, axis=(-3, -2, -1))
    return u_bar, mean_bar

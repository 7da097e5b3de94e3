"""Stencil, downsampling, and mean contracts for periodic voxel fields.

Every differential identity is checked against a direct index-loop oracle
that shares no code with the vectorized implementation.
"""

import math

import numpy as np
import pytest

from ecosr.fieldcore import (
    Field,
    FieldKind,
    GridSpec,
    VOIGT_INDEX,
    VOIGT_PAIRS,
    block_mean,
    d1,
    downsample,
    downsample_adjoint,
    fd_div,
    fd_grad,
    incompatibility,
    spatial_mean,
    sym_grad,
)


def _loop_d1(a, axis, h):
    """Central periodic first difference, plain Python loops."""
    n0, n1, n2 = a.shape
    out = np.zeros_like(a)
    for i in range(n0):
        for j in range(n1):
            for k in range(n2):
                idx = [i, j, k]
                up = idx.copy()
                dn = idx.copy()
                up[axis] = (idx[axis] + 1) % a.shape[axis]
                dn[axis] = (idx[axis] - 1) % a.shape[axis]
                out[i, j, k] = (a[tuple(up)] - a[tuple(dn)]) / (2.0 * h)
    return out


def _rng(seed):
    return np.random.default_rng(seed)


class TestD1:
    def test_sine_closed_form(self):
        # Central difference of sin(2 pi x) is cos(2 pi x) * sin(2 pi h) / h.
        n = 64
        grid = GridSpec.cubic(n)
        x = (np.arange(n) + 0.0) * grid.spacing
        s = np.sin(2.0 * np.pi * x)[:, None, None] * np.ones((n, n, n))
        f = Field(grid, FieldKind.SCALAR, s[None])
        g = fd_grad(f, axis=0)
        expected = (
            np.cos(2.0 * np.pi * x)[:, None, None]
            * (np.sin(2.0 * np.pi * grid.spacing) / grid.spacing)
        )
        assert np.max(np.abs(g.data[0] - expected)) < 1e-12

    def test_ramp_interior_constant(self):
        n = 16
        grid = GridSpec.cubic(n)
        x = np.arange(n) * grid.spacing
        s = np.broadcast_to(x[:, None, None], (n, n, n)).copy()
        g = fd_grad(Field(grid, FieldKind.SCALAR, s[None]), axis=0)
        # Away from the wrap seam the derivative is exactly 1.
        assert np.all(g.data[0, 1 : n - 1] == 1.0)

    def test_matches_loop_oracle(self):
        n = 6
        grid = GridSpec.cubic(n)
        a = _rng(0).standard_normal((n, n, n))
        for axis in range(3):
            got = d1(a, axis, grid.spacing)
            want = _loop_d1(a, axis, grid.spacing)
            assert np.allclose(got, want, rtol=0, atol=1e-13)

    def test_linearity(self):
        n = 8
        h = 1.0 / n
        r = _rng(1)
        a = r.standard_normal((n, n, n))
        b = r.standard_normal((n, n, n))
        lhs = d1(2.5 * a - 1.25 * b, 1, h)
        rhs = 2.5 * d1(a, 1, h) - 1.25 * d1(b, 1, h)
        assert np.allclose(lhs, rhs, atol=1e-13)

    def test_skew_adjoint(self):
        # <d1 f, g> = <f, -d1 g> with the plain voxel-sum inner product.
        n = 8
        h = 1.0 / n
        r = _rng(2)
        f = r.standard_normal((n, n, n))
        g = r.standard_normal((n, n, n))
        for axis in range(3):
            lhs = np.sum(d1(f, axis, h) * g)
            rhs = np.sum(f * (-d1(g, axis, h)))
            assert abs(lhs - rhs) < 1e-10

    def test_batched_axes(self):
        # d1 acts on the trailing three axes regardless of leading shape.
        n = 5
        h = 1.0 / n
        a = _rng(3).standard_normal((2, 4, n, n, n))
        got = d1(a, 2, h)
        for i in range(2):
            for c in range(4):
                assert np.allclose(got[i, c], d1(a[i, c], 2, h), atol=0)


class TestDiv:
    def test_loop_oracle(self):
        n = 6
        grid = GridSpec.cubic(n)
        t = _rng(4).standard_normal((6, n, n, n))
        got = fd_div(Field(grid, FieldKind.SYMTENSOR, t))
        want = np.zeros((3, n, n, n))
        for i in range(3):
            for j in range(3):
                want[i] += _loop_d1(t[VOIGT_INDEX[i][j]], j, grid.spacing)
        assert np.allclose(got.data, want, atol=1e-12)

    def test_single_channel_sine(self):
        n = 32
        grid = GridSpec.cubic(n)
        x = np.arange(n) * grid.spacing
        t = np.zeros((6, n, n, n))
        t[0] = np.sin(2.0 * np.pi * x)[:, None, None]
        got = fd_div(Field(grid, FieldKind.SYMTENSOR, t))
        expected = (
            np.cos(2.0 * np.pi * x)[:, None, None]
            * (np.sin(2.0 * np.pi * grid.spacing) / grid.spacing)
        ) * np.ones((n, n, n))
        assert np.allclose(got.data[0], expected, atol=1e-12)
        assert np.allclose(got.data[1:], 0.0, atol=1e-14)

    def test_adjoint_identity(self):
        n = 8
        grid = GridSpec.cubic(n)
        r = _rng(5)
        t = r.standard_normal((6, n, n, n))
        v = r.standard_normal((3, n, n, n))
        div_t = fd_div(Field(grid, FieldKind.SYMTENSOR, t)).data
        # Channelwise adjoint assembled from d1 skew-adjointness.
        adj = np.zeros((6, n, n, n))
        h = grid.spacing
        for i in range(3):
            for j in range(3):
                adj[VOIGT_INDEX[i][j]] += -d1(v[i], j, h)
        lhs = np.sum(div_t * v)
        rhs = np.sum(t * adj)
        assert abs(lhs - rhs) / max(abs(lhs), 1.0) < 1e-10


class TestIncompatibility:
    @staticmethod
    def _loop_inc(e9, h):
        """inc(e)_ij = -e_ij,kk - e_kk,ij + e_ik,jk + e_jk,ik with d1 o d1."""

        def dd(a, ax1, ax2):
            return _loop_d1(_loop_d1(a, ax1, h), ax2, h)

        n = e9.shape[-1]
        out = np.zeros((3, 3, n, n, n))
        tr = e9[0, 0] + e9[1, 1] + e9[2, 2]
        for i in range(3):
            for j in range(3):
                acc = np.zeros((n, n, n))
                for k in range(3):
                    acc -= dd(e9[i, j], k, k)
                acc -= dd(tr, i, j)
                for k in range(3):
                    acc += dd(e9[i, k], j, k)
                    acc += dd(e9[j, k], i, k)
                out[i, j] = acc
        return out

    def test_loop_oracle_random(self):
        n = 6
        grid = GridSpec.cubic(n)
        e = _rng(6).standard_normal((6, n, n, n))
        e9 = np.zeros((3, 3, n, n, n))
        for c, (i, j) in enumerate(VOIGT_PAIRS):
            e9[i, j] = e[c]
            e9[j, i] = e[c]
        want = self._loop_inc(e9, grid.spacing)
        got = incompatibility(Field(grid, FieldKind.SYMTENSOR, e))
        for c, (i, j) in enumerate(VOIGT_PAIRS):
            assert np.allclose(got.data[c], want[i, j], atol=1e-10)

    def test_single_mode_nonzero(self):
        n = 16
        grid = GridSpec.cubic(n)
        y = np.arange(n) * grid.spacing
        e = np.zeros((6, n, n, n))
        e[0] = np.sin(2.0 * np.pi * y)[None, :, None]
        inc = incompatibility(Field(grid, FieldKind.SYMTENSOR, e))
        assert np.max(np.abs(inc.data)) > 1.0

    def test_annihilates_symmetric_gradients(self):
        n = 12
        grid = GridSpec.cubic(n)
        u = _rng(7).standard_normal((3, n, n, n))
        e = sym_grad(u, grid.spacing)
        inc = incompatibility(Field(grid, FieldKind.SYMTENSOR, e))
        scale = max(np.max(np.abs(e)), 1.0)
        assert np.max(np.abs(inc.data)) < 1e-12 * scale * n * n


class TestDownsample:
    def test_checkerboard_zeros(self):
        n = 4
        grid = GridSpec.cubic(n)
        i, j, k = np.indices((n, n, n))
        cb = np.where((i + j + k) % 2 == 0, 1.0, -1.0)
        out = downsample(Field(grid, FieldKind.SCALAR, cb[None]), 2)
        assert np.all(out.data == 0.0)

    def test_block_mean_loop_oracle(self):
        n, f = 8, 2
        grid = GridSpec.cubic(n)
        a = _rng(8).standard_normal((2, n, n, n))
        data = np.vstack([a, a[:1]])
        out = downsample(Field(grid, FieldKind.VECTOR, data), f)
        m = n // f
        for c in range(3):
            for i in range(m):
                for j in range(m):
                    for k in range(m):
                        block = data[
                            c,
                            i * f : (i + 1) * f,
                            j * f : (j + 1) * f,
                            k * f : (k + 1) * f,
                        ]
                        assert abs(out.data[c, i, j, k] - block.mean()) < 1e-14

    def test_mean_preserved(self):
        n = 16
        grid = GridSpec.cubic(n)
        a = _rng(9).standard_normal((6, n, n, n))
        f = Field(grid, FieldKind.SYMTENSOR, a)
        for factor in (2, 4):
            lo = downsample(f, factor)
            assert np.allclose(
                spatial_mean(lo), spatial_mean(f), rtol=0, atol=1e-13
            )

    def test_grid_metadata(self):
        grid = GridSpec.cubic(16)
        f = Field(grid, FieldKind.SCALAR, np.ones((1, 16, 16, 16)))
        lo = downsample(f, 2)
        assert lo.grid.n == 8
        assert lo.grid.spacing == pytest.approx(1.0 / 8)

    def test_indivisible_factor_rejected(self):
        grid = GridSpec.cubic(6)
        f = Field(grid, FieldKind.SCALAR, np.zeros((1, 6, 6, 6)))
        with pytest.raises(ValueError):
            downsample(f, 4)

    def test_adjoint_identity(self):
        n, f = 8, 2
        r = _rng(10)
        hi = r.standard_normal((4, n, n, n))
        lo = r.standard_normal((4, n // f, n // f, n // f))
        lhs = np.sum(block_mean(hi, f) * lo)
        rhs = np.sum(hi * downsample_adjoint(lo, f))
        assert abs(lhs - rhs) / max(abs(lhs), 1.0) < 1e-12


class TestSpatialMean:
    def test_constant_exact(self):
        grid = GridSpec.cubic(8)
        f = Field(grid, FieldKind.SCALAR, np.full((1, 8, 8, 8), 0.1))
        assert spatial_mean(f)[0] == 0.1

    def test_matches_fsum(self):
        n = 8
        grid = GridSpec.cubic(n)
        a = _rng(11).standard_normal((3, n, n, n)) * 1e8
        got = spatial_mean(Field(grid, FieldKind.VECTOR, a))
        for c in range(3):
            want = math.fsum(a[c].ravel().tolist()) / n**3
            assert got[c] == pytest.approx(want, rel=0, abs=1e-9)

    def test_cancellation_stability(self):
        n = 4
        grid = GridSpec.cubic(n)
        a = np.zeros((1, n, n, n))
        flat = a.reshape(1, -1)
        half = (n**3 - 2) // 2
        flat[0, :half] = 1e16
        flat[0, half : 2 * half] = -1e16
        flat[0, -1] = 1.0
        got = spatial_mean(Field(grid, FieldKind.SCALAR, a))
        assert got[0] == pytest.approx(1.0 / n**3, rel=1e-12)


class TestFieldValidation:
    def test_channel_mismatch_rejected(self):
        grid = GridSpec.cubic(4)
        with pytest.raises(ValueError):
            Field(grid, FieldKind.VECTOR, np.zeros((6, 4, 4, 4)))

    def test_grid_mismatch_rejected(self):
        grid = GridSpec.cubic(4)
        with pytest.raises(ValueError):
            Field(grid, FieldKind.SCALAR, np.zeros((1, 4, 4, 5)))

    def test_kind_channel_counts(self):
        assert FieldKind.SCALAR.channels == 1
        assert FieldKind.VECTOR.channels == 3
        assert FieldKind.SYMTENSOR.channels == 6
        assert FieldKind.TENSOR2.channels == 9

"""A small 3D conv encoder-decoder with built-in reverse mode and AdamW.

The network is a 2-3 level UNet-lite: conv -> group-norm -> activation
blocks, average-pool down, nearest-neighbor up, skip connections by channel
concatenation. All convolutions pad periodically, so the whole forward map
commutes with lattice translations (up to pooling alignment).

Differentiation is reverse mode over a fixed op set. Every op records a
closure on a tape; ``backward`` seeds the output cotangents and replays the
tape in reverse. Parameters are plain numpy arrays held in a ``ParamStore``
together with AdamW moments; inputs passed as raw arrays are treated as
constants and receive no gradient.

The prediction heads route the backbone output through the hard-constraint
blocks: in the strongly constrained mode the six backbone channels split
into a displacement potential and a stress potential, in the weak mode the
head emits the kinematic field directly and stress follows from the
constitutive map.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import erf

from ecosr.ecoblocks import (
    compatibility_adjoint,
    defgrad_adjoint,
    equilibrium_adjoint,
    equilibrium_block,
)
from ecosr.fieldcore import (
    block_mean,
    downsample_adjoint,
    grad_vector,
    sym_grad,
    upsample_nearest,
    upsample_nearest_adjoint,
)
from ecosr.microgen import expand_stiffness

__all__ = [
    "Var",
    "Tape",
    "conv3d",
    "group_norm",
    "activate",
    "dropout",
    "avg_pool2",
    "upsample2",
    "concat_channels",
    "slice_channels",
    "global_mean_pool",
    "dense",
    "add_scalar",
    "NetConfig",
    "ParamStore",
    "ParamTensor",
    "ECONet",
    "NetOutput",
    "init_net",
    "forward",
    "backward",
    "adamw_step",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)
_STRESS_WEIGHT = np.array([1.0, 1.0, 1.0, 2.0, 2.0, 2.0])


class Var:
    """A value in the computation graph plus its accumulated cotangent."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = value
        self.grad = None


class Tape:
    """Recorded backward closures, replayed once in reverse order."""

    def __init__(self):
        self._ops = []
        self._consumed = False

    def push(self, fn):
        self._ops.append(fn)

    def run_backward(self):
        if self._consumed:
            raise RuntimeError("tape already replayed; rerun forward to rebuild the cache")
        self._consumed = True
        for fn in reversed(self._ops):
            fn()


def _val(x):
    return x.value if isinstance(x, Var) else x


def _acc(x, g):
    if isinstance(x, Var):
        x.grad = g if x.grad is None else x.grad + g


# ---------------------------------------------------------------------------
# primitive ops


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Unfold periodic kxkxk neighborhoods into a (C*k^3, n^3) matrix.

    Row order is (channel, dx, dy, dz), matching how a (C_out, C_in, k, k, k)
    kernel flattens, so convolution is a single plain matmul.
    """
    pad = k // 2
    xp = np.pad(x, ((0, 0),) + ((pad, pad),) * 3, mode="wrap")
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    c = x.shape[0]
    n3 = x.shape[1] * x.shape[2] * x.shape[3]
    return win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(c * k**3, n3)


def _conv_from_cols(cols: np.ndarray, w: np.ndarray, b, spatial) -> np.ndarray:
    c_out = w.shape[0]
    y = w.reshape(c_out, -1) @ cols
    if b is not None:
        y += b[:, None]
    return y.reshape((c_out,) + spatial)


def _conv_apply(x: np.ndarray, w: np.ndarray, b) -> np.ndarray:
    return _conv_from_cols(_im2col(x, w.shape[2]), w, b, x.shape[1:])


def conv3d(tape: Tape, x, w, b) -> Var:
    """Periodic same-size cross-correlation, kernel (C_out, C_in, k, k, k).

    The unfolded input is kept on the closure so the weight gradient reuses
    it instead of re-unfolding; it is released once the backward step runs.
    """
    xv, wv, bv = _val(x), _val(w), _val(b)
    cols = _im2col(xv, wv.shape[2])
    out = Var(_conv_from_cols(cols, wv, bv, xv.shape[1:]))
    saved = [cols]

    def bwd():
        g = out.grad
        if g is None:
            saved.clear()
            return
        c_out = wv.shape[0]
        if isinstance(w, Var):
            gmat = g.reshape(c_out, -1)
            _acc(w, (gmat @ saved[0].T).reshape(wv.shape))
        saved.clear()
        if isinstance(b, Var):
            _acc(b, g.sum(axis=(1, 2, 3)))
        if isinstance(x, Var):
            wt = wv[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
            _acc(x, _conv_apply(g, np.ascontiguousarray(wt), None))

    tape.push(bwd)
    return out


def group_norm(tape: Tape, x, scale, shift, groups: int, eps: float = 1e-5) -> Var:
    """Normalize each channel group to zero mean, unit variance; affine per channel."""
    xv, sv, hv = _val(x), _val(scale), _val(shift)
    c = xv.shape[0]
    if c % groups:
        raise ValueError(f"{c} channels not divisible into {groups} groups")
    grouped = xv.reshape(groups, -1)
    mu = grouped.mean(axis=1, keepdims=True)
    var = grouped.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((grouped - mu) * inv).reshape(xv.shape)
    out = Var(sv[:, None, None, None] * xhat + hv[:, None, None, None])

    def bwd():
        g = out.grad
        if g is None:
            return
        if isinstance(scale, Var):
            _acc(scale, np.sum(g * xhat, axis=(1, 2, 3)))
        if isinstance(shift, Var):
            _acc(shift, g.sum(axis=(1, 2, 3)))
        if isinstance(x, Var):
            dxhat = (g * sv[:, None, None, None]).reshape(groups, -1)
            xh = xhat.reshape(groups, -1)
            m1 = dxhat.mean(axis=1, keepdims=True)
            m2 = (dxhat * xh).mean(axis=1, keepdims=True)
            _acc(x, (inv * (dxhat - m1 - xh * m2)).reshape(xv.shape))

    tape.push(bwd)
    return out


def activate(tape: Tape, x, kind: str) -> Var:
    """Elementwise nonlinearity, "gelu" (exact Gaussian CDF) or "elu"."""
    xv = _val(x)
    if kind == "gelu":
        cdf = 0.5 * (1.0 + erf(xv / math.sqrt(2.0)))
        yv = xv * cdf
        deriv = cdf + xv * np.exp(-0.5 * xv * xv) * _INV_SQRT2PI
    elif kind == "elu":
        neg = xv <= 0.0
        yv = np.where(neg, np.expm1(xv), xv)
        deriv = np.where(neg, yv + 1.0, 1.0)
    else:
        raise ValueError(f"unknown activation {kind!r}")
    out = Var(yv.astype(xv.dtype, copy=False))

    def bwd():
        if out.grad is not None:
            _acc(x, out.grad * deriv)

    tape.push(bwd)
    return out


def dropout(tape: Tape, x, rate: float, rng: np.random.Generator) -> Var:
    """Inverted dropout; scales kept entries by 1/(1-rate)."""
    xv = _val(x)
    keep = rng.random(xv.shape) >= rate
    factor = keep / (1.0 - rate)
    out = Var((xv * factor).astype(xv.dtype, copy=False))

    def bwd():
        if out.grad is not None:
            _acc(x, (out.grad * factor).astype(xv.dtype, copy=False))

    tape.push(bwd)
    return out


def avg_pool2(tape: Tape, x) -> Var:
    xv = _val(x)
    out = Var(block_mean(xv, 2))

    def bwd():
        if out.grad is not None:
            _acc(x, downsample_adjoint(out.grad, 2))

    tape.push(bwd)
    return out


def upsample2(tape: Tape, x) -> Var:
    xv = _val(x)
    out = Var(upsample_nearest(xv, 2))

    def bwd():
        if out.grad is not None:
            _acc(x, upsample_nearest_adjoint(out.grad, 2))

    tape.push(bwd)
    return out


def concat_channels(tape: Tape, xs) -> Var:
    vals = [_val(x) for x in xs]
    sizes = [v.shape[0] for v in vals]
    out = Var(np.concatenate(vals, axis=0))

    def bwd():
        g = out.grad
        if g is None:
            return
        start = 0
        for xi, size in zip(xs, sizes):
            _acc(xi, g[start : start + size])
            start += size

    tape.push(bwd)
    return out


def slice_channels(tape: Tape, x, start: int, stop: int) -> Var:
    xv = _val(x)
    out = Var(xv[start:stop])

    def bwd():
        g = out.grad
        if g is None or not isinstance(x, Var):
            return
        full = np.zeros_like(xv)
        full[start:stop] = g
        _acc(x, full)

    tape.push(bwd)
    return out


def global_mean_pool(tape: Tape, x) -> Var:
    xv = _val(x)
    size = xv.shape[1] * xv.shape[2] * xv.shape[3]
    out = Var(xv.mean(axis=(1, 2, 3)))

    def bwd():
        g = out.grad
        if g is None or not isinstance(x, Var):
            return
        dx = np.empty_like(xv)
        dx[:] = (g / size)[:, None, None, None]
        _acc(x, dx)

    tape.push(bwd)
    return out


def dense(tape: Tape, x, w, b) -> Var:
    xv, wv, bv = _val(x), _val(w), _val(b)
    out = Var(wv @ xv + bv)

    def bwd():
        g = out.grad
        if g is None:
            return
        if isinstance(w, Var):
            _acc(w, np.outer(g, xv))
        if isinstance(b, Var):
            _acc(b, g)
        if isinstance(x, Var):
            _acc(x, wv.T @ g)

    tape.push(bwd)
    return out


def add_scalar(tape: Tape, x, c: float) -> Var:
    out = Var(_val(x) + c)

    def bwd():
        if out.grad is not None:
            _acc(x, out.grad)

    tape.push(bwd)
    return out


# ---------------------------------------------------------------------------
# prediction heads


def _equil_head(tape, p, abc, mean, scale, spacing):
    """sigma = scale * equilibrium_block(p, abc, 0) + mean."""
    pv, av, mv = _val(p), _val(abc), _val(mean)
    zero = np.zeros(6, dtype=pv.dtype)
    val = scale * equilibrium_block(pv, av, zero, spacing) + mv[:, None, None, None]
    out = Var(val.astype(pv.dtype, copy=False))

    def bwd():
        g = out.grad
        if g is None:
            return
        p_bar, abc_bar, mean_bar = equilibrium_adjoint(g, pv, av, spacing)
        _acc(p, scale * p_bar)
        _acc(abc, scale * abc_bar)
        _acc(mean, mean_bar)

    tape.push(bwd)
    return out


def _compat_head(tape, u, mean_strain, scale, spacing):
    """eps = scale * sym_grad(u) + mean_strain (mean fixed by the loading)."""
    uv = _val(u)
    mean = np.asarray(mean_strain, dtype=uv.dtype)
    out = Var(scale * sym_grad(uv, spacing) + mean[:, None, None, None])

    def bwd():
        g = out.grad
        if g is None:
            return
        u_bar, _ = compatibility_adjoint(g, spacing)
        _acc(u, scale * u_bar)

    tape.push(bwd)
    return out


def _defgrad_head(tape, u, mean_defgrad, scale, spacing):
    """F = scale * Grad(u) + mean (mean carries identity plus loading)."""
    uv = _val(u)
    mean = np.asarray(mean_defgrad, dtype=uv.dtype)
    out = Var(scale * grad_vector(uv, spacing) + mean[:, None, None, None])

    def bwd():
        g = out.grad
        if g is None:
            return
        u_bar, _ = defgrad_adjoint(g, spacing)
        _acc(u, scale * u_bar)

    tape.push(bwd)
    return out


def _affine_head(tape, x, scale, offset):
    """Whitened head output to physical units: scale * x + per-channel offset."""
    xv = _val(x)
    off = np.asarray(offset, dtype=xv.dtype)
    out = Var(scale * xv + off[:, None, None, None])

    def bwd():
        if out.grad is not None:
            _acc(x, scale * out.grad)

    tape.push(bwd)
    return out


def _stiffness_head(tape, eps, stiffness):
    """sigma = C : eps per voxel, with tensor-shear doubling inside."""
    ev = _val(eps)
    weighted = ev * _STRESS_WEIGHT.reshape(6, 1, 1, 1).astype(ev.dtype)
    out = Var(np.einsum("ij...,j...->i...", stiffness, weighted))

    def bwd():
        g = out.grad
        if g is None:
            return
        back = np.einsum("ij...,i...->j...", stiffness, g)
        _acc(eps, back * _STRESS_WEIGHT.reshape(6, 1, 1, 1).astype(ev.dtype))

    tape.push(bwd)
    return out


def _cauchy_head(tape, f, stiffness):
    """sigma = T(C, F) per voxel for the weakly constrained finite-strain head."""
    from ecosr.training import cauchy_stress_field, cauchy_stress_field_vjp

    fv = _val(f)
    out = Var(cauchy_stress_field(stiffness, fv))

    def bwd():
        g = out.grad
        if g is None:
            return
        _acc(f, cauchy_stress_field_vjp(stiffness, fv, g))

    tape.push(bwd)
    return out


# ---------------------------------------------------------------------------
# parameters


class ParamTensor:
    """One learnable tensor with its AdamW state."""

    __slots__ = ("value", "decay_exempt", "m", "v", "step")

    def __init__(self, value: np.ndarray, decay_exempt: bool):
        self.value = value
        self.decay_exempt = bool(decay_exempt)
        self.m = np.zeros_like(value)
        self.v = np.zeros_like(value)
        self.step = 0


class ParamStore:
    """Ordered named tensors; iteration order is insertion order everywhere."""

    def __init__(self):
        self._tensors: dict[str, ParamTensor] = {}

    def add(self, name: str, value: np.ndarray, decay_exempt: bool = False) -> ParamTensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor = ParamTensor(np.asarray(value), decay_exempt)
        self._tensors[name] = tensor
        return tensor

    def __contains__(self, name):
        return name in self._tensors

    def __getitem__(self, name) -> ParamTensor:
        return self._tensors[name]

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def n_parameters(self) -> int:
        return sum(t.value.size for t in self._tensors.values())


@dataclass
class NetConfig:
    """Architecture knobs for the UNet-lite backbone and its heads."""

    mode: str = "seco"
    case: str = "pore"
    in_channels: int = 21
    levels: int = 2
    base_channels: int = 8
    channel_multipliers: Sequence[int] = (1, 2, 4, 8)
    kernel_size: int = 3
    activation: str = "gelu"
    norm_groups: int = 4
    dropout: float = 0.1513
    init_gain: float = 0.5
    abc_hidden: int = 16

    def __post_init__(self):
        if self.mode not in ("seco", "weco"):
            raise ValueError(f"mode must be 'seco' or 'weco', got {self.mode!r}")
        if self.case not in ("pore", "poly"):
            raise ValueError(f"case must be 'pore' or 'poly', got {self.case!r}")
        if self.levels < 1 or self.levels > len(self.channel_multipliers):
            raise ValueError("levels must fit inside channel_multipliers")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.activation not in ("gelu", "elu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        for c in self.channels():
            if c % self.norm_groups:
                raise ValueError(f"{c} channels not divisible by {self.norm_groups} groups")

    def channels(self):
        return [self.base_channels * m for m in self.channel_multipliers[: self.levels]]

    @property
    def alignment(self) -> int:
        return 2 ** (self.levels - 1)

    @property
    def kine_channels(self) -> int:
        return 6 if self.case == "pore" else 9

    @property
    def backbone_out(self) -> int:
        return 6 if self.mode == "seco" else self.kine_channels


class ECONet:
    """Config + parameters + the fixed per-loading offsets and output scales."""

    def __init__(self, config: NetConfig, params: ParamStore):
        self.config = config
        self.params = params
        self.sigma_scale = 1.0
        self.kine_scale = 1.0
        self.mean_strain = np.zeros(6)
        self.mean_defgrad = np.eye(3).reshape(9)

    @property
    def dtype(self):
        first = next(iter(self.params.items()))[1]
        return first.value.dtype

    def set_loading(self, mean_strain) -> None:
        """Pin the prescribed mean strain (and thus the mean deformation gradient)."""
        eps = np.asarray(mean_strain, dtype=np.float64).reshape(6).copy()
        self.mean_strain = eps
        f = np.eye(3)
        f[0, 0] += eps[0]
        f[1, 1] += eps[1]
        f[2, 2] += eps[2]
        f[1, 2] += eps[3]
        f[2, 1] += eps[3]
        f[0, 2] += eps[4]
        f[2, 0] += eps[4]
        f[0, 1] += eps[5]
        f[1, 0] += eps[5]
        self.mean_defgrad = f.reshape(9)

    def set_output_scales(self, sigma_scale: float, kine_scale: float) -> None:
        self.sigma_scale = float(sigma_scale)
        self.kine_scale = float(kine_scale)


@dataclass
class NetOutput:
    """Predicted fields plus the tape needed to run the backward pass."""

    kine: Var
    sigma: Var
    tape: Tape
    param_vars: dict
    abc: np.ndarray | None = None


def init_net(config: NetConfig, seed: int, dtype=np.float32) -> ECONet:
    """Kaiming fan-in initialization scaled by the configured gain."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    k = config.kernel_size

    def kaiming(shape, fan_in):
        std = config.init_gain * math.sqrt(2.0 / fan_in)
        return (std * rng.standard_normal(shape)).astype(dtype)

    def add_block(prefix, cin, cout):
        store.add(prefix + ".conv.w", kaiming((cout, cin, k, k, k), cin * k**3))
        store.add(prefix + ".conv.b", np.zeros(cout, dtype=dtype), decay_exempt=True)
        store.add(prefix + ".norm.scale", np.ones(cout, dtype=dtype), decay_exempt=True)
        store.add(prefix + ".norm.shift", np.zeros(cout, dtype=dtype), decay_exempt=True)

    chans = config.channels()
    add_block("stem", config.in_channels, chans[0])
    for lvl in range(1, config.levels):
        add_block(f"down{lvl}", chans[lvl - 1], chans[lvl])
    for lvl in range(config.levels - 1, 0, -1):
        add_block(f"up{lvl}", chans[lvl] + chans[lvl - 1], chans[lvl - 1])
    store.add("head.w", kaiming((config.backbone_out, chans[0], k, k, k), chans[0] * k**3))
    if config.mode == "weco":
        # In the strong mode a head bias is a dead parameter: both constraint
        # heads annihilate constant channels, and the mean offsets take over.
        store.add("head.b", np.zeros(config.backbone_out, dtype=dtype), decay_exempt=True)
    if config.mode == "seco":
        if config.case == "poly":
            hidden = config.abc_hidden
            store.add("abc.fc1.w", kaiming((hidden, chans[-1]), chans[-1]), decay_exempt=True)
            store.add("abc.fc1.b", np.zeros(hidden, dtype=dtype), decay_exempt=True)
            store.add("abc.fc2.w", np.zeros((3, hidden), dtype=dtype), decay_exempt=True)
            store.add("abc.fc2.b", np.zeros(3, dtype=dtype), decay_exempt=True)
        store.add("mean_stress", np.zeros(6, dtype=dtype), decay_exempt=True)
    return ECONet(config, store)


def forward(
    model: ECONet,
    features: np.ndarray,
    mode: str | None = None,
    train: bool = False,
    rng: np.random.Generator | None = None,
    stiffness: np.ndarray | None = None,
) -> NetOutput:
    """Run the backbone and heads; returns fields plus the backward tape.

    ``features`` is (in_channels, n, n, n) whitened microstructure. In the
    weak mode ``stiffness`` must carry the per-voxel stiffness, either as the
    21-channel upper triangle or as a dense (6, 6, n, n, n) block (a single
    (6, 6) matrix broadcasts). Dropout fires only when ``train`` is set, in
    which case ``rng`` supplies the masks.
    """
    cfg = model.config
    if mode is not None and mode != cfg.mode:
        raise ValueError(f"model was built for mode {cfg.mode!r}, forward asked for {mode!r}")
    feats = np.asarray(features)
    if feats.ndim != 4 or feats.shape[0] != cfg.in_channels:
        raise ValueError(
            f"features must be ({cfg.in_channels}, n, n, n), got {feats.shape}"
        )
    n = feats.shape[1]
    if feats.shape[1:] != (n, n, n):
        raise ValueError("features must live on a cubic grid")
    if n % cfg.alignment:
        raise ValueError(
            f"resolution {n} not divisible by 2^(levels-1) = {cfg.alignment}"
        )
    if train and cfg.dropout > 0.0 and rng is None:
        raise ValueError("training-mode forward needs an rng generator for dropout")
    spacing = 1.0 / n
    dtype = model.dtype
    feats = feats.astype(dtype, copy=False)

    tape = Tape()
    pv = {name: Var(tensor.value) for name, tensor in model.params.items()}

    def block(x, prefix, drop):
        if drop and train and cfg.dropout > 0.0:
            x = dropout(tape, x, cfg.dropout, rng)
        x = conv3d(tape, x, pv[prefix + ".conv.w"], pv[prefix + ".conv.b"])
        x = group_norm(
            tape, x, pv[prefix + ".norm.scale"], pv[prefix + ".norm.shift"], cfg.norm_groups
        )
        return activate(tape, x, cfg.activation)

    x = block(feats, "stem", drop=False)
    skips = [x]
    for lvl in range(1, cfg.levels):
        x = avg_pool2(tape, x)
        x = block(x, f"down{lvl}", drop=True)
        if lvl < cfg.levels - 1:
            skips.append(x)

    abc_node = None
    abc_val = None
    if cfg.mode == "seco":
        if cfg.case == "poly":
            pooled = global_mean_pool(tape, x)
            h = dense(tape, pooled, pv["abc.fc1.w"], pv["abc.fc1.b"])
            h = activate(tape, h, cfg.activation)
            raw = dense(tape, h, pv["abc.fc2.w"], pv["abc.fc2.b"])
            abc_node = add_scalar(tape, raw, 1.0)
            abc_val = abc_node.value.copy()
        else:
            abc_node = np.ones(3, dtype=dtype)
            abc_val = abc_node.copy()

    for lvl in range(cfg.levels - 1, 0, -1):
        x = upsample2(tape, x)
        x = concat_channels(tape, [skips[lvl - 1], x])
        x = block(x, f"up{lvl}", drop=True)
    out = conv3d(tape, x, pv["head.w"], pv.get("head.b"))

    if cfg.mode == "seco":
        u = slice_channels(tape, out, 0, 3)
        p = slice_channels(tape, out, 3, 6)
        if cfg.case == "pore":
            kine = _compat_head(tape, u, model.mean_strain, model.kine_scale, spacing)
        else:
            kine = _defgrad_head(tape, u, model.mean_defgrad, model.kine_scale, spacing)
        sigma = _equil_head(
            tape, p, abc_node, pv["mean_stress"], model.sigma_scale, spacing
        )
    else:
        if stiffness is None:
            raise ValueError("weak-mode forward requires the per-voxel stiffness field")
        stiff = np.asarray(stiffness)
        if stiff.ndim == 4 and stiff.shape[0] == 21:
            stiff = expand_stiffness(stiff)
        if cfg.case == "pore":
            kine = _affine_head(tape, out, model.kine_scale, model.mean_strain)
            sigma = _stiffness_head(tape, kine, stiff)
        else:
            kine = _affine_head(tape, out, model.kine_scale, model.mean_defgrad)
            sigma = _cauchy_head(tape, kine, stiff)
    return NetOutput(kine=kine, sigma=sigma, tape=tape, param_vars=pv, abc=abc_val)


def backward(output: NetOutput, d_sigma=None, d_kine=None) -> dict:
    """Replay the tape; returns gradients for every parameter tensor."""
    if d_sigma is not None:
        _acc(output.sigma, np.asarray(d_sigma, dtype=output.sigma.value.dtype))
    if d_kine is not None:
        _acc(output.kine, np.asarray(d_kine, dtype=output.kine.value.dtype))
    output.tape.run_backward()
    grads = {}
    for name, var in output.param_vars.items():
        grads[name] = var.grad if var.grad is not None else np.zeros_like(var.value)
    return grads


def adamw_step(
    store: ParamStore,
    grads: dict,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0165,
) -> None:
    """Decoupled-decay Adam update in place; decay skipped for exempt tensors."""
    for name, tensor in store.items():
        g = np.asarray(grads[name], dtype=tensor.value.dtype)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for tensor {name!r}")
        tensor.step += 1
        tensor.m = beta1 * tensor.m + (1.0 - beta1) * g
        tensor.v = beta2 * tensor.v + (1.0 - beta2) * g * g
        mhat = tensor.m / (1.0 - beta1**tensor.step)
        vhat = tensor.v / (1.0 - beta2**tensor.step)
        update = lr * mhat / (np.sqrt(vhat) + eps)
        if weight_decay and not tensor.decay_exempt:
            update = update + (lr * weight_decay) * tensor.value
        tensor.value = tensor.value - update


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"ECKP\x00\x00\x00\x01"


def _le_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def save_checkpoint(path: str, store: ParamStore, rng_state=None, extra=None) -> None:
    """Write parameters, optimizer state, and bookkeeping to one file.

    Layout: 8-byte magic, u32 manifest length, JSON manifest, raw
    little-endian tensor data at the offsets the manifest records.
    """
    payload = bytearray()
    entries = []
    for name, tensor in store.items():
        dt = tensor.value.dtype
        offsets = []
        for arr in (tensor.value, tensor.m, tensor.v):
            offsets.append(len(payload))
            payload += _le_bytes(arr)
        entries.append(
            {
                "name": name,
                "shape": list(tensor.value.shape),
                "dtype": dt.newbyteorder("<").str,
                "decay_exempt": tensor.decay_exempt,
                "step": tensor.step,
                "offsets": offsets,
            }
        )
    manifest = {"tensors": entries, "rng": rng_state, "extra": extra}
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


def load_checkpoint(path: str):
    """Read a checkpoint back; returns (store, rng_state, extra)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 4 or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    pos = len(CHECKPOINT_MAGIC)
    (blob_len,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if pos + blob_len > len(raw):
        raise ValueError(f"{path}: truncated checkpoint manifest")
    manifest = json.loads(raw[pos : pos + blob_len].decode("utf-8"))
    payload = raw[pos + blob_len :]

    store = ParamStore()
    for entry in manifest["tensors"]:
        dt = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dt.itemsize
        arrays = []
        for off in entry["offsets"]:
            if off + nbytes > len(payload):
                raise ValueError(f"{path}: truncated checkpoint payload")
            arr = np.frombuffer(payload, dtype=dt, count=count, offset=off)
            arrays.append(arr.reshape(shape).astype(dt.newbyteorder("="), copy=True))
        tensor = store.add(entry["name"], arrays[0], decay_exempt=entry["decay_exempt"])
        tensor.m = arrays[1]
        tensor.v = arrays[2]
        tensor.step = int(entry["step"])
    return store, manifest.get("rng"), manifest.get("extra")

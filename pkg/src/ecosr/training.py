"""Multi-resolution losses, normalization, schedules, and the training loop.

Supervision lives on the coarse grid: predictions are made at full
resolution, windowed-averaged down, and compared against coarse targets.
The physics residual (constitutive consistency for the strongly
constrained heads, discrete divergence for the weakly constrained ones)
is evaluated at full resolution on physical, unwhitened fields. Every
loss returns its value together with exact cotangents so the network
backward pass never has to re-derive chain rules.
"""

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from ecosr.fieldcore import block_mean, d1, div_sym, downsample_adjoint
from ecosr.microgen import apply_stiffness, expand_stiffness
from ecosr.net import adamw_step, backward, forward, save_checkpoint

__all__ = [
    "LossConfig",
    "Normalizer",
    "TrainConfig",
    "TrainSample",
    "cauchy_stress_field",
    "cauchy_stress_field_vjp",
    "div_sym_adjoint",
    "finite_strain_cauchy",
    "loss_pore",
    "loss_poly",
    "lr_schedule",
    "train",
]

VARIANTS = ("seco_pore", "weco_pore", "seco_poly", "weco_poly")

# Frobenius weights for symmetric tensors in 6-channel storage: the three
# shear channels stand in for two tensor entries each.
_W6 = np.array([1.0, 1.0, 1.0, 2.0, 2.0, 2.0])

# Channel -> (row, col) for the 6-channel symmetric order 11,22,33,23,13,12.
_SYM_PAIRS = ((0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1))


@dataclass
class LossConfig:
    """Weights and switches for the four loss variants.

    ``alpha`` emphasizes the stress supervision terms, ``beta`` the physics
    residual, and ``gamma`` the off-diagonal tensor components. ``beta = 0``
    turns the physics term off entirely (it then contributes to neither the
    value nor the gradients). ``normalize_physics`` rescales the physics
    residual to a dimensionless magnitude comparable with the supervised
    terms, which keeps one beta value usable across resolutions.
    """

    variant: str = "seco_pore"
    alpha: float = 4.7068
    beta: float = 1.3258
    gamma: float = 1.7297
    mask_enabled: bool = True
    normalize_physics: bool = False

    def __post_init__(self):
        self.variant = self.variant.lower()
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.alpha <= 0.0 or self.gamma <= 0.0:
            raise ValueError("alpha and gamma must be positive")
        if self.beta < 0.0:
            raise ValueError("beta must be non-negative")


@dataclass
class TrainConfig:
    """Optimizer schedule and loop controls."""

    epochs: int
    batch_size: int
    peak_lr: float = 5e-4
    warmup_epochs: int = 100
    min_lr: float = 1e-5
    end_epoch: int = 2000
    seed: int = 0
    downsample_factor: int = 2
    checkpoint_every: int = 100
    weight_decay: float = 0.0165

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must satisfy 0 <= warmup < epochs")
        if self.end_epoch <= self.warmup_epochs:
            raise ValueError("end_epoch must be greater than warmup_epochs")
        if not 0.0 < self.min_lr <= self.peak_lr:
            raise ValueError("need 0 < min_lr <= peak_lr")
        if self.downsample_factor < 1:
            raise ValueError("downsample_factor must be >= 1")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.weight_decay < 0.0:
            raise ValueError("weight_decay must be non-negative")


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak, cosine decay to the minimum, then flat."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < cfg.warmup_epochs:
        return cfg.peak_lr * epoch / cfg.warmup_epochs
    if epoch >= cfg.end_epoch:
        return cfg.min_lr
    t = (epoch - cfg.warmup_epochs) / (cfg.end_epoch - cfg.warmup_epochs)
    return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * t))


# ---------------------------------------------------------------------------
# normalization


@dataclass
class Normalizer:
    """Per-channel whitening constants.

    ``std`` is either per-channel (one entry per channel) or a single
    shared scalar, the mean of the per-channel standard deviations. The
    shared form rescales every channel uniformly, so linear differential
    stencils commute with it: a divergence-free field stays divergence-free
    under (de)normalization.
    """

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, samples, shared: bool = False) -> "Normalizer":
        arr = np.asarray(samples, dtype=np.float64)
        if arr.ndim != 5:
            raise ValueError(f"expected (samples, channels, n, n, n), got {arr.shape}")
        flat = arr.transpose(1, 0, 2, 3, 4).reshape(arr.shape[1], -1)
        mean = flat.mean(axis=1)
        std = flat.std(axis=1)
        if shared:
            std = np.float64(std.mean())
            if std < 1e-12:
                std = np.float64(1.0)
        else:
            std = np.where(std < 1e-12, 1.0, std)
        return cls(mean=mean, std=std)

    def _broadcast(self):
        mu = self.mean[:, None, None, None]
        sd = self.std if np.ndim(self.std) == 0 else self.std[:, None, None, None]
        return mu, sd

    def normalize(self, x: np.ndarray) -> np.ndarray:
        mu, sd = self._broadcast()
        return (np.asarray(x, dtype=np.float64) - mu) / sd

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        mu, sd = self._broadcast()
        return np.asarray(x, dtype=np.float64) * sd + mu

    def to_jsonable(self) -> dict:
        return {
            "mean": [float(v) for v in self.mean],
            "std": float(self.std) if np.ndim(self.std) == 0 else [float(v) for v in self.std],
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "Normalizer":
        std = d["std"]
        std = np.float64(std) if np.isscalar(std) else np.asarray(std, dtype=np.float64)
        return cls(mean=np.asarray(d["mean"], dtype=np.float64), std=std)


# ---------------------------------------------------------------------------
# finite-strain constitutive map


def _voigt6(sym3):
    """Upper triangle of a symmetric 3x3 (field) in 11,22,33,23,13,12 order."""
    return np.stack(
        [sym3[0, 0], sym3[1, 1], sym3[2, 2], sym3[1, 2], sym3[0, 2], sym3[0, 1]]
    )


def _sym3(v6):
    """Inverse of _voigt6: place 6 channels into a symmetric 3x3 (field)."""
    shape = (3, 3) + v6.shape[1:]
    out = np.empty(shape, dtype=v6.dtype)
    for c, (i, j) in enumerate(_SYM_PAIRS):
        out[i, j] = v6[c]
        out[j, i] = v6[c]
    return out


def _contract(c66, v6):
    """Voigt contraction C @ v for constant (6, 6) or per-voxel stiffness."""
    if c66.ndim == 2:
        return np.einsum("ij,j...->i...", c66, v6)
    return np.einsum("ij...,j...->i...", c66, v6)


def finite_strain_cauchy(c66: np.ndarray, f33: np.ndarray) -> np.ndarray:
    """Cauchy stress from an elastic deformation gradient at one voxel.

    sigma = det(F)^-1 F S F^T with S = C : E and E = 0.5 (F^T F - I), the
    contraction done in 6-channel form with the shear factor 2 on E.
    """
    c66 = np.asarray(c66, dtype=np.float64)
    f = np.asarray(f33, dtype=np.float64)
    if c66.shape != (6, 6):
        raise ValueError(f"stiffness must be (6, 6), got {c66.shape}")
    if f.shape != (3, 3):
        raise ValueError(f"deformation gradient must be (3, 3), got {f.shape}")
    j = np.linalg.det(f)
    if j <= 0.0:
        raise ValueError(f"deformation gradient determinant must be positive, got {j}")
    e = 0.5 * (f.T @ f - np.eye(3))
    ev = np.array([e[0, 0], e[1, 1], e[2, 2], 2 * e[1, 2], 2 * e[0, 2], 2 * e[0, 1]])
    sv = c66 @ ev
    s = np.array(
        [
            [sv[0], sv[5], sv[4]],
            [sv[5], sv[1], sv[3]],
            [sv[4], sv[3], sv[2]],
        ]
    )
    return (f @ s @ f.T) / j


def _defgrad_parts(f9):
    """Shared forward quantities for the voxel-wise finite-strain map."""
    f = np.asarray(f9, dtype=np.float64)
    if f.ndim != 4 or f.shape[0] != 9:
        raise ValueError(f"deformation gradient field must be (9, n, n, n), got {f.shape}")
    f = f.reshape((3, 3) + f.shape[1:])
    eye = np.eye(3)[:, :, None, None, None]
    e = 0.5 * (np.einsum("ki...,kj...->ij...", f, f) - eye)
    ev = _voigt6(e) * _W6[:, None, None, None]
    cof = np.stack(
        [
            np.cross(f[1], f[2], axis=0),
            np.cross(f[2], f[0], axis=0),
            np.cross(f[0], f[1], axis=0),
        ]
    )
    j = np.einsum("i...,i...->...", f[0], cof[0])
    if np.any(j <= 0.0):
        raise ValueError("deformation gradient determinant must be positive everywhere")
    return f, ev, cof, j


def cauchy_stress_field(stiffness: np.ndarray, f9: np.ndarray) -> np.ndarray:
    """Voxel-wise finite-strain Cauchy stress, (9, n, n, n) -> (6, n, n, n).

    ``stiffness`` is a constant (6, 6) matrix or a dense (6, 6, n, n, n)
    field. Arithmetic runs in 64-bit; the result matches the input dtype.
    """
    out_dtype = np.asarray(f9).dtype
    c66 = np.asarray(stiffness, dtype=np.float64)
    f, ev, cof, j = _defgrad_parts(f9)
    s = _sym3(_contract(c66, ev))
    sig = np.einsum("ik...,kl...,jl...->ij...", f, s, f, optimize=True) / j
    return _voigt6(sig).astype(out_dtype, copy=False)


def cauchy_stress_field_vjp(
    stiffness: np.ndarray, f9: np.ndarray, w6: np.ndarray
) -> np.ndarray:
    """Cotangent of cauchy_stress_field with respect to the deformation field.

    ``w6`` weights the six output channels; the return value has the layout
    and dtype of ``f9``. Derivation: with sigma = J^-1 F S F^T,
    Fbar = -(W : sigma) F^-T + J^-1 [ (W + W^T) F S + F (C : sym(F^T W F)) ],
    where W places each channel weight on the upper-triangle entry the
    forward pass reads, and F^-T = cof(F) / J.
    """
    out_dtype = np.asarray(f9).dtype
    c66 = np.asarray(stiffness, dtype=np.float64)
    f, ev, cof, j = _defgrad_parts(f9)
    s = _sym3(_contract(c66, ev))
    sig = np.einsum("ik...,kl...,jl...->ij...", f, s, f, optimize=True) / j

    w = np.asarray(w6, dtype=np.float64)
    w3 = np.zeros((3, 3) + w.shape[1:], dtype=np.float64)
    for c, (i, k) in enumerate(_SYM_PAIRS):
        w3[i, k] = w[c]

    wsig = np.einsum("ij...,ij...->...", w3, sig)
    wsym = w3 + w3.transpose((1, 0) + tuple(range(2, w3.ndim)))
    wfs = np.einsum("ik...,kl...,lm...->im...", wsym, f, s, optimize=True)
    inner = np.einsum("ik...,ij...,jl...->kl...", f, w3, f, optimize=True)
    inner = 0.5 * (inner + inner.transpose((1, 0) + tuple(range(2, inner.ndim))))
    cb = _sym3(_contract(c66, _voigt6(inner) * _W6[:, None, None, None]))
    fcb = np.einsum("ik...,kl...->il...", f, cb, optimize=True)
    fbar = -wsig * cof / j + (wfs + fcb) / j
    return fbar.reshape((9,) + f.shape[2:]).astype(out_dtype, copy=False)


# ---------------------------------------------------------------------------
# losses


def div_sym_adjoint(s: np.ndarray, spacing: float) -> np.ndarray:
    """Adjoint of div_sym under voxel-sum inner products, (3,...) -> (6,...)."""
    return np.stack(
        [
            -d1(s[0], 0, spacing),
            -d1(s[1], 1, spacing),
            -d1(s[2], 2, spacing),
            -d1(s[1], 2, spacing) - d1(s[2], 1, spacing),
            -d1(s[0], 2, spacing) - d1(s[2], 0, spacing),
            -d1(s[0], 1, spacing) - d1(s[1], 0, spacing),
        ]
    )


def _factor(n_hi: int, n_lo: int) -> int:
    if n_lo < 1 or n_hi % n_lo != 0:
        raise ValueError(
            f"coarse grid {n_lo} does not divide fine grid {n_hi}; "
            "prediction and target grids are inconsistent"
        )
    return n_hi // n_lo


def _dense_stiffness(stiffness: np.ndarray) -> np.ndarray:
    s = np.asarray(stiffness, dtype=np.float64)
    if s.ndim == 2 and s.shape == (6, 6):
        return s
    if s.ndim == 4 and s.shape[0] == 21:
        return expand_stiffness(s)
    if s.ndim == 5 and s.shape[:2] == (6, 6):
        return s
    raise ValueError(f"stiffness must be (6,6), (21,n,n,n) or (6,6,n,n,n), got {s.shape}")


def loss_pore(
    pred_sigma: np.ndarray,
    pred_strain: np.ndarray,
    target_sigma: np.ndarray,
    target_strain: np.ndarray,
    mask_lr,
    stiffness_hr: np.ndarray,
    cfg: LossConfig,
):
    """Pore-case loss: normalized supervision plus a physics residual.

    Supervision per field is ||g (X - D(Xhat))||^2 / ||g X||^2 summed over
    the stress/strain pair, with the binary mask g zeroing coarse voxels
    that are majority pore. The strongly constrained variant adds the
    squared constitutive residual beta ||C:eps - sigma||^2 at full
    resolution; the weakly constrained one adds beta ||div sigma||_1.
    Returns (value, d_pred_sigma, d_pred_strain) as 64-bit arrays.
    """
    if not cfg.variant.endswith("_pore"):
        raise ValueError(f"loss_pore called with variant {cfg.variant!r}")
    ps = np.asarray(pred_sigma, dtype=np.float64)
    pe = np.asarray(pred_strain, dtype=np.float64)
    ts = np.asarray(target_sigma, dtype=np.float64)
    te = np.asarray(target_strain, dtype=np.float64)
    if ps.shape != pe.shape or ts.shape != te.shape:
        raise ValueError("stress and strain fields must share shapes at each grid")
    n = ps.shape[-1]
    m = ts.shape[-1]
    f = _factor(n, m)

    if mask_lr is None or not cfg.mask_enabled:
        g = np.ones((m, m, m))
    else:
        g = np.asarray(mask_lr, dtype=np.float64)
        if g.shape != (m, m, m):
            raise ValueError(f"mask must be ({m}, {m}, {m}), got {g.shape}")
        if not np.all((g == 0.0) | (g == 1.0)):
            raise ValueError("mask must be binary")

    value = 0.0
    grads = []
    den_sigma = None
    for pred, tgt in ((ps, ts), (pe, te)):
        r = g[None] * (tgt - block_mean(pred, f))
        den = float(np.sum((g[None] * tgt) ** 2))
        if den == 0.0:
            raise ValueError("masked supervision target has zero norm; cannot normalize")
        if den_sigma is None:
            den_sigma = den
        value += float(np.sum(r * r)) / den
        grads.append(downsample_adjoint((-2.0 / den) * g[None] * r, f))
    d_sigma, d_strain = grads

    if cfg.beta > 0.0:
        w6 = _W6[:, None, None, None]
        if cfg.variant == "seco_pore":
            dense = _dense_stiffness(stiffness_hr)
            resid = apply_stiffness(dense, pe) - ps
            scale = 1.0
            if cfg.normalize_physics:
                scale = 1.0 / (f**3 * float(np.sum(w6 * (g[None] * ts) ** 2)))
            value += cfg.beta * scale * float(np.sum(w6 * resid * resid))
            d_sigma += cfg.beta * scale * (-2.0) * w6 * resid
            d_strain += cfg.beta * scale * 2.0 * w6 * apply_stiffness(dense, resid)
        else:
            spacing = 1.0 / n
            div = div_sym(ps, spacing)
            scale = 1.0 / (3 * n**3) if cfg.normalize_physics else 1.0
            value += cfg.beta * scale * float(np.sum(np.abs(div)))
            d_sigma += cfg.beta * scale * div_sym_adjoint(np.sign(div), spacing)
    return value, d_sigma, d_strain


def loss_poly(
    pred_sigma: np.ndarray,
    pred_defgrad: np.ndarray,
    target_sigma: np.ndarray,
    target_defgrad: np.ndarray,
    stiffness_hr: np.ndarray,
    sigma_norm: Normalizer,
    defgrad_norm: Normalizer,
    cfg: LossConfig,
):
    """Polycrystal loss: whitened L1 supervision plus a physics residual.

    Supervision compares downsampled predictions with coarse targets,
    whitened by each field's shared standard deviation, as per-channel L1
    means weighted gamma^(1 - delta_ij) with alpha on the stress block.
    The strongly constrained variant adds the L1 residual between the
    finite-strain constitutive map and the predicted stress on physical
    fields at full resolution; the weakly constrained one penalizes the
    discrete divergence. Returns (value, d_pred_sigma, d_pred_defgrad).
    """
    if not cfg.variant.endswith("_poly"):
        raise ValueError(f"loss_poly called with variant {cfg.variant!r}")
    ps = np.asarray(pred_sigma, dtype=np.float64)
    pf = np.asarray(pred_defgrad, dtype=np.float64)
    ts = np.asarray(target_sigma, dtype=np.float64)
    tf = np.asarray(target_defgrad, dtype=np.float64)
    if ps.shape[0] != 6 or pf.shape[0] != 9:
        raise ValueError("predictions must be 6-channel stress and 9-channel defgrad")
    n = ps.shape[-1]
    m = ts.shape[-1]
    f = _factor(n, m)
    n_lr = m**3

    for norm in (sigma_norm, defgrad_norm):
        if np.ndim(norm.std) != 0:
            raise ValueError("polycrystal supervision requires shared-std normalizers")
    s_sig = float(sigma_norm.std)
    s_def = float(defgrad_norm.std)

    g = cfg.gamma
    w_sig = cfg.alpha * np.array([1.0, 1.0, 1.0, g, g, g])
    w_def = np.array([1.0, g, g, g, 1.0, g, g, g, 1.0])

    value = 0.0
    grads = []
    for pred, tgt, wch, s in ((ps, ts, w_sig, s_sig), (pf, tf, w_def, s_def)):
        r = (tgt - block_mean(pred, f)) / s
        wb = wch[:, None, None, None]
        value += float(np.sum(wb * np.abs(r))) / n_lr
        cot = (-1.0 / (s * n_lr)) * wb * np.sign(r)
        grads.append(downsample_adjoint(cot, f))
    d_sigma, d_defgrad = grads

    if cfg.beta > 0.0:
        n_hr = n**3
        if cfg.variant == "seco_poly":
            dense = _dense_stiffness(stiffness_hr)
            resid = cauchy_stress_field(dense, pf) - ps
            w_phys = np.array([1.0, 1.0, 1.0, g, g, g])[:, None, None, None]
            value += cfg.beta * float(np.sum(w_phys * np.abs(resid))) / n_hr
            cot6 = (cfg.beta / n_hr) * w_phys * np.sign(resid)
            d_sigma += -cot6
            d_defgrad += cauchy_stress_field_vjp(dense, pf, cot6)
        else:
            spacing = 1.0 / n
            div = div_sym(ps, spacing)
            value += cfg.beta * float(np.sum(np.abs(div))) / n_hr
            d_sigma += (cfg.beta / n_hr) * div_sym_adjoint(np.sign(div), spacing)
    return value, d_sigma, d_defgrad


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainSample:
    """One training tuple: fine-grid features, coarse-grid targets.

    ``features`` doubles as the physical per-voxel stiffness (21 channels,
    upper triangle); ``kine_lr`` holds strain (6 channels) for pores or the
    deformation gradient (9 channels) for polycrystals.
    """

    features: np.ndarray
    sigma_lr: np.ndarray
    kine_lr: np.ndarray
    mask_lr: np.ndarray | None = None


def _sample_loss(sample, out, loss_cfg, norms, dtype):
    """Loss and network cotangents for one sample, in 64-bit."""
    pred_sigma = out.sigma.value.astype(np.float64)
    pred_kine = out.kine.value.astype(np.float64)
    if loss_cfg.variant.endswith("_pore"):
        value, d_sigma, d_kine = loss_pore(
            pred_sigma,
            pred_kine,
            sample.sigma_lr,
            sample.kine_lr,
            sample.mask_lr,
            sample.features,
            loss_cfg,
        )
    else:
        sig_norm, kine_norm = norms
        value, d_sigma, d_kine = loss_poly(
            pred_sigma,
            pred_kine,
            sample.sigma_lr,
            sample.kine_lr,
            sample.features,
            sig_norm,
            kine_norm,
            loss_cfg,
        )
    return value, d_sigma.astype(dtype), d_kine.astype(dtype)


def train(
    model,
    train_samples,
    val_samples,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    loading,
    log_path=None,
    checkpoint_path=None,
):
    """Run the full seeded training loop; returns the per-epoch log rows.

    Fits the input whitener and the shared-std output normalizers on the
    training split, pins the prescribed loading, then iterates seeded
    shuffled batches with per-batch mean gradients and AdamW steps. Each
    epoch appends one CSV row (epoch, lr, train_loss, val_loss,
    div_residual); checkpoints are written on the configured cadence and at
    the end. A non-finite loss aborts with the last checkpoint retained.
    """
    cfg = model.config
    expected = f"{cfg.mode}_{cfg.case}"
    if loss_cfg.variant != expected:
        raise ValueError(
            f"loss variant {loss_cfg.variant!r} does not match model {expected!r}"
        )
    if not train_samples:
        raise ValueError("need at least one training sample")
    dtype = model.dtype
    n = train_samples[0].features.shape[-1]
    f = train_cfg.downsample_factor
    for s in list(train_samples) + list(val_samples):
        if s.features.shape[-1] != n or s.sigma_lr.shape[-1] * f != n:
            raise ValueError("all samples must share one fine grid and one coarse grid")

    in_norm = Normalizer.fit(np.stack([s.features for s in train_samples]))
    sig_norm = Normalizer.fit(np.stack([s.sigma_lr for s in train_samples]), shared=True)
    kine_norm = Normalizer.fit(np.stack([s.kine_lr for s in train_samples]), shared=True)

    loading = np.asarray(loading, dtype=np.float64).reshape(6)
    model.set_loading(loading)
    model.set_output_scales(float(sig_norm.std), float(kine_norm.std))
    if "mean_stress" in model.params:
        mu = np.stack([s.sigma_lr for s in train_samples]).mean(axis=(0, 2, 3, 4))
        tensor = model.params["mean_stress"]
        tensor.value[...] = mu.astype(tensor.value.dtype)

    def prep(samples):
        whitened = [in_norm.normalize(s.features).astype(dtype) for s in samples]
        stiff = None
        if cfg.mode == "weco":
            stiff = [s.features.astype(dtype) for s in samples]
        return whitened, stiff

    train_white, train_stiff = prep(train_samples)
    val_white, val_stiff = prep(val_samples)

    rng = np.random.default_rng(train_cfg.seed)
    extra_base = {
        "variant": loss_cfg.variant,
        "net_config": {
            **dataclasses.asdict(cfg),
            "channel_multipliers": [int(m) for m in cfg.channel_multipliers],
        },
        "loading": [float(v) for v in loading],
        "sigma_scale": model.sigma_scale,
        "kine_scale": model.kine_scale,
        "input_norm": in_norm.to_jsonable(),
        "sigma_norm": sig_norm.to_jsonable(),
        "kine_norm": kine_norm.to_jsonable(),
    }

    log_fh = open(log_path, "w") if log_path else None
    rows = []
    try:
        if log_fh:
            log_fh.write("epoch,lr,train_loss,val_loss,div_residual\n")
        for epoch in range(train_cfg.epochs):
            lr = lr_schedule(epoch, train_cfg)
            order = rng.permutation(len(train_samples))
            losses = []
            for start in range(0, len(order), train_cfg.batch_size):
                batch = order[start : start + train_cfg.batch_size]
                gsum = None
                for idx in batch:
                    stiff = train_stiff[idx] if train_stiff else None
                    out = forward(
                        model, train_white[idx], train=True, rng=rng, stiffness=stiff
                    )
                    value, d_sigma, d_kine = _sample_loss(
                        train_samples[idx], out, loss_cfg, (sig_norm, kine_norm), dtype
                    )
                    if not math.isfinite(value):
                        raise FloatingPointError(
                            f"non-finite training loss {value} at epoch {epoch}"
                        )
                    losses.append(value)
                    g = backward(out, d_sigma=d_sigma, d_kine=d_kine)
                    if gsum is None:
                        gsum = g
                    else:
                        for name in gsum:
                            gsum[name] += g[name]
                inv = 1.0 / len(batch)
                grads = {name: val * inv for name, val in gsum.items()}
                adamw_step(
                    model.params, grads, lr=lr, weight_decay=train_cfg.weight_decay
                )
            train_loss = float(np.mean(losses))

            val_loss = math.nan
            div_residual = math.nan
            if val_samples:
                vlosses, divs = [], []
                for idx, sample in enumerate(val_samples):
                    stiff = val_stiff[idx] if val_stiff else None
                    out = forward(model, val_white[idx], train=False, stiffness=stiff)
                    value, _, _ = _sample_loss(
                        sample, out, loss_cfg, (sig_norm, kine_norm), dtype
                    )
                    vlosses.append(value)
                    sig = out.sigma.value.astype(np.float64)
                    divs.append(float(np.mean(np.abs(div_sym(sig, 1.0 / n)))))
                val_loss = float(np.mean(vlosses))
                div_residual = float(np.mean(divs))
                if not math.isfinite(val_loss):
                    raise FloatingPointError(
                        f"non-finite validation loss {val_loss} at epoch {epoch}"
                    )

            row = {
                "epoch": epoch,
                "lr": lr,
                "train_loss": train_loss,
                "val_loss": val_loss,
                "div_residual": div_residual,
            }
            rows.append(row)
            if log_fh:
                log_fh.write(
                    f"{epoch},{lr:.17g},{train_loss:.17g},"
                    f"{val_loss:.17g},{div_residual:.17g}\n"
                )
                log_fh.flush()

            due = (epoch + 1) % train_cfg.checkpoint_every == 0
            if checkpoint_path and (due or epoch == train_cfg.epochs - 1):
                extra = dict(extra_base)
                extra["epoch"] = epoch
                save_checkpoint(
                    checkpoint_path,
                    model.params,
                    rng_state=rng.bit_generator.state,
                    extra=extra,
                )
    finally:
        if log_fh:
            log_fh.close()
    return rows

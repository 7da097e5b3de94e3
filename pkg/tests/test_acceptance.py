"""Acceptance gate: eight end-to-end checks, one pass/fail line each.

Each test certifies one user-facing guarantee of the package: exact
discrete conservation of the output blocks, divergence ordering against
the reference solver, solver correctness on closed-form and bounded cases,
stiffness rotation against a brute-force oracle, gradient soundness of the
from-scratch autodiff, the finite-strain constitutive map, a miniature
super-resolution experiment driven through the command line, and byte
determinism of the metrics it writes.

The miniature experiment (64 train / 8 val low-resolution samples derived
from 32-cubed microstructures, 8 held-out high-resolution references) runs
once in a module fixture; the determinism check repeats it with the same
seed into a fresh directory and compares every metrics CSV byte for byte.
"""

import itertools
import math
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from ecosr.cli import load_config, main
from ecosr.dns import LoadingCondition, solve_elastic_fft
from ecosr.ecoblocks import (
    compatibility_adjoint,
    compatibility_block,
    defgrad_adjoint,
    defgrad_block,
    equilibrium_adjoint,
    equilibrium_block,
)
from ecosr.ecof import read_field
from ecosr.fieldcore import (
    GridSpec,
    VOIGT_PAIRS,
    block_mean,
    d1,
    d2,
    div_sym,
    downsample_adjoint,
    inc_sym,
    upsample_nearest,
    upsample_nearest_adjoint,
)
from ecosr.microgen import (
    CubicConstants,
    PoreParams,
    downsample_microstructure,
    expand_stiffness,
    featurize,
    gen_polycrystal,
    gen_pore,
    rotate_stiffness,
)
from ecosr.net import NetConfig, forward, backward, init_net
from ecosr.training import (
    LossConfig,
    Normalizer,
    div_sym_adjoint,
    finite_strain_cauchy,
    loss_poly,
    loss_pore,
)

STEEL = CubicConstants(c11=204.6, c12=137.7, c44=126.2)
HR = 32
LR = 16
MINI_EPOCHS = 60
MINI_BATCH = 4
MINI_SEED = 7


def report(num: int, ok: bool, detail: str) -> None:
    print(f"criterion {num}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {num} failed: {detail}"


# ---------------------------------------------------------------------------
# miniature experiment pipeline (shared by criteria 2, 7, 8)


def write_mini_config(path: Path, run_dir: Path, epochs: int = MINI_EPOCHS) -> Path:
    path.write_text(f"""
[run]
run_dir = {run_dir}
seed = {MINI_SEED}

[data]
case = pore
n_train = 64
n_val = 8
n_test = 8
hr_resolution = {HR}
lr_resolution = {LR}
load_axis = 0
load_magnitude = 0.001

[material]
pore_scale = 0.15

[solver]
tol = 1e-6
max_iter = 300

[net]
levels = 2
base_channels = 8
channel_multipliers = 1, 2
norm_groups = 4
dropout = 0.05

[train]
epochs = {epochs}
batch_size = {MINI_BATCH}
peak_lr = 0.001
warmup_epochs = 5
end_epoch = {epochs}
min_lr = 0.00002
checkpoint_every = {epochs}

[loss]
beta = 1.0
normalize_physics = true
""")
    return path


def run_mini_pipeline(cfg_path: Path) -> dict:
    times = {}
    for cmd in ("gen", "solve", "train", "infer", "eval"):
        t0 = time.perf_counter()
        rc = main([cmd, "--config", str(cfg_path)])
        times[cmd] = time.perf_counter() - t0
        assert rc == 0, f"{cmd} exited with {rc}"
    return times


@pytest.fixture(scope="module")
def mini(tmp_path_factory):
    base = tmp_path_factory.mktemp("mini")
    cfg_path = write_mini_config(base / "exp.ini", base / "run1")
    times = run_mini_pipeline(cfg_path)
    return SimpleNamespace(
        base=base,
        cfg_path=cfg_path,
        run=base / "run1",
        cfg=load_config(cfg_path),
        times=times,
    )


def read_csv_column(path: Path, key_col: int, val_col: int) -> dict:
    rows = path.read_text().splitlines()[1:]
    out = {}
    for row in rows:
        parts = row.split(",")
        out[parts[key_col]] = float(parts[val_col])
    return out


def read_spectrum(path: Path):
    rows = path.read_text().splitlines()[1:]
    k = np.array([int(r.split(",")[0]) for r in rows])
    power = np.array([float(r.split(",")[1]) for r in rows])
    return k, power


# ---------------------------------------------------------------------------
# criterion 1: exact discrete conservation of the output blocks


class TestCriterion1:
    def test_exact_conservation(self):
        t0 = time.perf_counter()
        n = 32
        h = 1.0 / n
        rng = np.random.default_rng(101)
        worst64 = worst32 = worst_inc = 0.0
        for _ in range(100):
            p = rng.standard_normal((3, n, n, n))
            abc = rng.uniform(0.5, 1.5, 3)
            mean = rng.standard_normal(6) * 1e-3
            sig = equilibrium_block(p, abc, mean, h)
            rel = np.abs(div_sym(sig, h)).max() / np.abs(sig).max()
            worst64 = max(worst64, rel)

            sig32 = equilibrium_block(
                p.astype(np.float32), abc.astype(np.float32),
                mean.astype(np.float32), h,
            )
            assert sig32.dtype == np.float32
            rel32 = float(
                np.abs(div_sym(sig32, h)).max() / np.abs(sig32).max()
            )
            worst32 = max(worst32, rel32)

            u = rng.standard_normal((3, n, n, n))
            eps = compatibility_block(u, mean, h)
            # Incompatibility stacks two first differences, so rounding is
            # amplified by 1/h^2; relative means against that scale.
            rel_inc = np.abs(inc_sym(eps, h)).max() * h * h / np.abs(eps).max()
            worst_inc = max(worst_inc, rel_inc)
        elapsed = time.perf_counter() - t0
        ok = worst64 <= 1e-12 and worst32 <= 1e-5 and worst_inc <= 1e-12
        ok = ok and elapsed < 60.0
        report(
            1, ok,
            f"div rel 64-bit {worst64:.2e} <= 1e-12, 32-bit {worst32:.2e} "
            f"<= 1e-5, incompatibility {worst_inc:.2e} <= 1e-12, "
            f"{elapsed:.1f} s < 60 s",
        )


# ---------------------------------------------------------------------------
# criterion 2: trained predictions beat the solver's discrete divergence


class TestCriterion2:
    def test_divergence_ordering(self, mini):
        t0 = time.perf_counter()
        from ecosr.cli import _load_microstructure, _predict, _restore_model

        cfg = mini.cfg
        model, norms, extra, dtype = _restore_model(cfg.checkpoint_path())
        h = 1.0 / LR
        pred_divs, dns_divs = [], []
        for i in range(cfg.n_test):
            name = f"s{i:04d}"
            ms_hr = _load_microstructure(cfg, "test", name)
            ms_lr = downsample_microstructure(ms_hr, cfg.factor)
            out = _predict(cfg, model, norms, dtype, ms_lr)
            sig = np.asarray(out.sigma.value, dtype=np.float64)
            pred_divs.append(np.mean(np.abs(div_sym(sig, h))))
            ref = read_field(cfg.data_dir() / "test" / f"{name}.sigma_lr.ecof")
            dns_divs.append(
                np.mean(np.abs(div_sym(np.asarray(ref.data, np.float64), h)))
            )
        pred_mean = float(np.mean(pred_divs))
        dns_mean = float(np.mean(dns_divs))
        elapsed = time.perf_counter() - t0
        ok = pred_mean < dns_mean and elapsed < 300.0
        report(
            2, ok,
            f"mean |div sigma| prediction {pred_mean:.3e} < solver "
            f"{dns_mean:.3e} at {LR}^3, {elapsed:.1f} s < 300 s",
        )


# ---------------------------------------------------------------------------
# criterion 3: reference solver correctness (with a determinism CSV)


def _g17(x) -> str:
    return format(float(x), ".17g")


def _kelvin_quadratics(mat66_field: np.ndarray, eps_bar: np.ndarray):
    """Voigt/Reuss quadratic forms along a loading direction.

    Works in the Kelvin basis, where the stored stiffness acts as
    K C K on K-scaled tensor components and energy is a plain dot product.
    """
    k = np.sqrt(np.array([1.0, 1.0, 1.0, 2.0, 2.0, 2.0]))
    ck = k[:, None] * mat66_field.transpose(2, 3, 4, 0, 1) * k[None, :]
    e_k = k * eps_bar
    c_mean = ck.mean(axis=(0, 1, 2))
    s_mean = np.linalg.inv(ck).mean(axis=(0, 1, 2))
    q_voigt = float(e_k @ c_mean @ e_k)
    q_reuss = float(e_k @ np.linalg.inv(s_mean) @ e_k)
    return q_reuss, q_voigt


def run_dns_oracle(seed: int, csv_path: Path) -> dict:
    rng = np.random.default_rng(seed)
    n = 32
    rows = []
    result = {}

    # Homogeneous medium: one iteration, exact constant fields.
    mat = np.broadcast_to(
        rotate_stiffness(STEEL, np.eye(3))[:, :, None, None, None], (6, 6, n, n, n)
    ).copy()
    load = LoadingCondition.uniaxial(axis=0, magnitude=1e-3)
    sol = solve_elastic_fft(mat, load, tol=1e-6, max_iter=100)
    c66 = rotate_stiffness(STEEL, np.eye(3))
    want = c66 @ (load.mean_strain * np.array([1, 1, 1, 2, 2, 2.0]))
    rel = float(
        np.abs(sol.stress.data - want[:, None, None, None]).max()
        / np.abs(want).max()
    )
    result["homog_iterations"] = sol.iterations
    result["homog_rel"] = rel
    rows.append(("homogeneous_iterations", float(sol.iterations)))
    rows.append(("homogeneous_rel_error", rel))

    # Two-phase laminate, layers normal to x1, uniaxial mean strain: the
    # axial stress follows the series (harmonic) average of the axial
    # moduli because sigma_11 is continuous across the layers.
    e_bar = 1e-3
    pa = CubicConstants.from_isotropic(e=1.0, nu=0.3)
    pb = CubicConstants.from_isotropic(e=3.0, nu=0.2)
    mat = np.empty((6, 6, n, n, n))
    mat[:, :, : n // 2] = rotate_stiffness(pa, np.eye(3))[:, :, None, None, None]
    mat[:, :, n // 2 :] = rotate_stiffness(pb, np.eye(3))[:, :, None, None, None]
    sol = solve_elastic_fft(
        mat, LoadingCondition.uniaxial(axis=0, magnitude=e_bar),
        tol=1e-6, max_iter=100,
    )
    sigma_series = e_bar / (0.5 / pa.c11 + 0.5 / pb.c11)
    got = float(sol.stress.data[0].mean())
    laminate_rel = abs(got - sigma_series) / sigma_series
    result["laminate_rel"] = laminate_rel
    rows.append(("laminate_rel_error", laminate_rel))

    # Random polycrystals: effective uniaxial quadratic form between the
    # Reuss and Voigt averages of the same stiffness field.
    load = LoadingCondition.uniaxial(axis=0, magnitude=8e-5)
    w6 = np.array([1.0, 1.0, 1.0, 2.0, 2.0, 2.0])
    bounds = []
    for j in range(20):
        grains = int(rng.integers(10, 25))
        ms_seed = int(rng.integers(0, 2**31 - 1))
        ms = gen_polycrystal(ms_seed, GridSpec.cubic(n), grains)
        mat = expand_stiffness(featurize(ms, STEEL))
        q_reuss, q_voigt = _kelvin_quadratics(mat, load.mean_strain)
        sol = solve_elastic_fft(mat, load, tol=1e-6, max_iter=400)
        sig_mean = sol.stress.data.mean(axis=(1, 2, 3))
        q_eff = float(np.sum(w6 * sig_mean * load.mean_strain))
        bounds.append((q_reuss, q_eff, q_voigt, sol.converged))
        rows.append((f"poly{j:02d}_reuss", q_reuss))
        rows.append((f"poly{j:02d}_effective", q_eff))
        rows.append((f"poly{j:02d}_voigt", q_voigt))
    result["bounds"] = bounds

    lines = ["check,value"] + [f"{name},{_g17(v)}" for name, v in rows]
    csv_path.write_text("\n".join(lines) + "\n")
    return result


class TestCriterion3:
    def test_dns_oracle(self, tmp_path):
        t0 = time.perf_counter()
        res = run_dns_oracle(33, tmp_path / "dns_oracle.csv")
        ok = res["homog_iterations"] == 1 and res["homog_rel"] <= 1e-12
        ok = ok and res["laminate_rel"] <= 1e-5
        worst_slack = 0.0
        for q_reuss, q_eff, q_voigt, converged in res["bounds"]:
            ok = ok and converged and q_reuss < q_voigt
            slack = 1e-4 * q_voigt
            ok = ok and (q_reuss - slack <= q_eff <= q_voigt + slack)
            worst_slack = max(
                worst_slack,
                (q_reuss - q_eff) / q_voigt,
                (q_eff - q_voigt) / q_voigt,
            )
        elapsed = time.perf_counter() - t0
        ok = ok and elapsed < 300.0
        report(
            3, ok,
            f"homogeneous 1 iter rel {res['homog_rel']:.1e}, laminate rel "
            f"{res['laminate_rel']:.1e} <= 1e-5, 20 polycrystals inside "
            f"Reuss/Voigt (worst excursion {worst_slack:.1e}), "
            f"{elapsed:.1f} s < 300 s",
        )


# ---------------------------------------------------------------------------
# criterion 4: stiffness rotation against the 81-term oracle


def rotate_rank4_loops(c4: np.ndarray, r: np.ndarray) -> np.ndarray:
    out = np.zeros((3, 3, 3, 3))
    for i, j, k, l in itertools.product(range(3), repeat=4):
        acc = 0.0
        for a, b, c, d in itertools.product(range(3), repeat=4):
            acc += r[i, a] * r[j, b] * r[k, c] * r[l, d] * c4[a, b, c, d]
        out[i, j, k, l] = acc
    return out


def voigt66_from_rank4(c4: np.ndarray) -> np.ndarray:
    m = np.empty((6, 6))
    for I, (i, j) in enumerate(VOIGT_PAIRS):
        for J, (k, l) in enumerate(VOIGT_PAIRS):
            m[I, J] = c4[i, j, k, l]
    return m


def proper_cubic_rotations():
    mats = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1.0, -1.0), repeat=3):
            r = np.zeros((3, 3))
            for row, col in enumerate(perm):
                r[row, col] = signs[row]
            if np.linalg.det(r) > 0.5:
                mats.append(r)
    return mats


class TestCriterion4:
    def test_rotation_oracle(self):
        rng = np.random.default_rng(44)
        c4 = STEEL.rank4()
        scale = np.abs(voigt66_from_rank4(c4)).max()
        worst = 0.0
        for _ in range(100):
            q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
            if np.linalg.det(q) < 0.0:
                q[:, 0] = -q[:, 0]
            got = rotate_stiffness(STEEL, q)
            want = voigt66_from_rank4(rotate_rank4_loops(c4, q))
            worst = max(worst, float(np.abs(got - want).max() / scale))

        base = rotate_stiffness(STEEL, np.eye(3))
        cubics = proper_cubic_rotations()
        worst_sym = 0.0
        for r in cubics:
            got = rotate_stiffness(STEEL, r)
            worst_sym = max(worst_sym, float(np.abs(got - base).max() / scale))
        ok = worst <= 1e-12 and worst_sym <= 1e-12 and len(cubics) == 24
        report(
            4, ok,
            f"100 random rotations vs oracle {worst:.1e} <= 1e-12, "
            f"{len(cubics)} proper cubic rotations invariant {worst_sym:.1e}",
        )


# ---------------------------------------------------------------------------
# criterion 5: finite-difference gradients and adjoint identities


def _loss_setup(mode: str, case: str, rng):
    n, m = 8, 4
    cfg = NetConfig(
        mode=mode, case=case, levels=2, base_channels=8,
        channel_multipliers=(1, 2), norm_groups=4, dropout=0.0,
    )
    model = init_net(cfg, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    if case == "pore":
        ms = gen_pore(int(rng.integers(1 << 30)), GridSpec.cubic(n), PoreParams())
        feats = featurize(ms, STEEL, 0.3)
        kine_ch = 6
        mask = np.ones((m, m, m))
        mask[0, 1, 2] = 0.0
        mask[3, 0, 1] = 0.0
    else:
        ms = gen_polycrystal(int(rng.integers(1 << 30)), GridSpec.cubic(n), 6)
        feats = featurize(ms, STEEL)
        kine_ch = 9
        mask = None
    sigma_t = rng.standard_normal((6, m, m, m))
    kine_t = rng.standard_normal((kine_ch, m, m, m))
    if case == "poly":
        kine_t[0] += 1.0
        kine_t[4] += 1.0
        kine_t[8] += 1.0
    in_norm = Normalizer.fit(feats[None])
    white = in_norm.normalize(feats)
    loss_cfg = LossConfig(
        variant=f"{mode}_{case}", beta=0.8, normalize_physics=(case == "pore")
    )
    sig_norm = Normalizer.fit(sigma_t[None], shared=True)
    kine_norm = Normalizer.fit(kine_t[None], shared=True)
    model.set_loading(np.array([1e-3, 0, 0, 0, 0, 0.0]))
    # Kinematic fluctuations must stay small enough to keep det F positive,
    # as the trained output scales (target standard deviations) would.
    model.set_output_scales(1.0, 1e-3 if case == "poly" else 1.0)
    stiffness = feats if mode == "weco" else None

    def value_and_grads(want_grads: bool):
        out = forward(model, white, train=False, stiffness=stiffness)
        ps = out.sigma.value
        pk = out.kine.value
        if case == "pore":
            v, ds, dk = loss_pore(ps, pk, sigma_t, kine_t, mask, feats, loss_cfg)
        else:
            v, ds, dk = loss_poly(
                ps, pk, sigma_t, kine_t, feats, sig_norm, kine_norm, loss_cfg
            )
        if not want_grads:
            return v, None
        return v, backward(out, d_sigma=ds, d_kine=dk)

    return model, value_and_grads


def _fd_check(model, value_and_grads, rng, n_coords: int):
    _, grads = value_and_grads(True)
    names = [name for name in grads if np.abs(grads[name]).max() > 0]
    worst = 0.0
    checked = 0
    while checked < n_coords:
        name = names[int(rng.integers(len(names)))]
        g = grads[name]
        flat = np.abs(g).ravel()
        good = np.flatnonzero(flat >= 1e-3 * flat.max())
        idx = int(good[int(rng.integers(good.size))])
        tensor = model.params[name].value
        base = tensor.ravel()[idx]
        an = float(g.ravel()[idx])
        # The absolute-value losses have kinks; a step that straddles one
        # invalidates the central difference. Shrinking the step makes a
        # kink artifact collapse while a genuine gradient error persists,
        # so take the best-converged of a small step ladder.
        rel = math.inf
        for h_scale in (1e-6, 1e-7, 1e-8):
            h = h_scale * max(1.0, abs(base))
            tensor.ravel()[idx] = base + h
            up, _ = value_and_grads(False)
            tensor.ravel()[idx] = base - h
            dn, _ = value_and_grads(False)
            tensor.ravel()[idx] = base
            fd = (up - dn) / (2 * h)
            rel = min(rel, abs(fd - an) / max(abs(fd), abs(an)))
            if rel <= 1e-6:
                break
        worst = max(worst, rel)
        checked += 1
    return worst, checked


def _adjoint_identities(rng) -> float:
    n = 12
    h = 1.0 / n

    def rel(lhs, rhs):
        return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1.0)

    worst = 0.0
    a = rng.standard_normal((n, n, n))
    b = rng.standard_normal((n, n, n))
    for ax in range(3):
        worst = max(
            worst,
            rel(np.sum(d1(a, ax, h) * b), -np.sum(a * d1(b, ax, h))),
        )
        for ax2 in range(3):
            worst = max(
                worst,
                rel(np.sum(d2(a, ax, ax2, h) * b), np.sum(a * d2(b, ax, ax2, h))),
            )

    hi = rng.standard_normal((6, n, n, n))
    lo = rng.standard_normal((6, n // 2, n // 2, n // 2))
    worst = max(
        worst,
        rel(np.sum(block_mean(hi, 2) * lo), np.sum(hi * downsample_adjoint(lo, 2))),
        rel(
            np.sum(upsample_nearest(lo, 2) * hi),
            np.sum(lo * upsample_nearest_adjoint(hi, 2)),
        ),
    )

    sig = rng.standard_normal((6, n, n, n))
    w3 = rng.standard_normal((3, n, n, n))
    worst = max(
        worst,
        rel(np.sum(div_sym(sig, h) * w3), np.sum(sig * div_sym_adjoint(w3, h))),
    )

    p = rng.standard_normal((3, n, n, n))
    abc = rng.uniform(0.5, 1.5, 3)
    w6 = rng.standard_normal((6, n, n, n))
    p_bar, abc_bar, mean_bar = equilibrium_adjoint(w6, p, abc, h)
    worst = max(
        worst,
        rel(np.sum(equilibrium_block(p, abc, np.zeros(6), h) * w6), np.sum(p * p_bar)),
        rel(np.sum(equilibrium_block(p, abc, np.zeros(6), h) * w6), float(abc @ abc_bar)),
    )
    mean = rng.standard_normal(6)
    worst = max(
        worst,
        rel(
            np.sum(equilibrium_block(np.zeros_like(p), abc, mean, h) * w6),
            float(mean @ mean_bar),
        ),
    )

    u = rng.standard_normal((3, n, n, n))
    u_bar, mean_bar = compatibility_adjoint(w6, h)
    worst = max(
        worst,
        rel(np.sum(compatibility_block(u, np.zeros(6), h) * w6), np.sum(u * u_bar)),
        rel(
            np.sum(compatibility_block(np.zeros_like(u), mean, h) * w6),
            float(mean @ mean_bar),
        ),
    )

    w9 = rng.standard_normal((9, n, n, n))
    mean9 = rng.standard_normal(9)
    u_bar, mean9_bar = defgrad_adjoint(w9, h)
    worst = max(
        worst,
        rel(np.sum(defgrad_block(u, np.zeros(9), h) * w9), np.sum(u * u_bar)),
        rel(
            np.sum(defgrad_block(np.zeros_like(u), mean9, h) * w9),
            float(mean9 @ mean9_bar),
        ),
    )
    return worst


class TestCriterion5:
    def test_gradients_and_adjoints(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(55)
        worst_fd = 0.0
        total = 0
        for mode in ("seco", "weco"):
            for case in ("pore", "poly"):
                model, fn = _loss_setup(mode, case, rng)
                worst, checked = _fd_check(model, fn, rng, 14)
                worst_fd = max(worst_fd, worst)
                total += checked
        worst_adj = _adjoint_identities(rng)
        elapsed = time.perf_counter() - t0
        ok = worst_fd <= 1e-4 and total >= 50 and worst_adj <= 1e-10
        ok = ok and elapsed < 600.0
        report(
            5, ok,
            f"finite-difference gradcheck {worst_fd:.2e} <= 1e-4 on {total} "
            f"coordinates (both modes, all four loss variants), adjoint "
            f"identities {worst_adj:.2e} <= 1e-10, {elapsed:.1f} s < 600 s",
        )


# ---------------------------------------------------------------------------
# criterion 6: finite-strain constitutive map


class TestCriterion6:
    def test_identity_and_linearization(self):
        rng = np.random.default_rng(66)
        mats = [
            rotate_stiffness(CubicConstants.from_isotropic(e=1.0, nu=0.3), np.eye(3)),
            rotate_stiffness(
                CubicConstants(c11=2.046, c12=1.377, c44=1.262), np.eye(3)
            ),
        ]
        exact_zero = all(
            np.all(finite_strain_cauchy(c66, np.eye(3)) == 0.0) for c66 in mats
        )

        worst = 0.0
        for c66 in mats:
            for _ in range(20):
                a = rng.standard_normal((3, 3))
                a *= 1e-5 / np.linalg.norm(a)
                sym = 0.5 * (a + a.T)
                ev = np.array([
                    sym[0, 0], sym[1, 1], sym[2, 2],
                    2 * sym[1, 2], 2 * sym[0, 2], 2 * sym[0, 1],
                ])
                sv = c66 @ ev
                lin = np.array([
                    [sv[0], sv[5], sv[4]],
                    [sv[5], sv[1], sv[3]],
                    [sv[4], sv[3], sv[2]],
                ])
                got = finite_strain_cauchy(c66, np.eye(3) + a)
                worst = max(worst, float(np.abs(got - lin).max()))
        ok = exact_zero and worst <= 1e-9
        report(
            6, ok,
            f"identity maps to exactly zero stress: {exact_zero}; "
            f"linearization error {worst:.2e} <= 1e-9 at |A| = 1e-5",
        )


# ---------------------------------------------------------------------------
# criterion 7: miniature super-resolution experiment


class TestCriterion7:
    def test_super_nyquist_recovery(self, mini):
        eval_dir = mini.run / "metrics" / "eval" / "test"
        nrmse = read_csv_column(eval_dir / "model" / "nrmse.csv", 0, 1)
        s11 = nrmse["s11"]

        log_rows = (mini.run / "metrics" / "train_log.csv").read_text().splitlines()
        steps = (len(log_rows) - 1) * math.ceil(64 / MINI_BATCH)

        k_pred, p_pred = read_spectrum(eval_dir / "model" / "spectrum_s11_pred.csv")
        k_dns, p_dns = read_spectrum(eval_dir / "model" / "spectrum_s11_dns.csv")
        k_base, p_base = read_spectrum(
            eval_dir / "model" / "spectrum_s11_baseline.csv"
        )
        assert np.array_equal(k_pred, k_dns) and np.array_equal(k_pred, k_base)

        above = k_pred > LR // 2
        base_tail = float(p_base[above].sum())
        pred_tail = float(p_pred[above].sum())
        band = (k_pred > LR // 2) & (k_pred <= LR // 2 + 4)
        ratios = p_pred[band] / p_dns[band]
        runtime = sum(mini.times.values())

        ok = s11 <= 0.25
        ok = ok and steps <= 2000
        ok = ok and base_tail == 0.0 and pred_tail > 0.0
        ok = ok and np.all(ratios >= 1.0 / 3.0) and np.all(ratios <= 3.0)
        ok = ok and runtime < 3600.0
        report(
            7, ok,
            f"masked s11 nRMSE {s11:.3f} <= 0.25 after {steps} steps; "
            f"baseline power above Nyquist {base_tail:.1e} (exact zero), "
            f"prediction {pred_tail:.3e} > 0; shell ratios to reference in "
            f"({ratios.min():.2f}, {ratios.max():.2f}) within [1/3, 3]; "
            f"pipeline {runtime / 60:.1f} min < 60 min",
        )


# ---------------------------------------------------------------------------
# criterion 8: byte determinism of the metrics


class TestCriterion8:
    def test_metrics_reproduce_byte_identically(self, mini, tmp_path):
        csv_a = tmp_path / "oracle_a.csv"
        csv_b = tmp_path / "oracle_b.csv"
        run_dns_oracle(33, csv_a)
        run_dns_oracle(33, csv_b)
        oracle_ok = csv_a.read_bytes() == csv_b.read_bytes()

        cfg2 = write_mini_config(mini.base / "exp2.ini", mini.base / "run2")
        run_mini_pipeline(cfg2)

        rel_paths = ["metrics/train_log.csv"]
        rel_paths += [f"data/{split}/solve_log.csv" for split in ("train", "val", "test")]
        eval_dir = mini.run / "metrics" / "eval" / "test"
        rel_paths += [
            str(p.relative_to(mini.run)) for p in sorted(eval_dir.rglob("*.csv"))
        ]
        mismatched = [
            rel for rel in rel_paths
            if (mini.run / rel).read_bytes() != (mini.base / "run2" / rel).read_bytes()
        ]
        ok = oracle_ok and not mismatched
        report(
            8, ok,
            f"solver oracle CSV identical: {oracle_ok}; miniature experiment "
            f"rerun: {len(rel_paths)} metrics CSVs compared, "
            f"{len(mismatched)} mismatched",
        )

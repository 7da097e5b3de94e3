"""Single command-line entry point for the whole experiment pipeline.

Subcommands: ``gen`` (microstructures), ``solve`` (spectral reference
solutions), ``train`` (surrogate fitting), ``infer`` (high-resolution
prediction), ``eval`` (metric CSVs against the reference and the spectral
upsampling baseline), ``selftest`` (property residual table).

Everything lives under one run directory (``data/``, ``checkpoints/``,
``metrics/``, ``predictions/``) and every output is a pure function of the
config file and the seed: reruns reproduce manifests, loss logs, and metric
CSVs byte for byte. Only stdlib modules are imported at module scope so that
``--threads`` (or ``ECO_THREADS``) can pin BLAS thread counts before numpy
first loads.

Exit codes: 0 success, 2 configuration or policy error, 3 numeric failure,
4 missing prerequisite.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import os
import shutil
import sys
import typing
from collections import abc
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_MISSING = 4

_SPLITS = ("train", "val", "test")
_SIGMA_LABELS = ("s11", "s22", "s33", "s23", "s13", "s12")
_STRAIN_LABELS = ("e11", "e22", "e33", "e23", "e13", "e12")
_DEFGRAD_LABELS = ("f11", "f12", "f13", "f21", "f22", "f23", "f31", "f32", "f33")


class CliError(Exception):
    """Base for errors that map to a specific process exit code."""

    exit_code = EXIT_CONFIG


class ConfigError(CliError):
    exit_code = EXIT_CONFIG


class NumericError(CliError):
    exit_code = EXIT_NUMERIC


class MissingPrerequisiteError(CliError):
    exit_code = EXIT_MISSING


# ---------------------------------------------------------------------------
# Configuration


@dataclasses.dataclass
class ExperimentConfig:
    """Everything one experiment needs, resolved and validated.

    Built from an INI file with sections [run], [data], [material],
    [solver], [net], [train], [loss]; the net/train/loss sections coerce
    directly into the library config dataclasses, with derived keys (net
    case, loss variant, train seed and downsample factor) computed here
    rather than accepted from the file.
    """

    run_dir: Path
    seed: int
    threads: int
    case: str
    n_train: int
    n_val: int
    n_test: int
    hr_resolution: int
    lr_resolution: int
    load_axis: int
    load_magnitude: float
    grain_target: int
    c11: float
    c12: float
    c44: float
    pore_scale: float
    tol: float
    max_iter: int
    net: object
    net_dtype: str
    train: object
    loss: object

    @property
    def factor(self) -> int:
        return self.hr_resolution // self.lr_resolution

    def loading_vector(self):
        import numpy as np

        e = np.zeros(6)
        e[self.load_axis] = self.load_magnitude
        return e

    def constants(self):
        from ecosr.microgen import CubicConstants

        return CubicConstants(c11=self.c11, c12=self.c12, c44=self.c44)

    def data_dir(self) -> Path:
        return self.run_dir / "data"

    def metrics_dir(self) -> Path:
        return self.run_dir / "metrics"

    def checkpoint_path(self) -> Path:
        return self.run_dir / "checkpoints" / "model.eckp"

    def predictions_dir(self) -> Path:
        return self.run_dir / "predictions"


def _is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def _coerce(raw: str, hint, where: str):
    origin = typing.get_origin(hint)
    if origin in (tuple, list, abc.Sequence):
        try:
            return tuple(int(part.strip()) for part in raw.split(",") if part.strip())
        except ValueError:
            raise ConfigError(f"{where}: expected a comma-separated integer list, got {raw!r}")
    if hint is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    if hint is int:
        try:
            return int(raw.strip(), 10)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer, got {raw!r}")
    if hint is float:
        try:
            return float(raw.strip())
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {raw!r}")
    return raw.strip()


def _build_section(cls, section: dict, name: str, reserved: dict, path):
    """Coerce one INI section into a library config dataclass."""
    hints = typing.get_type_hints(cls)
    valid = {f.name for f in dataclasses.fields(cls)}
    kwargs = dict(reserved)
    for key, raw in section.items():
        where = f"{path}: [{name}] {key}"
        if key in reserved:
            raise ConfigError(f"{where} is derived from other settings; remove it")
        if key not in valid:
            raise ConfigError(f"{where} is not a recognized option")
        kwargs[key] = _coerce(raw, hints[key], where)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path}: [{name}] {exc}".replace("__init__() ", ""))
    except ValueError as exc:
        raise ConfigError(f"{path}: [{name}] {exc}")


def load_config(path, seed_override=None, threads_override=None) -> ExperimentConfig:
    from ecosr.net import NetConfig
    from ecosr.training import LossConfig, TrainConfig

    path = Path(path)
    parser = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=("#", ";")
    )
    if not path.is_file():
        raise ConfigError(f"{path}: config file not found")
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}")

    known = {"run", "data", "material", "solver", "net", "train", "loss"}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"{path}: unknown section [{section}]")

    def section(name):
        return dict(parser.items(name)) if parser.has_section(name) else {}

    def scalar(sec, key, hint, default):
        raw = section(sec).get(key)
        if raw is None:
            if default is None:
                raise ConfigError(f"{path}: [{sec}] {key} is required")
            return default
        return _coerce(raw, hint, f"{path}: [{sec}] {key}")

    run_keys = {"run_dir", "seed", "threads"}
    data_keys = {
        "case", "n_train", "n_val", "n_test", "hr_resolution", "lr_resolution",
        "load_axis", "load_magnitude", "grain_target",
    }
    material_keys = {"c11", "c12", "c44", "pore_scale"}
    solver_keys = {"tol", "max_iter"}
    for sec, keys in (("run", run_keys), ("data", data_keys),
                      ("material", material_keys), ("solver", solver_keys)):
        for key in section(sec):
            if key not in keys:
                raise ConfigError(f"{path}: [{sec}] {key} is not a recognized option")

    run_dir = Path(scalar("run", "run_dir", str, None))
    seed = seed_override if seed_override is not None else scalar("run", "seed", int, 0)
    threads = (
        threads_override if threads_override is not None
        else scalar("run", "threads", int, 0)
    )

    case = scalar("data", "case", str, "pore").lower()
    if case not in ("pore", "polycrystal"):
        raise ConfigError(f"{path}: [data] case must be 'pore' or 'polycrystal', got {case!r}")
    n_train = scalar("data", "n_train", int, 8)
    n_val = scalar("data", "n_val", int, 2)
    n_test = scalar("data", "n_test", int, 2)
    if min(n_train, n_val, n_test) < 1:
        raise ConfigError(f"{path}: [data] sample counts must all be at least 1")
    hr = scalar("data", "hr_resolution", int, 32)
    lr = scalar("data", "lr_resolution", int, 16)
    if not (_is_power_of_two(hr) and _is_power_of_two(lr)):
        raise ConfigError(f"{path}: [data] resolutions must be powers of two, got {lr} and {hr}")
    if lr >= hr:
        raise ConfigError(f"{path}: [data] lr_resolution {lr} must be below hr_resolution {hr}")
    load_axis = scalar("data", "load_axis", int, 0)
    if load_axis not in (0, 1, 2):
        raise ConfigError(f"{path}: [data] load_axis must be 0, 1, or 2")
    load_magnitude = scalar("data", "load_magnitude", float, 1e-3)
    if load_magnitude == 0.0:
        raise ConfigError(f"{path}: [data] load_magnitude must be nonzero")
    grain_target = scalar("data", "grain_target", int, 24)
    if grain_target < 8:
        raise ConfigError(f"{path}: [data] grain_target must be at least 8")

    c11 = scalar("material", "c11", float, 204.6)
    c12 = scalar("material", "c12", float, 137.7)
    c44 = scalar("material", "c44", float, 126.2)
    pore_scale = scalar("material", "pore_scale", float, 1e-3)
    if pore_scale <= 0.0:
        raise ConfigError(f"{path}: [material] pore_scale must be positive")

    tol = scalar("solver", "tol", float, 1e-6)
    max_iter = scalar("solver", "max_iter", int, 400)
    if tol <= 0.0 or max_iter < 1:
        raise ConfigError(f"{path}: [solver] tol must be positive and max_iter at least 1")

    short_case = "pore" if case == "pore" else "poly"
    net_section = section("net")
    net_dtype = net_section.pop("dtype", "float32").strip().lower()
    if net_dtype not in ("float32", "float64"):
        raise ConfigError(f"{path}: [net] dtype must be float32 or float64")
    net = _build_section(
        NetConfig, net_section, "net",
        {"case": short_case, "in_channels": 21}, path,
    )
    train = _build_section(
        TrainConfig, section("train"), "train",
        {"seed": seed, "downsample_factor": hr // lr}, path,
    )
    loss = _build_section(
        LossConfig, section("loss"), "loss",
        {"variant": f"{net.mode}_{short_case}"}, path,
    )

    try:
        cfg = ExperimentConfig(
            run_dir=run_dir, seed=seed, threads=threads, case=case,
            n_train=n_train, n_val=n_val, n_test=n_test,
            hr_resolution=hr, lr_resolution=lr,
            load_axis=load_axis, load_magnitude=load_magnitude,
            grain_target=grain_target,
            c11=c11, c12=c12, c44=c44, pore_scale=pore_scale,
            tol=tol, max_iter=max_iter,
            net=net, net_dtype=net_dtype, train=train, loss=loss,
        )
        cfg.constants()
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}")
    return cfg


# ---------------------------------------------------------------------------
# Shared plumbing


def _g17(x) -> str:
    return format(float(x), ".17g")


def _sample_name(i: int) -> str:
    return f"s{i:04d}"


def _counts(cfg) -> dict:
    return {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}


def _manifest_path(cfg) -> Path:
    return cfg.data_dir() / "manifest.json"


def _load_manifest(cfg) -> dict:
    path = _manifest_path(cfg)
    if not path.is_file():
        raise MissingPrerequisiteError(
            f"{path} not found; run `ecosr gen --config <file>` first"
        )
    return json.loads(path.read_text())


def _dataset_id(cfg) -> str:
    return hashlib.sha256(_manifest_path(cfg).read_bytes()).hexdigest()[:12]


def _load_microstructure(cfg, split: str, name: str):
    import numpy as np

    from ecosr.microgen import (
        GridSpec,
        PolycrystalMicrostructure,
        PoreMicrostructure,
    )

    grid = GridSpec.cubic(cfg.hr_resolution)
    base = cfg.data_dir() / split / name
    if cfg.case == "pore":
        path = base.with_suffix(".indicator.npy")
        if not path.is_file():
            raise MissingPrerequisiteError(f"{path} not found; run `ecosr gen` first")
        return PoreMicrostructure(grid=grid, indicator=np.load(path))
    gpath = base.with_suffix(".grains.npy")
    epath = base.with_suffix(".euler.npy")
    if not gpath.is_file() or not epath.is_file():
        raise MissingPrerequisiteError(f"{gpath} not found; run `ecosr gen` first")
    return PolycrystalMicrostructure(
        grid=grid, grain_ids=np.load(gpath), grain_euler=np.load(epath)
    )


def _field_path(cfg, split: str, name: str, stem: str) -> Path:
    return cfg.data_dir() / split / f"{name}.{stem}.ecof"


def _read_solution(cfg, split: str, name: str, stem: str):
    from ecosr.ecof import read_field

    path = _field_path(cfg, split, name, stem)
    if not path.is_file():
        return None
    return read_field(path)


def _restore_model(ckpt_path):
    import numpy as np

    from ecosr.net import ECONet, NetConfig, load_checkpoint
    from ecosr.training import Normalizer

    store, rng_state, extra = load_checkpoint(os.fspath(ckpt_path))
    if not extra or "net_config" not in extra:
        raise MissingPrerequisiteError(
            f"{ckpt_path}: checkpoint carries no architecture record"
        )
    raw = dict(extra["net_config"])
    raw["channel_multipliers"] = tuple(raw["channel_multipliers"])
    model = ECONet(NetConfig(**raw), store)
    model.set_loading(np.asarray(extra["loading"], dtype=np.float64))
    model.set_output_scales(extra["sigma_scale"], extra["kine_scale"])
    norms = {
        key: Normalizer.from_jsonable(extra[key])
        for key in ("input_norm", "sigma_norm", "kine_norm")
    }
    return model, norms, extra, model.dtype


def _predict(cfg, model, norms, dtype, ms):
    """Featurize one microstructure and run the network in eval mode."""
    from ecosr.microgen import featurize
    from ecosr.net import forward

    feats = featurize(ms, cfg.constants(), cfg.pore_scale)
    white = norms["input_norm"].normalize(feats).astype(dtype)
    stiffness = feats.astype(dtype) if model.config.mode == "weco" else None
    return forward(model, white, train=False, stiffness=stiffness)


# ---------------------------------------------------------------------------
# gen


def cmd_gen(cfg, force: bool) -> int:
    import numpy as np

    from ecosr.microgen import GridSpec, PoreParams, gen_polycrystal, gen_pore

    data_dir = cfg.data_dir()
    if data_dir.is_dir() and any(data_dir.iterdir()):
        if not force:
            raise ConfigError(
                f"{data_dir} already holds files; pass --force to regenerate"
            )
        shutil.rmtree(data_dir)

    grid = GridSpec.cubic(cfg.hr_resolution)
    splits = {}
    total = 0
    for split_idx, split in enumerate(_SPLITS):
        out = data_dir / split
        out.mkdir(parents=True, exist_ok=True)
        entries = []
        for i in range(_counts(cfg)[split]):
            seq = np.random.SeedSequence(entropy=cfg.seed, spawn_key=(split_idx, i))
            sample_seed = int(seq.generate_state(1, dtype=np.uint32)[0])
            name = _sample_name(i)
            entry = {"index": i, "seed": sample_seed}
            if cfg.case == "pore":
                ms = gen_pore(sample_seed, grid, PoreParams())
                np.save(out / f"{name}.indicator.npy", ms.indicator)
            else:
                target = cfg.grain_target - 6 + sample_seed % 13
                ms = gen_polycrystal(sample_seed, grid, target)
                np.save(out / f"{name}.grains.npy", ms.grain_ids)
                np.save(out / f"{name}.euler.npy", ms.grain_euler)
                entry["grains"] = ms.num_grains
            entries.append(entry)
            total += 1
        splits[split] = entries

    manifest = {
        "case": cfg.case,
        "hr_resolution": cfg.hr_resolution,
        "lr_resolution": cfg.lr_resolution,
        "seed": cfg.seed,
        "constants": [cfg.c11, cfg.c12, cfg.c44],
        "pore_scale": cfg.pore_scale,
        "loading": [float(v) for v in cfg.loading_vector()],
        "splits": splits,
    }
    body = json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    _manifest_path(cfg).write_text(body)
    digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
    print(f"gen: wrote {total} microstructures to {data_dir}")
    print(f"gen: manifest sha256 {digest}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# solve


def _requested_resolutions(split: str, resolution) -> tuple:
    if split in ("train", "val"):
        if resolution in (None, "lr"):
            return ("lr",)
        raise ConfigError(
            f"split '{split}' is supervised at low resolution only; "
            f"an HR solve is refused by design"
        )
    if resolution is None or resolution == "both":
        return ("lr", "hr")
    if resolution in ("lr", "hr"):
        return (resolution,)
    raise ConfigError(f"unknown resolution {resolution!r}")


def cmd_solve(cfg, split: str, resolution=None) -> int:
    import numpy as np

    from ecosr.dns import (
        DnsNumericsError,
        LoadingCondition,
        defgrad_from_strain,
        solve_elastic_fft,
    )
    from ecosr.ecof import write_field
    from ecosr.fieldcore import Field, FieldKind
    from ecosr.microgen import downsample_microstructure, featurize

    manifest = _load_manifest(cfg)
    loading = LoadingCondition(mean_strain=cfg.loading_vector())
    splits = _SPLITS if split == "all" else (split,)
    solved = excluded = 0
    for sp in splits:
        resolutions = _requested_resolutions(sp, resolution)
        rows = []
        for entry in manifest["splits"][sp]:
            name = _sample_name(entry["index"])
            ms_hr = _load_microstructure(cfg, sp, name)
            ms_lr = downsample_microstructure(ms_hr, cfg.factor)
            for res in resolutions:
                ms_use = ms_hr if res == "hr" else ms_lr
                feats = featurize(ms_use, cfg.constants(), cfg.pore_scale)
                try:
                    sol = solve_elastic_fft(
                        feats, loading, tol=cfg.tol, max_iter=cfg.max_iter
                    )
                except DnsNumericsError as exc:
                    print(
                        f"solve: warning: {sp}/{name} at {res} diverged and is "
                        f"excluded ({exc})",
                        file=sys.stderr,
                    )
                    rows.append((name, res, -1, float("nan"), "diverged"))
                    excluded += 1
                    continue
                status = "converged" if sol.converged else "max_iter"
                rows.append(
                    (name, res, sol.iterations, float(sol.residuals[-1]), status)
                )
                write_field(_field_path(cfg, sp, name, f"sigma_{res}"), sol.stress)
                write_field(_field_path(cfg, sp, name, f"strain_{res}"), sol.strain)
                if cfg.case == "polycrystal":
                    f9 = defgrad_from_strain(
                        sol.strain.data, mean_strain=cfg.loading_vector()
                    )
                    write_field(
                        _field_path(cfg, sp, name, f"defgrad_{res}"),
                        Field(sol.grid, FieldKind.TENSOR2, f9),
                    )
                solved += 1
        log = cfg.data_dir() / sp / "solve_log.csv"
        lines = ["sample,resolution,iterations,residual,status"]
        lines += [
            f"{n},{r},{it},{_g17(res_)},{st}" for n, r, it, res_, st in rows
        ]
        log.write_text("\n".join(lines) + "\n")
    print(f"solve: {solved} solutions written, {excluded} excluded")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _kine_stem(cfg) -> str:
    return "strain" if cfg.case == "pore" else "defgrad"


def _gather_samples(cfg, split: str):
    import numpy as np

    from ecosr.microgen import featurize, pore_mask_lr
    from ecosr.training import TrainSample

    manifest = _load_manifest(cfg)
    samples = []
    skipped = 0
    for entry in manifest["splits"][split]:
        name = _sample_name(entry["index"])
        sigma = _read_solution(cfg, split, name, "sigma_lr")
        kine = _read_solution(cfg, split, name, f"{_kine_stem(cfg)}_lr")
        if sigma is None or kine is None:
            skipped += 1
            continue
        ms = _load_microstructure(cfg, split, name)
        feats = featurize(ms, cfg.constants(), cfg.pore_scale)
        mask = None
        if cfg.case == "pore" and cfg.loss.mask_enabled:
            mask = pore_mask_lr(ms, cfg.factor)
        samples.append(
            TrainSample(
                features=feats,
                sigma_lr=np.asarray(sigma.data, dtype=np.float64),
                kine_lr=np.asarray(kine.data, dtype=np.float64),
                mask_lr=mask,
            )
        )
    if skipped:
        print(
            f"train: warning: {skipped} {split} samples lack solutions and are skipped",
            file=sys.stderr,
        )
    if not samples:
        raise MissingPrerequisiteError(
            f"no solved {split} samples under {cfg.data_dir() / split}; "
            f"run `ecosr solve` first"
        )
    return samples


def cmd_train(cfg) -> int:
    import numpy as np

    from ecosr.net import init_net
    from ecosr.training import train

    train_samples = _gather_samples(cfg, "train")
    val_samples = _gather_samples(cfg, "val")
    dtype = np.float32 if cfg.net_dtype == "float32" else np.float64
    model = init_net(cfg.net, seed=cfg.seed, dtype=dtype)

    cfg.metrics_dir().mkdir(parents=True, exist_ok=True)
    cfg.checkpoint_path().parent.mkdir(parents=True, exist_ok=True)
    log_path = cfg.metrics_dir() / "train_log.csv"
    try:
        rows = train(
            model,
            train_samples,
            val_samples,
            cfg.train,
            cfg.loss,
            loading=cfg.loading_vector(),
            log_path=os.fspath(log_path),
            checkpoint_path=os.fspath(cfg.checkpoint_path()),
        )
    except FloatingPointError as exc:
        raise NumericError(f"training aborted: {exc}")
    last = rows[-1]
    print(
        f"train: {len(rows)} epochs; final train loss {last['train_loss']:.6g}, "
        f"val loss {last['val_loss']:.6g}, divergence {last['div_residual']:.3e}"
    )
    print(f"train: checkpoint {cfg.checkpoint_path()}, log {log_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer


def cmd_infer(cfg, split: str = "test", checkpoint=None) -> int:
    import numpy as np

    from ecosr.ecof import write_field
    from ecosr.fieldcore import Field, FieldKind, GridSpec

    ckpt = Path(checkpoint) if checkpoint else cfg.checkpoint_path()
    if not ckpt.is_file():
        raise MissingPrerequisiteError(
            f"{ckpt} not found; run `ecosr train` first or pass --checkpoint"
        )
    model, norms, extra, dtype = _restore_model(ckpt)
    expected = f"{cfg.net.mode}_{'pore' if cfg.case == 'pore' else 'poly'}"
    if extra.get("variant") != expected:
        raise ConfigError(
            f"checkpoint variant {extra.get('variant')!r} does not match the "
            f"configured {expected!r}"
        )

    manifest = _load_manifest(cfg)
    out_dir = cfg.predictions_dir() / split
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = GridSpec.cubic(cfg.hr_resolution)
    kine_kind = FieldKind.SYMTENSOR if cfg.case == "pore" else FieldKind.TENSOR2
    written = 0
    for entry in manifest["splits"][split]:
        name = _sample_name(entry["index"])
        ms = _load_microstructure(cfg, split, name)
        out = _predict(cfg, model, norms, dtype, ms)
        sigma = np.asarray(out.sigma.value)
        kine = np.asarray(out.kine.value)
        write_field(out_dir / f"{name}.sigma_pred.ecof", Field(grid, FieldKind.SYMTENSOR, sigma))
        write_field(
            out_dir / f"{name}.{_kine_stem(cfg)}_pred.ecof", Field(grid, kine_kind, kine)
        )
        written += 1
    print(f"infer: wrote {written} predictions to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _strain_from_defgrad(f9):
    import numpy as np

    return np.stack(
        [
            f9[0] - 1.0,
            f9[4] - 1.0,
            f9[8] - 1.0,
            0.5 * (f9[5] + f9[7]),
            0.5 * (f9[2] + f9[6]),
            0.5 * (f9[1] + f9[3]),
        ]
    )


def _mean_spectrum(spectra):
    import numpy as np

    from ecosr.eval import RadialSpectrum

    return RadialSpectrum(
        zero_mode=float(np.mean([s.zero_mode for s in spectra])),
        k=spectra[0].k,
        power=np.mean([s.power for s in spectra], axis=0),
        counts=spectra[0].counts,
    )


def _write_slice(path, plane):
    rows = [",".join(_g17(v) for v in line) for line in plane]
    path.write_text("\n".join(rows) + "\n")


def cmd_eval(cfg, split: str = "test", slices: bool = False) -> int:
    import numpy as np

    from ecosr.ecof import read_field
    from ecosr.eval import (
        MetricsReport,
        energy_histogram,
        nrmse,
        radial_power_spectrum,
        spectral_upsample_baseline,
        strain_energy,
    )
    from ecosr.fieldcore import div_sym
    from ecosr.net import load_checkpoint

    manifest = _load_manifest(cfg)
    pred_dir = cfg.predictions_dir() / split
    kstem = _kine_stem(cfg)
    kine_labels = _STRAIN_LABELS if cfg.case == "pore" else _DEFGRAD_LABELS
    labels = _SIGMA_LABELS + kine_labels
    n = cfg.hr_resolution
    spacing = 1.0 / n

    per_subject = {
        "model": {"nrmse": [], "divs": [], "spec": {"pred": [], "dns": [], "baseline": []},
                   "energy": [], "energy_ref": []},
        "baseline": {"nrmse": [], "divs": [], "spec": {"pred": [], "dns": []},
                      "energy": [], "energy_ref": []},
    }
    evaluated = 0
    slice_dir = cfg.metrics_dir() / "eval" / split / "slices"
    if slices:
        slice_dir.mkdir(parents=True, exist_ok=True)

    for entry in manifest["splits"][split]:
        name = _sample_name(entry["index"])
        ppath = pred_dir / f"{name}.sigma_pred.ecof"
        if not ppath.is_file():
            raise MissingPrerequisiteError(f"{ppath} not found; run `ecosr infer` first")
        ref_sigma = _read_solution(cfg, split, name, "sigma_hr")
        ref_kine = _read_solution(cfg, split, name, f"{kstem}_hr")
        lr_sigma = _read_solution(cfg, split, name, "sigma_lr")
        lr_kine = _read_solution(cfg, split, name, f"{kstem}_lr")
        if ref_sigma is None or ref_kine is None or lr_sigma is None or lr_kine is None:
            print(
                f"eval: warning: {split}/{name} lacks reference solutions; skipped",
                file=sys.stderr,
            )
            continue
        pred_sigma = np.asarray(read_field(ppath).data, dtype=np.float64)
        pred_kine = np.asarray(
            read_field(pred_dir / f"{name}.{kstem}_pred.ecof").data, dtype=np.float64
        )
        rs = np.asarray(ref_sigma.data, dtype=np.float64)
        rk = np.asarray(ref_kine.data, dtype=np.float64)
        base_sigma = spectral_upsample_baseline(
            np.asarray(lr_sigma.data, dtype=np.float64), cfg.factor
        )
        base_kine = spectral_upsample_baseline(
            np.asarray(lr_kine.data, dtype=np.float64), cfg.factor
        )

        mask = None
        keep = np.ones((n, n, n), dtype=bool)
        if cfg.case == "pore":
            ms = _load_microstructure(cfg, split, name)
            mask = (1 - ms.indicator).astype(np.float64)
            keep = mask.astype(bool)

        ref_all = np.concatenate([rs, rk])
        for subject, ps, pk in (
            ("model", pred_sigma, pred_kine),
            ("baseline", base_sigma, base_kine),
        ):
            bucket = per_subject[subject]
            try:
                bucket["nrmse"].append(
                    nrmse(np.concatenate([ps, pk]), ref_all, mask=mask)
                )
            except ValueError as exc:
                raise NumericError(f"eval: {split}/{name}: {exc}")
            bucket["divs"].append(float(np.mean(np.abs(div_sym(ps, spacing)))))
            bucket["spec"]["pred"].append(radial_power_spectrum(ps[0]))
            if "dns" in bucket["spec"]:
                bucket["spec"]["dns"].append(radial_power_spectrum(rs[0]))
            eps_pred = pk if cfg.case == "pore" else _strain_from_defgrad(pk)
            eps_ref = rk if cfg.case == "pore" else _strain_from_defgrad(rk)
            bucket["energy"].append(strain_energy(ps, eps_pred)[keep])
            bucket["energy_ref"].append(strain_energy(rs, eps_ref)[keep])
        per_subject["model"]["spec"]["baseline"].append(
            radial_power_spectrum(base_sigma[0])
        )
        if slices:
            mid = n // 2
            _write_slice(slice_dir / f"{name}_s11_pred.csv", pred_sigma[0][:, :, mid])
            _write_slice(slice_dir / f"{name}_s11_dns.csv", rs[0][:, :, mid])
            _write_slice(slice_dir / f"{name}_s11_baseline.csv", base_sigma[0][:, :, mid])
        evaluated += 1

    if not evaluated:
        raise MissingPrerequisiteError(
            f"no evaluable samples in split '{split}'; run `ecosr solve` and "
            f"`ecosr infer` first"
        )

    model_id = "unknown"
    if cfg.checkpoint_path().is_file():
        _, _, extra = load_checkpoint(os.fspath(cfg.checkpoint_path()))
        if extra:
            model_id = f"model.eckp@epoch{extra.get('epoch')}"
    base_prov = {
        "dataset": _dataset_id(cfg),
        "resolution": f"{cfg.lr_resolution}->{cfg.hr_resolution}",
        "split": split,
        "samples": str(evaluated),
    }

    for subject, bucket in per_subject.items():
        edges, masses = energy_histogram(
            {
                "pred": np.concatenate(bucket["energy"]),
                "dns": np.concatenate(bucket["energy_ref"]),
            }
        )
        spectra = {
            f"s11_{key}": _mean_spectrum(specs)
            for key, specs in bucket["spec"].items()
        }
        report = MetricsReport(
            labels=labels,
            nrmse=np.mean(bucket["nrmse"], axis=0),
            div_mean=float(np.mean(bucket["divs"])),
            div_max=float(np.max(bucket["divs"])),
            spectra=spectra,
            energy_edges=edges,
            energy_masses=masses,
            provenance={
                **base_prov,
                "model": model_id if subject == "model"
                else f"spectral_upsample_x{cfg.factor}",
            },
        )
        out_dir = cfg.metrics_dir() / "eval" / split / subject
        report.write_csv(out_dir)

    s11 = float(np.mean(per_subject["model"]["nrmse"], axis=0)[0])
    print(
        f"eval: {evaluated} samples; masked s11 nRMSE {s11:.4f}; "
        f"reports under {cfg.metrics_dir() / 'eval' / split}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# selftest


def cmd_selftest(seed: int = 0) -> int:
    import numpy as np

    from ecosr.dns import LoadingCondition, solve_elastic_fft
    from ecosr.ecoblocks import compatibility_block, equilibrium_block
    from ecosr.fieldcore import (
        VOIGT_PAIRS,
        block_mean,
        d1,
        div_sym,
        downsample_adjoint,
        inc_sym,
    )
    from ecosr.microgen import CubicConstants, rotate_stiffness
    from ecosr.training import div_sym_adjoint, finite_strain_cauchy

    rng = np.random.default_rng(seed)
    n = 16
    h = 1.0 / n
    rows = []

    p = rng.standard_normal((3, n, n, n))
    abc = np.array([1.0, 0.7, 1.3])
    sig = equilibrium_block(p, abc, np.zeros(6), h)
    resid = np.abs(div_sym(sig, h)).max() / np.abs(sig).max()
    rows.append(("equilibrium divergence (64-bit)", resid, 1e-12))

    u = rng.standard_normal((3, n, n, n))
    eps = compatibility_block(u, np.zeros(6), h)
    resid = np.abs(inc_sym(eps, h)).max() * h**2 / np.abs(eps).max()
    rows.append(("compatibility incompatibility", resid, 1e-12))

    a = rng.standard_normal((n, n, n))
    b = rng.standard_normal((n, n, n))
    lhs = float(np.sum(d1(a, 0, h) * b))
    rhs = -float(np.sum(a * d1(b, 0, h)))
    scale = np.abs(a).max() * np.abs(b).max() * n**3 / h
    rows.append(("first-difference adjoint", abs(lhs - rhs) / scale, 1e-10))

    hi = rng.standard_normal((6, n, n, n))
    lo = rng.standard_normal((6, n // 2, n // 2, n // 2))
    lhs = float(np.sum(block_mean(hi, 2) * lo))
    rhs = float(np.sum(hi * downsample_adjoint(lo, 2)))
    scale = max(abs(lhs), abs(rhs), 1.0)
    rows.append(("block-mean adjoint", abs(lhs - rhs) / scale, 1e-10))

    steel = CubicConstants(c11=204.6, c12=137.7, c44=126.2)
    c4 = steel.rank4()
    worst = 0.0
    for _ in range(10):
        q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        if np.linalg.det(q) < 0.0:
            q[:, 0] = -q[:, 0]
        got = rotate_stiffness(steel, q)
        ref4 = np.einsum("ia,jb,kc,ld,abcd->ijkl", q, q, q, q, c4)
        want = np.array(
            [[ref4[i, j, k, l] for (k, l) in VOIGT_PAIRS] for (i, j) in VOIGT_PAIRS]
        )
        worst = max(worst, float(np.abs(got - want).max() / np.abs(want).max()))
    rows.append(("stiffness rotation vs rank-4", worst, 1e-12))

    c66 = rotate_stiffness(steel, np.eye(3))
    sig0 = finite_strain_cauchy(c66, np.eye(3))
    rows.append(("finite-strain map at identity", float(np.abs(sig0).max()), 1e-12))

    mat = np.broadcast_to(c66[:, :, None, None, None], (6, 6, 8, 8, 8)).copy()
    sol = solve_elastic_fft(mat, LoadingCondition.uniaxial(0, 1e-3), tol=1e-10, max_iter=5)
    w6 = np.array([1.0, 1.0, 1.0, 2.0, 2.0, 2.0])
    want = c66 @ (np.array([1e-3, 0, 0, 0, 0, 0.0]) * w6)
    resid = float(
        np.abs(sol.stress.data - want[:, None, None, None]).max() / np.abs(want).max()
    )
    if sol.iterations != 1:
        resid = float("inf")
    rows.append(("dns homogeneous one-iteration", resid, 1e-12))

    sig6 = rng.standard_normal((6, n, n, n))
    w3 = rng.standard_normal((3, n, n, n))
    lhs = float(np.sum(div_sym(sig6, h) * w3))
    rhs = float(np.sum(sig6 * div_sym_adjoint(w3, h)))
    scale = max(abs(lhs), abs(rhs), 1.0)
    rows.append(("symmetric-divergence adjoint", abs(lhs - rhs) / scale, 1e-10))

    width = max(len(name) for name, _, _ in rows)
    failed = 0
    for name, resid, tol in rows:
        ok = resid <= tol
        failed += 0 if ok else 1
        print(f"{name.ljust(width)}  {resid:.3e}  (tol {tol:.0e})  {'PASS' if ok else 'FAIL'}")
    print(f"selftest: {len(rows) - failed}/{len(rows)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# entry point


def _parse_args(argv):
    parser = argparse.ArgumentParser(
        prog="ecosr",
        description="Physics-constrained super-resolution surrogates for "
        "periodic elasticity: dataset generation, reference solving, "
        "training, inference, and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def with_common(p):
        p.add_argument("--config", required=True, help="experiment INI file")
        p.add_argument("--seed", type=int, default=None, help="override [run] seed")
        p.add_argument(
            "--threads", type=int, default=None,
            help="BLAS thread count (or set ECO_THREADS)",
        )
        return p

    g = with_common(sub.add_parser("gen", help="generate microstructures"))
    g.add_argument("--force", action="store_true", help="replace existing data")

    s = with_common(sub.add_parser("solve", help="run reference spectral solves"))
    s.add_argument("--split", default="all", choices=("train", "val", "test", "all"))
    s.add_argument(
        "--resolution", default=None, choices=("lr", "hr", "both"),
        help="test split may request lr/hr/both; train and val are lr-only",
    )

    with_common(sub.add_parser("train", help="fit the surrogate"))

    i = with_common(sub.add_parser("infer", help="predict high-resolution fields"))
    i.add_argument("--split", default="test", choices=_SPLITS)
    i.add_argument("--checkpoint", default=None, help="checkpoint path override")

    e = with_common(sub.add_parser("eval", help="write metric CSVs"))
    e.add_argument("--split", default="test", choices=_SPLITS)
    e.add_argument("--slices", action="store_true", help="also write mid-plane slices")

    t = sub.add_parser("selftest", help="run the property residual table")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--threads", type=int, default=None)

    return parser.parse_args(argv)


def _apply_threads(args) -> None:
    threads = getattr(args, "threads", None)
    if threads is None:
        env = os.environ.get("ECO_THREADS", "").strip()
        if env:
            try:
                threads = int(env)
            except ValueError:
                raise ConfigError(f"ECO_THREADS must be an integer, got {env!r}")
    if threads is None or threads <= 0:
        return
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
        "VECLIB_MAXIMUM_THREADS",
    ):
        os.environ[var] = str(threads)


def main(argv=None) -> int:
    args = _parse_args(argv)
    try:
        _apply_threads(args)
        if args.command == "selftest":
            return cmd_selftest(seed=args.seed)
        cfg = load_config(args.config, seed_override=args.seed, threads_override=args.threads)
        if args.command == "gen":
            return cmd_gen(cfg, force=args.force)
        if args.command == "solve":
            return cmd_solve(cfg, split=args.split, resolution=args.resolution)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "infer":
            return cmd_infer(cfg, split=args.split, checkpoint=args.checkpoint)
        if args.command == "eval":
            return cmd_eval(cfg, split=args.split, slices=args.slices)
        raise ConfigError(f"unknown command {args.command!r}")
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

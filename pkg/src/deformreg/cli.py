"""Command-line entry point: ``deformreg <subcommand> [options]``.

Every subcommand resolves its configuration as built-in defaults, then the
optional JSON ``--config`` file, then explicit flags. The resolved config is
written to ``<out>/config.json`` before any computation, and a
``manifest.json`` with SHA-256 hashes of all outputs (timing files excluded)
is written last.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .errors import DeformRegError, MissingFileError, NumericalError, UsageError, ValidationError, VolumeIOError
from .losses import LossWeights

log = logging.getLogger("deformreg")

THREADS_ENV = "DEFORMREG_THREADS"
MODES = ("direct", "unet", "rigid", "2ddf")

DEFAULTS = {
    "phantom": {"size": 64, "seed": 0, "amp_si": None, "amp_ap": None, "random_amplitudes": False,
                "for_training": False, "levels": 3, "drr": True},
    "drr": {"seed": 0},
    "register": {"size": None, "seed": 0, "steps": 300, "lr": 0.1, "lambda_smooth": 0.05, "gamma_dvf": 0.0,
                 "projection_only": False, "restarts": 3, "max_iter": 600, "optimize_ty": False},
    "train": {"size": 16, "seed": 0, "epochs": 200, "batch": 4, "lr": 1e-4, "lambda_smooth": 0.05,
              "gamma_dvf": 1.0, "pairs": 20, "levels": 3, "enc_widths": [16, 32, 32], "packing": "planes",
              "checkpoint_every": 0, "amp_range": [0.6, 1.4]},
    "evaluate": {"seed": 0, "masked": False},
    "gradcheck": {"seed": 0, "instances": 20},
}

# keys that never reach the echoed config: they must not change output hashes
_NOT_ECHOED = ("threads", "out", "config", "command", "func")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, size: bool = True) -> None:
    p.add_argument("--config", help="JSON file with option values (flags override it)")
    p.add_argument("--seed", type=int, help="64-bit seed for all randomness")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, help=f"training worker threads; results do not depend on it (fallback: ${THREADS_ENV})")
    if size:
        p.add_argument("--size", type=int, help="grid edge length n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deformreg", description="2D/3D deformable registration on a breathing phantom")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("phantom", help="write a 10-phase phantom with fields and labels")
    _common(p)
    p.add_argument("--amp-si", type=float, help="superior-inferior amplitude in voxels")
    p.add_argument("--amp-ap", type=float, help="anteroposterior amplitude in voxels")
    p.add_argument("--random-amplitudes", action="store_true", default=None,
                   help="scale the amplitudes by seeded random factors in [0.6, 1.4]")
    p.add_argument("--for-training", action="store_true", default=None,
                   help="validate the grid size against the U-Net depth")
    p.add_argument("--levels", type=int, help="U-Net depth used by --for-training")
    p.add_argument("--no-drr", dest="drr", action="store_false", default=None, help="skip per-frame DRRs")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("drr", help="render the frontal DRR of a volume")
    _common(p, size=False)
    p.add_argument("volume", help="volume header (.mhd)")
    p.set_defaults(func=cmd_drr)

    p = sub.add_parser("register", help="register a source volume to a target DRR")
    _common(p)
    p.add_argument("mode", help="one of: " + ", ".join(MODES))
    p.add_argument("--source", required=True, help="source volume (phase 0)")
    p.add_argument("--source-labels", help="source organ labels, warped alongside")
    p.add_argument("--target-drr", help="target DRR image; rendered from --target-volume if omitted")
    p.add_argument("--target-volume", help="ground-truth target volume (direct mode: supervision)")
    p.add_argument("--target-field", help="ground-truth field header (direct mode, gamma > 0)")
    p.add_argument("--checkpoint", help="trained U-Net checkpoint (unet mode)")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-smooth", type=float)
    p.add_argument("--gamma-dvf", type=float)
    p.add_argument("--projection-only", action="store_true", default=None,
                   help="direct mode: ignore --target-volume and fit the DRR only")
    p.add_argument("--restarts", type=int, help="rigid mode: number of simplex starts")
    p.add_argument("--max-iter", type=int, help="rigid mode: iterations per start")
    p.add_argument("--optimize-ty", action="store_true", default=None,
                   help="rigid mode: also search the translation along the projection axis")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("train", help="train the U-Net on phantom pairs")
    _common(p)
    p.add_argument("--data", action="append", help="phantom directory (repeatable); pairs are t0 -> t")
    p.add_argument("--pairs", type=int, help="number of random-amplitude pairs when --data is absent")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-smooth", type=float)
    p.add_argument("--gamma-dvf", type=float)
    p.add_argument("--levels", type=int)
    p.add_argument("--checkpoint-every", type=int, help="epochs between checkpoints (0: final only)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="MAE / DSC table against a ground-truth frame")
    _common(p, size=False)
    p.add_argument("--gt", required=True, help="ground-truth volume; labels read from <stem>_labels.mhd")
    p.add_argument("--gt-labels", help="ground-truth labels (default <gt stem>_labels.mhd)")
    p.add_argument("--initial", help="unregistered source volume for the Initial column")
    p.add_argument("--initial-labels", help="labels of the unregistered source")
    p.add_argument("--result", action="append", default=[], metavar="METHOD=DIR",
                   help="registration output directory for a table column (repeatable)")
    p.add_argument("--masked", action="store_true", default=None, help="MAE over the body mask only")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable operation")
    _common(p, size=False)
    p.add_argument("--instances", type=int, help="randomized instances per check")
    p.set_defaults(func=cmd_gradcheck)
    return parser


# ---------------------------------------------------------------------------
# config, threads, manifest
# ---------------------------------------------------------------------------


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[args.command])
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise MissingFileError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ValidationError(f"{path}: top level must be an object")
        unknown = sorted(set(loaded) - set(cfg) - set(vars(args)))
        if unknown:
            raise ValidationError(f"{path}: unknown keys {unknown}")
        cfg.update(loaded)
    for k, v in vars(args).items():
        if v is not None and k not in ("func", "config"):
            cfg[k] = v
    return cfg


def resolve_threads(cfg: dict):
    n = cfg.get("threads")
    if n is None and os.environ.get(THREADS_ENV):
        try:
            n = int(os.environ[THREADS_ENV])
        except ValueError as exc:
            raise ValidationError(f"{THREADS_ENV} must be an integer") from exc
    if n is not None and n < 1:
        raise ValidationError("thread count must be >= 1")
    return n


def _thread_limit():
    # BLAS splits reductions by thread count; one BLAS thread keeps every sum
    # in a fixed order, and --threads instead sets the training worker pool
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1, user_api="blas")


def echo_config(cfg: dict, out: Path) -> Path:
    body = {k: v for k, v in cfg.items() if k not in _NOT_ECHOED}
    path = out / "config.json"
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path) -> Path:
    """Hash every file under ``out`` except timing files and the manifest itself."""
    files = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json" and not p.name.endswith("_timing.txt"):
            files[p.relative_to(out).as_posix()] = sha256_file(p)
    path = out / "manifest.json"
    path.write_text(json.dumps({"files": files}, indent=2, sort_keys=True) + "\n")
    return path


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise VolumeIOError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise VolumeIOError(f"output directory is not writable: {out}")
    return out


def _weights(cfg: dict) -> LossWeights:
    return LossWeights(float(cfg["lambda_smooth"]), float(cfg["gamma_dvf"]))


def _frame_name(t: int) -> str:
    return f"frame_t{t:02d}"


def _labels_path(volume_path) -> Path:
    p = Path(volume_path)
    return p.with_name(p.with_suffix("").name + "_labels.mhd")


def export_slices(v, out: Path, stem: str) -> list[Path]:
    """Mid coronal, sagittal and axial planes as PGM."""
    from .volgrid import AXES, display_orientation, extract_slice, write_pgm

    paths = []
    for name in ("coronal", "sagittal", "axial"):
        img = extract_slice(v, name, v.dims[AXES[name]] // 2).values
        plane = display_orientation(img) if name != "axial" else img.T
        paths.append(write_pgm(out / f"{stem}_{name}.pgm", plane))
    return paths


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_phantom(cfg: dict, out: Path) -> None:
    from .phantom import PhantomSpec, RespiratoryModel, default_amplitudes, generate_4dct, random_model
    from .projector import render_drr
    from .volgrid import save_image, save_labels, save_volume, write_pgm, display_orientation
    from .warpfield import save_field

    n = int(cfg["size"])
    if cfg["for_training"]:
        levels = int(cfg["levels"])
        if n % (2 ** levels):
            raise ValidationError(f"--size {n} is not divisible by 2^{levels}; a U-Net with {levels} levels "
                                  f"cannot train on it (try {2 ** levels * max(1, round(n / 2 ** levels))})")
    spec = PhantomSpec(n=n)
    spec.validate()
    a_si, a_ap = default_amplitudes(n)
    a_si = a_si if cfg["amp_si"] is None else float(cfg["amp_si"])
    a_ap = a_ap if cfg["amp_ap"] is None else float(cfg["amp_ap"])
    model = RespiratoryModel.for_spec(spec, amp_si=a_si, amp_ap=a_ap)
    if cfg["random_amplitudes"]:
        model = random_model(spec, np.random.default_rng(cfg["seed"]), (0.6, 1.4), (0.6, 1.4), model)
    frames = generate_4dct(spec, model)
    (out / "motion.json").write_text(json.dumps({"amp_si": model.amp_si, "amp_ap": model.amp_ap,
                                                 "phases": [f.phase for f in frames]}, indent=2) + "\n")
    for f in frames:
        stem = _frame_name(f.phase)
        save_volume(f.volume, out / stem)
        save_labels(f.labels, out / f"{stem}_labels", f.volume.spacing)
        save_field(f.u_gt, out / stem)
        if cfg["drr"]:
            img, _ = render_drr(f.volume)
            save_image(img, out / f"{stem}_drr")
            write_pgm(out / f"{stem}_drr.pgm", display_orientation(img.values))
    log.info("wrote %d frames at n=%d to %s", len(frames), n, out)


def cmd_drr(cfg: dict, out: Path) -> None:
    from .projector import render_drr
    from .volgrid import display_orientation, load_volume, save_image, write_pgm

    src = Path(cfg["volume"])
    v = load_volume(src)
    img, geometry = render_drr(v)
    stem = src.with_suffix("").name + "_drr"
    save_image(img, out / stem)
    write_pgm(out / f"{stem}.pgm", display_orientation(img.values))
    (out / f"{stem}_geometry.json").write_text(json.dumps(
        {"axis": geometry.axis, "dims": list(geometry.dims), "ny": geometry.ny,
         "raw_min": geometry.raw_min, "raw_max": geometry.raw_max}, indent=2) + "\n")


def _target_image(cfg: dict, v_gt):
    from .projector import render_drr
    from .volgrid import load_image

    if cfg.get("target_drr"):
        return load_image(cfg["target_drr"])
    if v_gt is not None:
        return render_drr(v_gt)[0]
    raise UsageError("register needs --target-drr or --target-volume")


def cmd_register(cfg: dict, out: Path) -> None:
    from .projector import render_drr
    from .solvers import (DirectOptions, RigidOptions, TwoDOptions, apply_2ddf_to_labels, apply_2ddf_to_volume,
                          apply_rigid_labels, infer_unet, lift_2ddf, register_2d, register_direct, register_rigid)
    from .diffnet import load_checkpoint
    from .volgrid import check_same_dims, load_labels, load_volume, save_labels, save_volume
    from .warpfield import DisplacementField, load_field, save_field, warp_labels

    mode = cfg["mode"]
    if mode not in MODES:
        raise UsageError(f"unknown register mode {mode!r}; choose one of {', '.join(MODES)}")
    v_s = load_volume(cfg["source"])
    if cfg["size"] is not None and v_s.dims != (cfg["size"],) * 3:
        raise ValidationError(f"--size {cfg['size']} does not match source dims {v_s.dims}")
    labels = load_labels(cfg["source_labels"]) if cfg.get("source_labels") else None
    if labels is not None:
        check_same_dims(v_s.dims, labels.dims, "source labels")
    v_gt = load_volume(cfg["target_volume"]) if cfg.get("target_volume") else None
    if v_gt is not None:
        check_same_dims(v_s.dims, v_gt.dims, "target volume")
    i_t = _target_image(cfg, v_gt)
    i_s = render_drr(v_s)[0]
    check_same_dims(i_s.dims, i_t.dims, "target DRR")
    seed = int(cfg["seed"])
    u = None
    labels_def = None

    if mode == "direct":
        weights = _weights(cfg)
        supervise = v_gt if not cfg["projection_only"] else None
        u_gt = None
        if weights.gamma_dvf > 0:
            if not cfg.get("target_field"):
                raise UsageError("--gamma-dvf > 0 needs --target-field")
            if supervise is None:
                raise UsageError("--gamma-dvf > 0 needs volume supervision (--target-volume without --projection-only)")
            u_gt = load_field(cfg["target_field"])
        u, v_def, report = register_direct(v_s, i_s, i_t, supervise, u_gt, weights,
                                           DirectOptions(int(cfg["steps"]), float(cfg["lr"]), seed))
    elif mode == "unet":
        if not cfg.get("checkpoint"):
            raise UsageError("unet mode needs --checkpoint")
        params, _, _ = load_checkpoint(cfg["checkpoint"])
        t0 = time.perf_counter()
        u, v_def = infer_unet(params, v_s, i_s, i_t)
        from .solvers import SolveReport

        report = SolveReport("unet_inference", seed, {"checkpoint": Path(cfg["checkpoint"]).name})
        drr_mse = float(np.mean((render_drr(v_def)[0].values.astype(np.float64) - i_t.values) ** 2))
        report.record(0, drr_mse, drr_mse)
        report.final = {"drr_mse": drr_mse}
        report.wall_clock = time.perf_counter() - t0
    elif mode == "rigid":
        theta, v_def, report = register_rigid(v_s, i_t, RigidOptions(
            restarts=int(cfg["restarts"]), seed=seed, max_iter=int(cfg["max_iter"]),
            optimize_ty=bool(cfg["optimize_ty"])))
        if labels is not None:
            labels_def = apply_rigid_labels(labels, theta)
    else:
        u2d, report = register_2d(i_s, i_t, _weights(cfg), TwoDOptions(int(cfg["steps"]), float(cfg["lr"]), seed))
        v_def = apply_2ddf_to_volume(v_s, u2d)
        u = DisplacementField(lift_2ddf(u2d, v_s.dims[1]))
        if labels is not None:
            labels_def = apply_2ddf_to_labels(labels, u2d)

    if not np.isfinite(v_def.values).all():
        raise NumericalError("registration produced non-finite values")
    save_volume(v_def, out / "v_def")
    if u is not None:
        save_field(u, out / "v_def")
        if labels is not None and labels_def is None:
            labels_def = warp_labels(labels, u)
    if labels_def is not None:
        save_labels(labels_def, out / "labels_def", v_def.spacing)
    report.write(out, "report")
    export_slices(v_def, out, "v_def")
    log.info("%s: loss %.6g -> %.6g", mode, report.initial_loss, report.best["L_total"])


def _phantom_pairs(cfg: dict):
    from .phantom import PhantomSpec, RespiratoryModel, default_amplitudes, generate_4dct, random_model
    from .projector import render_drr
    from .solvers import TrainingInstance

    n = int(cfg["size"])
    spec = PhantomSpec(n=n)
    a_si, a_ap = default_amplitudes(n)
    base = RespiratoryModel.for_spec(spec, amp_si=a_si, amp_ap=a_ap)
    rng = np.random.default_rng(cfg["seed"])
    lo, hi = cfg["amp_range"]
    data = []
    for _ in range(int(cfg["pairs"])):
        model = random_model(spec, rng, (lo, hi), (lo, hi), base)
        t = int(rng.choice([10, 20, 30, 40, 50, 60, 70, 80, 90]))
        f0, ft = generate_4dct(spec, model, phases=(0, t))
        data.append(TrainingInstance(f0.volume, render_drr(f0.volume)[0], render_drr(ft.volume)[0],
                                     ft.volume, ft.u_gt))
    return data


def _directory_pairs(dirs):
    from .phantom import PHASES
    from .projector import render_drr
    from .solvers import TrainingInstance
    from .volgrid import load_volume
    from .warpfield import load_field

    data = []
    for d in dirs:
        d = Path(d)
        v0 = load_volume(d / f"{_frame_name(0)}.mhd")
        i0 = render_drr(v0)[0]
        for t in PHASES[1:]:
            vt = load_volume(d / f"{_frame_name(t)}.mhd")
            data.append(TrainingInstance(v0, i0, render_drr(vt)[0], vt, load_field(d / _frame_name(t))))
    return data


def cmd_train(cfg: dict, out: Path) -> None:
    from .diffnet import UNetConfig, save_checkpoint
    from .solvers import TrainOptions, checkpoint_extra, train_unet

    config = UNetConfig(levels=int(cfg["levels"]), enc_widths=tuple(cfg["enc_widths"]), packing=cfg["packing"])
    data = _directory_pairs(cfg["data"]) if cfg.get("data") else _phantom_pairs(cfg)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    opts = TrainOptions(float(cfg["lr"]), int(cfg["seed"]), int(cfg["checkpoint_every"]), str(ckpt_dir))
    if cfg.get("resume") and not Path(cfg["resume"]).is_file():
        raise MissingFileError(f"checkpoint not found: {cfg['resume']}")
    params, report = train_unet(data, config, _weights(cfg), int(cfg["epochs"]), int(cfg["batch"]), opts,
                                resume=cfg.get("resume"), workers=int(cfg["threads"]),
                                on_epoch=lambda e, loss: log.info("epoch %d loss %.6g", e, loss))
    save_checkpoint(out / "model.bin", params, report.artifacts["adam"], checkpoint_extra(report))
    report.config["checkpoint_dir"] = "checkpoints"  # keep absolute paths out of hashed files
    report.write(out, "train")


def _parse_result(spec: str):
    if "=" not in spec:
        raise UsageError(f"--result expects METHOD=DIR, got {spec!r}")
    method, d = spec.split("=", 1)
    return method, Path(d)


def cmd_evaluate(cfg: dict, out: Path) -> None:
    from .metrics import METHOD_COLUMNS, evaluate_case, format_table, write_csv
    from .volgrid import load_labels, load_volume

    v_gt = load_volume(cfg["gt"])
    l_gt = load_labels(cfg.get("gt_labels") or _labels_path(cfg["gt"]))
    masked = bool(cfg["masked"])
    results = {}
    if cfg.get("initial"):
        v0 = load_volume(cfg["initial"])
        l0 = load_labels(cfg.get("initial_labels") or _labels_path(cfg["initial"]))
        results["Initial"] = [evaluate_case(v_gt, l_gt, v0, l0, masked=masked)]
    for spec in cfg["result"]:
        method, d = _parse_result(spec)
        labels_file = d / "labels_def.mhd"
        if not labels_file.is_file():
            raise MissingFileError(f"{d}: no labels_def.mhd (register with --source-labels)")
        results.setdefault(method, []).append(
            evaluate_case(v_gt, l_gt, load_volume(d / "v_def.mhd"), load_labels(labels_file), masked=masked))
    if not results:
        raise UsageError("evaluate needs --initial and/or at least one --result")
    columns = list(METHOD_COLUMNS) + [m for m in results if m not in METHOD_COLUMNS]
    (out / "evaluation.txt").write_text(format_table(results, columns))
    write_csv(out / "evaluation.csv", results)
    sys.stdout.write(format_table(results, columns))


def cmd_gradcheck(cfg: dict, out: Path) -> None:
    from .gradcheck import format_results, run_suite

    t0 = time.perf_counter()
    results = run_suite(int(cfg["instances"]), int(cfg["seed"]))
    elapsed = time.perf_counter() - t0
    (out / "gradcheck.txt").write_text(format_results(results) + "\n")
    (out / "gradcheck_timing.txt").write_text(f"elapsed_s = {elapsed:.3f}\n")
    print(format_results(results, elapsed))
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise NumericalError(f"gradient check failed: {', '.join(failed)}")


# ---------------------------------------------------------------------------


def run(argv=None) -> int:
    """Parse, execute and return the exit code (0, or the error family's code)."""
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args)
        cfg["threads"] = resolve_threads(cfg) or 1
        out = _out_dir(cfg)
        echo_config(cfg, out)
        with _thread_limit():
            args.func(cfg, out)
        write_manifest(out)
    except DeformRegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (KeyError, TypeError) as exc:
        # malformed config values
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return ValidationError.exit_code
    return 0


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()

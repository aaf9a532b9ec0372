"""Command-line entry point: ``proxycam <subcommand> ...``.

Exit codes: 0 success, 1 compute failure, 2 usage or input error.
``PROXYCAM_THREADS`` sets the worker count for per-FoV simulation.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .diffraction import write_psf, write_psf_preview
from .imaging import FovPsfSet, make_pairs, sample_virtual_cameras
from .io import config_hash, verify, write_config, write_csv, write_manifest
from .optics import Field, PupilGrid, trace_bundle
from .optimizer import OptimizerConfig, construct_proxy
from .perturbation import apply_perturbation
from .prescription import SchemaError, parse_prescription, read_targets, write_prescription
from .sensor import NoiseModel, SensorModel
from .sfr import measure_grid
from .simulation import SimulationConfig, compute_fov_psfs, fov_samples, simulate_edge

log = logging.getLogger("proxycam")


class UsageError(Exception):
    pass


def _grid(text: str) -> tuple[int, int]:
    try:
        gy, gx = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError("grid must look like 15x20") from None
    if gy < 1 or gx < 1:
        raise argparse.ArgumentTypeError("grid dimensions must be positive")
    return gy, gx


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("PROXYCAM_THREADS", "1")))
    except ValueError:
        return 1


def _load(args):
    path = Path(args.prescription)
    if not path.is_file():
        raise UsageError(f"prescription not found: {path}")
    system, params = parse_prescription(path, strict=not args.lenient)
    sensor = system.sensor or SensorModel()
    return system.replace(sensor=sensor), params, sensor


def _sim_config(args, **extra) -> SimulationConfig:
    return SimulationConfig(grid=args.grid, pupil_samples=args.pupil_samples,
                            psf_oversample=args.psf_oversample, psf_pixels=args.psf_pixels,
                            patch=(args.patch, args.patch), angle=args.angle,
                            workers=_threads(), **extra)


def _noise(args) -> NoiseModel | None:
    if args.read_noise <= 0 and args.gain is None:
        return None
    return NoiseModel(args.read_noise, args.gain or float("inf"), args.seed)


def _config(args) -> dict:
    # the output location is not part of the computation, so reruns elsewhere hash equal
    d = {k: v for k, v in vars(args).items() if k not in ("func", "verbose", "out")}
    d["version"] = __version__
    return d


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_trace(args) -> int:
    system, _, sensor = _load(args)
    out = Path(args.out)
    chash = write_config(out, _config(args))
    lam = args.wavelength or sensor.wavelengths[0]
    fld = system.image_field(args.fov[0], args.fov[1], lam)
    b = trace_bundle(system, fld, PupilGrid(args.pupil_samples), lam)
    rows = [(i, int(b.status[i]), *b.sensor[i, :2], b.opl[i],
             "" if b.terminated_at[i] < 0 else int(b.terminated_at[i])) for i in range(len(b))]
    header = ["ray", "status", "x_mm", "y_mm", "opl_mm", "terminated_at"]
    if args.format == "json":
        (out / "rays.json").write_text(json.dumps([dict(zip(header, map(_plain, r))) for r in rows]))
    else:
        write_csv(out / "rays.csv", header, rows, chash)
    write_manifest(out, chash)
    print(f"traced {len(b)} rays, survival {b.survival_fraction:.3f}")
    return 0


def _plain(v):
    return v.item() if isinstance(v, np.generic) else v


def cmd_psf(args) -> int:
    system, _, sensor = _load(args)
    out = Path(args.out)
    chash = write_config(out, _config(args))
    cfg = _sim_config(args)
    from .simulation import field_psfs

    for fov in fov_samples(system, sensor, cfg.grid, sensor.wavelengths[0]):
        for ch, psf in field_psfs(system, fov.field, sensor, cfg, fov.index).items():
            stem = f"psf_{fov.index[0]:02d}_{fov.index[1]:02d}_{ch}"
            write_psf(out / f"{stem}.psf", psf)
            if args.preview:
                write_psf_preview(out / f"{stem}.png", psf)
    write_manifest(out, chash)
    return 0


def cmd_edge(args) -> int:
    system, params, sensor = _load(args)
    out = Path(args.out)
    chash = write_config(out, _config(args))
    cfg = _sim_config(args, noise=_noise(args))
    fovs = {f.index: f for f in fov_samples(system, sensor, cfg.grid, sensor.wavelengths[0])}
    chosen = [tuple(args.fov)] if args.fov else sorted(fovs)
    for idx in chosen:
        if idx not in fovs:
            raise UsageError(f"FoV {idx} outside grid {cfg.grid}")
        patch = simulate_edge(system, fovs[idx].field, sensor, cfg, seed=args.seed, fov_index=idx)
        np.save(out / f"edge_{idx[0]:02d}_{idx[1]:02d}.npy", patch)
    write_manifest(out, chash)
    return 0


def _read_image(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path).astype(float)
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im).astype(float)
    return arr[..., :3].mean(axis=-1) if arr.ndim == 3 else arr


def cmd_sfr(args) -> int:
    path = Path(args.image)
    if not path.is_file():
        raise UsageError(f"image not found: {path}")
    img = _read_image(path)
    out = Path(args.out)
    chash = write_config(out, _config(args))
    cells = measure_grid(img, args.grid)
    rows = [(c.fov_index[1], c.fov_index[0], "" if c.sfra is None else repr(c.sfra.value),
             "" if c.angle is None else f"{c.angle:.4f}", c.quality) for c in cells]
    header = ["fov_x", "fov_y", "sfra", "angle", "quality"]
    if args.format == "json":
        (out / "sfr.json").write_text(json.dumps([dict(zip(header, r)) for r in rows], indent=1))
    else:
        write_csv(out / "sfr.csv", header, rows, chash)
    if args.curves:
        curve_rows = [(c.fov_index[1], c.fov_index[0], repr(float(f)), repr(float(r)))
                      for c in cells if c.curve is not None
                      for f, r in zip(c.curve.frequencies, c.curve.response)]
        write_csv(out / "sfr_curves.csv", ["fov_x", "fov_y", "freq", "response"], curve_rows, chash)
    write_manifest(out, chash)
    present = sum(c.present for c in cells)
    print(f"{present}/{len(cells)} cells measured")
    return 0


def cmd_optimize(args) -> int:
    ideal, params, sensor = _load(args)
    if params is None or not params.free_mask.any():
        raise UsageError("prescription lists no free parameters")
    tpath = Path(args.targets)
    if not tpath.is_file():
        raise UsageError(f"targets not found: {tpath}")
    targets = read_targets(tpath)
    cfg = _sim_config(args)
    bad = [k for k in targets if not (0 <= k[0] < cfg.grid[0] and 0 <= k[1] < cfg.grid[1])]
    if bad:
        raise UsageError(f"target FoV {bad[0]} outside grid {cfg.grid}")
    ocfg = OptimizerConfig(metric=args.metric, damping=args.damping, max_iter=args.max_iter,
                           initial_damping=args.initial_damping, workers=_threads())
    fovs = fov_samples(ideal, sensor, cfg.grid, sensor.wavelengths[0])
    chash = config_hash(_config(args))
    rows = []
    report = Path(args.report)

    def on_iter(rec):
        rows.append(rec.row())
        log.info("iter %d  f^T f %.4e  accepted %s", rec.iteration, rec.ftf, rec.accepted)
        _write_report(report, rows, chash)

    result = construct_proxy(ideal, params.zero(), fovs, targets, sensor, cfg, ocfg, on_iter)
    _write_report(report, rows, chash)
    # the proxy keeps the ideal surfaces plus the fitted offsets as parameters
    write_prescription(args.out, ideal, result.perturbation)
    Path(str(args.out) + ".system.json").write_text(
        json.dumps({"reason": result.reason, "converged": result.converged,
                    "ftf": result.ftf, "evaluations": result.evaluations,
                    "labels": result.perturbation.labels,
                    "values": result.perturbation.values.tolist()}, indent=1))
    print(f"{result.reason}: f^T f = {result.ftf:.4e} after {len(result.history) - 1} iterations")
    return 0


def _write_report(path: Path, rows: list[dict], chash: str) -> None:
    header = ["iter", "merit", "ftf", "grad_norm", "eps_summary", "accepted"]
    write_csv(path, header, ([r[h] for h in header] for r in rows), chash)


def cmd_sample(args) -> int:
    ideal, params, sensor = _load(args)
    if params is None:
        raise UsageError("prescription lists no parameters to sample")
    out = Path(args.out)
    chash = write_config(out, _config(args))
    cams = sample_virtual_cameras(ideal, params.zero(), args.count, args.seed)
    rows = []
    for k, (system, vals) in enumerate(cams):
        name = f"camera_{k:03d}.json"
        write_prescription(out / name, ideal, params.with_values(vals))
        rows.append([k, name, *(repr(float(v)) for v in vals)])
    write_csv(out / "cameras.csv", ["camera_id", "prescription", *params.labels], rows, chash)
    write_manifest(out, chash)
    return 0


def _latent_paths(directory: Path) -> list[Path]:
    exts = {".npy", ".png", ".tif", ".tiff", ".jpg", ".jpeg"}
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in exts)


def cmd_degrade(args) -> int:
    ideal, params, sensor = _load(args)
    lat_dir = Path(args.latents)
    if not lat_dir.is_dir():
        raise UsageError(f"latent directory not found: {lat_dir}")
    latents = _latent_paths(lat_dir)
    if not latents:
        raise UsageError(f"no images in {lat_dir}")
    out = Path(args.out)
    chash = write_config(out, _config(args))
    cfg = _sim_config(args)
    if args.delta_control:
        cameras = [("delta", FovPsfSet.delta(cfg.grid, sensor.channels))]
    else:
        if params is None:
            raise UsageError("prescription lists no parameters to sample")
        # the proxy's own offsets are the centre of the sampled tolerance box
        base = apply_perturbation(ideal, params)
        cams = sample_virtual_cameras(base, params.zero(), args.count, args.seed)
        cameras = [(f"cam{k:03d}", compute_fov_psfs(system, sensor, cfg, ideal=ideal))
                   for k, (system, _) in enumerate(cams)]
        for cam_id, psfs in cameras:
            psfs.save(out / f"{cam_id}_psfs.npz")
    noise = _noise(args)
    records = make_pairs(latents, cameras, out, sensor, noise, args.seed)
    expected = len(latents) * len(cameras)
    write_manifest(out, chash, complete=len(records) == expected)
    print(f"{len(records)}/{expected} pairs written")
    return 0 if len(records) == expected else 1


def cmd_verify(args) -> int:
    problems = verify(args.out)
    for p in problems:
        print(p)
    if not problems:
        print("ok")
    return 0 if not problems else 1


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="proxycam", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    presc = argparse.ArgumentParser(add_help=False)
    presc.add_argument("--prescription", required=True)
    presc.add_argument("--lenient", action="store_true", help="warn on unknown fields")

    sim = argparse.ArgumentParser(add_help=False)
    sim.add_argument("--grid", type=_grid, default=(15, 20), help="FoV grid, rows x cols")
    sim.add_argument("--pupil-samples", type=int, default=32)
    sim.add_argument("--psf-oversample", type=int, default=4)
    sim.add_argument("--psf-pixels", type=int, default=21)
    sim.add_argument("--patch", type=int, default=64)
    sim.add_argument("--angle", type=float, default=10.0)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--format", choices=("csv", "json"), default="csv")

    noise = argparse.ArgumentParser(add_help=False)
    noise.add_argument("--read-noise", type=float, default=0.0, help="DN")
    noise.add_argument("--gain", type=float, default=None, help="e-/DN for shot noise")

    s = sub.add_parser("trace", parents=[presc, common], help="trace one FoV bundle")
    s.add_argument("--fov", type=float, nargs=2, default=(0.0, 0.0), metavar=("X_MM", "Y_MM"))
    s.add_argument("--pupil-samples", type=int, default=32)
    s.add_argument("--wavelength", type=float, default=None)
    s.set_defaults(func=cmd_trace)

    s = sub.add_parser("psf", parents=[presc, sim, common], help="PSF files per FoV")
    s.add_argument("--preview", action="store_true", help="also write 16-bit PNG previews")
    s.set_defaults(func=cmd_psf)

    s = sub.add_parser("edge", parents=[presc, sim, common, noise], help="synthetic slanted edges")
    s.add_argument("--fov", type=int, nargs=2, default=None, metavar=("ROW", "COL"))
    s.set_defaults(func=cmd_edge)

    s = sub.add_parser("sfr", parents=[common], help="measure SFRA per grid cell")
    s.add_argument("--image", required=True)
    s.add_argument("--grid", type=_grid, default=(15, 20))
    s.add_argument("--curves", action="store_true", help="also dump SFR curves")
    s.set_defaults(func=cmd_sfr)

    s = sub.add_parser("optimize", parents=[presc, sim], help="fit a proxy camera")
    s.add_argument("--targets", required=True)
    s.add_argument("--out", required=True, help="proxy prescription (JSON)")
    s.add_argument("--report", required=True, help="per-iteration CSV")
    s.add_argument("--metric", choices=("sfra", "mtf"), default="sfra")
    s.add_argument("--damping", choices=("dynamic", "fixed"), default="dynamic")
    s.add_argument("--max-iter", type=int, default=200)
    s.add_argument("--initial-damping", type=float, default=1.0)
    s.set_defaults(func=cmd_optimize)

    s = sub.add_parser("sample", parents=[presc, common], help="virtual cameras in the tolerance box")
    s.add_argument("--count", type=int, required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("degrade", parents=[presc, sim, common, noise], help="degraded/clean pairs")
    s.add_argument("--latents", required=True)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--delta-control", action="store_true", help="use delta PSFs (alignment control)")
    s.set_defaults(func=cmd_degrade)

    s = sub.add_parser("verify", help="re-check output hashes")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:        # compute failure
        log.debug("failure", exc_info=True)
        print(f"failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

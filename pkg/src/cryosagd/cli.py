"""Command-line entry point: ``simulate``, ``reconstruct``, ``evaluate``, ``info``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
import typing
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import EmseUnderflow, align_volumes, direction_marginal_average, evaluate_images
from .evaluation import rremse, write_direction_csv
from .imaging import Projector, ctf_eval
from .io import (
    DataError,
    format_value,
    load_dataset,
    parse_value,
    read_keyvalue,
    read_manifest,
    read_mrc,
    save_dataset,
    write_diagnostics,
    write_keyvalue,
    write_mrc,
    write_truth,
)
from .quadrature import build_scheme
from .reconstruct import DIAGNOSTIC_COLUMNS, ReconConfig, Reconstructor, _fourier_stack
from .sagd import NumericalAbort
from .simulate import SimConfig, phantom_geometric, phantom_spheres, simulate_dataset
from .volume import DensityVolume, nyquist

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
REPORT_FORMAT = "cryosagd-eval 1"

log = logging.getLogger("cryosagd")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _config_types():
    hints = typing.get_type_hints(ReconConfig)
    return {f.name: hints[f.name] for f in fields(ReconConfig)}


def resolve_config(path, overrides):
    """Config file values with command-line ``--key value`` overrides applied."""
    raw = read_keyvalue(path) if path else {}
    raw.update({k: v for k, v in overrides.items() if v is not None})
    types = _config_types()
    out = {}
    for k, v in raw.items():
        key = k.replace("-", "_")
        if key not in types:
            raise UsageError(f"unknown config key {k!r}")
        try:
            out[key] = parse_value(v, types[key])
        except ValueError as e:
            raise UsageError(f"config key {k!r}: {e}") from None
    return ReconConfig.from_dict(out)


def _parser():
    p = _Parser(prog="cryosagd", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", help="write a phantom and a simulated particle dataset")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--n", type=int, default=32)
    s.add_argument("--voxel-size", type=float, default=6.0)
    s.add_argument("--phantom", choices=("lobes", "chain", "spheres"), default="lobes")
    s.add_argument("--phantom-seed", type=int, default=1)
    s.add_argument("--K", type=int, default=2000)
    s.add_argument("--snr", type=float, default=0.05)
    s.add_argument("--sigma-t", type=float, default=0.0)
    s.add_argument("--defocus-min", type=float, default=10000.0)
    s.add_argument("--defocus-max", type=float, default=25000.0)
    s.add_argument("--seed", type=int, default=0)

    r = sub.add_parser("reconstruct", help="reconstruct a volume from a dataset manifest")
    r.add_argument("--manifest", required=True, type=Path)
    r.add_argument("--out", required=True, type=Path)
    r.add_argument("--config", type=Path)
    r.add_argument("--resume", type=Path, help="checkpoint to continue from")
    for name in _config_types():
        r.add_argument("--" + name.replace("_", "-"), dest="cfg_" + name, default=None)

    e = sub.add_parser("evaluate", help="held-out posterior-expected error of a volume")
    e.add_argument("--volume", required=True, type=Path)
    e.add_argument("--manifest", required=True, type=Path)
    e.add_argument("--out", required=True, type=Path)
    e.add_argument("--rho", type=float, help="band limit (cycles/A); default half Nyquist")
    e.add_argument("--sigma-t", type=float, default=0.0)
    e.add_argument("--noise-sigma", type=float)
    e.add_argument("--reference", type=Path, help="ground-truth volume for aligned correlation")

    i = sub.add_parser("info", help="summarize a manifest or an MRC file")
    i.add_argument("path", type=Path)
    return p


def cmd_simulate(a):
    if a.phantom == "spheres":
        truth = phantom_spheres(a.n, a.voxel_size, 10, seed=a.phantom_seed)
    else:
        truth = phantom_geometric(a.n, a.voxel_size, a.phantom, seed=a.phantom_seed)
    cfg = SimConfig(K=a.K, snr=a.snr, sigma_t=a.sigma_t,
                    defocus_range=(a.defocus_min, a.defocus_max), seed=a.seed)
    ds, truth_poses = simulate_dataset(truth, cfg)
    a.out.mkdir(parents=True, exist_ok=True)
    write_mrc(a.out / "phantom.mrc", truth.data, a.voxel_size)
    manifest = save_dataset(a.out, ds, seed=a.seed)
    write_truth(a.out / "truth.csv", truth_poses)
    write_keyvalue(a.out / "simulate.resolved", {k: v for k, v in vars(a).items()
                                                  if k not in ("func",)})
    print(f"wrote {ds.K} images to {manifest}")
    return EXIT_OK


def cmd_reconstruct(a):
    overrides = {k[4:]: v for k, v in vars(a).items() if k.startswith("cfg_")}
    cfg = resolve_config(a.config, overrides)
    if not a.manifest.is_file():
        raise DataError(f"manifest not found: {a.manifest}")
    ds = load_dataset(a.manifest)
    init = None
    if cfg.init != "spheres":
        m = read_mrc(cfg.init)
        init = DensityVolume(m.data.astype(np.float64), m.voxel_size)
    a.out.mkdir(parents=True, exist_ok=True)
    write_keyvalue(a.out / "config.resolved", cfg.to_dict())
    ckpt_dir = a.out / "checkpoints"

    def checkpoint(rec):
        ckpt_dir.mkdir(exist_ok=True)
        rec.save(ckpt_dir / f"iter_{rec.state.tau:06d}.cfrg")

    rec = Reconstructor(ds, cfg, init)
    if a.resume:
        rec.restore(a.resume)
    try:
        vol = rec.run(checkpoint=checkpoint)
    except (NumericalAbort, EmseUnderflow, FloatingPointError):
        ckpt_dir.mkdir(exist_ok=True)
        rec.save(ckpt_dir / "abort.cfrg")
        write_diagnostics(a.out / "diagnostics.csv", rec.rows, DIAGNOSTIC_COLUMNS)
        raise
    write_mrc(a.out / "volume.mrc", vol.data, vol.voxel_size)
    write_diagnostics(a.out / "diagnostics.csv", rec.rows, DIAGNOSTIC_COLUMNS)
    q = direction_marginal_average([rec.is_states[i] for i in rec.train], rec.scheme)
    write_direction_csv(a.out / "direction_marginal.csv", rec.scheme, q)
    rec.save(a.out / "final.cfrg")
    print(f"stopped at iteration {rec.state.tau}, rho = {rec.scheme.rho:.5f}")
    return EXIT_OK


def cmd_evaluate(a):
    ds = load_dataset(a.manifest)
    m = read_mrc(a.volume)
    vol = DensityVolume(m.data.astype(np.float64), m.voxel_size)
    if vol.N != ds.N:
        raise DataError(f"volume side {vol.N} does not match images ({ds.N})")
    rho = a.rho or 0.5 * nyquist(ds.pixel_size)
    sigma = a.noise_sigma or ds.noise_sigma
    if sigma is None:
        raise DataError("noise sigma is neither in the manifest nor given with --noise-sigma")
    proj = Projector(ds.N, ds.pixel_size)
    grid = proj.grid(rho)
    scheme = build_scheme(rho, ds.N, ds.pixel_size, a.sigma_t)
    F = _fourier_stack(ds.images)
    coefs = grid.take(F)
    ctfs = np.stack([ctf_eval(t, grid.radii) for t in ds.ctfs])
    idx = np.arange(ds.K)
    emse, frac, _ = evaluate_images(coefs, ctfs, idx, proj.prepare(vol), scheme, sigma, proj,
                                    exhaustive_limit=np.inf)
    ok = np.isfinite(emse)
    value = rremse(emse[ok], sigma, grid.n_full)
    lines = {"format": REPORT_FORMAT, "rremse": value, "rho": rho, "n_images": int(ds.K),
             "n_flagged": int((~ok).sum()), "mean_fraction_evaluated": float(np.mean(frac))}
    if a.reference:
        ref = read_mrc(a.reference)
        _, corr = align_volumes(DensityVolume(ref.data.astype(np.float64), ref.voxel_size), vol)
        lines["aligned_correlation"] = corr
    with open(a.out, "w") as fh:
        for k, v in lines.items():
            fh.write(f"{k} = {format_value(v)}\n")
        fh.write("\n[per_image]\nindex,emse\n")
        for i, e in zip(idx, emse):
            fh.write(f"{i},{format_value(float(e))}\n")
    print(f"rremse = {value:.5f} at rho = {rho:.5f}")
    return EXIT_OK


def cmd_info(a):
    p = a.path
    if not p.is_file():
        raise DataError(f"file not found: {p}")
    if p.suffix in (".manifest", ".txt"):
        m = read_manifest(p)
        for k, v in m.to_dict().items():
            print(f"{k} = {format_value(v)}")
        return EXIT_OK
    m = read_mrc(p)
    d = m.data
    kind = "stack" if m.stack else "volume"
    print(f"kind = {kind}")
    print(f"N = {d.shape[-1]}")
    if m.stack:
        print(f"K = {d.shape[0]}")
    print(f"voxel_size = {m.voxel_size!r}")
    print(f"min = {float(d.min())!r}")
    print(f"max = {float(d.max())!r}")
    print(f"mean = {float(d.mean())!r}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "reconstruct": cmd_reconstruct,
            "evaluate": cmd_evaluate, "info": cmd_info}


def cli_main(argv=None):
    try:
        a = _parser().parse_args(argv)
        if a.command is None:
            raise UsageError("cryosagd: a command is required (simulate, reconstruct, evaluate, info)")
        logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[a.command](a)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except (NumericalAbort, EmseUnderflow, FloatingPointError) as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, ValueError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()

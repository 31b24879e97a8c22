"""Command-line interface.

Exit codes: 0 success, 2 parse error, 3 solver error, 4 invalid argument or
numeric failure.
"""
import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from .dti import DEFAULT_FA_THRESHOLD, estimate_response
from .errors import InvalidArgumentError, NumericError, ParseError, SolverError
from .experiment import run_experiment
from .fodf import PeakSet, extract_peaks
from .io import VolumeContainer, load_scheme, write_csv, write_peaks, write_scheme
from .kernels import FORECAST, NODDI_SH, DiffusivitySet
from .phantom import crossing_sweep, fanning_sweep, synth_sweep
from .pipeline import FitConfig, fit_volume, subsample_scheme
from .scheme import HCP_TAU, hcp_like_scheme
from .sh import make_hemisphere_grid
from .smt import DictionaryConfig


def _add_scheme_args(p, required=True):
    p.add_argument("--bvals", required=required, help="b-value file (one line)")
    p.add_argument("--bvecs", required=required, help="gradient file (three lines)")
    p.add_argument("--tau", type=float, default=HCP_TAU, help="diffusion time in seconds")


def _add_fit_args(p):
    p.add_argument("--model", choices=(NODDI_SH, FORECAST), default=NODDI_SH)
    p.add_argument("--order", type=int, default=8)
    p.add_argument("--grid-size", type=int, default=181)
    p.add_argument("--search-grid-size", type=int, default=3000)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=1000)
    p.add_argument("--lambda-par", type=float, default=1.7e-3)
    p.add_argument("--lambda-perp", type=float, default=0.1e-3)
    p.add_argument("--csf-levels", type=int, default=16)
    p.add_argument("--split-constant", type=float, default=47.75)
    p.add_argument("--rel-threshold", type=float, default=0.5)
    p.add_argument("--min-sep-deg", type=float, default=25.0)
    p.add_argument("--max-peaks", type=int, default=5)
    p.add_argument("--workers", type=int, default=1)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="noddish", description="NODDI-SH / FORECAST fitting and phantom experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a phantom volume, scheme and ground truth")
    p.add_argument("--sweep", choices=("fanning", "crossing"), default="crossing")
    p.add_argument("--draws", type=int, default=1)
    p.add_argument("--snr", type=float, default=20.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output prefix")

    p = sub.add_parser("fit", help="fit a volume")
    p.add_argument("--volume", required=True)
    _add_scheme_args(p)
    _add_fit_args(p)
    p.add_argument("--fractions-only", action="store_true")
    p.add_argument("--no-peaks", action="store_true")
    p.add_argument("--subsample", type=int, help="fit on the first N directions per shell")
    p.add_argument("--max-b", type=float, default=np.inf)
    p.add_argument("--mask", help="volume whose non-zero voxels are fitted")
    p.add_argument("--out", required=True, help="output prefix")

    p = sub.add_parser("subsample", help="keep the first N directions of each shell")
    _add_scheme_args(p)
    p.add_argument("-n", "--directions", type=int, required=True)
    p.add_argument("--max-b", type=float, default=np.inf)
    p.add_argument("--volume", help="optionally subsample this volume too")
    p.add_argument("--out", required=True, help="output prefix")

    p = sub.add_parser("response", help="estimate diffusivities from high-FA voxels")
    p.add_argument("--volume", required=True)
    _add_scheme_args(p)
    p.add_argument("--fa-threshold", type=float, default=DEFAULT_FA_THRESHOLD)

    p = sub.add_parser("experiment", help="run a JSON experiment spec")
    p.add_argument("spec")

    p = sub.add_parser("peaks", help="extract peaks from a coefficient volume")
    p.add_argument("--coeffs", required=True)
    p.add_argument("--search-grid-size", type=int, default=3000)
    p.add_argument("--rel-threshold", type=float, default=0.5)
    p.add_argument("--min-sep-deg", type=float, default=25.0)
    p.add_argument("--max-peaks", type=int, default=5)
    p.add_argument("--out", required=True, help="peaks text file")
    return parser


def _fit_config(args, fractions_only=False, peaks=True):
    return FitConfig(
        model=args.model, order=args.order, grid_size=args.grid_size,
        search_grid_size=args.search_grid_size, tol=args.tol, max_iter=args.max_iter,
        diffusivities=DiffusivitySet(args.lambda_par, args.lambda_perp),
        dictionary=DictionaryConfig(args.csf_levels, args.split_constant),
        fractions_only=fractions_only, peaks=peaks, rel_threshold=args.rel_threshold,
        min_sep_deg=args.min_sep_deg, max_peaks=args.max_peaks, workers=args.workers)


def cmd_simulate(args):
    scheme = hcp_like_scheme()
    sweep = fanning_sweep if args.sweep == "fanning" else crossing_sweep
    voxels = sweep(draws=args.draws, snr=args.snr, root_seed=args.seed)
    signals, truths = synth_sweep(voxels, scheme)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    VolumeContainer.from_voxels(
        signals, provenance=f"{args.sweep} phantom, draws={args.draws}, snr={args.snr}, "
                            f"seed={args.seed}").write(out)
    write_scheme(scheme, f"{out}.bvals", f"{out}.bvecs")
    rows = []
    for i, (v, gt) in enumerate(zip(voxels, truths)):
        row = {"voxel": i, **v.condition, "nu_ic": gt.fractions.nu_ic,
               "nu_ec": gt.fractions.nu_ec, "nu_csf": gt.fractions.nu_csf}
        for k, mu in enumerate(gt.means):
            row.update({f"mu{k}_x": mu[0], f"mu{k}_y": mu[1], f"mu{k}_z": mu[2]})
        rows.append(row)
    write_csv(f"{out}_truth.csv", rows, list(rows[0].keys()))
    print(f"wrote {len(voxels)} voxels to {out}.f32")


def cmd_fit(args):
    vol = VolumeContainer.read(args.volume)
    scheme = load_scheme(args.bvals, args.bvecs, args.tau)
    if vol.dims[3] != len(scheme):
        raise InvalidArgumentError(
            f"volume has {vol.dims[3]} samples but the scheme has {len(scheme)}")
    index = None
    if args.subsample is not None:
        _, index = subsample_scheme(scheme, args.subsample, args.max_b)
    mask = None
    if args.mask:
        mask = VolumeContainer.read(args.mask).data[..., 0].reshape(-1) != 0
    cfg = _fit_config(args, args.fractions_only, not args.no_peaks)
    report = fit_volume(vol, scheme, cfg, index, mask)
    shape = vol.dims[:3]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    prov = f"fit {args.volume} model={args.model}"
    names = ("nu_ic", "nu_ec", "nu_csf")
    for k, name in enumerate(names):
        VolumeContainer(report.fractions[:, k].reshape(shape), provenance=prov).write(f"{out}_{name}")
    VolumeContainer(report.coeffs.reshape(shape + (-1,)), units="sh_coefficients",
                    provenance=prov, extra={"order": args.order}).write(f"{out}_coeffs")
    VolumeContainer(report.mse.reshape(shape), provenance=prov).write(f"{out}_mse")
    if cfg.peaks and not cfg.fractions_only:
        write_peaks(f"{out}_peaks.txt", report.peaks)
    rows = [{"voxel": i, "nu_ic": report.fractions[i, 0], "nu_ec": report.fractions[i, 1],
             "nu_csf": report.fractions[i, 2], "lambda_par": report.lambda_par[i],
             "lambda_perp": report.lambda_perp[i], "mse": report.mse[i],
             "peak_count": len(report.peaks[i]), "converged": report.converged[i],
             "skipped": report.skipped[i]} for i in range(len(report))]
    write_csv(f"{out}_report.csv", rows, list(rows[0].keys()))
    fitted = ~report.skipped
    if not cfg.fractions_only and (fitted & ~report.converged).any():
        print(f"warning: {int((fitted & ~report.converged).sum())} voxels did not converge",
              file=sys.stderr)
    print(f"fitted {int(fitted.sum())} of {len(report)} voxels")


def cmd_subsample(args):
    scheme = load_scheme(args.bvals, args.bvecs, args.tau)
    sub, index = subsample_scheme(scheme, args.directions, args.max_b)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_scheme(sub, f"{out}.bvals", f"{out}.bvecs")
    Path(f"{out}.index").write_text(" ".join(str(i) for i in index) + "\n")
    if args.volume:
        vol = VolumeContainer.read(args.volume)
        VolumeContainer(vol.data[..., index], vol.units,
                        f"{vol.provenance}; subsampled to {args.directions}/shell").write(out)
    print(f"kept {index.size} of {len(scheme)} samples")


def cmd_response(args):
    vol = VolumeContainer.read(args.volume)
    scheme = load_scheme(args.bvals, args.bvecs, args.tau)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        est = estimate_response(vol.voxels().astype(float), scheme, args.fa_threshold)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    print(json.dumps({"lambda_par": est.diffusivities.lambda_par,
                      "lambda_perp": est.diffusivities.lambda_perp,
                      "n_voxels": est.n_voxels, "fallback": est.fallback}))


def cmd_experiment(args):
    result = run_experiment(args.spec)
    for f in result.files:
        print(f)


def cmd_peaks(args):
    vol = VolumeContainer.read(args.coeffs)
    grid = make_hemisphere_grid(args.search_grid_size)
    peaks = []
    for c in vol.voxels().astype(float):
        if not np.all(np.isfinite(c)):
            peaks.append(PeakSet(np.zeros((0, 3)), np.zeros(0)))
            continue
        peaks.append(extract_peaks(c, grid, args.rel_threshold, args.min_sep_deg, args.max_peaks))
    write_peaks(args.out, peaks)
    print(f"wrote peaks for {len(peaks)} voxels")


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "subsample": cmd_subsample,
            "response": cmd_response, "experiment": cmd_experiment, "peaks": cmd_peaks}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except (ParseError, SolverError, InvalidArgumentError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())

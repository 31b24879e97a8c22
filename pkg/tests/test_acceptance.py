"""Acceptance criteria, each run at its stated tolerance.

Every test logs one PASS/FAIL line (collected in the terminal summary) and
then asserts the same condition.
"""
import time

import numpy as np
import pytest

from noddish.experiment import run_experiment
from noddish.fodf import C00
from noddish.kernels import DiffusivitySet, forecast_basis, isotropic_coeffs, phi_l, psi_l
from noddish.phantom import crossing_sweep, fanning_sweep, synth_sweep
from noddish.pipeline import FitConfig, fit_voxels
from noddish.qp import LeastSquaresQP
from noddish.scheme import hcp_like_scheme
from noddish.sh import make_hemisphere_grid

from oracles import brute_force_qp, quad_phi, quad_psi, random_order2_qp


@pytest.fixture(scope="module")
def scheme():
    return hcp_like_scheme()


@pytest.fixture(scope="module")
def crossing_run(tmp_path_factory):
    spec = {"sweep": "crossing", "draws": 3, "root_seed": 0,
            "output_dir": str(tmp_path_factory.mktemp("crossing"))}
    return run_experiment(spec)


def test_criterion_01_kernel_oracles(acceptance_log):
    t0 = time.perf_counter()
    xs = np.linspace(0.0, 30.0, 200)
    worst_phi = worst_psi = 0.0
    for l in (0, 2, 4, 6, 8):
        ref_phi = np.array([quad_phi(l, x) for x in xs])
        ref_psi = np.array([quad_psi(l, x) for x in xs])
        worst_phi = max(worst_phi, np.abs(phi_l(l, xs) - ref_phi).max())
        worst_psi = max(worst_psi, np.abs(psi_l(l, xs) - ref_psi).max())
    limits = [phi_l(l, 0.0) for l in (0, 2, 4, 6, 8)]
    exact = limits == [2.0, 2 / 3, 2 / 5, 2 / 7, 2 / 9]
    elapsed = time.perf_counter() - t0
    ok = worst_phi <= 1e-10 and worst_psi <= 1e-10 and exact and elapsed < 5.0
    acceptance_log(1, ok, f"max |Phi - quad| = {worst_phi:.2e}, max |Psi - quad| = {worst_psi:.2e}, "
                          f"exact limits = {exact}, runtime {elapsed:.2f} s")
    assert ok


def test_criterion_02_isotropic_reduction(scheme, acceptance_log):
    worst = 0.0
    for lam in (0.3e-3, 1.0e-3, 1.7e-3, 3.0e-3):
        M = forecast_basis(scheme, DiffusivitySet(lam, lam), 8)
        worst = max(worst, np.abs(M.values @ isotropic_coeffs(8) - np.exp(-scheme.bvals * lam)).max())
    ok = worst <= 1e-12
    acceptance_log(2, ok, f"max |M c_iso - exp(-b lambda)| = {worst:.2e}")
    assert ok


def test_criterion_03_feasibility(scheme, acceptance_log):
    voxels = fanning_sweep(draws=1, root_seed=3) + crossing_sweep(draws=1, root_seed=4)
    pick = np.random.default_rng(0).choice(len(voxels), 1000, replace=False)
    signals, _ = synth_sweep([voxels[i] for i in pick], scheme)
    rep = fit_voxels(signals, scheme, FitConfig(peaks=False))
    grid = make_hemisphere_grid(181)
    conv = rep.converged
    amp = rep.coeffs[conv] @ grid.sh_matrix(8).T
    min_amp = float(amp.min())
    c00_dev = float(np.abs(rep.coeffs[conv, 0] - C00).max())
    ok = min_amp >= -1e-8 and c00_dev <= 1e-10
    acceptance_log(3, ok, f"{conv.sum()}/1000 converged; min grid amplitude {min_amp:.2e}, "
                          f"max |c00 - 1/sqrt(4 pi)| = {c00_dev:.1e}")
    assert ok


def test_criterion_04_qp_oracle(acceptance_log):
    worst = 0.0
    for seed in range(50):
        A, r, G, h = random_order2_qp(seed)
        x = LeastSquaresQP(A, G, h).solve(r).x
        worst = max(worst, np.abs(x - brute_force_qp(A, r, G, h)).max())
    ok = worst <= 1e-6
    acceptance_log(4, ok, f"max |x_qp - x_enumeration| over 50 problems = {worst:.2e}")
    assert ok


def test_criterion_05_fanning_error(tmp_path, acceptance_log):
    # full fanning sweep; the limit must hold for the isotropic (beta = 0) voxels
    # of each kappa and for all beta pooled together
    t0 = time.perf_counter()
    res = run_experiment({"sweep": "fanning", "draws": 3, "snr": 20.0,
                          "root_seed": 0, "output_dir": str(tmp_path)})
    elapsed = time.perf_counter() - t0
    iso = {r["kappa"]: r["nu_ic_abs_error_mean"] for r in res.summary_rows if r["beta"] == 0.0}
    pooled = {r["kappa"]: r["nu_ic_abs_error_mean"] for r in res.summary_rows
              if r["beta"] == "all"}
    ok = (all(v <= 0.06 for v in iso.values()) and all(v <= 0.06 for v in pooled.values())
          and len(iso) == 3 and elapsed < 120)
    fmt = lambda d: ", ".join(f"kappa={k:g}: {100 * v:.2f}%" for k, v in d.items())
    acceptance_log(5, ok, f"{len(res.voxel_rows)} voxels; mean |nu_ic error| beta=0 "
                          f"{fmt(iso)}; all beta {fmt(pooled)} (limit 6%); "
                          f"runtime {elapsed:.1f} s")
    assert ok


def test_criterion_06_crossing_angular_error(crossing_run, acceptance_log):
    rows = crossing_run.voxel_rows

    def mean_ae(angle, max_nu=np.inf):
        return float(np.mean([r["angular_error_deg"] for r in rows
                              if r["angle"] == angle and r["nu_ic"] <= max_nu + 1e-9]))
    ae90, ae60, ae45 = mean_ae(90.0), mean_ae(60.0), mean_ae(45.0, 0.7)
    ok = ae90 <= 7.0 and ae60 <= 7.0 and ae45 <= 12.0
    acceptance_log(6, ok, f"mean AE 90 deg {ae90:.2f}, 60 deg {ae60:.2f} (limit 7); "
                          f"45 deg at nu_ic <= 0.7 {ae45:.2f} (limit 12)")
    assert ok


def test_criterion_07_crossing_fraction_error(crossing_run, acceptance_log):
    err = float(np.mean([r["nu_ic_abs_error"] for r in crossing_run.voxel_rows]))
    ok = err <= 0.09
    acceptance_log(7, ok, f"mean |nu_ic error| over {len(crossing_run.voxel_rows)} crossing "
                          f"voxels = {100 * err:.2f}% (limit 9%)")
    assert ok


def test_criterion_08_subsampling(tmp_path, acceptance_log):
    res = run_experiment({"sweep": "subsample", "draws": 1, "root_seed": 0,
                          "fractions_only": True, "output_dir": str(tmp_path)})
    by = {(r["directions_per_shell"], r["max_b"]): r for r in res.summary_rows}
    shell_diff = by[(30, 3000.0)]["b1000_mean_rel_diff_mean"]
    r60 = by[(60, 2000.0)]["nu_ic_pearson_vs_full"]
    ok = shell_diff <= 0.02 and r60 >= 0.95
    acceptance_log(8, ok, f"b=1000 shell mean, 30 vs 90 directions: mean relative difference "
                          f"{100 * shell_diff:.3f}% (limit 2%); nu_ic Pearson r, 60 directions "
                          f"b_max 2000 vs full = {r60:.4f} (limit 0.95); "
                          f"{len(res.voxel_rows) // len(by)} voxels at SNR 20")
    assert ok


def test_criterion_09_throughput(scheme, acceptance_log):
    signals, _ = synth_sweep(crossing_sweep(draws=10), scheme)
    fit_voxels(signals[:4], scheme)            # JIT warm-up
    t0 = time.perf_counter()
    fit_voxels(signals, scheme, FitConfig(fractions_only=True, workers=1))
    frac_rate = len(signals) / (time.perf_counter() - t0)
    t0 = time.perf_counter()
    fit_voxels(signals, scheme, FitConfig(workers=1))
    full_rate = len(signals) / (time.perf_counter() - t0)
    ok = frac_rate >= 1000 and full_rate >= 100
    acceptance_log(9, ok, f"{len(signals)} voxels, single core: fractions-only "
                          f"{frac_rate:.0f} voxels/s (target 1000), full fODF with peaks "
                          f"{full_rate:.0f} voxels/s (target 100)")
    assert ok


def test_criterion_10_determinism(tmp_path, acceptance_log):
    specs = [{"sweep": "fanning", "root_seed": 11},
             {"sweep": "crossing", "root_seed": 11},
             {"sweep": "subsample", "root_seed": 11, "kappas": [32.0], "beta_ratios": [0.0],
              "rotations_deg": [0.0]}]
    compared, mismatched = 0, []
    for spec in specs:
        a = run_experiment({**spec, "output_dir": str(tmp_path / "a" / spec["sweep"])})
        b = run_experiment({**spec, "output_dir": str(tmp_path / "b" / spec["sweep"])})
        for fa, fb in zip(a.files, b.files):
            compared += 1
            if fa.read_bytes() != fb.read_bytes():
                mismatched.append(f"{spec['sweep']}/{fa.name}")
    ok = not mismatched
    acceptance_log(10, ok, f"{compared} report files from fanning, crossing and subsample "
                           f"sweeps compared; mismatches: {mismatched or 'none'}")
    assert ok

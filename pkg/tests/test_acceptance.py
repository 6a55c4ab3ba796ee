"""End-to-end verification battery.

One test per advertised guarantee, each printing a single pass/fail
line with the measured quantity and its gate.  Monte Carlo cases pin
their seeds so the suite is deterministic; the gates leave room for
the known discretization bias at the pinned sample sizes.
"""

import time

import numpy as np
import pytest
from scipy.integrate import quad

from liefbm import cli
from liefbm.fbm import (
    KernelEval,
    TimeGrid,
    increment_covariance,
    sample_fbm,
    sample_volterra,
)
from liefbm.integrator import integrate
from liefbm.liegroup import exp_matrix, make_basis
from liefbm.malliavin import (
    constant_field,
    ibp_report_from_trace,
    ibp_trace,
    malliavin_matrix,
)
from liefbm.signature import nilpotent_flow_path
from liefbm.stats import (
    GroupMorphism,
    MonteCarloConfig,
    derivative_at_identity,
    entry_functional,
    global_scaling_test,
    isometry_invariance_test,
    local_selfsimilarity_test,
    log_coordinate_functional,
    stationary_increments_test,
)


def gate(name: str, detail: str, ok: bool):
    line = f"acceptance {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line)
    assert ok, line


def test_criterion_01_sampler_covariance_is_exact():
    """Empirical increment covariance matches the closed form entrywise."""
    grid = TimeGrid.dyadic(6)
    n_paths = 20000
    start = time.monotonic()
    worst = 0.0
    for h in (0.3, 0.5, 0.75):
        tick = time.monotonic()
        sample = sample_fbm(h, grid, 1, 2026, paths=n_paths)
        inc = np.diff(sample.values[:, 0, :], axis=-1)
        emp = inc.T @ inc / n_paths
        target = increment_covariance(h, grid)
        diag = np.diag(target)
        se = np.sqrt((np.outer(diag, diag) + target**2) / n_paths)
        z = float((np.abs(emp - target) / se).max())
        worst = max(worst, z)
        assert time.monotonic() - tick < 60.0
    elapsed = time.monotonic() - start
    gate("01 sampler covariance", f"max |z| = {worst:.2f}, gate 4, {elapsed:.1f}s", worst < 4.0)


def test_criterion_02_kernel_reproduces_variance():
    """The squared kernel integrates to the fractional variance law."""
    worst = 0.0
    for h in (0.6, 0.75, 0.9):
        ker = KernelEval(h)
        val, err = quad(lambda s: ker.kernel(1.0, s) ** 2, 0.0, 1.0, limit=500)
        assert err < 1e-8
        worst = max(worst, abs(val - 1.0))
    gate("02 kernel variance identity", f"max rel err = {worst:.2e}, gate 1e-6", worst < 1e-6)


def test_criterion_03_flows_stay_on_the_group():
    """Integrated paths have negligible membership defect."""
    start = time.monotonic()
    grid = TimeGrid.dyadic(8)
    worst = 0.0
    for name in ("so3", "heisenberg1"):
        basis = make_basis(name)
        for first in range(0, 1000, 250):
            sample = sample_fbm(0.75, grid, basis.d, 404, paths=250, first_path=first)
            flow = integrate(sample, basis)
            worst = max(worst, float(flow.max_membership_defect()))
    elapsed = time.monotonic() - start
    assert elapsed < 60.0
    gate("03 group membership", f"max defect = {worst:.2e}, gate 1e-8", worst < 1e-8)


def test_criterion_04_integrator_matches_closed_form():
    """Product flow equals the iterated-integral closed form on nilpotent families."""
    start = time.monotonic()
    grid = TimeGrid.dyadic(8)
    worst = 0.0
    for name in ("heisenberg1", "free_step2:3"):
        basis = make_basis(name)
        for first in range(0, 1000, 125):
            sample = sample_fbm(0.75, grid, basis.d, 405, paths=125, first_path=first)
            flow = integrate(sample, basis)
            closed = nilpotent_flow_path(sample, basis)
            gap = np.linalg.norm(flow.elements - closed.elements, axis=(-2, -1)).max()
            worst = max(worst, float(gap))
    elapsed = time.monotonic() - start
    assert elapsed < 120.0
    gate("04 closed-form oracle", f"max Frobenius gap = {worst:.2e}, gate 1e-9", worst < 1e-9)


def test_criterion_05_increments_are_stationary():
    """Shifted increment law matches the law started at the origin."""
    start = time.monotonic()
    basis = make_basis("so3")
    mc = MonteCarloConfig(n_paths=20000, seed=2025, mesh_level=6)
    result = stationary_increments_test(basis, 0.75, 0.5, 0.5, mc)
    control = stationary_increments_test(basis, 0.75, 0.5, 0.5, mc, broken_shift=True)
    elapsed = time.monotonic() - start
    assert elapsed < 300.0
    gate(
        "05 stationary increments",
        f"worst |z| = {result.worst_z:.2f} (gate 4); "
        f"negative control z = {control.worst_z:.1f}, {elapsed:.1f}s",
        result.passed and not control.passed,
    )


def test_criterion_06_conjugation_preserves_the_law():
    """Flow law is invariant under an inner isometry."""
    basis = make_basis("so3")
    g = exp_matrix(basis.element(np.array([0.7, -1.1, 0.4])), basis)
    mc = MonteCarloConfig(n_paths=20000, seed=2025, mesh_level=6)
    result = isometry_invariance_test(basis, GroupMorphism("conjugation", g), 0.75, 1.0, mc)
    gate(
        "06 isometry invariance",
        f"worst |z| = {result.worst_z:.2f}, gate 4",
        result.passed,
    )


def test_criterion_07_short_time_fluctuation_law():
    """Variance of a matrix entry grows like the scaling limit predicts."""
    start = time.monotonic()
    basis = make_basis("so3")
    f = entry_functional(0, 1)
    oracle = float(np.linalg.norm(derivative_at_identity(f, basis)))
    scales = (1.0 / 128, 1.0 / 64, 1.0 / 32, 1.0 / 16)
    details = []
    ok = True
    for h in (0.5, 0.75):
        mc = MonteCarloConfig(n_paths=20000, seed=2025, mesh_level=6)
        fit = local_selfsimilarity_test(basis, f, h, mc, scales=scales)
        slope_err = abs(fit.slope - 2.0 * h)
        amp_err = abs(fit.amplitude - oracle)
        ok = ok and slope_err < 0.1 and amp_err <= 0.1 * oracle
        details.append(f"h={h}: slope err {slope_err:.3f}, amplitude err {amp_err / oracle:.1%}")
    elapsed = time.monotonic() - start
    assert elapsed < 600.0
    gate("07 local self-similarity", "; ".join(details) + f", gates 0.1/10%, {elapsed:.1f}s", ok)


def test_criterion_08_dilation_covariance_of_graded_flows():
    """Dilated reference law matches direct simulation; area exponent recovered."""
    basis = make_basis("heisenberg1")
    details = []
    ok = True
    for h in (0.6, 0.75):
        mc = MonteCarloConfig(n_paths=20000, seed=2025, mesh_level=6)
        result = global_scaling_test(basis, h, mc, scales=(0.25, 1.0, 4.0))
        area_err = abs(result.layer_fits[2].slope - 4.0 * h)
        ok = ok and result.passed and result.comparisons[0.25].passed
        ok = ok and result.comparisons[4.0].passed and area_err < 0.1
        worst = max(c.worst_z for c in result.comparisons.values())
        details.append(f"h={h}: worst |z| {worst:.2f}, area exponent err {area_err:.3f}")
    gate("08 global dilation scaling", "; ".join(details) + ", gates 4/0.1", ok)


def test_criterion_09_derivative_covariance_is_positive():
    """Endpoint derivative covariance is strictly positive definite."""
    basis = make_basis("so3")
    ker = KernelEval(0.75)
    grid = TimeGrid.dyadic(6)
    eigs = []
    for first in range(0, 1000, 250):
        sample = sample_volterra(0.75, grid, 3, 31, paths=250, first_path=first)
        flow = integrate(sample, basis)
        eigs.append(np.atleast_1d(malliavin_matrix(flow, ker, 1.0).min_eigenvalue))
    worst = float(np.concatenate(eigs).min())

    abelian = make_basis("abelian:3")
    fine = TimeGrid.dyadic(8)
    sample = sample_volterra(0.75, fine, 3, 31, paths=8)
    mm = malliavin_matrix(integrate(sample, abelian), ker, 1.0)
    target = 1.0  # t^{2H} at t=1
    rel = float(np.abs(mm.gamma - target * np.eye(3)).max() / target)
    gate(
        "09 derivative covariance",
        f"min eigenvalue = {worst:.3f} (gate > 0); flat-case rel err = {rel:.2e}, gate 1e-3",
        worst > 0.0 and rel < 1e-3,
    )


def test_criterion_10_integration_by_parts_identity():
    """Both identity sides agree within four standard errors, reliably."""
    start = time.monotonic()

    abelian = make_basis("abelian:2")
    f = log_coordinate_functional(abelian, 0)
    field = constant_field(np.array([1.0, 0.0]), 1.0)
    mc = MonteCarloConfig(n_paths=20000, seed=62, mesh_level=6)
    lhs, rhs = ibp_trace(abelian, f, field, 0.75, 1.0, mc)
    report = ibp_report_from_trace(f.name, lhs, rhs)
    ker = KernelEval(0.75)
    mass, err = quad(lambda s: ker.kernel(1.0, s), 1e-12, 1.0, limit=300)
    assert err < 1e-8
    flat_ok = report.passed and abs(report.lhs_mean - mass) < 1e-3 * mass

    basis = make_basis("so3")
    f = entry_functional(0, 1)
    direction = np.zeros(3)
    direction[0] = 1.0
    field = constant_field(direction, 1.0)
    passes = 0
    worst = 0.0
    for rep in range(50):
        mc = MonteCarloConfig(n_paths=20000, seed=1000 + rep, mesh_level=6)
        lhs, rhs = ibp_trace(basis, f, field, 0.75, 1.0, mc)
        rep_report = ibp_report_from_trace(f.name, lhs, rhs)
        passes += int(rep_report.passed)
        worst = max(worst, rep_report.z)
    rate = passes / 50.0
    elapsed = time.monotonic() - start
    assert elapsed < 900.0
    gate(
        "10 integration by parts",
        f"flat case z = {report.z:.2f} and mean within 0.1% of closed form "
        f"({flat_ok}); calibration pass rate {rate:.2f} (gate 0.95), "
        f"max z {worst:.2f}, {elapsed:.0f}s",
        flat_ok and rate >= 0.95,
    )


def test_criterion_11_reruns_are_byte_identical(tmp_path):
    """A manifest reproduces its run's CSV bodies exactly."""
    specs = [
        ("sample", ["--dim", "2", "--level", "6", "--paths", "3", "--hurst", "0.6", "--seed", "21"]),
        ("malliavin", ["--basis", "abelian:2", "--paths", "6", "--level", "5", "--seed", "4"]),
        ("scaling-global", ["--paths", "1200", "--level", "4", "--seed", "5"]),
    ]
    identical = True
    for kind, args in specs:
        first = tmp_path / f"{kind}-a"
        second = tmp_path / f"{kind}-b"
        assert cli.main([kind, *args, "--out", str(first)]) == 0
        assert cli.main([kind, "--config", str(first / "manifest.json"), "--out", str(second)]) == 0
        for csv in sorted(first.glob("*.csv")):
            identical = identical and csv.read_bytes() == (second / csv.name).read_bytes()
    gate("11 reproducibility", "CSV bodies byte-identical across reruns", identical)

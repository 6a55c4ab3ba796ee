import numpy as np
import pytest

from liefbm.fbm import TimeGrid, sample_fbm
from liefbm.integrator import integrate
from liefbm.liegroup import (
    abelian_basis,
    exp_matrix,
    heisenberg_basis,
    log_unipotent,
    so3_basis,
)
from liefbm.stats import (
    GroupMorphism,
    MonteCarloConfig,
    ScalingFit,
    StatsError,
    compare_laws,
    derivative_at_identity,
    entry_functional,
    global_scaling_test,
    isometry_invariance_test,
    local_selfsimilarity_test,
    log_coordinate_functional,
    moment_report,
    stationary_increments_test,
    trace_functional,
)

RNG = np.random.default_rng(77)


def gaussian_report(name, n, scale=1.0, seed=0, **kw):
    data = np.random.default_rng(seed).normal(scale=scale, size=n)
    return moment_report(name, data, seed=seed, **kw)


# ---------------------------------------------------------------------------
# moment reports


def test_moment_report_fields():
    rep = gaussian_report("stat", 5000, seed=1)
    assert rep.n_samples == 5000
    assert rep.mean.shape == (1,)
    assert rep.quantiles.shape == (3, 1)
    assert abs(rep.mean[0]) < 0.05
    assert abs(rep.variance[0] - 1.0) < 0.1
    assert rep.mean_se[0] > 0
    assert rep.variance_se[0] > 0
    assert np.all(rep.mean_halfwidth > rep.mean_se)


def test_moment_report_vector_statistics():
    data = np.random.default_rng(2).normal(size=(3000, 4))
    rep = moment_report("vec", data, labels=("a", "b", "c", "d"))
    assert rep.mean.shape == (4,)
    assert rep.labels == ("a", "b", "c", "d")


def test_moment_report_bad_inputs():
    with pytest.raises(StatsError, match="label"):
        moment_report("x", np.zeros((100, 2)), labels=("only",))
    with pytest.raises(StatsError, match="two samples"):
        moment_report("x", np.array([1.0]))


def test_moment_report_bootstrap_se_tracks_theory():
    # standard error of the mean of n standard normals is 1/sqrt(n)
    rep = gaussian_report("stat", 10000, seed=3)
    assert rep.mean_se[0] == pytest.approx(1.0 / np.sqrt(10000), rel=0.25)


# ---------------------------------------------------------------------------
# law comparison


def test_compare_with_itself_passes():
    rep = gaussian_report("stat", 2000, seed=4)
    res = compare_laws(rep, rep)
    assert res.passed
    assert res.worst_z == 0.0


def test_compare_detects_variance_mismatch():
    a = gaussian_report("stat", 10000, scale=1.0, seed=5)
    b = gaussian_report("stat", 10000, scale=np.sqrt(1.5), seed=6)
    res = compare_laws(a, b)
    assert not res.passed
    assert "variance" in res.worst_label


def test_compare_rejects_mismatches():
    a = gaussian_report("one", 2000, seed=7)
    b = gaussian_report("two", 2000, seed=8)
    with pytest.raises(StatsError, match="one"):
        compare_laws(a, b)
    c = gaussian_report("one", 5000, seed=9)
    with pytest.raises(StatsError, match="factor of two"):
        compare_laws(a, c)
    small = gaussian_report("one", 500, seed=10)
    with pytest.raises(StatsError, match="1000"):
        compare_laws(small, small)


def test_compare_quantiles_requires_bootstrap():
    a = gaussian_report("stat", 2000, seed=11)
    with pytest.raises(StatsError, match="quantile"):
        compare_laws(a, a, with_quantiles=True)
    b = gaussian_report("stat", 2000, seed=12, with_quantile_se=True)
    res = compare_laws(b, b, with_quantiles=True)
    assert res.passed
    assert any(row.label.startswith("q50") for row in res.rows)


def test_compare_calibration_frequency():
    # identical laws, independent batches: the 4 sigma gate should pass
    # nearly always
    passes = 0
    reps = 100
    for k in range(reps):
        a = gaussian_report("stat", 20000, seed=3000 + 2 * k)
        b = gaussian_report("stat", 20000, seed=3001 + 2 * k)
        passes += compare_laws(a, b).passed
    assert passes >= 95


def test_monte_carlo_config_validation():
    with pytest.raises(StatsError):
        MonteCarloConfig(n_paths=0)
    with pytest.raises(StatsError):
        MonteCarloConfig(bootstrap=3)
    with pytest.raises(StatsError):
        MonteCarloConfig(chunk=0)


# ---------------------------------------------------------------------------
# functionals


def test_entry_and_trace_functionals():
    x = np.arange(9.0).reshape(3, 3)
    assert entry_functional(0, 1)(x) == 1.0
    assert trace_functional()(x) == 12.0


def test_derivative_at_identity_so3():
    got = derivative_at_identity(entry_functional(0, 1), so3_basis())
    assert np.allclose(got, [1.0, 0.0, 0.0], atol=1e-9)


def test_log_coordinate_functional_heisenberg():
    basis = heisenberg_basis(1)
    x = exp_matrix(basis.element(np.array([0.3, -0.2])), basis)
    f = log_coordinate_functional(basis, 0)
    assert f(x) == pytest.approx(0.3, abs=1e-12)
    with pytest.raises(StatsError, match="unipotent"):
        log_coordinate_functional(so3_basis(), 0)


# ---------------------------------------------------------------------------
# stationarity


def test_stationary_increments_so3_passes():
    mc = MonteCarloConfig(n_paths=4000, seed=21, mesh_level=5)
    res = stationary_increments_test(so3_basis(), 0.75, 0.5, 0.5, mc)
    assert res.passed, f"worst {res.worst_label} z={res.worst_z:.2f}"


def test_stationary_increments_abelian_passes():
    mc = MonteCarloConfig(n_paths=2000, seed=22, mesh_level=4)
    res = stationary_increments_test(abelian_basis(2), 0.6, 0.25, 0.75, mc)
    assert res.passed


def test_broken_shift_fails():
    mc = MonteCarloConfig(n_paths=4000, seed=23, mesh_level=5)
    res = stationary_increments_test(
        so3_basis(), 0.75, 0.5, 0.5, mc, broken_shift=True
    )
    assert not res.passed
    assert res.worst_z > 4


def test_stationary_shift_must_sit_on_grid():
    mc = MonteCarloConfig(n_paths=2000, seed=24, mesh_level=3)
    with pytest.raises(StatsError, match="not resolved"):
        stationary_increments_test(so3_basis(), 0.75, 0.3, 0.7, mc)


def test_stationarity_calibration_frequency():
    # identical laws at reduced scale; the gate should rarely trip
    basis = abelian_basis(2)
    passes = 0
    reps = 100
    for k in range(reps):
        mc = MonteCarloConfig(
            n_paths=1000, seed=5000 + k, mesh_level=3, bootstrap=60
        )
        passes += stationary_increments_test(basis, 0.6, 0.5, 0.5, mc).passed
    assert passes >= 95


def test_broken_shift_fails_consistently():
    basis = so3_basis()
    fails = 0
    for k in range(20):
        mc = MonteCarloConfig(
            n_paths=1000, seed=6000 + k, mesh_level=4, bootstrap=60
        )
        fails += not stationary_increments_test(
            basis, 0.75, 0.5, 0.5, mc, broken_shift=True
        ).passed
    assert fails == 20


# ---------------------------------------------------------------------------
# isometry invariance


def test_identity_morphism_passes():
    mc = MonteCarloConfig(n_paths=2000, seed=31, mesh_level=4)
    psi = GroupMorphism("conjugation", np.eye(3))
    res = isometry_invariance_test(so3_basis(), psi, 0.75, 1.0, mc)
    assert res.passed


def test_random_conjugation_passes():
    basis = so3_basis()
    g = exp_matrix(basis.element(np.array([0.7, -1.1, 0.4])), basis)
    mc = MonteCarloConfig(n_paths=4000, seed=32, mesh_level=5)
    res = isometry_invariance_test(basis, GroupMorphism("conjugation", g), 0.75, 1.0, mc)
    assert res.passed, f"worst {res.worst_label} z={res.worst_z:.2f}"


def test_generator_rotation_passes():
    # proper rotation of the driving channels is a group automorphism
    basis = so3_basis()
    th = 0.6
    o = np.array(
        [
            [np.cos(th), -np.sin(th), 0.0],
            [np.sin(th), np.cos(th), 0.0],
            [0.0, 0.0, 1.0],
        ]
    )
    mc = MonteCarloConfig(n_paths=4000, seed=33, mesh_level=5)
    res = isometry_invariance_test(basis, GroupMorphism("algebra_rotation", o), 0.75, 1.0, mc)
    assert res.passed


def test_non_isometry_rejected_before_sampling():
    mc = MonteCarloConfig(n_paths=2000, seed=34, mesh_level=4)
    psi = GroupMorphism("algebra_rotation", np.diag([2.0, 1.0, 1.0]))
    with pytest.raises(StatsError, match="not an isometry"):
        isometry_invariance_test(so3_basis(), psi, 0.75, 1.0, mc)


def test_improper_rotation_rejected_as_non_morphism():
    # orthogonal but orientation-reversing: breaks the bracket table
    mc = MonteCarloConfig(n_paths=2000, seed=35, mesh_level=4)
    psi = GroupMorphism("algebra_rotation", np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(StatsError, match="morphism"):
        isometry_invariance_test(so3_basis(), psi, 0.75, 1.0, mc)


def test_morphism_kind_validated():
    with pytest.raises(StatsError, match="kind"):
        GroupMorphism("mystery", np.eye(3))


def test_isometry_needs_orthonormal_coordinates():
    mc = MonteCarloConfig(n_paths=2000, seed=36, mesh_level=4)
    psi = GroupMorphism("conjugation", np.eye(3))
    with pytest.raises(StatsError, match="orthonormal"):
        isometry_invariance_test(heisenberg_basis(1), psi, 0.75, 1.0, mc)


# ---------------------------------------------------------------------------
# local self-similarity


@pytest.mark.parametrize("h", [0.3, 0.5, 0.75])
def test_abelian_exponent_recovery(h):
    mc = MonteCarloConfig(n_paths=4000, seed=41, mesh_level=5)
    fit = local_selfsimilarity_test(abelian_basis(2), entry_functional(0, 1), h, mc)
    assert abs(fit.slope - 2 * h) < 0.05
    assert fit.amplitude == pytest.approx(1.0, abs=0.05)


def test_local_statistics_are_normalized():
    # reported per-scale statistics divide out the expected power, so
    # they hover near the squared amplitude
    mc = MonteCarloConfig(n_paths=4000, seed=42, mesh_level=5)
    fit = local_selfsimilarity_test(abelian_basis(2), entry_functional(0, 1), 0.5, mc)
    assert np.all(np.abs(fit.statistics - 1.0) < 0.1)


def test_degenerate_functional_rejected():
    mc = MonteCarloConfig(n_paths=2000, seed=43, mesh_level=4)
    with pytest.raises(StatsError, match="higher order"):
        local_selfsimilarity_test(so3_basis(), trace_functional(), 0.75, mc)


def test_scaling_fit_validation():
    with pytest.raises(StatsError, match="three scales"):
        ScalingFit(
            scales=(0.5, 1.0),
            statistics=np.ones(2),
            slope=0.0,
            intercept=0.0,
            residual_norm=0.0,
        )
    with pytest.raises(StatsError, match="positive and distinct"):
        ScalingFit(
            scales=(0.5, 0.5, 1.0),
            statistics=np.ones(3),
            slope=0.0,
            intercept=0.0,
            residual_norm=0.0,
        )


# ---------------------------------------------------------------------------
# global scaling


def test_global_scaling_heisenberg_passes():
    mc = MonteCarloConfig(n_paths=4000, seed=51, mesh_level=5)
    res = global_scaling_test(heisenberg_basis(1), 0.75, mc)
    assert res.passed
    assert abs(res.layer_fits[1].slope - 1.5) < 0.15
    assert abs(res.layer_fits[2].slope - 3.0) < 0.15


def test_global_scaling_trivial_scale_passes():
    mc = MonteCarloConfig(n_paths=2000, seed=52, mesh_level=4)
    res = global_scaling_test(
        heisenberg_basis(1), 0.6, mc, scales=(0.5, 1.0, 2.0)
    )
    assert res.comparisons[1.0].passed


def test_global_scaling_rejects_ungraded_basis():
    mc = MonteCarloConfig(n_paths=2000, seed=53, mesh_level=4)
    with pytest.raises(StatsError, match="grading"):
        global_scaling_test(so3_basis(), 0.75, mc)


def test_global_scaling_needs_three_scales():
    mc = MonteCarloConfig(n_paths=2000, seed=54, mesh_level=4)
    with pytest.raises(StatsError, match="three scales"):
        global_scaling_test(heisenberg_basis(1), 0.75, mc, scales=(0.25, 4.0))


def test_wrong_dilation_exponent_fails():
    # dilating the reference with a mismatched regularity index must be
    # caught by the comparison
    basis = heisenberg_basis(1)
    h_true, h_wrong, c = 0.75, 0.6, 4.0
    grid_c = TimeGrid.dyadic(5, horizon=c)
    grid_1 = TimeGrid.dyadic(5, horizon=1.0)
    ends_c = integrate(sample_fbm(h_true, grid_c, 2, seed=55, paths=4000), basis)
    ends_1 = integrate(sample_fbm(h_true, grid_1, 2, seed=56, paths=4000), basis)
    coords_c = basis.coordinates(log_unipotent(ends_c.endpoints))
    coords_1 = basis.coordinates(log_unipotent(ends_1.endpoints))
    layers = np.asarray(basis.layers)
    scaled = coords_1 * (c**h_wrong) ** layers
    rep_a = moment_report("dilated", coords_c, seed=57)
    rep_b = moment_report("dilated", scaled, seed=58)
    assert not compare_laws(rep_a, rep_b).passed

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from rslab import markov as mk
from rslab.errors import ConfigError, InvariantError, StructureError
from rslab.rng import path_generator, path_uniforms
from rslab.schedules import Schedule, alpha_at

TWO = np.array([[0.9, 0.1], [0.5, 0.5]])


def const_kernel(p, dim=1):
    p = np.asarray(p, dtype=np.float64)
    return mk.ParamKernel(p.shape[0], lambda w: p, dim)


def test_stationary_symmetric():
    assert np.allclose(mk.stationary_distribution(np.full((2, 2), 0.5)), [0.5, 0.5], atol=1e-15)


def test_stationary_two_state():
    assert np.allclose(mk.stationary_distribution(TWO), [5 / 6, 1 / 6], rtol=0, atol=1e-15)


def test_periodic_rejected():
    with pytest.raises(StructureError) as err:
        mk.stationary_distribution(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert err.value.check == "aperiodic"
    assert mk.chain_period(np.array([[0.0, 1.0], [1.0, 0.0]])) == 2


def test_reducible_rejected():
    with pytest.raises(StructureError) as err:
        mk.check_structure(np.array([[1.0, 0.0], [0.5, 0.5]]))
    assert err.value.check == "irreducible"


def test_kernel_row_validation():
    with pytest.raises(InvariantError):
        const_kernel([[0.5, 0.6], [0.5, 0.5]]).matrix(np.zeros(1))


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**32))
def test_stationary_balance_and_power_iteration(n, seed):
    p = path_generator(seed).dirichlet(np.ones(n), size=n)
    d = mk.stationary_distribution(p)
    assert np.abs(d @ p - d).sum() <= 1e-10
    v = np.full(n, 1.0 / n)
    for _ in range(10_000):
        v = v @ p
    assert 0.5 * np.abs(v - d).sum() <= 1e-8


def test_tv_profile_n0():
    d = np.array([5 / 6, 1 / 6])
    prof = mk.total_variation_profile(const_kernel(TWO), np.zeros(1), 5)
    assert prof[0] == pytest.approx(2 * (1 - d.min()), rel=1e-14)


def test_tv_profile_two_state_eigenvalue():
    prof = mk.total_variation_profile(const_kernel(TWO), np.zeros(1), 30)
    expected = prof[0] * 0.4 ** np.arange(31)
    expected[expected < mk.TV_FLOOR] = 0.0
    assert np.max(np.abs(prof - expected)) <= 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**32))
def test_tv_profile_non_increasing_and_dominated(n, seed):
    p = path_generator(seed).dirichlet(np.ones(n), size=n)
    prof = mk.total_variation_profile(const_kernel(p), np.zeros(1), 40)
    assert np.all(np.diff(prof) <= 1e-12)
    fit = mk.fit_mixing_profile(prof)
    assert np.all(prof <= fit.bound(np.arange(41)) * (1 + 1e-9))


def test_fit_exact_geometric():
    fit = mk.fit_mixing_profile(3.0 * 0.5 ** np.arange(30))
    assert fit.c_mix == pytest.approx(3.0, abs=1e-6)
    assert fit.tau_rate == pytest.approx(0.5, abs=1e-6)


def test_fit_instant_mixing():
    p = np.tile([0.2, 0.3, 0.5], (3, 1))
    prof = mk.total_variation_profile(const_kernel(p), np.zeros(1), 10)
    assert np.all(prof[1:] == 0)
    assert mk.fit_mixing_profile(prof).tau_rate == 0.0


def test_fit_all_zero():
    assert mk.fit_mixing_profile(np.zeros(5)) == mk.MixingProfile(1.0, 0.0)


def test_tau_alpha_example():
    assert mk.tau_alpha(mk.MixingProfile(1.0, 0.5), 0.1) == 4


def test_tau_alpha_already_mixed():
    assert mk.tau_alpha(mk.MixingProfile(1.0, 0.5), 1.0) == 0
    assert mk.tau_alpha(mk.MixingProfile(1.0, 0.5), 3.0) == 0


def test_tau_alpha_non_mixing():
    with pytest.raises(ConfigError):
        mk.tau_alpha(mk.MixingProfile(1.0, 1.0), 0.1)


@given(st.floats(0.1, 10.0), st.floats(0.01, 0.99), st.floats(1e-8, 5.0))
def test_tau_alpha_brute_force(c, tau, alpha):
    n = 0
    while c * tau**n > alpha:
        n += 1
    assert mk.tau_alpha(mk.MixingProfile(c, tau), alpha) == n


@pytest.mark.parametrize("sched", [Schedule.lr1(1.0, 0.8), Schedule.lr2(1.0, 0.5)])
def test_tau_alpha_logarithmic(sched):
    prof = mk.MixingProfile(5.0, 0.7)
    ratios = [mk.tau_alpha(prof, alpha_at(sched, t)) / np.log(t) for t in np.logspace(2, 6, 20).astype(int)]
    assert max(ratios) < 5.0 and min(ratios) > 0


def test_sample_step_point_mass():
    p = np.array([[0.0, 1.0, 0.0], [0.3, 0.3, 0.4], [0.5, 0.0, 0.5]])
    kern = const_kernel(p)
    rng = path_generator(1)
    assert all(mk.sample_step(kern, np.zeros(1), 0, rng) == 1 for _ in range(200))


def test_sample_step_reproducible():
    kern = const_kernel(np.full((4, 4), 0.25))
    a = [mk.sample_step(kern, np.zeros(1), 0, path_generator(9)) for _ in range(3)]
    assert len(set(a)) == 1


def test_inverse_cdf_skips_zero_mass():
    row = np.array([0.5, 0.5, 0.0])
    assert mk.inverse_cdf(row, 1.0 - 1e-17) == 1
    assert mk.inverse_cdf(np.array([0.0, 1.0]), 0.0) == 1


def test_sample_frequencies():
    kern = const_kernel(TWO)
    u = path_uniforms(4, 0, 20000)
    draws = np.array([mk.sample_step(kern, np.zeros(1), 0, float(x)) for x in u])
    assert abs(np.mean(draws == 1) - 0.1) < 0.01


def test_expected_update_constant_integrand():
    upd = mk.UpdateFn(2, lambda w, y: -w + 1.0, 1.0)
    w = np.array([0.3, -0.2])
    assert np.allclose(mk.expected_update(const_kernel(TWO, 2), upd, w), -w + 1.0)


def test_expected_update_indicator():
    upd = mk.UpdateFn(2, lambda w, y: np.eye(2)[y], 1.0)
    assert np.allclose(mk.expected_update(const_kernel(TWO, 2), upd, np.zeros(2)), [5 / 6, 1 / 6], atol=1e-14)


def test_lipschitz_ratio_constant_kernel():
    assert mk.kernel_lipschitz_ratio(const_kernel(TWO), [0.0], [1.0]) == 0.0
    with pytest.raises(ValueError):
        mk.kernel_lipschitz_ratio(const_kernel(TWO), [1.0], [1.0])


def test_expected_update_lipschitz_on_probes():
    p0 = np.array([[0.7, 0.3], [0.4, 0.6]])
    p1 = np.array([[0.2, 0.8], [0.5, 0.5]])
    kern = mk.ParamKernel(2, lambda w: p0 + (p1 - p0) / (1 + np.exp(-w[0])), 1)
    upd = mk.UpdateFn(1, lambda w, y: np.array([-w[0] + (1.0 if y else -1.0)]), 1.0)
    grid = np.linspace(-5, 5, 41)
    h = np.array([mk.expected_update(kern, upd, np.array([x]))[0] for x in grid])
    assert np.max(np.abs(np.diff(h)) / np.diff(grid)) < 5.0


def test_auxiliary_equals_base_when_tau_zero():
    kern = const_kernel(TWO)
    u = path_uniforms(3, 0, 100)
    base = mk.simulate_chain(kern, np.zeros((101, 1)), 0, u)
    aux = mk.simulate_auxiliary(kern, base, 50, 0, 50)
    assert np.array_equal(aux, base.states)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32), st.integers(0, 40), st.integers(1, 40))
def test_auxiliary_coupling_identical_matrices(seed, tau, steps):
    p = path_generator(seed).dirichlet(np.ones(4), size=4)
    kern = mk.ParamKernel(4, lambda w: p, 1)
    u = path_uniforms(seed, 1, 100)
    base = mk.simulate_chain(kern, path_generator(seed, 2).normal(size=(101, 1)), 0, u)
    t = 50
    aux = mk.simulate_auxiliary(kern, base, t, tau, steps)
    assert np.array_equal(aux, base.states[: t - tau + steps + 1])


def test_auxiliary_rejects_tau_beyond_t():
    kern = const_kernel(TWO)
    base = mk.simulate_chain(kern, np.zeros((11, 1)), 0, path_uniforms(0, 0, 10))
    with pytest.raises(ValueError):
        mk.simulate_auxiliary(kern, base, 3, 4, 1)


def test_drift_contraction():
    rep = mk.drift_scan(None, lambda w: -w, [1.0, 2.0, 5.0], 16, dim=3)
    assert rep.feasible
    assert rep.c1_hat == pytest.approx(1.0, abs=1e-9)
    assert rep.c2_hat == pytest.approx(0.0, abs=1e-9)


def test_drift_affine_contraction():
    b = np.array([1.0, -2.0])
    rep = mk.drift_scan(None, lambda w: -w + b, [0.5, 1.0, 2.0, 4.0, 8.0], 24, dim=2)
    assert rep.feasible and rep.c1_hat > 0 and not rep.violations
    # Young's inequality certificate: C1 = 1/2, C2 = ||b||^2 / 2 is feasible, so the fit is no worse
    assert rep.c2_hat <= 0.5 * b @ b + 1e-9


def test_drift_expansive():
    rep = mk.drift_scan(None, lambda w: w, [1.0, 2.0], 8, dim=2)
    assert not rep.feasible and rep.c1_hat == 0.0 and rep.violations


def test_drift_through_kernel():
    upd = mk.UpdateFn(1, lambda w, y: -w + (1.0 if y else -1.0), 1.0)
    rep = mk.drift_scan(const_kernel(TWO), upd, [1.0, 3.0, 10.0], 2)
    assert rep.feasible


def test_sphere_points_unit_and_deterministic():
    a, b = mk.sphere_points(3, 10), mk.sphere_points(3, 10)
    assert np.array_equal(a, b)
    assert np.allclose(np.linalg.norm(a, axis=1), 1.0)


def test_load_kernel_table(tmp_path):
    f = tmp_path / "k.txt"
    f.write_text("2 1\n0.5 0.5\n0.5 0.5\n0.9 0.1\n0.2 0.8\n-1 1\n-1 0.5\n")
    kern, upd = mk.load_kernel_table(f)
    assert np.allclose(kern.matrix(np.zeros(1)), [[0.7, 0.3], [0.35, 0.65]])
    assert np.allclose(upd(np.array([2.0]), 1), [-1.5])


def test_load_kernel_table_rejects_bad_rows(tmp_path):
    f = tmp_path / "k.txt"
    f.write_text("2 0\n0.5 0.6\n0.5 0.5\n")
    with pytest.raises(ConfigError) as err:
        mk.load_kernel_table(f)
    assert err.value.field == "matrices[0]"


@given(hnp.arrays(np.float64, 5, elements=st.floats(0, 1)), st.floats(0, 1, exclude_max=True))
def test_inverse_cdf_lands_on_positive_mass(raw, u):
    if raw.sum() == 0:
        return
    row = raw / raw.sum()
    k = mk.inverse_cdf(row, u)
    assert row[k] > 0

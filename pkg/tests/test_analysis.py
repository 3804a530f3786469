import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from rslab import analysis as an
from rslab import markov as mk
from rslab import processes as pr
from rslab import rl
from rslab.errors import CalibrationError, CapabilityError, InsufficientDataError
from rslab.io import read_csv
from rslab.rng import path_generator
from rslab.schedules import Schedule, build_skeleton, select_regime

finite = st.floats(-1e6, 1e6)


def test_interval_distance():
    assert an.dist_to_interval(5.0, 3.0) == 2.0
    assert an.dist_to_interval(2.0, 3.0) == 0.0
    assert np.array_equal(an.dist_to_interval(np.array([0.0, 4.5]), 3.0), [0.0, 1.5])


def test_ball_distance():
    assert an.dist_to_ball(np.array([0.3, 0.4]), 1.0) == 0.0
    assert an.dist_to_ball(3 * np.array([0.6, 0.8]), 1.0) == pytest.approx(2.0)


@given(finite, finite, st.floats(0, 100))
def test_interval_distance_lipschitz(a, b, hi):
    assert abs(an.dist_to_interval(a, hi) - an.dist_to_interval(b, hi)) <= abs(a - b) * (1 + 1e-12) + 1e-9


@given(hnp.arrays(np.float64, 3, elements=finite), hnp.arrays(np.float64, 3, elements=finite), st.floats(0, 100))
def test_ball_distance_lipschitz(a, b, r):
    gap = np.linalg.norm(a - b)
    assert abs(an.dist_to_ball(a, r) - an.dist_to_ball(b, r)) <= gap * (1 + 1e-12) + 1e-9


# --- rates -----------------------------------------------------------------------

def test_fit_rate_sqrt():
    n = np.arange(10_000, dtype=float)
    d = np.where(n > 0, np.maximum(n, 1) ** -0.5, 1.0)
    assert an.fit_rate(d).exponent == pytest.approx(0.5, abs=1e-6)


def test_fit_rate_constant():
    assert an.fit_rate(np.full(100, 0.3)).exponent == pytest.approx(0.0, abs=1e-6)


def test_fit_rate_intercept():
    n = np.arange(1, 5000, dtype=float)
    fit = an.fit_rate(3.0 / n, times=n)
    assert fit.exponent == pytest.approx(1.0, abs=1e-9)
    assert fit.intercept == pytest.approx(math.log(3.0), abs=1e-9)


def test_fit_rate_insufficient():
    with pytest.raises(InsufficientDataError):
        an.fit_rate(np.array([1.0, 0.0, 0.0, 0.5]), 1.0)


def test_fit_rate_skips_zeros():
    n = np.arange(1, 101, dtype=float)
    d = n ** -0.7
    d[::3] = 0.0
    fit = an.fit_rate(d, 1.0, times=n)
    assert fit.exponent == pytest.approx(0.7, abs=1e-9) and fit.zeros_excluded > 0


@given(st.floats(0.05, 2.0), st.floats(0.1, 10.0))
def test_fit_rate_planted_exponent(p, c):
    n = np.arange(1, 20_001, dtype=float)
    assert an.fit_rate(c * n**-p, times=n).exponent == pytest.approx(p, abs=1e-4)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.05, 2.0), st.integers(0, 2**32))
def test_fit_rate_noisy(p, seed):
    n = np.arange(1, 20_001, dtype=float)
    noise = 1 + 0.1 * path_generator(seed).uniform(-1, 1, len(n))
    assert an.fit_rate(n**-p * noise, times=n).exponent == pytest.approx(p, abs=0.05)


def test_certificate_zero():
    cert = an.rate_certificate(np.zeros(100), 0.5, 10, 0.0)
    assert cert.passed and cert.sup_tail == 0.0


def test_certificate_passes_on_rate():
    n = np.arange(10_000, dtype=float)
    d = 0.5 * np.maximum(n, 1) ** -0.25
    cert = an.rate_certificate(d, 0.5, 1, 1.0)
    assert cert.passed and cert.sup_tail == pytest.approx(0.5)


def test_certificate_fails_on_slow_decay():
    n = np.arange(10**6, dtype=float)
    d = np.maximum(n, 1) ** -0.125
    assert not an.rate_certificate(d, 0.5, 1, 1.0).passed


def test_rate_statistic_matches_certificate():
    d = path_generator(3).random((4, 500))
    stat = an.rate_statistic(d, 0.5, 50)
    for i in range(4):
        assert stat[i] == an.rate_certificate(d[i], 0.5, 50, 0.0).sup_tail


# --- envelopes -------------------------------------------------------------------

def test_rs_envelope_example():
    env = an.RSEnvelope(1.0, 1.0, 1.0, 1)
    assert an.envelope_eval(env, 0, math.exp(-1)) == pytest.approx(2.0, rel=1e-15)


def test_rs_envelope_k0():
    env = an.RSEnvelope(1.0, 3.0, 2.0, 0)
    n = np.arange(50)
    assert np.allclose(an.envelope_eval(env, n, 0.1), 3.0 / (n + 2.0), rtol=1e-15)


@given(st.floats(0.5, 10), st.floats(0.1, 10), st.floats(0.5, 20), st.integers(0, 4), st.floats(0.01, 0.99))
def test_rs_envelope_identity(b, bp, n0, k, delta):
    env = an.RSEnvelope(b, bp, n0, k)
    n = np.arange(0, 1000, 37, dtype=float)
    x = n + n0
    val = an.envelope_eval(env, n, delta) * x / (math.log(b / delta) + 1 + np.log(x)) ** k
    assert np.allclose(val, bp, rtol=1e-12)


def test_envelope_rejects_delta():
    for delta in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            an.envelope_eval(an.RSEnvelope(1, 1, 1, 1), 0, delta)


def test_envelope_knee_monotone_after():
    for env in (an.RSEnvelope(1.0, 1.0, 1.0, 3), an.SAEnvelope(1.0, 0.0, 3, 0.5)):
        knee = an.envelope_knee(env, 0.5)
        vals = an.envelope_eval(env, np.arange(knee, knee + 5000), 0.5)
        assert np.all(np.diff(vals) <= 1e-15)


def test_coverage_trivial_bounds():
    d = path_generator(0).random((50, 100)) + 0.1
    assert an.envelope_coverage(d, an.RSEnvelope(1.0, 1e300, 1.0, 0), 0.1).coverage == 1.0
    cov = an.envelope_coverage(d, an.RSEnvelope(1.0, 0.0, 1.0, 0), 0.1)
    assert cov.coverage == 0.0 and cov.first_violation == (0, 0)


def test_calibration_deterministic_collapses():
    spec = pr.RSSpecialSpec(1.0, 1.0, pr.PowerSequence(2.0, 1.0, 4.0), 1.0)
    z = pr.iterate_rs_special_deterministic(spec, 5.0, 2000).values
    d = an.dist_to_interval(z, 1.0)
    env = an.calibrate_envelope(d[None, :], "rs", [0.1], k=1, n0=4.0)
    bound = an.envelope_eval(env, np.arange(len(d)), 0.1)
    assert np.all(d**2 <= bound * (1 + 1e-12))
    assert np.any(np.isclose(d**2, bound, rtol=1e-12))


def test_calibration_fails_on_divergent_ensemble():
    paths = np.array([pr.simulate_example1(20_000, 2, pid).values for pid in range(200)])
    with pytest.raises(CalibrationError):
        an.calibrate_envelope(an.dist_to_interval(paths, 1.0), "rs", [0.1], k=1)


def test_calibration_rejects_nonfinite():
    with pytest.raises(CalibrationError):
        an.calibrate_envelope(np.array([[0.1, np.inf]]), "rs", [0.1], k=1)


@pytest.fixture(scope="module")
def rs_split():
    spec = pr.RSSpecialSpec(1.0, 1.0, pr.PowerSequence(2.0, 1.0, 4.0), 1.5)
    noise = pr.NoiseModel(pr.BOUNDED_MULTIPLICATIVE, 0.5)

    def block(offset):
        z = [pr.simulate_rs_special(spec, noise, 0.0, 5000, 13, offset + i).values for i in range(1000)]
        return an.dist_to_interval(np.array(z), 1.0)

    return block(0), block(10**6)


@pytest.mark.parametrize("delta", [0.1, 0.05])
def test_holdout_coverage(rs_split, delta):
    train, hold = rs_split
    env = an.calibrate_envelope(train, "rs", [delta], k=1, n0=4.0)
    cov = an.envelope_coverage(hold, env, delta)
    assert cov.passed, cov


def test_sa_calibration_and_coverage():
    rng = path_generator(5)
    n = np.arange(3000)
    shape = an.envelope_eval(an.SAEnvelope(1.0, 1.0, 1, 0.5), n, 0.1)
    paths = shape * rng.uniform(0, 1, (400, 1)) * rng.uniform(0.5, 1, (400, len(n)))
    env = an.calibrate_envelope(paths[:200], "sa", [0.1], k=1, nu=0.5)
    assert an.envelope_coverage(paths[200:], env, 0.1).passed


def test_moments():
    assert np.all(an.lp_moment_series(np.zeros((3, 4)), 1) == 0)
    d = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.allclose(an.lp_moment_series(d, 2), [5.0, 10.0])


def test_ensemble_stats_csv(tmp_path):
    v = path_generator(1).random((20, 30))
    stats = an.EnsembleStats.from_paths(v, record_every=3)
    cols = read_csv(stats.to_csv(tmp_path / "s.csv"))
    assert np.array_equal(cols["n"], np.arange(0, 30, 3))
    assert np.array_equal(cols["mean"], v[:, ::3].mean(axis=0))
    assert np.array_equal(cols["q0.5"], np.quantile(v[:, ::3], 0.5, axis=0))


def test_increment_check():
    z = np.array([1.0, 1.5, 1.2])
    T = np.array([0.5, 0.5])
    rep = an.skeleton_increment_check(z, T, 0, 1.0)
    assert rep.worst_ratio == pytest.approx(0.5 / (0.5 * 2.0)) and rep.ok


# --- noise decomposition -----------------------------------------------------------

CFG = rl.PolicyConfig(0.1, 1.0)
LR08 = Schedule.lr1(1.0, 0.8)


@pytest.fixture(scope="module")
def small_run():
    mdp, feats = rl.builtin_mdp("small3x2")
    emb = rl.mdp_to_sa(mdp, feats, CFG)
    H = 4000
    skel = build_skeleton(LR08, select_regime("LR1", 0.8), H)
    prof = mk.uniform_mixing_profile(emb.kernel, [np.zeros(2), np.ones(2)], 40)
    sa = rl.run_sa(emb.kernel, emb.update, LR08, H, 0, emb.anchor(0))
    return emb, skel, prof, sa


def test_decomposition_telescopes(small_run):
    emb, skel, prof, sa = small_run
    nd = an.noise_decomposition(sa.w_trajectory, sa.states, LR08, skel, emb.kernel, emb.update, prof)
    assert nd.telescoping_error <= 1e-10
    assert np.allclose(nd.total, nd.segment_update, atol=1e-10)


def test_decomposition_constant_w_has_no_drift_term(small_run):
    emb, skel, prof, sa = small_run
    ws = np.tile(np.array([0.3, -0.2]), (len(sa.w_trajectory), 1))
    nd = an.noise_decomposition(ws, sa.states, LR08, skel, emb.kernel, emb.update, prof)
    assert np.all(nd.s[0] == 0.0)


def test_decomposition_static_kernel_has_no_kernel_term(small_run):
    emb, skel, prof, _ = small_run
    frozen = emb.kernel.matrix(np.zeros(2))
    const = mk.ParamKernel(emb.kernel.state_count, lambda w: frozen, 2)
    sa = rl.run_sa(const, emb.update, LR08, 4000, 1, emb.anchor(0))
    nd = an.noise_decomposition(sa.w_trajectory, sa.states, LR08, skel, const, emb.update, prof)
    assert np.all(nd.s[1] == 0.0)
    assert nd.telescoping_error <= 1e-10


def test_decomposition_csv(small_run, tmp_path):
    emb, skel, prof, sa = small_run
    nd = an.noise_decomposition(sa.w_trajectory, sa.states, LR08, skel, emb.kernel, emb.update, prof)
    cols = read_csv(nd.to_csv(tmp_path / "nd.csv"))
    assert np.array_equal(cols["s3"], np.linalg.norm(nd.s[2], axis=1))


def test_decomposition_capability_limit(small_run):
    emb, skel, prof, sa = small_run
    with pytest.raises(CapabilityError):
        an.noise_decomposition(sa.w_trajectory, sa.states, LR08, skel, emb.kernel, emb.update, prof,
                               max_states=10)

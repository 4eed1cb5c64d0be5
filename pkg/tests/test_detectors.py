import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as sps

from conftest import simulate_many
from mlab import geometry as g
from mlab.detectors import (AngularTolerances, EnsembleStats, SphericalCap, Verdict, clopper_pearson,
                            drift_sign_check, exit_distribution, exit_grid_nonconstant, geodesic_distance,
                            hitting_time_bound_check, regime_bound, return_probability_check,
                            shrinking_exit_check, spherical_diameter, summarize, t_interval,
                            theta_convergence_classify, transience_verdict)
from mlab.errors import ConfigError, LogicError
from mlab.paths import Functional, PathConfig
from mlab.policies import radial_policy, sphere_policy


def ensemble(records, levels=(), pairs=(), functionals=(), **kw):
    return EnsembleStats.from_records(records, levels, pairs, functionals=functionals, **kw)


# --- interval primitives ------------------------------------------------------

@settings(max_examples=80, deadline=None)
@given(n=st.integers(1, 5000), frac=st.floats(0, 1), conf=st.sampled_from([0.9, 0.95, 0.99]))
def test_clopper_pearson_matches_scipy(n, frac, conf):
    x = int(round(frac * n))
    lo, hi = clopper_pearson(x, n, conf)
    ref = sps.binomtest(x, n).proportion_ci(confidence_level=conf, method="exact")
    assert lo == pytest.approx(ref.low, abs=1e-9)
    assert hi == pytest.approx(ref.high, abs=1e-9)
    assert lo <= x / n <= hi


def test_t_interval():
    x = np.array([1.0, 2.0, 4.0, 7.0])
    mean, se, (lo, hi) = t_interval(x, 0.95)
    q = sps.t.ppf(0.975, 3)
    assert mean == 3.5 and se == pytest.approx(x.std(ddof=1) / 2)
    assert (lo, hi) == pytest.approx((3.5 - q * se, 3.5 + q * se))


def test_geodesic_distance_and_diameter():
    e1, e2 = np.eye(3)[0], np.eye(3)[1]
    assert geodesic_distance(e1, e2) == pytest.approx(math.pi / 2)
    assert geodesic_distance(e1, -e1) == pytest.approx(math.pi)
    small = np.array([math.cos(1e-9), math.sin(1e-9), 0.0])
    assert geodesic_distance(e1, small) == pytest.approx(1e-9, rel=1e-6)
    assert spherical_diameter(np.array([e1, e2, -e1])) == pytest.approx(math.pi)
    assert spherical_diameter(e1[None]) == 0.0


def test_regime_bounds():
    assert regime_bound("n_ge_3", 1.0, 10.0) == 0.1
    assert regime_bound("n2_log", math.e ** 3, math.e ** 9, 0.25) == pytest.approx((1 / 3) ** 1.25)
    assert regime_bound("n2_log", math.e ** 3, math.e ** 9, 0.25) == pytest.approx(0.2533, abs=1e-4)
    assert regime_bound("n2_log_corrected", math.e ** 3, math.e ** 9, 0.25) == pytest.approx((1 / 3) ** 0.25)
    with pytest.raises(ConfigError):
        regime_bound("n2_log", 3.0, 9.0)
    with pytest.raises(ConfigError):
        regime_bound("fancy", 1.0, 2.0)


def test_verdict_kind_is_checked():
    with pytest.raises(ValueError):
        Verdict("x", "maybe", True)


# --- hitting times and returns ------------------------------------------------

def test_sphere_policy_exit_time_is_deterministic(flat):
    cfg = PathConfig(r0=1.0, r_out=5.0, t_max=1e3, levels=(5.0,))
    recs = simulate_many(cfg, flat, sphere_policy(3, 4), 20)
    times = np.array([r.hitting_times[5.0] for r in recs])
    assert np.ptp(times) == 0.0
    # dr/dt = 3/(2r) gives sigma_C = (C^2 - r0^2)/3 = 8; Euler on the ODE is accurate to O(dt)
    assert times[0] == pytest.approx(8.0, rel=2e-3)
    v = hitting_time_bound_check(ensemble(recs, levels=(5.0,)), 3, 1.0, 5.0, min_paths=10)
    assert v.kind == "bound_holds"


def test_hyperbolic_mean_exit_is_strictly_below_flat_bound(hyp):
    cfg = PathConfig(r0=1.0, r_out=5.0, t_max=1e4, levels=(5.0,))
    st_ = ensemble(simulate_many(cfg, hyp, radial_policy(2, 3), 1000), levels=(5.0,))
    # log r is driftless for n = 2, so about 1.6/355 of the paths dive below r = 1e-154, where 1/G^2
    # overflows; they stop as step failures and count as censored
    v = hitting_time_bound_check(st_, 2, 1.0, 5.0, min_paths=950)
    assert v.kind == "bound_holds" and v.passed
    assert v.diagnostics["ci"][1] < 12.0


def test_hitting_check_needs_enough_paths(flat):
    cfg = PathConfig(r0=1.0, r_out=5.0, t_max=1e3, levels=(5.0,))
    st_ = ensemble(simulate_many(cfg, flat, radial_policy(3, 4), 20), levels=(5.0,))
    assert hitting_time_bound_check(st_, 3, 1.0, 5.0).kind == "inconclusive"
    with pytest.raises(ConfigError):
        hitting_time_bound_check(st_, 3, 1.0, 4.0)


def test_bessel3_returns_and_transience(flat):
    cfg = PathConfig(r0=1.0, r_out=60.0, t_max=1e6, dt_max=1e9, pairs=((1.0, 5.0), (1.0, 10.0), (1.0, 20.0)))
    recs = simulate_many(cfg, flat, radial_policy(3, 4), 1500, seed=3)
    st_ = ensemble(recs, pairs=cfg.pairs)
    # the scale function of Bessel(3) is -1/r, so the return chance before R_out is (1/k - 1/R)/(1 - 1/R)
    for k in (5.0, 10.0, 20.0):
        v = return_probability_check(st_, "n_ge_3", 1.0, k)
        d = v.diagnostics
        exact = (1 / k - 1 / 60) / (1 - 1 / 60)
        assert d["ci_lo"] <= exact <= d["ci_hi"]
        assert v.passed
    tv = transience_verdict(st_, "n_ge_3", 1.0, [5.0, 10.0, 20.0])
    assert tv.kind == "transient" and tv.passed
    with pytest.raises(ConfigError):
        return_probability_check(st_, "n_ge_3", 5.0, 1.0)
    with pytest.raises(ConfigError):
        transience_verdict(st_, "n_ge_3", 1.0, [5.0, 10.0])


def test_tail_completion_of_return_fraction(flat):
    cfg = PathConfig(r0=1.0, r_out=20.0, t_max=1e6, dt_max=1e9, pairs=((1.0, 10.0),))
    st_ = ensemble(simulate_many(cfg, flat, radial_policy(3, 4), 600, seed=5), pairs=cfg.pairs)
    h = 1.0 / 20.0
    row = st_.return_table({1.0: h})[0]
    assert row["fraction"] == pytest.approx(row["before_barrier"] + row["escaped"] * h / row["armed"])
    # completed fraction estimates the ever-return probability a/k = 0.1
    assert row["ci_lo"] <= 0.1 <= row["ci_hi"]


def test_return_check_flags_violation():
    """A recurrent planar walk returns far more often than the n >= 3 bound allows."""
    flat = g.solve_jacobi(g.euclidean(), 1e6)
    cfg = PathConfig(r0=1.0, r_out=40.0, t_max=1e6, pairs=((1.0, 4.0),), dt_max=1e9, max_steps=10 ** 5)
    st_ = ensemble(simulate_many(cfg, flat, radial_policy(2, 3), 200), pairs=cfg.pairs)
    v = return_probability_check(st_, "n_ge_3", 1.0, 4.0)
    assert v.kind == "bound_violated" and not v.passed


def test_censoring_makes_verdicts_inconclusive(flat):
    cfg = PathConfig(r0=1.0, r_out=50.0, t_max=5.0, levels=(5.0,))
    st_ = ensemble(simulate_many(cfg, flat, radial_policy(3, 4), 200), levels=(5.0,))
    assert st_.censored_fraction > 0.2
    v = hitting_time_bound_check(st_, 3, 1.0, 5.0, min_paths=10)
    assert v.kind == "inconclusive" and v.censored_fraction == st_.censored_fraction
    assert theta_convergence_classify(st_).kind == "inconclusive"


# --- angular detectors --------------------------------------------------------

def test_sphere_policy_z_is_closed_form(hyp):
    """With cos(phi) = 0 and n = 2 on hyperbolic space dr/dt = coth r, so dZ = dr / (sinh r cosh r)."""
    cfg = PathConfig(r0=1.0, r_out=10.0, t_max=1e3, theta0=(0.0, 0.0, 1.0))
    rec = simulate_many(cfg, hyp, sphere_policy(2, 3), 1)[0]
    exact = math.log(math.tanh(rec.final_state.r)) - math.log(math.tanh(1.0))
    assert rec.final_state.z_accum == pytest.approx(exact, rel=1e-3)


def test_sphere_policy_exit_concentration_improves(hyp):
    st_list, r0s = [], (0.5, 1.0, 2.0)
    for r0 in r0s:
        cfg = PathConfig(r0=r0, r_out=10.0, t_max=1e3, theta0=(0.0, 0.0, 1.0))
        st_list.append(ensemble(simulate_many(cfg, hyp, sphere_policy(2, 3), 300, seed=9)))
    v = shrinking_exit_check(st_list, r0s, 0.3)
    fr = [row["fraction"] for row in v.diagnostics["rows"]]
    assert fr[0] < fr[1] < fr[2]
    assert v.passed
    assert shrinking_exit_check(st_list[:1], r0s[:1], math.pi).passed


@pytest.fixture(scope="module")
def flat_wandering(flat):
    """Flat n = 2 ensemble; the step budget censors the paths that dive toward the pole."""
    div = PathConfig(r0=1.0, r_out=20.0, t_max=1e300, dt_max=1e300, max_steps=2 * 10 ** 5)
    return ensemble(simulate_many(div, flat, radial_policy(2, 3), 100))


def test_theta_classification_on_contrasting_cases(hyp, flat_wandering):
    conv = PathConfig(r0=10.0, r_out=60.0, t_max=1e4)
    st_c = ensemble(simulate_many(conv, hyp, radial_policy(2, 3), 200))
    assert theta_convergence_classify(st_c, 10.0).kind == "theta_converges"
    assert theta_convergence_classify(flat_wandering, 10.0, AngularTolerances(6e-3, 0.15, 0.15, 1.5e-2)).kind \
        == "theta_diverges"


def test_theta_classification_needs_tail_samples(flat):
    cfg = PathConfig(r0=1.0, r_out=1.5, t_max=1e3, sample_t0=10.0)
    st_ = ensemble(simulate_many(cfg, flat, radial_policy(2, 3), 50))
    v = theta_convergence_classify(st_, 2.0)
    assert v.kind == "inconclusive" and "tail samples" in v.diagnostics["reason"]


def test_exit_distribution_whole_sphere_and_logic_guard(hyp, flat_wandering):
    cfg = PathConfig(r0=5.0, r_out=40.0, t_max=1e4)
    st_ = ensemble(simulate_many(cfg, hyp, radial_policy(2, 3), 100))
    whole = exit_distribution(st_, SphericalCap((1.0, 0.0, 0.0), math.pi))
    assert whole.diagnostics["estimate"] == 1.0
    none = exit_distribution(st_, SphericalCap((1.0, 0.0, 0.0), math.pi, complement=True))
    assert none.diagnostics["estimate"] == 0.0
    st_d = flat_wandering
    tol = AngularTolerances(6e-3, 0.15, 0.15, 1.5e-2)
    with pytest.raises(LogicError):
        exit_distribution(st_d, SphericalCap((1.0, 0.0, 0.0), math.pi / 2), 10.0, tol)
    with pytest.raises(LogicError):
        shrinking_exit_check([st_d], [1.0], 0.2, window=10.0, tolerances=tol)


def test_exit_grid_separation():
    def v(lo, hi):
        return Verdict("exit_distribution", "estimate", True, diagnostics={"ci_lo": lo, "ci_hi": hi})
    assert exit_grid_nonconstant([v(0.1, 0.2), v(0.4, 0.5), v(0.8, 0.9)])["all_separated"]
    assert not exit_grid_nonconstant([v(0.1, 0.45), v(0.4, 0.5)])["all_separated"]


# --- drift signs --------------------------------------------------------------

def test_inv_r_is_a_supermartingale_in_three_dimensions(flat):
    f = Functional("inv_r", lo=2.0, hi=50.0)
    cfg = PathConfig(r0=1.0, r_out=60.0, t_max=1e5, functionals=(f,))
    st_ = ensemble(simulate_many(cfg, flat, radial_policy(3, 4), 300), functionals=(f,))
    v = drift_sign_check(st_, "inv_r")
    # 1/r is harmonic in R^3, so the radial drift (3 cos^2 phi - n)/(2 r^3) vanishes for cos phi = 1
    assert v.passed and abs(v.diagnostics["z_score"]) < 4
    # a tangential plane (cos phi = 0) makes the drift strictly negative
    st_s = ensemble(simulate_many(cfg, flat, sphere_policy(3, 4), 20), functionals=(f,))
    vs = drift_sign_check(st_s, "inv_r")
    assert vs.passed and vs.diagnostics["z_score"] < -3


def test_drift_sign_region_never_visited(flat):
    f = Functional("inv_r", lo=100.0, hi=200.0)
    cfg = PathConfig(r0=1.0, r_out=5.0, t_max=1e4, functionals=(f,))
    st_ = ensemble(simulate_many(cfg, flat, radial_policy(3, 4), 20), functionals=(f,))
    assert drift_sign_check(st_, f).kind == "inconclusive"
    with pytest.raises(ConfigError):
        drift_sign_check(st_, "logloglog")


# --- reduction ----------------------------------------------------------------

def test_merge_is_order_independent(flat):
    cfg = PathConfig(r0=1.0, r_out=10.0, t_max=1e4, levels=(5.0,), pairs=((1.0, 5.0),))
    recs = simulate_many(cfg, flat, radial_policy(3, 4), 60)
    a = ensemble(recs[:25], levels=(5.0,), pairs=cfg.pairs)
    b = ensemble(recs[25:40], levels=(5.0,), pairs=cfg.pairs)
    c = ensemble(recs[40:], levels=(5.0,), pairs=cfg.pairs)
    whole = ensemble(recs, levels=(5.0,), pairs=cfg.pairs)
    for merged in (a.merge(b).merge(c), c.merge(a.merge(b)), b.merge(c).merge(a)):
        assert merged.level_table() == whole.level_table()
        assert merged.return_table() == whole.return_table()
        assert [s.index for s in merged.summaries] == list(range(60))
    other = ensemble(recs[:5], levels=(6.0,), pairs=cfg.pairs)
    with pytest.raises(ConfigError):
        a.merge(other)


def test_summary_keeps_tail_window(flat):
    cfg = PathConfig(r0=1.0, r_out=40.0, t_max=1e4)
    rec = simulate_many(cfg, flat, radial_policy(3, 4), 1)[0]
    s = summarize(rec, (), tail_span=10.0)
    T = rec.final_state.t
    assert s.tail[-1, 0] == T
    assert s.tail[1, 0] >= T / 10 > s.tail[0, 0]

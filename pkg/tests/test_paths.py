import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as sps

from conftest import mean_se, simulate_many
from mlab import geometry as g
from mlab.errors import ConfigError, StepFailure
from mlab.paths import (Functional, MartingaleState, PathConfig, dump_path_csv, make_stream,
                        simulate_path, step)
from mlab.policies import radial_policy, random_rotation_policy, sphere_policy


def bessel_exit_oracle(n, r0, C, n_paths, dt=2e-4, seed=7):
    """Standalone vectorised Euler run of dr = dW + (n-1)/(2r) dt until r >= C."""
    rng = np.random.default_rng(seed)
    r = np.full(n_paths, float(r0))
    t = np.zeros(n_paths)
    alive = np.ones(n_paths, dtype=bool)
    sq = math.sqrt(dt)
    while alive.any():
        k = alive.sum()
        r[alive] = np.abs(r[alive] + sq * rng.standard_normal(k) + (n - 1) / (2 * r[alive]) * dt)
        t[alive] += dt
        alive &= r < C
    return t


# --- random streams -----------------------------------------------------------

def test_same_stream_gives_identical_record(flat):
    cfg = PathConfig(r0=1.0, r_out=5.0, t_max=1e3, levels=(2.0, 3.0), pairs=((1.5, 3.0),))
    pol = radial_policy(3, 4)
    a = simulate_path(cfg, flat, pol, make_stream(42, 0))
    b = simulate_path(cfg, flat, pol, make_stream(42, 0))
    assert a.digest() == b.digest()
    assert a.samples.tobytes() == b.samples.tobytes()
    assert simulate_path(cfg, flat, pol, make_stream(42, 1)).digest() != a.digest()


def test_neighbouring_streams_look_independent():
    x = make_stream(42, 0).generator.standard_normal(10_000)
    y = make_stream(42, 1).generator.standard_normal(10_000)
    assert sps.ks_2samp(x, y).pvalue > 0.01
    assert abs(np.corrcoef(x, y)[0, 1]) < 4 / math.sqrt(10_000)


def test_stream_identifiers_are_injective():
    ids = {make_stream(42, k).identifier for k in range(0, 10 ** 6, 997)}
    assert len(ids) == len(range(0, 10 ** 6, 997))
    # the encoding is a bijection, so checking all 10^6 reduces to arithmetic
    idx = np.arange(10 ** 6, dtype=np.uint64)
    assert np.unique(idx).size == 10 ** 6
    assert make_stream(1, 0).identifier != make_stream(0, 1).identifier


@given(seed=st.integers(0, 2 ** 64 - 1), index=st.integers(0, 2 ** 64 - 1))
def test_stream_identifier_decodes(seed, index):
    ident = make_stream(seed, index).identifier
    assert (ident >> 64, ident & (2 ** 64 - 1)) == (seed, index)


def test_stream_rejects_out_of_range_seeds():
    with pytest.raises(ConfigError):
        make_stream(-1, 0)
    with pytest.raises(ConfigError):
        make_stream(0, 2 ** 64)


# --- single steps -------------------------------------------------------------

def test_sphere_step_is_pure_drift(flat):
    pol = sphere_policy(2, 3)
    s0 = MartingaleState(0.0, 2.0, 0.0, np.array([1.0, 0.0, 0.0]))
    s1 = step(s0, flat, pol, 1e-3, np.random.default_rng(0))
    dt = s1.t
    # no diffusion in r, drift (n/2) G'/G = 1/r
    assert s1.r == pytest.approx(2.0 + dt * 1.0 / 2.0, rel=1e-14)
    assert s1.z_accum == pytest.approx(0.5 * dt * (1 / 4 + 1 / s1.r ** 2), rel=1e-14)
    assert dt <= 1e-3


def test_step_respects_dt_max_and_step_rule(flat):
    pol = radial_policy(3, 4)
    s0 = MartingaleState(0.0, 0.1, 1.0, np.array([1.0, 0, 0, 0]))
    s1 = step(s0, flat, pol, 1.0, np.random.default_rng(1))
    # r v = 1 for n = 3 flat, so dt = eta^2 r^2 / 2
    assert s1.t == pytest.approx(0.05 ** 2 * 0.01 / 2, rel=1e-12) or s1.t < 0.05 ** 2 * 0.01 / 2
    s2 = step(MartingaleState(0.0, 100.0, 1.0, np.array([1.0, 0, 0, 0])), flat, pol, 1e-2,
              np.random.default_rng(1))
    assert s2.t == 1e-2


@settings(max_examples=50, deadline=None)
@given(r=st.floats(1e-3, 1e3), seed=st.integers(0, 10 ** 6),
       th=st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda v: np.linalg.norm(v) > 0.1))
def test_step_invariants(flat, r, seed, th):
    theta = np.array(th) / np.linalg.norm(th)
    s0 = MartingaleState(0.0, r, 1.0, theta, z_accum=3.0)
    s1 = step(s0, flat, random_rotation_policy(3, 4, 1.0), 0.1, np.random.default_rng(seed))
    assert s1.r > 0
    assert abs(np.linalg.norm(s1.theta) - 1) <= 1e-12
    assert s1.z_accum >= s0.z_accum
    assert 0 <= s1.cos_phi <= 1


def test_step_errors(flat):
    with pytest.raises(ConfigError):
        step(MartingaleState(0.0, 0.0, 1.0, np.array([1.0, 0, 0])), flat, radial_policy(2, 3), 0.1,
             np.random.default_rng(0))


def test_pole_guard_budget_exhaustion_raises(flat):
    # without drift or the adaptive rule a huge dt proposes negative radii half of the time
    pol = radial_policy(2, 3)
    s0 = MartingaleState(0.0, 1e-6, 1.0, np.array([1.0, 0, 0]))
    fails = 0
    for seed in range(200):
        try:
            step(s0, flat, pol, 1e6, np.random.default_rng(seed), eta=0.0, max_retries=0, drift_scale=0.0)
        except StepFailure as exc:
            fails += 1
            assert exc.state is s0
    assert 60 < fails < 140


# --- path-level contracts -----------------------------------------------------

def test_hit_outer_contract(hyp):
    cfg = PathConfig(r0=1.0, r_out=5.0, t_max=1e4, levels=(2.0, 3.0, 4.0))
    for rec in simulate_many(cfg, hyp, radial_policy(2, 3), 50):
        assert rec.stop_reason == "hit_outer"
        assert 5.0 in rec.hitting_times
        times = [rec.hitting_times[x] for x in (2.0, 3.0, 4.0, 5.0)]
        assert times == sorted(times)
        # the crossing may be detected inside a step by the Brownian bridge test
        assert times[-1] <= rec.final_state.t
        assert rec.final_state.r > 4.5


def test_horizon_is_reported(flat):
    cfg = PathConfig(r0=1.0, r_out=1e6, t_max=0.5)
    rec = simulate_path(cfg, flat, radial_policy(3, 4), make_stream(3, 0))
    assert rec.stop_reason == "horizon"
    assert rec.final_state.t == 0.5
    assert rec.hitting_times == {}


def test_hit_inner_only_at_the_barrier(flat):
    cfg = PathConfig(r0=1.0, r_out=10.0, t_max=1e4, r_in=0.5)
    recs = simulate_many(cfg, flat, radial_policy(2, 3), 200)
    inner = [r for r in recs if r.stop_reason == "hit_inner"]
    assert inner
    for rec in inner:
        assert 0.5 in rec.hitting_times
        # the recorded path never went below the barrier by more than one step
        assert rec.samples[:-1, 1].min() > 0.5 * 0.9


def test_transient_hyperbolic_never_reaches_inner(hyp):
    cfg = PathConfig(r0=10.0, r_out=40.0, t_max=1e4, r_in=0.01)
    recs = simulate_many(cfg, hyp, radial_policy(2, 3), 500)
    assert sum(r.stop_reason == "hit_inner" for r in recs) == 0
    assert all(r.stop_reason == "hit_outer" for r in recs)


def test_recorded_path_invariants(hyp):
    cfg = PathConfig(r0=2.0, r_out=30.0, t_max=1e3, sample_t0=1e-2)
    for rec in simulate_many(cfg, hyp, random_rotation_policy(2, 3, 2.0), 20):
        t, z = rec.z_samples
        _, th = rec.theta_samples
        assert np.all(np.diff(t) > 0)
        assert np.all(np.diff(z) >= 0)
        assert np.all(rec.samples[:, 1] > 0)
        assert np.max(np.abs(np.linalg.norm(th, axis=1) - 1)) <= 1e-12
        # decimation is geometric in t
        assert len(t) < 3 + math.log(1e3 / 1e-2) / math.log(1.05)


def test_z_matches_trapezoid_of_stored_path():
    warp = g.solve_jacobi(g.log_family(1.5, 3.0), 1e4, 1e-9)
    cfg = PathConfig(r0=2.0, r_out=200.0, t_max=1e5, dense=True, max_steps=10 ** 6)
    rec = simulate_path(cfg, warp, radial_policy(2, 3), make_stream(5, 0))
    t, r, z = rec.samples[:, 0], rec.samples[:, 1], rec.samples[:, 3]
    G = warp(np.minimum(r, warp.r_max))[0]
    trap = np.concatenate([[0.0], np.cumsum(0.5 * np.diff(t) * (1 / G[1:] ** 2 + 1 / G[:-1] ** 2))])
    np.testing.assert_allclose(z[1:], trap[1:], rtol=1e-6)


def test_path_dump_csv(tmp_path, flat):
    cfg = PathConfig(r0=1.0, r_out=3.0, t_max=1e3)
    rec = simulate_path(cfg, flat, radial_policy(3, 4), make_stream(9, 4))
    name = dump_path_csv(rec, tmp_path)
    assert name.endswith("path_9_4.csv")
    lines = open(name).read().splitlines()
    assert lines[0] == "t,r,cos_phi,theta_1,theta_2,theta_3,theta_4,z"
    assert len(lines) == rec.samples.shape[0] + 1
    row = [float(v) for v in lines[-1].split(",")]
    assert row[1] == rec.final_state.r and row[-1] == rec.final_state.z_accum


def test_path_config_validation():
    with pytest.raises(ConfigError, match="strictly increasing"):
        PathConfig(r0=1.0, r_out=10.0, t_max=1.0, levels=(3.0, 2.0))
    with pytest.raises(ConfigError):
        PathConfig(r0=1.0, r_out=0.5, t_max=1.0)
    with pytest.raises(ConfigError):
        PathConfig(r0=1.0, r_out=10.0, t_max=1.0, pairs=((3.0, 2.0),))
    with pytest.raises(ConfigError):
        PathConfig(r0=1.0, r_out=10.0, t_max=math.inf)
    with pytest.raises(ConfigError):
        Functional("logloglog", lo=2.0)


# --- statistical properties ---------------------------------------------------

def test_bessel3_exit_time_against_independent_oracle(flat):
    cfg = PathConfig(r0=1.0, r_out=5.0, t_max=1e4)
    recs = simulate_many(cfg, flat, radial_policy(3, 4), 2000, seed=11)
    m, se = mean_se([r.hitting_times[5.0] for r in recs])
    assert abs(m - 8.0) < 3 * se
    ref = bessel_exit_oracle(3, 1.0, 5.0, 2000)
    m2, se2 = mean_se(ref)
    assert abs(m2 - 8.0) < 3 * se2 + 0.02
    assert abs(m - m2) < 3 * math.hypot(se, se2)


def test_zero_drift_control_is_a_martingale(flat):
    cfg = PathConfig(r0=10.0, r_out=1e6, t_max=1.0, dt_max=0.01, drift_scale=0.0)
    recs = simulate_many(cfg, flat, radial_policy(3, 4), 10_000, seed=3)
    m, se = mean_se([r.final_state.r - 10.0 for r in recs])
    assert abs(m) < 3 * se
    # with drift the mean moves by about (n-1)/(2r) T = 0.1
    cfg1 = PathConfig(r0=10.0, r_out=1e6, t_max=1.0, dt_max=0.01)
    m1, se1 = mean_se([r.final_state.r - 10.0 for r in simulate_many(cfg1, flat, radial_policy(3, 4), 10_000)])
    assert abs(m1 - 0.1) < 3 * se1
    assert m1 - m > 3 * math.hypot(se, se1)


def test_inner_hits_shrink_with_the_inner_barrier(flat):
    pol = radial_policy(2, 3)
    fractions = []
    for r_in in (1e-1, 1e-2, 1e-3):
        cfg = PathConfig(r0=1.0, r_out=1e3, t_max=1e9, r_in=r_in, dt_max=1e9)
        recs = simulate_many(cfg, flat, pol, 600, seed=21)
        p = np.mean([r.stop_reason == "hit_inner" for r in recs])
        # planar harmonic measure: log(R_out / r0) / log(R_out / r_in)
        exact = math.log(1e3) / math.log(1e3 / r_in)
        assert abs(p - exact) < 3 * math.sqrt(exact * (1 - exact) / 600)
        fractions.append(p)
    assert fractions[0] > fractions[1] > fractions[2]


def test_escape_within_generous_horizon(flat):
    n, R = 3, 100.0
    cfg = PathConfig(r0=1.0, r_out=R, t_max=10 * R * R / n, dt_max=1.0)
    recs = simulate_many(cfg, flat, radial_policy(n, n + 1), 400, seed=4)
    assert np.mean([r.stop_reason != "hit_outer" for r in recs]) < 0.01


def test_halving_dt_max_keeps_exit_time(flat):
    """Weak-order consistency: the change from halving dt_max is within Monte Carlo noise."""
    est = []
    for dt_max in (0.02, 0.01):
        cfg = PathConfig(r0=1.0, r_out=5.0, t_max=1e4, dt_max=dt_max)
        est.append(mean_se([r.hitting_times[5.0] for r in simulate_many(cfg, flat, radial_policy(3, 4),
                                                                      10_000, seed=17)]))
    (m1, s1), (m2, s2) = est
    assert abs(m1 - m2) < 3 * math.hypot(s1, s2)


def test_hyperbolic_radial_drift(hyp):
    T = 10.0
    cfg = PathConfig(r0=5.0, r_out=90.0, t_max=T, dt_max=0.01)
    recs = simulate_many(cfg, hyp, radial_policy(2, 3), 2000, seed=8)
    m, se = mean_se([(r.final_state.r - 5.0) / T for r in recs])
    # (1/2) coth(r) along the path: at least 1/2, at most (1/2) coth(r) near the smallest radii seen
    assert 0.5 - 3 * se < m < 0.5 / math.tanh(2.0) + 3 * se
    assert m == pytest.approx(0.5, abs=3 * se + 0.01)

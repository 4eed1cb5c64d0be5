"""Single-path integration of the polar SDE system of a rank-n martingale.

In polar coordinates around the pole, with the frame rotated so that only
``v_1`` has a radial part (``cos(phi)``), the martingale satisfies

    dr     = cos(phi) dW^1 + v dt,         v = (n - cos(phi)^2)/2 * G'/G
    dtheta = (sin(phi) e_1 dW^1 + sum_{i>=2} e_i dW^i) / G
             - cos(phi) sin(phi) G'/G^2 e_1 dt      (+ sphere curvature term)

The last drift is the Christoffel cross term between ``r`` and ``theta``; it
vanishes on average when the tangential directions are resampled
isotropically.  The sphere's own curvature term is produced by projecting the
tangent-plane step back onto the sphere.

All heavy lifting is in numba kernels that release the GIL so paths can run
on a thread pool.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import ConfigError, NumericalError, StepFailure
from .geometry import WarpFunction, warp_terms
from .policies import (CATENOID, H3_DISTRIBUTION, HELICOID, RANDOM_ROTATION, FramePolicy, h3_fields,
                       policy_frame, rotation_update, _canonical_from_polar)

HIT_OUTER = 0
HIT_INNER = 1
HORIZON = 2
STEP_FAILURE = 3
STOP_REASONS = ("hit_outer", "hit_inner", "horizon", "step_failure")

FAIL_NONE = 0
FAIL_POLE = 1
FAIL_NONFINITE = 2
FAIL_CHART = 3
FAIL_BUDGET = 4
FAILURE_DETAILS = ("", "pole_guard", "non_finite", "chart_overflow", "step_budget")

FUNCTIONALS = {"inv_r": 0, "inv_log_pow": 1, "neg_inv_log_pow": 2, "logloglog": 3}

# bridge crossing probabilities below exp(-_BRIDGE_CUT) ~ 1e-16 are treated as zero
_BRIDGE_CUT = 37.0


# ---------------------------------------------------------------------------
# random streams

@dataclass
class RngStream:
    """Counter-based stream keyed by ``(master_seed, path_index)``.

    The Philox key is the 128-bit integer ``master_seed * 2**64 + path_index``,
    so distinct pairs give distinct, independent streams.
    """

    master_seed: int
    path_index: int
    generator: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("master_seed", "path_index"):
            v = getattr(self, name)
            if not (0 <= int(v) < 2 ** 64):
                raise ConfigError(f"{name} must be an unsigned 64-bit integer")
        self.generator = np.random.Generator(np.random.Philox(key=self.identifier))

    @property
    def identifier(self) -> int:
        return (int(self.master_seed) << 64) | int(self.path_index)

    @property
    def counter(self) -> int:
        st = self.generator.bit_generator.state["state"]["counter"]
        return int(sum(int(w) << (64 * i) for i, w in enumerate(st)))


def make_stream(master_seed: int, path_index: int) -> RngStream:
    return RngStream(int(master_seed), int(path_index))


# ---------------------------------------------------------------------------
# state, configuration and records

@dataclass
class MartingaleState:
    t: float
    r: float
    cos_phi: float
    theta: np.ndarray
    z_accum: float = 0.0
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)


@dataclass(frozen=True)
class Functional:
    """Test function of ``r`` whose increments are tallied inside ``[lo, hi]``."""

    kind: str
    param: float = 0.0
    lo: float = 0.0
    hi: float = math.inf

    def __post_init__(self):
        if self.kind not in FUNCTIONALS:
            raise ConfigError(f"unknown functional {self.kind!r}")
        floor = {"inv_r": 0.0, "inv_log_pow": 1.0, "neg_inv_log_pow": 1.0, "logloglog": math.exp(math.e)}[self.kind]
        if self.lo < floor:
            raise ConfigError(f"{self.kind} needs region above r={floor:.6g}")
        if not self.hi > self.lo:
            raise ConfigError("functional region must be a nonempty interval")

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        return np.vectorize(lambda x: _fval(FUNCTIONALS[self.kind], self.param, x))(r)


@dataclass(frozen=True)
class PathConfig:
    r0: float
    r_out: float
    t_max: float
    dt_max: float = 0.01
    theta0: tuple[float, ...] | None = None
    r_in: float = 0.0
    eta: float = 0.05
    max_retries: int = 40
    max_steps: int = 10 ** 9
    levels: tuple[float, ...] = ()
    pairs: tuple[tuple[float, float], ...] = ()
    sample_t0: float = 1e-3
    sample_ratio: float = 1.05
    dense: bool = False
    drift_scale: float = 1.0
    cos0: float = 1.0
    functionals: tuple[Functional, ...] = ()

    def __post_init__(self):
        if not (self.r0 > 0 and self.r_out > self.r0):
            raise ConfigError("need 0 < r0 < r_out")
        if not (0 <= self.r_in < self.r0):
            raise ConfigError("need 0 <= r_in < r0")
        if not (self.t_max > 0 and math.isfinite(self.t_max)):
            raise ConfigError("t_max must be positive and finite")
        if not self.dt_max > 0:
            raise ConfigError("dt_max must be positive")
        lv = list(self.levels)
        if any(b <= a for a, b in zip(lv, lv[1:])):
            raise ConfigError("monitored radii must be strictly increasing")
        if lv and lv[0] <= self.r0:
            raise ConfigError("monitored radii must exceed r0")
        for a, k in self.pairs:
            if not a < k:
                raise ConfigError("return pairs need a < k")
        if not (0 <= self.cos0 <= 1):
            raise ConfigError("cos0 must lie in [0, 1]")
        if not (self.sample_t0 > 0 and self.sample_ratio > 1):
            raise ConfigError("sampling needs t0 > 0 and ratio > 1")

    def theta_start(self, m: int) -> np.ndarray:
        if self.theta0 is None:
            th = np.zeros(m)
            th[0] = 1.0
            return th
        th = np.asarray(self.theta0, dtype=float)
        if th.size != m:
            raise ConfigError(f"theta0 must have m={m} components")
        nrm = np.linalg.norm(th)
        if not nrm > 0:
            raise ConfigError("theta0 must be nonzero")
        return th / nrm

    def sample_capacity(self) -> int:
        if self.dense:
            return int(min(self.max_steps, 10 ** 8)) + 2
        return int(math.ceil(math.log(max(self.t_max / self.sample_t0, 1.0)) / math.log(self.sample_ratio))) + 3


@dataclass
class PathRecord:
    seed: int
    path_index: int
    stop_reason: str
    hitting_times: dict
    return_events: list
    pair_times: np.ndarray          # rows (a, k, time of first hit of k, first return to a after it)
    samples: np.ndarray             # rows (t, r, cos_phi, z, theta_1..theta_m)
    final_state: MartingaleState
    n_steps: int
    failure: str = ""
    functional_sums: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    ambient_sums: np.ndarray = field(default_factory=lambda: np.zeros((3, 2)))

    @property
    def theta_samples(self):
        return self.samples[:, 0], self.samples[:, 4:]

    @property
    def z_samples(self):
        return self.samples[:, 0], self.samples[:, 3]

    def digest(self) -> str:
        """sha256 over every field; equal digests mean byte-identical records."""
        h = hashlib.sha256()
        h.update(repr((self.seed, self.path_index, self.stop_reason, sorted(self.hitting_times.items()),
                       self.return_events, self.n_steps, self.failure)).encode())
        fs = self.final_state
        for arr in (self.pair_times, self.samples, self.functional_sums, self.ambient_sums,
                    np.array([fs.t, fs.r, fs.cos_phi, fs.z_accum]), fs.theta):
            h.update(np.ascontiguousarray(arr, dtype=float).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# jitted pieces

@numba.njit(cache=True, nogil=True, inline="always")
def _fval(code, p, r):
    if code == 0:
        return 1.0 / r
    L = math.log(r)
    if code == 1:
        return L ** (-p)
    if code == 2:
        return -(L ** (-p))
    return math.log(math.log(L))


@numba.njit(cache=True, nogil=True, inline="always")
def step_core(r, theta, c, E, n, wp, dt_max, dt_cap, eta, retries, drift_scale, rng, xi, theta_new):
    """One Euler-Maruyama step.  Returns ``(status, dt, r_new, dz)``."""
    m = theta.shape[0]
    invg, ld = warp_terms(wp, r)
    v = drift_scale * 0.5 * (n - c * c) * ld
    s = math.sqrt(max(0.0, 1.0 - c * c))
    dt = dt_max
    if eta > 0.0:
        dt = min(dt, eta * eta * r * r / (1.0 + (r * v) ** 2))
    dt = min(dt, dt_cap)
    ok = False
    r_new = r
    for _ in range(retries + 1):
        for i in range(n):
            xi[i] = rng.standard_normal()
        r_new = r + c * math.sqrt(dt) * xi[0] + v * dt
        if r_new > 0.0:
            ok = True
            break
        dt *= 0.5
    if not ok:
        return FAIL_POLE, dt, r, 0.0
    invg_new, _ = warp_terms(wp, min(r_new, wp[5]))
    sq = math.sqrt(dt)
    cross = ld * invg * c * s * dt
    nrm = 0.0
    for k in range(m):
        d = s * xi[0] * E[0, k]
        for i in range(1, n):
            d += xi[i] * E[i, k]
        y = theta[k] + invg * sq * d - cross * E[0, k]
        theta_new[k] = y
        nrm += y * y
    nrm = math.sqrt(nrm)
    for k in range(m):
        theta_new[k] /= nrm
    dz = 0.5 * dt * (invg * invg + invg_new * invg_new)
    if not (math.isfinite(r_new) and math.isfinite(dz) and math.isfinite(nrm) and nrm > 0.0):
        return FAIL_NONFINITE, dt, r_new, dz
    return FAIL_NONE, dt, r_new, dz


@numba.njit(cache=True, nogil=True, inline="always")
def _crossing(level, r0, r1, t0, dt, sig2dt, up):
    """First passage of the step ``r0 -> r1`` through ``level``.

    Returns ``(time, p)``.  Endpoint crossings give their linearly
    interpolated time and ``p = 1``.  Otherwise ``time`` is the step midpoint
    and ``p = exp(-2 d0 d1 / sig2dt)`` is the probability that the Brownian
    bridge between the endpoints touches the level (``p = 0``: no crossing).
    """
    if up:
        d0 = level - r0
        d1 = level - r1
    else:
        d0 = r0 - level
        d1 = r1 - level
    if d0 <= 0.0:
        return t0, 1.0
    if d1 <= 0.0:
        return t0 + dt * d0 / (d0 - d1), 1.0
    if sig2dt <= 0.0:
        return -1.0, 0.0
    q = 2.0 * d0 * d1 / sig2dt
    if q > _BRIDGE_CUT:
        return -1.0, 0.0
    return t0 + 0.5 * dt, math.exp(-q)


@numba.njit(cache=True, nogil=True, inline="always")
def _uniform(u, slot, rng):
    if u[slot] < 0.0:
        u[slot] = rng.random()
    return u[slot]


@numba.njit(cache=True, nogil=True, inline="always")
def _events(r0, r1, t0, dt, sig2, rng, r_in, r_out, marks, nl, npair, ev):
    """Update first-hitting and return bookkeeping for one step.

    ``marks`` holds the monitored radii, then the pair levels ``a`` and ``k``.
    ``ev`` holds the level hit times, pair arming times, pair return times,
    two uniforms, the barrier time and the index of the next level (see
    :func:`_event_buffers`).  Bridge crossings use one uniform per direction
    and step, shared by all levels, which keeps the events of nested levels
    consistent.  Returns HIT_OUTER, HIT_INNER or -1.
    """
    iu = nl + 2 * npair
    ev[iu] = -1.0
    ev[iu + 1] = -1.0
    s2dt = sig2 * dt
    while ev[iu + 3] < nl:
        j = int(ev[iu + 3])
        tc, p = _crossing(marks[j], r0, r1, t0, dt, s2dt, True)
        if p == 0.0 or (p < 1.0 and _uniform(ev, iu, rng) >= p):
            break
        ev[j] = tc
        ev[iu + 3] += 1.0
    for j in range(npair):
        if math.isnan(ev[nl + j]):
            tc, p = _crossing(marks[nl + npair + j], r0, r1, t0, dt, s2dt, True)
            if p == 1.0 or (p > 0.0 and _uniform(ev, iu, rng) < p):
                ev[nl + j] = tc
        elif math.isnan(ev[nl + npair + j]):
            tc, p = _crossing(marks[nl + j], r0, r1, t0, dt, s2dt, False)
            if p == 1.0 or (p > 0.0 and _uniform(ev, iu + 1, rng) < p):
                ev[nl + npair + j] = tc
    tc, p = _crossing(r_out, r0, r1, t0, dt, s2dt, True)
    if p == 1.0 or (p > 0.0 and _uniform(ev, iu, rng) < p):
        ev[iu + 2] = tc
        return HIT_OUTER
    if r_in > 0.0:
        tc, p = _crossing(r_in, r0, r1, t0, dt, s2dt, False)
        if p == 1.0 or (p > 0.0 and _uniform(ev, iu + 1, rng) < p):
            ev[iu + 2] = tc
            return HIT_INNER
    return -1


@numba.njit(cache=True, nogil=True)
def _event_buffers(nl, npair):
    ev = np.full(nl + 2 * npair + 4, np.nan)
    ev[nl + 2 * npair + 3] = 0.0
    return ev


@numba.njit(cache=True, nogil=True, inline="always")
def _record(buf, row, t, r, c, z, theta):
    buf[row, 0] = t
    buf[row, 1] = r
    buf[row, 2] = c
    buf[row, 3] = z
    for k in range(theta.shape[0]):
        buf[row, 4 + k] = theta[k]


@numba.njit(cache=True, nogil=True, inline="always")
def _tally(fcode, fparam, flo, fhi, r0, r1, dt, fsum):
    for j in range(fcode.shape[0]):
        if flo[j] <= r0 <= fhi[j]:
            inc = _fval(fcode[j], fparam[j], r1) - _fval(fcode[j], fparam[j], r0)
            fsum[j, 0] += inc
            fsum[j, 1] += inc * inc
            fsum[j, 2] += 1.0
            fsum[j, 3] += dt


@numba.njit(cache=True, nogil=True)
def _initial_cos(pcode, pparams, r, theta, c_state):
    if pcode == 0:
        return 1.0
    if pcode == 1:
        return 0.0
    if pcode == 2:
        return pparams[0]
    if pcode == H3_DISTRIBUTION:
        F = np.empty((2, 4))
        E = np.empty((2, 3))
        h3_fields(r, theta, pparams[0], F)
        return _canonical_from_polar(F, theta, E)
    return c_state


@numba.njit(cache=True, nogil=True)
def run_path_kernel(wp, pcode, pparams, n, r0, theta0, cos0,
                    r_in, r_out, t_max, dt_max, eta, retries, max_steps, drift_scale,
                    marks, nl, npair, sample_t0, sample_ratio, dense, cap,
                    fcode, fparam, flo, fhi, rng):
    m = theta0.shape[0]
    theta = theta0.copy()
    th_new = np.empty(m)
    E = np.empty((n, m))
    xi = np.empty(n)
    buf = np.empty((cap, 4 + m))
    ev = _event_buffers(nl, npair)
    fsum = np.zeros((fcode.shape[0], 4))

    t = 0.0
    r = r0
    z = 0.0
    c_state = cos0
    c = _initial_cos(pcode, pparams, r, theta, c_state)
    _record(buf, 0, t, r, c, z, theta)
    rows = 1
    next_sample = sample_t0
    stop = -1
    detail = FAIL_NONE
    steps = 0
    while True:
        if t >= t_max:
            stop = HORIZON
            break
        if steps >= max_steps:
            stop = HORIZON
            detail = FAIL_BUDGET
            break
        c = policy_frame(pcode, pparams, n, m, r, theta, c_state, rng, E)
        status, dt, r1, dz = step_core(r, theta, c, E, n, wp, dt_max, t_max - t, eta, retries,
                                       drift_scale, rng, xi, th_new)
        if status != FAIL_NONE:
            stop = STEP_FAILURE
            detail = status
            break
        if fcode.shape[0] > 0:
            _tally(fcode, fparam, flo, fhi, r, r1, dt, fsum)
        code = _events(r, r1, t, dt, c * c, rng, r_in, r_out, marks, nl, npair, ev)
        t += dt
        if t_max - t < 1e-12 * t_max:
            t = t_max
        z += dz
        r = r1
        for k in range(m):
            theta[k] = th_new[k]
        if pcode == RANDOM_ROTATION:
            c_state = rotation_update(c_state, pparams[0], dt, rng)
            c = c_state
        steps += 1
        if dense:
            if rows < cap:
                _record(buf, rows, t, r, c, z, theta)
                rows += 1
        elif t >= next_sample:
            if rows < cap - 1:
                _record(buf, rows, t, r, c, z, theta)
                rows += 1
            while next_sample <= t:
                next_sample *= sample_ratio
        if code >= 0:
            stop = code
            break
    if buf[rows - 1, 0] != t and rows < cap:
        _record(buf, rows, t, r, c, z, theta)
        rows += 1
    return stop, detail, steps, t, r, c, z, theta, ev, buf[:rows].copy(), fsum


@numba.njit(cache=True, nogil=True)
def _chart(chart, u, w, X, Xu, Xw):
    """Embedding and its coordinate derivatives; returns the conformal factor."""
    if chart == HELICOID:
        sh = math.sinh(w)
        ch = math.cosh(w)
        cu = math.cos(u)
        su = math.sin(u)
        X[0] = sh * cu
        X[1] = sh * su
        X[2] = u
        Xu[0] = -sh * su
        Xu[1] = sh * cu
        Xu[2] = 1.0
        Xw[0] = ch * cu
        Xw[1] = ch * su
        Xw[2] = 0.0
        return ch
    if chart == CATENOID:
        sh = math.sinh(w)
        ch = math.cosh(w)
        cu = math.cos(u)
        su = math.sin(u)
        X[0] = ch * cu
        X[1] = ch * su
        X[2] = w
        Xu[0] = -ch * su
        Xu[1] = ch * cu
        Xu[2] = 0.0
        Xw[0] = sh * cu
        Xw[1] = sh * su
        Xw[2] = 1.0
        return ch
    X[0] = math.cos(u)
    X[1] = math.sin(u)
    X[2] = w
    Xu[0] = -math.sin(u)
    Xu[1] = math.cos(u)
    Xu[2] = 0.0
    Xw[0] = 0.0
    Xw[1] = 0.0
    Xw[2] = 1.0
    return 1.0


@numba.njit(cache=True, nogil=True)
def _surface_polar(X, Xu, Xw, lam, theta):
    r = math.sqrt(X[0] * X[0] + X[1] * X[1] + X[2] * X[2])
    for k in range(3):
        theta[k] = X[k] / r
    a = (theta[0] * Xu[0] + theta[1] * Xu[1] + theta[2] * Xu[2]) / lam
    b = (theta[0] * Xw[0] + theta[1] * Xw[1] + theta[2] * Xw[2]) / lam
    return r, min(1.0, math.sqrt(a * a + b * b))


@numba.njit(cache=True, nogil=True)
def run_surface_kernel(chart, u0, w0, r_in, r_out, t_max, dt_max, eta, max_steps,
                       marks, nl, npair, sample_t0, sample_ratio, dense, cap,
                       fcode, fparam, flo, fhi, rng):
    """Intrinsic Brownian motion in an isothermal chart: ``d(u, w) = dB / lambda``.

    Ambient coordinates are harmonic on a minimal surface, so their one-step
    increments are tallied (sum and sum of squares) for the martingale test.
    """
    X = np.empty(3)
    Xu = np.empty(3)
    Xw = np.empty(3)
    X1 = np.empty(3)
    theta = np.empty(3)
    buf = np.empty((cap, 7))
    ev = _event_buffers(nl, npair)
    fsum = np.zeros((fcode.shape[0], 4))
    amb = np.zeros((3, 2))

    u = u0
    w = w0
    lam = _chart(chart, u, w, X, Xu, Xw)
    r, c = _surface_polar(X, Xu, Xw, lam, theta)
    t = 0.0
    z = 0.0
    _record(buf, 0, t, r, c, z, theta)
    rows = 1
    next_sample = sample_t0
    stop = -1
    detail = FAIL_NONE
    steps = 0
    while True:
        if t >= t_max:
            stop = HORIZON
            break
        if steps >= max_steps:
            stop = HORIZON
            detail = FAIL_BUDGET
            break
        dt = dt_max
        if eta > 0.0:
            # the radius is floored at the unit curvature scale of the charts: the helicoid
            # contains the origin, and r-proportional steps there make step counts heavy-tailed
            dt = min(dt, eta * eta * min(max(r * r, 1.0), lam * lam))
        dt = min(dt, t_max - t)
        sq = math.sqrt(dt) / lam
        u1 = u + sq * rng.standard_normal()
        w1 = w + sq * rng.standard_normal()
        if abs(w1) > 700.0:
            stop = STEP_FAILURE
            detail = FAIL_CHART
            break
        for k in range(3):
            X1[k] = X[k]
        lam1 = _chart(chart, u1, w1, X, Xu, Xw)
        for k in range(3):
            d = X[k] - X1[k]
            amb[k, 0] += d
            amb[k, 1] += d * d
        r1, c1 = _surface_polar(X, Xu, Xw, lam1, theta)
        if not (math.isfinite(r1) and r1 > 0.0):
            stop = STEP_FAILURE
            detail = FAIL_NONFINITE
            break
        z += 0.5 * dt * (1.0 / (r * r) + 1.0 / (r1 * r1))
        if fcode.shape[0] > 0:
            _tally(fcode, fparam, flo, fhi, r, r1, dt, fsum)
        code = _events(r, r1, t, dt, c * c, rng, r_in, r_out, marks, nl, npair, ev)
        t += dt
        if t_max - t < 1e-12 * t_max:
            t = t_max
        u = u1
        w = w1
        lam = lam1
        r = r1
        c = c1
        steps += 1
        if dense:
            if rows < cap:
                _record(buf, rows, t, r, c, z, theta)
                rows += 1
        elif t >= next_sample:
            if rows < cap - 1:
                _record(buf, rows, t, r, c, z, theta)
                rows += 1
            while next_sample <= t:
                next_sample *= sample_ratio
        if code >= 0:
            stop = code
            break
    if buf[rows - 1, 0] != t and rows < cap:
        _record(buf, rows, t, r, c, z, theta)
        rows += 1
    return stop, detail, steps, t, r, c, z, theta.copy(), ev, buf[:rows].copy(), fsum, amb


# ---------------------------------------------------------------------------
# python API

def _functional_arrays(funcs):
    fcode = np.array([FUNCTIONALS[f.kind] for f in funcs], dtype=np.int64)
    fparam = np.array([f.param for f in funcs], dtype=float)
    flo = np.array([f.lo for f in funcs], dtype=float)
    fhi = np.array([f.hi for f in funcs], dtype=float)
    return fcode, fparam, flo, fhi


def _marks(config: PathConfig):
    levels = np.asarray(config.levels, dtype=float)
    pa = np.array([p[0] for p in config.pairs], dtype=float)
    pk = np.array([p[1] for p in config.pairs], dtype=float)
    return levels, pa, pk, np.concatenate([levels, pa, pk])


def step(state: MartingaleState, warp: WarpFunction, policy: FramePolicy, dt_max: float,
         rng: RngStream | np.random.Generator, eta: float = 0.05, max_retries: int = 40,
         drift_scale: float = 1.0) -> MartingaleState:
    """Advance one adaptive Euler-Maruyama step (``dt <= dt_max``)."""
    if not state.r > 0:
        raise ConfigError("step needs r > 0")
    if policy.kind == "embedded_surface":
        raise ConfigError("surface policies are stepped by simulate_path")
    gen = rng.generator if isinstance(rng, RngStream) else rng
    theta = np.asarray(state.theta, dtype=float)
    if policy.kind == "custom_distribution":
        G, _ = warp(state.r)
        c, E = policy.frame(state.r, theta, G=G)
    else:
        E = np.empty((policy.n, policy.m))
        c = policy_frame(policy.code, policy.params(), policy.n, policy.m, float(state.r), theta,
                         float(state.cos_phi), gen, E)
    th_new = np.empty(policy.m)
    status, dt, r1, dz = step_core(float(state.r), theta, float(c), E, policy.n, warp.kernel_args(),
                                   float(dt_max), math.inf, float(eta), int(max_retries),
                                   float(drift_scale), gen, np.empty(policy.n), th_new)
    if status == FAIL_POLE:
        raise StepFailure(f"pole guard rejected {max_retries + 1} proposals at r={state.r:.6g}", state)
    if status == FAIL_NONFINITE:
        raise NumericalError("non-finite state after step",
                             {"r": state.r, "t": state.t, "cos_phi": c, "dt": dt, "r_new": r1, "dz": dz})
    c_next = c
    if policy.kind == "random_rotation":
        c_next = rotation_update(float(state.cos_phi), policy.rate, dt, gen)
    return MartingaleState(state.t + dt, r1, c_next, th_new, state.z_accum + dz, dict(state.flags))


def simulate_path(config: PathConfig, warp: WarpFunction | None, policy: FramePolicy,
                  rng: RngStream) -> PathRecord:
    """Integrate one path until the outer or inner barrier or the horizon."""
    levels, pa, pk, marks = _marks(config)
    nl, npair = levels.size, pa.size
    fc, fp, flo, fhi = _functional_arrays(config.functionals)
    cap = config.sample_capacity()
    gen = rng.generator
    amb = np.zeros((3, 2))
    if policy.kind == "embedded_surface":
        u0, w0 = policy.chart.start_for_radius(config.r0)
        out = run_surface_kernel(policy.chart.code, u0, w0, config.r_in, config.r_out, config.t_max,
                                 config.dt_max, config.eta, config.max_steps, marks, nl, npair,
                                 config.sample_t0, config.sample_ratio, config.dense, cap,
                                 fc, fp, flo, fhi, gen)
        amb = out[11]
        out = out[:11]
    else:
        if warp is None:
            raise ConfigError("a warp function is required for this policy")
        if warp.r_max < config.r_out:
            raise ConfigError(f"warp covers r <= {warp.r_max:.6g} but r_out = {config.r_out:.6g}")
        if policy.kind == "distribution" and not (warp.source == "closed_form" and warp.kind == "hyperbolic"
                                                   and warp.a == 1.0):
            raise ConfigError("the built-in H^3 distribution lives on hyperbolic(a=1)")
        theta0 = config.theta_start(policy.m)
        cos0 = config.cos0 if policy.kind == "random_rotation" else 1.0
        args = (warp.kernel_args(), policy.code, policy.params(), policy.n,
                float(config.r0), theta0, float(cos0), config.r_in, config.r_out, config.t_max,
                config.dt_max, config.eta, config.max_retries, config.max_steps, config.drift_scale,
                marks, nl, npair, config.sample_t0, config.sample_ratio, config.dense, cap,
                fc, fp, flo, fhi, gen)
        if policy.kind == "custom_distribution":
            out = _run_path_python(policy, warp, *args)
        else:
            out = run_path_kernel(*args)
    stop, detail, steps, t, r, c, z, theta, ev, samples, fsum = out
    lev_times = ev[:nl]
    arm_t = ev[nl:nl + npair]
    ret_t = ev[nl + npair:nl + 2 * npair]
    t_stop = float(ev[nl + 2 * npair + 2])
    hits = {float(lv): float(tt) for lv, tt in zip(levels, lev_times) if not math.isnan(tt)}
    if stop == HIT_OUTER:
        hits[float(config.r_out)] = t_stop
    if stop == HIT_INNER:
        hits[float(config.r_in)] = t_stop
    returns = [(float(a), float(tt)) for a, tt in zip(pa, ret_t) if not math.isnan(tt)]
    pair_times = np.column_stack([pa, pk, arm_t, ret_t]) if npair else np.zeros((0, 4))
    final = MartingaleState(float(t), float(r), float(c), np.array(theta, dtype=float), float(z),
                            {"stop_time": t_stop})
    return PathRecord(rng.master_seed, rng.path_index, STOP_REASONS[stop], hits, returns, pair_times,
                      samples, final, int(steps), FAILURE_DETAILS[detail], fsum, amb)


def _run_path_python(policy, warp, wp, pcode, pparams, n, r0, theta0, cos0,
                     r_in, r_out, t_max, dt_max, eta, retries, max_steps, drift_scale,
                     marks, nl, npair, sample_t0, sample_ratio, dense, cap,
                     fcode, fparam, flo, fhi, rng):
    """Python-level twin of :func:`run_path_kernel` for policies with python callables."""
    m = theta0.shape[0]
    theta = theta0.copy()
    th_new = np.empty(m)
    xi = np.empty(n)
    ev = _event_buffers(nl, npair)
    fsum = np.zeros((fcode.shape[0], 4))
    t, r, z = 0.0, r0, 0.0
    c, _ = policy.frame(r, theta, G=warp(r)[0])
    rows = [[t, r, c, z, *theta]]
    next_sample = sample_t0
    stop, detail, steps = -1, FAIL_NONE, 0
    while True:
        if t >= t_max:
            stop = HORIZON
            break
        if steps >= max_steps:
            stop, detail = HORIZON, FAIL_BUDGET
            break
        c, E = policy.frame(r, theta, G=warp(r)[0])
        status, dt, r1, dz = step_core(r, theta, c, E, n, wp, dt_max, t_max - t, eta, retries,
                                       drift_scale, rng, xi, th_new)
        if status != FAIL_NONE:
            stop, detail = STEP_FAILURE, status
            break
        if fcode.shape[0] > 0:
            _tally(fcode, fparam, flo, fhi, r, r1, dt, fsum)
        code = _events(r, r1, t, dt, c * c, rng, r_in, r_out, marks, nl, npair, ev)
        t += dt
        if t_max - t < 1e-12 * t_max:
            t = t_max
        z += dz
        r = r1
        theta = th_new.copy()
        steps += 1
        if dense or t >= next_sample:
            if len(rows) < cap:
                rows.append([t, r, c, z, *theta])
            while next_sample <= t:
                next_sample *= sample_ratio
        if code >= 0:
            stop = code
            break
    if rows[-1][0] != t:
        rows.append([t, r, c, z, *theta])
    return stop, detail, steps, t, r, c, z, theta, ev, np.array(rows), fsum


def dump_path_csv(record: PathRecord, directory) -> str:
    """Write ``path_<seed>_<index>.csv`` with columns ``t,r,cos_phi,theta_1..theta_m,z``."""
    import csv
    import os
    m = record.samples.shape[1] - 4
    name = os.path.join(str(directory), f"path_{record.seed}_{record.path_index}.csv")
    with open(name, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "r", "cos_phi"] + [f"theta_{k + 1}" for k in range(m)] + ["z"])
        for row in record.samples:
            w.writerow([repr(float(v)) for v in (row[0], row[1], row[2], *row[4:], row[3])])
    return name

"""Radial curvature profiles and the warp functions they induce.

A rotationally symmetric Cartan-Hadamard manifold has metric
``dr^2 + G(r)^2 dtheta^2`` where ``G`` solves the scalar Jacobi equation

    G''(r) + K(r) G(r) = 0,   G(0) = 0,  G'(0) = 1

for the radial curvature ``K <= 0``.  This module builds ``G`` either in closed
form (flat and constant-curvature spaces) or by adaptive Runge-Kutta
integration tabulated on a geometric grid, and exposes the drift coefficient
``G'/G`` used by the path integrator.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numba
import numpy as np
from scipy.integrate import quad, solve_ivp

from .errors import ProfileError, SolverFailure, WarpDomainError

# Codes understood by the jitted evaluators.
WARP_EUCLIDEAN = 0
WARP_HYPERBOLIC = 1
WARP_TABLE = 2

SERIES_START = 1e-6
GRID_RATIO = 1.01

PROFILE_KINDS = ("euclidean", "hyperbolic", "log_family", "custom")


@dataclass(frozen=True)
class CurvatureProfile:
    """Upper model ``K(r)`` for the radial sectional curvatures.

    ``kind`` is one of ``euclidean``, ``hyperbolic`` (parameter ``a``),
    ``log_family`` (parameters ``c`` and ``R``) or ``custom``.  A custom profile
    carries either a table ``(table_r, table_K)`` interpolated linearly, or a
    python callable ``func``.

    For ``log_family`` the curvature is zero on ``[0, R]``, a C1 cubic blend on
    ``[R, R+1]``, and exactly ``-c / (r^2 log r)`` from ``blend_radius = R+1``.
    """

    kind: str
    a: float = 1.0
    c: float = 1.0
    R: float = 3.0
    table_r: tuple[float, ...] | None = None
    table_K: tuple[float, ...] | None = None
    func: Callable[[float], float] | None = field(default=None, compare=False)
    label: str = ""

    def __post_init__(self):
        if self.kind not in PROFILE_KINDS:
            raise ProfileError(f"unknown profile kind {self.kind!r}")
        if self.kind == "hyperbolic" and not (self.a > 0 and math.isfinite(self.a)):
            raise ProfileError("hyperbolic profile needs a > 0")
        if self.kind == "log_family":
            if not self.R > 1:
                raise ProfileError("log_family needs R > 1 (the formula requires log r > 0)")
            if not (self.c > 0 and math.isfinite(self.c)):
                raise ProfileError("log_family needs c > 0")
        if self.kind == "custom":
            if self.func is None and (self.table_r is None or self.table_K is None):
                raise ProfileError("custom profile needs a K table or a callable")
            if self.table_r is not None:
                tr = np.asarray(self.table_r, dtype=float)
                tk = np.asarray(self.table_K, dtype=float)
                if tr.shape != tk.shape or tr.ndim != 1 or tr.size < 1:
                    raise ProfileError("custom table_r and table_K must be 1-d and equal length")
                if tr[0] != 0.0 or np.any(np.diff(tr) <= 0):
                    raise ProfileError("custom table_r must start at 0 and increase strictly")
                if not np.all(np.isfinite(tk)):
                    raise ProfileError("custom table_K contains non-finite values")
                if np.any(tk > 0):
                    raise ProfileError("custom table_K must be nonpositive (Cartan-Hadamard)")

    @property
    def blend_radius(self) -> float:
        """Radius from which the asymptotic formula holds exactly."""
        if self.kind == "log_family":
            return self.R + 1.0
        return 0.0

    def K(self, r):
        """Evaluate the curvature at scalar or array ``r``."""
        r = np.asarray(r, dtype=float)
        if self.kind == "euclidean":
            out = np.zeros_like(r)
        elif self.kind == "hyperbolic":
            out = np.full_like(r, -self.a * self.a)
        elif self.kind == "log_family":
            out = _log_family_K(r, self.c, self.R)
        elif self.func is not None:
            out = np.vectorize(self.func, otypes=[float])(r)
        else:
            out = np.interp(r, np.asarray(self.table_r), np.asarray(self.table_K))
        return out if out.ndim else float(out)

    def closed_form(self) -> bool:
        return self.kind in ("euclidean", "hyperbolic")

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind}
        if self.kind == "hyperbolic":
            d["a"] = self.a
        elif self.kind == "log_family":
            d["c"] = self.c
            d["R"] = self.R
        elif self.kind == "custom":
            if self.table_r is not None:
                d["table_r"] = list(self.table_r)
                d["table_K"] = list(self.table_K)
            else:
                d["func"] = self.label or "callable"
        return d


def euclidean() -> CurvatureProfile:
    return CurvatureProfile("euclidean")


def hyperbolic(a: float = 1.0) -> CurvatureProfile:
    return CurvatureProfile("hyperbolic", a=a)


def log_family(c: float, R: float = 3.0) -> CurvatureProfile:
    return CurvatureProfile("log_family", c=c, R=R)


def constant_custom(K0: float, r_max: float) -> CurvatureProfile:
    """Custom (tabulated) profile with constant curvature ``K0``."""
    return CurvatureProfile("custom", table_r=(0.0, float(r_max)), table_K=(K0, K0))


def lower_loglog_profile(A: float = 4.0) -> CurvatureProfile:
    """Lower comparison curvature with the log-log correction.

    Exactly ``-(1/2)/(r^2 log r) [1 + 1/log2 r - 1/(2 log r) - 1/(2 log r (log2 r)^2)]``
    for ``r >= A+1`` (where ``r (log r)^(1/2) (log log r)^(1/2)`` solves the Jacobi
    equation), blended to zero on ``[A, A+1]`` like the log family.
    """
    if A <= math.e:
        raise ProfileError("lower log-log profile needs A > e so that log log r > 0")

    def tail(r):
        L = np.log(r)
        L2 = np.log(L)
        return -0.5 / (r * r * L) * (1 + 1 / L2 - 1 / (2 * L) - 1 / (2 * L * L2 * L2))

    def tail_prime(r, h=1e-5):
        return (tail(r + h) - tail(r - h)) / (2 * h)

    k1, dk1 = float(tail(A + 1.0)), float(tail_prime(A + 1.0))

    def K(r: float) -> float:
        if r <= A:
            return 0.0
        if r >= A + 1.0:
            return float(tail(r))
        x = r - A
        return k1 * (3 * x * x - 2 * x ** 3) + dk1 * (x ** 3 - x * x)

    return CurvatureProfile("custom", func=K, label=f"lower_loglog(A={A})")


def _log_family_K(r: np.ndarray, c: float, R: float, scaled: bool = False) -> np.ndarray:
    """K(r), or r^2 K(r) when ``scaled`` (finite even where K underflows)."""
    r1 = R + 1.0
    L1 = math.log(r1)
    k1 = -c / (r1 * r1 * L1)
    # d/dr of -c/(r^2 log r)
    dk1 = c * (2 * L1 + 1) / (r1 ** 3 * L1 * L1)
    out = np.zeros_like(r)
    tail = r >= r1
    rt = r[tail]
    out[tail] = -c / np.log(rt) if scaled else -c / rt / rt / np.log(rt)
    mid = (r > R) & ~tail
    x = r[mid] - R
    out[mid] = k1 * (3 * x * x - 2 * x ** 3) + dk1 * (x ** 3 - x * x)
    if scaled:
        out[mid] *= r[mid] ** 2
    return out


@dataclass(frozen=True, eq=False)
class WarpFunction:
    """The pair ``(G, G')`` on ``(0, r_max]``.

    Closed forms carry no table.  ODE tables are stored on a grid uniform in
    ``log r`` and interpolated by monotone cubic Hermite splines on
    ``(log r, log G)`` and ``(log r, log G')`` using the ODE's own slopes.
    """

    source: str
    r_max: float
    kind: str
    a: float = 1.0
    grid: np.ndarray | None = None
    G: np.ndarray | None = None
    Gprime: np.ndarray | None = None
    K0: float = 0.0
    interpolation_order: int = 3
    rel_tol: float = 0.0
    _slopes: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)

    @property
    def code(self) -> int:
        if self.source == "closed_form":
            return WARP_EUCLIDEAN if self.kind == "euclidean" else WARP_HYPERBOLIC
        return WARP_TABLE

    def kernel_args(self) -> tuple:
        """``(code, a, log r_0, h, K(0), r_max, table)`` consumed by the jitted evaluators.

        ``table`` has rows ``log G``, its slope, ``log G'`` and its slope on the
        uniform ``log r`` grid starting at ``log r_0`` with spacing ``h``.
        """
        if self.source == "closed_form":
            return (self.code, float(self.a), 0.0, 1.0, 0.0, float(self.r_max), np.zeros((4, 2)))
        lr = np.log(self.grid)
        h = (lr[-1] - lr[0]) / (lr.size - 1)
        sg, sgp = self._slopes
        tab = np.ascontiguousarray(np.vstack([np.log(self.G), sg, np.log(self.Gprime), sgp]))
        return (WARP_TABLE, 0.0, float(lr[0]), float(h), float(self.K0), float(self.r_max), tab)

    def __call__(self, r):
        return warp_eval(self, r)


def _check_rel_tol(rel_tol: float) -> None:
    if not (0 < rel_tol <= 1e-3):
        raise ValueError("rel_tol must lie in (0, 1e-3]")


def solve_jacobi(profile: CurvatureProfile, r_max: float, rel_tol: float = 1e-9,
                 force_table: bool = False) -> WarpFunction:
    """Solve ``G'' + K G = 0`` with ``G(0)=0, G'(0)=1`` up to ``r_max``.

    Closed-form kinds return the exact solution unless ``force_table``.  The
    integration runs in ``s = log r`` on ``(log G, log G')`` with an adaptive
    Dormand-Prince 5(4) pair, seeded at ``r = 1e-6`` from the series
    ``G = h - K(0) h^3 / 6``.
    """
    if not r_max > 0:
        raise ValueError("r_max must be positive")
    _check_rel_tol(rel_tol)
    if profile.closed_form() and not force_table:
        return WarpFunction("closed_form", float(r_max), profile.kind, a=profile.a, rel_tol=rel_tol)
    if r_max <= SERIES_START:
        raise ValueError(f"r_max must exceed {SERIES_START}")

    n_nodes = int(math.ceil(math.log(r_max / SERIES_START) / math.log(GRID_RATIO))) + 1
    s_grid = np.linspace(math.log(SERIES_START), math.log(r_max), n_nodes)
    r_grid = np.exp(s_grid)
    r_grid[-1] = r_max
    K_grid = np.asarray(profile.K(r_grid), dtype=float)
    if not np.all(np.isfinite(K_grid)):
        bad = r_grid[~np.isfinite(K_grid)][0]
        raise ProfileError(f"curvature is not finite at r={bad:.6g}")
    if np.any(K_grid > 0):
        bad = r_grid[K_grid > 0][0]
        raise ProfileError(f"curvature is positive at r={bad:.6g}")

    K0 = float(profile.K(0.0))
    h = SERIES_START
    G0 = h - K0 * h ** 3 / 6
    Gp0 = 1 - K0 * h * h / 2
    Kr2 = _scaled_K(profile)

    def rhs(s, y):
        # exponents are clipped so that wild trial stages are rejected by the
        # error control instead of overflowing
        return [math.exp(min(s + y[1] - y[0], 700.0)), -Kr2(math.exp(s)) * math.exp(min(y[0] - y[1] - s, 700.0))]

    # Breakpoints of piecewise profiles are handed to the solver as segment ends.
    stops = [b for b in _breakpoints(profile) if SERIES_START < b < r_max]
    edges = [s_grid[0]] + [math.log(b) for b in stops] + [s_grid[-1]]
    y = np.array([math.log(G0), math.log(Gp0)])
    logG = np.empty(n_nodes)
    logGp = np.empty(n_nodes)
    logG[0], logGp[0] = y
    # tight local control: the Jacobi residual is measured on derivatives of the
    # tabulated values, which amplifies per-node error by the inverse grid spacing
    tol = max(rel_tol * 1e-3, 1e-13)
    for s_lo, s_hi in zip(edges[:-1], edges[1:]):
        sel = (s_grid > s_lo) & (s_grid <= s_hi)
        nodes = s_grid[sel]
        t_eval = nodes if nodes.size and nodes[-1] == s_hi else np.append(nodes, s_hi)
        sol = solve_ivp(rhs, (s_lo, s_hi), y, method="RK45", t_eval=t_eval, rtol=tol, atol=tol * 1e-4)
        if sol.status != 0:
            raise SolverFailure(f"Jacobi integration failed: {sol.message}", math.exp(sol.t[-1]))
        logG[sel] = sol.y[0, :nodes.size]
        logGp[sel] = sol.y[1, :nodes.size]
        y = sol.y[:, -1]
    if logG[-1] > 700.0 or logGp[-1] > 700.0:
        bad = float(r_grid[np.argmax((logG > 700.0) | (logGp > 700.0))])
        raise SolverFailure(f"warp exceeds floating range beyond r={bad:.4g}; lower r_max", bad)
    G = np.exp(logG)
    Gp = np.exp(logGp)
    if profile.kind == "log_family":
        Kr2_grid = _log_family_K(r_grid, profile.c, profile.R, scaled=True)
    else:
        Kr2_grid = K_grid * r_grid * r_grid
    return _table(profile.kind, r_grid, G, Gp, K0, rel_tol, Kr2_grid)


def _breakpoints(profile: CurvatureProfile) -> list[float]:
    if profile.kind == "log_family":
        return [profile.R, profile.R + 1.0]
    if profile.kind == "custom" and profile.table_r is not None:
        return [float(x) for x in profile.table_r[1:]]
    if profile.kind == "custom" and "lower_loglog" in profile.label:
        A = float(profile.label.split("=")[1].rstrip(")"))
        return [A, A + 1.0]
    return []


def _scaled_K(profile: CurvatureProfile) -> Callable[[float], float]:
    """Scalar ``r -> r^2 K(r)``, the curvature term of the Jacobi equation in ``log r``."""
    K = _scalar_K(profile)
    if profile.kind == "log_family":
        c, r1 = profile.c, profile.R + 1.0
        return lambda r: -c / math.log(r) if r >= r1 else K(r) * r * r
    return lambda r: K(r) * r * r


def _scalar_K(profile: CurvatureProfile) -> Callable[[float], float]:
    if profile.kind == "log_family":
        c, R = profile.c, profile.R
        r1 = R + 1.0
        L1 = math.log(r1)
        k1 = -c / (r1 * r1 * L1)
        dk1 = c * (2 * L1 + 1) / (r1 ** 3 * L1 * L1)

        def K(r):
            if r <= R:
                return 0.0
            if r >= r1:
                return -c / (r * r * math.log(r))
            x = r - R
            return k1 * (3 * x * x - 2 * x ** 3) + dk1 * (x ** 3 - x * x)
        return K
    if profile.kind == "custom" and profile.func is not None:
        return profile.func
    if profile.kind == "custom":
        tr = np.asarray(profile.table_r)
        tk = np.asarray(profile.table_K)
        if tk.size == 2 and tk[0] == tk[1]:
            k = float(tk[0])
            return lambda r: k
        return lambda r: float(np.interp(r, tr, tk))
    k = float(profile.K(0.0))
    return lambda r: k


def _table(kind, r_grid, G, Gp, K0, rel_tol, Kr2_grid=None) -> WarpFunction:
    lr = np.log(r_grid)
    lg = np.log(G)
    lgp = np.log(Gp)
    slope_g = np.exp(lr + lgp - lg)
    if Kr2_grid is not None:
        slope_gp = -Kr2_grid * np.exp(lg - lgp - lr)
    else:
        slope_gp = np.gradient(lgp, lr, edge_order=2)
    slope_g = _fritsch_carlson(lr, lg, slope_g)
    slope_gp = _fritsch_carlson(lr, lgp, slope_gp)
    return WarpFunction("ode_table", float(r_grid[-1]), kind, grid=r_grid, G=G, Gprime=Gp,
                        K0=K0, rel_tol=rel_tol, _slopes=(slope_g, slope_gp))


def _fritsch_carlson(x: np.ndarray, y: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Limit Hermite slopes so the interpolant stays monotone on monotone data."""
    m = np.array(m, dtype=float)
    d = np.diff(y) / np.diff(x)
    flat = d == 0
    m[:-1][flat] = 0.0
    m[1:][flat] = 0.0
    for k in np.nonzero(~flat)[0]:
        alpha = m[k] / d[k]
        beta = m[k + 1] / d[k]
        if alpha < 0:
            m[k] = 0.0
            alpha = 0.0
        if beta < 0:
            m[k + 1] = 0.0
            beta = 0.0
        s = alpha * alpha + beta * beta
        if s > 9.0:
            tau = 3.0 / math.sqrt(s)
            m[k] = tau * alpha * d[k]
            m[k + 1] = tau * beta * d[k]
    return m


# ---------------------------------------------------------------------------
# jitted evaluators (shared by the python API and the path kernels)

@numba.njit(cache=True, nogil=True, inline="always")
def _hermite(x0, h, tab, row, x):
    n = tab.shape[1]
    u = (x - x0) / h
    i = int(math.floor(u))
    if i < 0:
        i = 0
    elif i > n - 2:
        i = n - 2
    t = u - i
    t2 = t * t
    t3 = t2 * t
    return ((2 * t3 - 3 * t2 + 1) * tab[row, i] + (t3 - 2 * t2 + t) * h * tab[row + 1, i]
            + (-2 * t3 + 3 * t2) * tab[row, i + 1] + (t3 - t2) * h * tab[row + 1, i + 1])


@numba.njit(cache=True, nogil=True, inline="always")
def warp_terms(wp, r):
    """Return ``(1/G(r), G'(r)/G(r))`` without overflowing for large ``a r``.

    ``wp`` is the tuple from :meth:`WarpFunction.kernel_args`.
    """
    code = wp[0]
    if code == WARP_EUCLIDEAN:
        return 1.0 / r, 1.0 / r
    if code == WARP_HYPERBOLIC:
        ar = wp[1] * r
        return wp[1] / math.sinh(ar), wp[1] / math.tanh(ar)
    if r < SERIES_START:
        g = r - wp[4] * r * r * r / 6.0
        gp = 1.0 - wp[4] * r * r / 2.0
        return 1.0 / g, gp / g
    x = math.log(r)
    y = _hermite(wp[2], wp[3], wp[6], 0, x)
    yp = _hermite(wp[2], wp[3], wp[6], 2, x)
    return math.exp(-y), math.exp(yp - y)


@numba.njit(cache=True, nogil=True)
def warp_values(wp, r):
    """Return ``(G(r), G'(r))``."""
    code = wp[0]
    if code == WARP_EUCLIDEAN:
        return r, 1.0
    if code == WARP_HYPERBOLIC:
        return math.sinh(wp[1] * r) / wp[1], math.cosh(wp[1] * r)
    if r < SERIES_START:
        return r - wp[4] * r * r * r / 6.0, 1.0 - wp[4] * r * r / 2.0
    x = math.log(r)
    return math.exp(_hermite(wp[2], wp[3], wp[6], 0, x)), math.exp(_hermite(wp[2], wp[3], wp[6], 2, x))


def _check_domain(warp: WarpFunction, r: np.ndarray) -> None:
    if np.any(~(r > 0)) or np.any(r > warp.r_max * (1 + 1e-12)):
        raise WarpDomainError(f"radius outside (0, {warp.r_max:.6g}]")


def warp_eval(warp: WarpFunction, r):
    """Evaluate ``(G(r), G'(r))`` for scalar or array ``r`` in ``(0, r_max]``."""
    arr = np.atleast_1d(np.asarray(r, dtype=float))
    _check_domain(warp, arr)
    args = warp.kernel_args()
    G = np.empty_like(arr)
    Gp = np.empty_like(arr)
    for i, ri in enumerate(arr):
        G[i], Gp[i] = warp_values(args, ri)
    if np.ndim(r) == 0:
        return float(G[0]), float(Gp[0])
    return G, Gp


def radial_log_derivative(warp: WarpFunction, r):
    """``G'(r)/G(r)``, the per-direction drift coefficient of ``r_t``."""
    arr = np.atleast_1d(np.asarray(r, dtype=float))
    _check_domain(warp, arr)
    args = warp.kernel_args()
    out = np.array([warp_terms(args, ri)[1] for ri in arr])
    return float(out[0]) if np.ndim(r) == 0 else out


def inverse_warp(warp: WarpFunction, r):
    """``1/G(r)``; finite even where ``G`` itself overflows."""
    arr = np.atleast_1d(np.asarray(r, dtype=float))
    _check_domain(warp, arr)
    args = warp.kernel_args()
    out = np.array([warp_terms(args, ri)[0] for ri in arr])
    return float(out[0]) if np.ndim(r) == 0 else out


def _log_warp_scalar(warp: WarpFunction) -> Callable[[float], float]:
    if warp.code == WARP_EUCLIDEAN:
        return math.log
    if warp.code == WARP_HYPERBOLIC:
        a = warp.a
        return lambda r: a * r + math.log(-math.expm1(-2 * a * r)) - math.log(2 * a)
    args = warp.kernel_args()
    x0, h, tab = args[2], args[3], args[6]

    def f(r):
        if r < SERIES_START:
            return -math.log(warp_terms(args, r)[0])
        return _hermite(x0, h, tab, 0, math.log(r))
    return f


def log_warp(warp: WarpFunction, r):
    """``log G(r)``, computed without forming ``G`` (which may overflow)."""
    arr = np.atleast_1d(np.asarray(r, dtype=float))
    _check_domain(warp, arr)
    f = _log_warp_scalar(warp)
    out = np.array([f(ri) for ri in arr])
    return float(out[0]) if np.ndim(r) == 0 else out


def _tail_integral(warp: WarpFunction, power: float) -> float:
    """``int_{r_max}^inf G^-power dr`` from the growth of ``G`` at the end of the table.

    Polynomial-logarithmic growth ``G ~ C r (log r)^q`` is extrapolated when
    ``r G'/G`` is close to 1; faster growth is extrapolated exponentially.
    """
    R = warp.r_max
    L = math.log(R)
    lg = log_warp(warp, R)
    kappa = radial_log_derivative(warp, R)
    if R * kappa > 2.0:
        return math.exp(-power * lg) / (power * kappa)
    q = (R * kappa - 1.0) * L
    logC = lg - L - q * math.log(L)
    if power == 1.0:
        return math.inf if q <= 1 else math.exp(-logC) * L ** (1 - q) / (q - 1)
    f = lambda s: math.exp(s * (1 - power) - power * (logC + q * math.log(s)))
    return quad(f, L, math.inf, limit=200)[0]


def scale_integral(warp: WarpFunction, lo: float, hi: float = math.inf, power: float = 1.0) -> float:
    """``int_lo^hi G(r)^-power dr``.

    With ``power = n - 1`` this is the scale function of the radial process
    of the rank-``n`` radial-policy martingale, whose generator is
    ``(1/2) f'' + ((n-1)/2) (G'/G) f'``.  ``hi = inf`` uses the exact tail for
    closed forms and an extrapolated one beyond the table otherwise.
    """
    if not 0 < lo <= hi:
        raise ValueError("need 0 < lo <= hi")
    tail = 0.0
    if math.isinf(hi):
        if warp.code == WARP_EUCLIDEAN:
            return math.inf if power <= 1 else lo ** (1 - power) / (power - 1)
        if warp.code == WARP_HYPERBOLIC:
            # beyond a r = lo + 60/power the integrand is below e^-60 of its value at lo
            hi = lo + 60.0 / (power * warp.a)
        else:
            tail = _tail_integral(warp, power)
            if math.isinf(tail):
                return math.inf
            hi = warp.r_max
    s_lo, s_hi = math.log(lo), math.log(hi)
    lw = _log_warp_scalar(warp)
    f = lambda s: math.exp(s - power * lw(math.exp(s)))
    edges = np.linspace(s_lo, s_hi, max(2, int(math.ceil((s_hi - s_lo) / 2.0)) + 1))
    return sum(quad(f, x0, x1, limit=200, epsrel=1e-11)[0] for x0, x1 in zip(edges[:-1], edges[1:])) + tail


def radial_return_probability(warp: WarpFunction, n: int, a: float, k: float, b: float = math.inf) -> float:
    """Probability that the radial-policy process started at ``k`` reaches ``a``
    before ``b`` (``b = inf``: ever), from the scale function."""
    if not 0 < a <= k <= b:
        raise ValueError("need 0 < a <= k <= b")
    num = scale_integral(warp, k, b, n - 1) if k < b else 0.0
    den = scale_integral(warp, a, b, n - 1)
    if math.isinf(den):
        return 1.0 if math.isinf(b) else num / den
    return num / den


def export_csv(warp: WarpFunction, path: str | Path) -> None:
    """Write the warp table as CSV with header ``r,G,Gprime``."""
    if warp.source == "closed_form":
        r = np.geomspace(SERIES_START, warp.r_max, int(math.log(warp.r_max / SERIES_START) / math.log(GRID_RATIO)) + 1)
        G, Gp = warp_eval(warp, r)
    else:
        r, G, Gp = warp.grid, warp.G, warp.Gprime
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["r", "G", "Gprime"])
        for row in zip(r, G, Gp):
            w.writerow([repr(float(v)) for v in row])


def import_csv(path: str | Path, kind: str = "custom", K0: float = 0.0) -> WarpFunction:
    """Read a warp table written by :func:`export_csv` (or any r,G,Gprime CSV)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [h.strip() for h in rows[0]] != ["r", "G", "Gprime"]:
        raise ValueError("warp CSV must have header r,G,Gprime")
    data = np.array([[float(v) for v in row] for row in rows[1:] if row], dtype=float)
    r, G, Gp = data.T
    if np.any(np.diff(r) <= 0):
        raise ValueError("warp CSV radii must increase strictly")
    lr = np.log(r)
    if not np.allclose(np.diff(lr), lr[1] - lr[0], rtol=1e-6, atol=0):
        # resample onto a grid uniform in log r
        grid = np.exp(np.linspace(lr[0], lr[-1], lr.size))
        grid[-1] = r[-1]
        G = np.exp(np.interp(np.log(grid), lr, np.log(G)))
        Gp = np.exp(np.interp(np.log(grid), lr, np.log(Gp)))
        r = grid
    return _table(kind, r, G, Gp, K0, 0.0)

"""Frame policies: the adapted n-plane along which the martingale diffuses.

Every policy reports, at a state ``(r, theta)``, the radial cosine
``cos(phi)`` and ``n`` orthonormal unit directions ``e_1..e_n`` in the tangent
space of the unit sphere at ``theta``.  The frame is then

    v_1 = cos(phi) d_r + sin(phi) e_1 / G,    v_i = e_i / G  (i >= 2)

(the ``1/G`` converts sphere-unit vectors into metric-unit vectors), which is
the rotated frame in which only ``v_1`` has a radial component.  Tangential
weights are therefore ``|w_1| = sin(phi)`` and ``|w_i| = 1``.
"""
from __future__ import annotations

import ast
import math
from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np

from .errors import ConfigError

RADIAL = 0
SPHERE = 1
FIXED_ANGLE = 2
RANDOM_ROTATION = 3
H3_DISTRIBUTION = 4
CUSTOM_DISTRIBUTION = 5
EMBEDDED_SURFACE = 6

POLICY_KINDS = {
    "radial": RADIAL,
    "sphere_tangent": SPHERE,
    "fixed_angle": FIXED_ANGLE,
    "random_rotation": RANDOM_ROTATION,
    "distribution": H3_DISTRIBUTION,
    "custom_distribution": CUSTOM_DISTRIBUTION,
    "embedded_surface": EMBEDDED_SURFACE,
}

HELICOID = 0
CATENOID = 1
CYLINDER = 2
CHART_CODES = {"helicoid": HELICOID, "catenoid": CATENOID, "cylinder": CYLINDER}


@dataclass(frozen=True)
class SurfaceChart:
    """Isothermal chart ``(u, w) -> R^3`` with metric ``lambda^2 (du^2 + dw^2)``.

    ``helicoid`` and ``catenoid`` are minimal.  ``cylinder`` is a flat but
    non-minimal control surface used to show that the ambient-martingale test
    actually detects mean curvature.
    """

    name: str

    def __post_init__(self):
        if self.name not in CHART_CODES:
            raise ConfigError(f"unknown surface chart {self.name!r}")

    @property
    def code(self) -> int:
        return CHART_CODES[self.name]

    def conformal_factor(self, u, w):
        w = np.asarray(w, dtype=float)
        if self.name == "cylinder":
            return np.ones_like(w) + 0 * np.asarray(u, dtype=float)
        return np.cosh(w) + 0 * np.asarray(u, dtype=float)

    def embedding(self, u, w):
        u = np.asarray(u, dtype=float)
        w = np.asarray(w, dtype=float)
        if self.name == "helicoid":
            return np.stack([np.sinh(w) * np.cos(u), np.sinh(w) * np.sin(u), u + 0 * w], axis=-1)
        if self.name == "catenoid":
            return np.stack([np.cosh(w) * np.cos(u), np.cosh(w) * np.sin(u), w + 0 * u], axis=-1)
        return np.stack([np.cos(u) + 0 * w, np.sin(u) + 0 * w, w + 0 * u], axis=-1)

    def start_for_radius(self, r0: float) -> tuple[float, float]:
        """Chart point at ambient distance ``r0`` from the origin (``u = 0``)."""
        if self.name == "helicoid":
            return 0.0, math.asinh(r0)
        if self.name == "catenoid":
            if r0 < 1:
                raise ConfigError("the catenoid has no points with r < 1")
            from scipy.optimize import brentq
            return 0.0, brentq(lambda w: math.cosh(w) ** 2 + w * w - r0 * r0, 0.0, r0 + 1.0)
        if r0 < 1:
            raise ConfigError("the cylinder has no points with r < 1")
        return 0.0, math.sqrt(r0 * r0 - 1.0)


@dataclass(frozen=True)
class DistributionField:
    """One field of a custom distribution, in polar form.

    ``radial`` is the ``d_r`` component and ``tangent`` the tangential part as
    a vector in R^m tangent to the unit sphere at ``theta``, measured in metric
    length (so orthonormality reads ``a_i a_j + t_i . t_j = delta_ij``).
    Expressions may use ``r``, ``y1..ym`` (the coordinates of ``theta``),
    ``G`` (the warp at ``r``) and the functions in :data:`EXPR_FUNCS`.
    """

    radial: str
    tangent: tuple[str, ...]


@dataclass(frozen=True)
class FramePolicy:
    kind: str
    n: int
    m: int
    phi0: float = 0.0
    rate: float = 0.0
    twist: float = 1.0
    chart: SurfaceChart | None = None
    fields: tuple[DistributionField, ...] = ()
    _compiled: tuple | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ConfigError(f"unknown policy kind {self.kind!r}")
        if not (2 <= self.n < self.m):
            raise ConfigError("rank must satisfy 2 ≤ n < m")
        if self.kind == "sphere_tangent" and self.n != self.m - 1:
            raise ConfigError("sphere_tangent policy needs n = m - 1")
        if self.kind == "fixed_angle" and not (0 <= self.phi0 <= math.pi / 2):
            raise ConfigError("phi0 must lie in [0, pi/2]")
        if self.kind == "random_rotation" and self.rate < 0:
            raise ConfigError("rate must be nonnegative")
        if self.kind == "distribution" and (self.n, self.m) != (2, 3):
            raise ConfigError("the built-in H^3 distribution has n = 2, m = 3")
        if self.kind == "embedded_surface":
            if self.chart is None:
                raise ConfigError("embedded_surface policy needs a chart")
            if (self.n, self.m) != (2, 3):
                raise ConfigError("surface charts are 2-dimensional in R^3")
        if self.kind == "custom_distribution":
            if len(self.fields) != self.n:
                raise ConfigError(f"custom distribution needs exactly n={self.n} fields")
            for f in self.fields:
                if len(f.tangent) != self.m:
                    raise ConfigError(f"each tangent needs m={self.m} components")
            object.__setattr__(self, "_compiled", tuple(
                (compile_expr(f.radial, self.m), tuple(compile_expr(t, self.m) for t in f.tangent))
                for f in self.fields))

    @property
    def code(self) -> int:
        return POLICY_KINDS[self.kind]

    @property
    def stateless(self) -> bool:
        return self.kind in ("radial", "sphere_tangent", "fixed_angle", "distribution")

    def params(self) -> np.ndarray:
        if self.kind == "fixed_angle":
            return np.array([math.cos(self.phi0), 0.0])
        if self.kind == "random_rotation":
            return np.array([self.rate, 0.0])
        if self.kind == "distribution":
            return np.array([self.twist, 0.0])
        return np.zeros(2)

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind, "n": self.n, "m": self.m}
        if self.kind == "fixed_angle":
            d["phi0"] = self.phi0
        if self.kind == "random_rotation":
            d["rate"] = self.rate
        if self.kind == "distribution":
            d["twist"] = self.twist
        if self.kind == "embedded_surface":
            d["chart"] = self.chart.name
        if self.kind == "custom_distribution":
            d["fields"] = [[f.radial, list(f.tangent)] for f in self.fields]
        return d

    def frame(self, r: float, theta: np.ndarray, cos_state: float = 1.0,
              rng: np.random.Generator | None = None, G: float | None = None):
        """Evaluate ``(cos_phi, E)`` with ``E`` the ``n x m`` tangential directions."""
        if self.kind == "embedded_surface":
            raise ConfigError("surface policies drive their own process; use simulate_path")
        if self.kind == "custom_distribution":
            return custom_frame(self, r, np.asarray(theta, dtype=float), G if G is not None else r)
        if rng is None:
            rng = np.random.default_rng()
        E = np.empty((self.n, self.m))
        c = policy_frame(self.code, self.params(), self.n, self.m, float(r),
                         np.asarray(theta, dtype=float), float(cos_state), rng, E)
        return c, E


def radial_policy(n: int, m: int) -> FramePolicy:
    """Brownian motion on a totally geodesic n-plane through the pole: cos(phi) = 1."""
    return FramePolicy("radial", n, m)


def sphere_policy(n: int, m: int) -> FramePolicy:
    """Purely tangential plane (cos(phi) = 0); needs n = m - 1."""
    return FramePolicy("sphere_tangent", n, m)


def fixed_angle_policy(n: int, m: int, phi0: float) -> FramePolicy:
    return FramePolicy("fixed_angle", n, m, phi0=phi0)


def random_rotation_policy(n: int, m: int, rate: float) -> FramePolicy:
    """cos(phi) follows a Wright-Fisher diffusion on [0, 1] with relaxation rate ``rate``."""
    return FramePolicy("random_rotation", n, m, rate=rate)


def surface_bm_policy(chart: SurfaceChart | str) -> FramePolicy:
    if isinstance(chart, str):
        chart = SurfaceChart(chart)
    return FramePolicy("embedded_surface", 2, 3, chart=chart)


def distribution_policy(fields: tuple[DistributionField, ...] | None = None, n: int = 2, m: int = 3,
                        twist: float = 1.0) -> FramePolicy:
    """Sum-of-squares sub-Riemannian diffusion.

    Without ``fields`` this is the built-in rank-2 example on hyperbolic
    3-space (see :func:`h3_fields`); otherwise ``fields`` are user-supplied
    polar-form expressions, orthonormality-checked at random sample points.
    """
    if fields is None:
        if twist == 0:
            raise ConfigError("twist = 0 gives an integrable (not bracket-generating) distribution")
        return FramePolicy("distribution", 2, 3, twist=twist)
    policy = FramePolicy("custom_distribution", n, m, fields=tuple(fields))
    check_orthonormal(policy)
    return policy


# ---------------------------------------------------------------------------
# custom field expressions

EXPR_FUNCS = {
    "sin": math.sin, "cos": math.cos, "tan": math.tan, "exp": math.exp, "log": math.log,
    "sqrt": math.sqrt, "sinh": math.sinh, "cosh": math.cosh, "tanh": math.tanh,
    "atan2": math.atan2, "abs": abs, "pi": math.pi,
}
_ALLOWED_NODES = (ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Load,
                  ast.Constant, ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub, ast.UAdd)


def compile_expr(src: str, m: int) -> Callable[..., float]:
    """Compile a coordinate formula into ``f(r, y, G) -> float``."""
    try:
        tree = ast.parse(str(src), mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"bad field expression {src!r}: {exc.msg}") from None
    names = {"r", "G"} | {f"y{i + 1}" for i in range(m)} | set(EXPR_FUNCS)
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED_NODES):
            raise ConfigError(f"disallowed syntax {type(node).__name__} in {src!r}")
        if isinstance(node, ast.Name) and node.id not in names:
            raise ConfigError(f"unknown name {node.id!r} in {src!r}")
        if isinstance(node, ast.Call) and not (isinstance(node.func, ast.Name) and node.func.id in EXPR_FUNCS):
            raise ConfigError(f"only {sorted(EXPR_FUNCS)} may be called in {src!r}")
    code = compile(tree, "<field>", "eval")

    def f(r, y, G):
        env = dict(EXPR_FUNCS, r=r, G=G)
        env.update({f"y{i + 1}": y[i] for i in range(m)})
        return float(eval(code, {"__builtins__": {}}, env))

    return f


def custom_field_values(policy: FramePolicy, r: float, theta: np.ndarray, G: float):
    a = np.empty(policy.n)
    T = np.empty((policy.n, policy.m))
    for i, (fa, ft) in enumerate(policy._compiled):
        a[i] = fa(r, theta, G)
        T[i] = [f(r, theta, G) for f in ft]
    return a, T


def canonical_frame(a: np.ndarray, T: np.ndarray, theta: np.ndarray):
    """Rotate an orthonormal frame given as radial parts ``a`` and tangential
    parts ``T`` so that only the first vector has a radial component."""
    n, m = T.shape
    c = float(np.linalg.norm(a))
    if c > 1e-14:
        rows = [a / c]
        for b in np.eye(n):
            v = b - sum(np.dot(b, q) * q for q in rows)
            nv = np.linalg.norm(v)
            if nv > 1e-8 and len(rows) < n:
                rows.append(v / nv)
        T = np.array(rows) @ T
    c = min(c, 1.0)
    E = np.empty((n, m))
    for i in range(n):
        vec = T[i] - np.dot(T[i], theta) * theta
        nrm = np.linalg.norm(vec)
        if nrm > 1e-12:
            E[i] = vec / nrm
        else:
            # sin(phi) = 0: any unit tangent orthogonal to the others will do
            E[i] = _orthogonal_unit(theta, E[:i])
    return c, E


def _orthogonal_unit(theta, others):
    basis = np.eye(theta.size)
    for b in basis:
        v = b - np.dot(b, theta) * theta
        for o in others:
            v = v - np.dot(v, o) * o
        nv = np.linalg.norm(v)
        if nv > 1e-6:
            return v / nv
    raise ConfigError("cannot complete the tangential frame")


def custom_frame(policy: FramePolicy, r: float, theta: np.ndarray, G: float):
    a, T = custom_field_values(policy, r, theta, G)
    return canonical_frame(a, T, theta)


def check_orthonormal(policy: FramePolicy, samples: int = 64, tol: float = 1e-8, seed: int = 0) -> None:
    """Verify ``a_i a_j + t_i . t_j = delta_ij`` and ``t_i . theta = 0`` at random points."""
    rng = np.random.default_rng(seed)
    for _ in range(samples):
        r = float(rng.uniform(0.1, 50.0))
        th = rng.standard_normal(policy.m)
        th /= np.linalg.norm(th)
        a, T = custom_field_values(policy, r, th, r)
        gram = np.outer(a, a) + T @ T.T
        err = max(np.max(np.abs(gram - np.eye(policy.n))), np.max(np.abs(T @ th)))
        if not err <= tol:
            raise ConfigError(f"distribution fields not orthonormal at r={r:.4g} (error {err:.3g})")


# ---------------------------------------------------------------------------
# jitted frame generators

@numba.njit(cache=True, nogil=True, inline="always")
def isotropic_tangent_frame(theta, n, rng, E):
    m = theta.shape[0]
    for i in range(n):
        while True:
            for k in range(m):
                E[i, k] = rng.standard_normal()
            d = 0.0
            for k in range(m):
                d += E[i, k] * theta[k]
            for k in range(m):
                E[i, k] -= d * theta[k]
            for j in range(i):
                d = 0.0
                for k in range(m):
                    d += E[i, k] * E[j, k]
                for k in range(m):
                    E[i, k] -= d * E[j, k]
            nrm = 0.0
            for k in range(m):
                nrm += E[i, k] * E[i, k]
            nrm = math.sqrt(nrm)
            if nrm > 1e-10:
                for k in range(m):
                    E[i, k] /= nrm
                break


@numba.njit(cache=True, nogil=True)
def h3_fields(r, theta, twist, F):
    """Left-invariant frame of the twisted solvable group acting on H^3.

    In the upper half-space model ``(x, y, z)`` the group element at a point
    scales by ``z`` and rotates horizontally by ``twist * log z``, so

        E1 = z (cos(twist log z) d_x + sin(twist log z) d_y),   E3 = z d_z

    are orthonormal; ``[E3, E1] = E1 + twist E2`` makes span{E1, E3}
    bracket-generating for ``twist != 0``.  The pole is ``(0, 0, 1)``.

    Returns the fields in polar form: ``F[i, 0]`` the radial component and
    ``F[i, 1:4]`` the tangential part (metric length) as a vector in R^3.
    """
    ch = math.cosh(r)
    sh = math.sinh(r)
    em = math.exp(-r)
    # z = 1 / (cosh r - sinh r theta_3) written without cancellation near theta = e3
    if theta[2] > 0.0:
        one_minus = (theta[0] * theta[0] + theta[1] * theta[1]) / (1.0 + theta[2])
    else:
        one_minus = 1.0 - theta[2]
    z = 1.0 / (ch * one_minus + em * theta[2])
    # theta_3 cosh r - sinh r, again without cancellation
    lift = theta[2] * em - sh * one_minus
    ang = twist * math.log(z)
    ca = math.cos(ang)
    sa = math.sin(ang)
    # E1: horizontal, pushed to the hyperboloid and split into radial and tangential parts
    a = z * (ca * theta[0] + sa * theta[1])
    F[0, 0] = a
    F[0, 1] = ca - a * ch * theta[0]
    F[0, 2] = sa - a * ch * theta[1]
    F[0, 3] = -a * lift
    # E3 = z d_z
    F[1, 0] = z * lift
    F[1, 1] = -z * theta[0] * theta[2]
    F[1, 2] = -z * theta[1] * theta[2]
    F[1, 3] = z * (1.0 - theta[2] * theta[2])


@numba.njit(cache=True, nogil=True)
def _canonical_from_polar(F, theta, E):
    """Rotate a 2-frame in polar form so only the first vector is radial."""
    a1 = F[0, 0]
    a2 = F[1, 0]
    c = math.sqrt(a1 * a1 + a2 * a2)
    m = theta.shape[0]
    if c > 1e-14:
        for k in range(m):
            E[0, k] = (a1 * F[0, k + 1] + a2 * F[1, k + 1]) / c
            E[1, k] = (-a2 * F[0, k + 1] + a1 * F[1, k + 1]) / c
    else:
        for k in range(m):
            E[0, k] = F[0, k + 1]
            E[1, k] = F[1, k + 1]
    # the second vector has no radial part, so it is a unit tangent; clean it first
    _project_out(E, 1, theta, E, -1)
    _normalize_row(E, 1)
    _project_out(E, 0, theta, E, 1)
    nrm = 0.0
    for k in range(m):
        nrm += E[0, k] * E[0, k]
    if nrm > 1e-24:
        _normalize_row(E, 0)
    else:
        # first vector purely radial: any unit tangent orthogonal to E[1] serves
        best = 0.0
        for j in range(m):
            for k in range(m):
                E[0, k] = 0.0
            E[0, j] = 1.0
            _project_out(E, 0, theta, E, 1)
            nrm = 0.0
            for k in range(m):
                nrm += E[0, k] * E[0, k]
            if nrm > 0.5:
                break
        _normalize_row(E, 0)
    return min(c, 1.0)


@numba.njit(cache=True, nogil=True)
def _project_out(E, i, theta, other, j):
    """Remove from row ``i`` its components along ``theta`` and (if ``j >= 0``) along ``other[j]``."""
    m = theta.shape[0]
    d = 0.0
    for k in range(m):
        d += E[i, k] * theta[k]
    for k in range(m):
        E[i, k] -= d * theta[k]
    if j >= 0:
        d = 0.0
        for k in range(m):
            d += E[i, k] * other[j, k]
        for k in range(m):
            E[i, k] -= d * other[j, k]
    return d


@numba.njit(cache=True, nogil=True)
def _normalize_row(E, i):
    nrm = 0.0
    for k in range(E.shape[1]):
        nrm += E[i, k] * E[i, k]
    nrm = math.sqrt(nrm)
    for k in range(E.shape[1]):
        E[i, k] /= nrm


@numba.njit(cache=True, nogil=True, inline="always")
def policy_frame(code, params, n, m, r, theta, c_state, rng, E):
    """Fill ``E`` with tangential directions and return ``cos(phi)``."""
    if code == H3_DISTRIBUTION:
        F = np.empty((2, 4))
        h3_fields(r, theta, params[0], F)
        return _canonical_from_polar(F, theta, E)
    isotropic_tangent_frame(theta, n, rng, E)
    if code == RADIAL:
        return 1.0
    if code == SPHERE:
        return 0.0
    if code == FIXED_ANGLE:
        return params[0]
    return c_state


@numba.njit(cache=True, nogil=True, inline="always")
def rotation_update(c, rate, dt, rng):
    """Wright-Fisher step ``dc = rate (1/2 - c) dt + sqrt(rate c (1-c)) dB`` on [0, 1].

    Stationary law is uniform on [0, 1]; the autocorrelation time is ``1/rate``.
    """
    if rate == 0.0:
        return c
    xi = rng.standard_normal()
    c = c + rate * (0.5 - c) * dt + math.sqrt(max(rate * c * (1.0 - c), 0.0) * dt) * xi
    if c < 0.0:
        c = -c
    if c > 1.0:
        c = 2.0 - c
    return min(max(c, 0.0), 1.0)

"""Named, reproducible Monte Carlo experiments.

A configuration is a flat ``key = value`` text file.  Values are JSON
literals (numbers, strings in double quotes, lists, ``true``/``false``,
``null``); ``#`` starts a comment.  Keys are documented in :data:`SCHEMA`.
A ``preset`` key pulls in a named preset and later keys override it.

The canonical form of a configuration (every schema key present, numbers
normalised, keys sorted, runtime-only keys removed) is hashed with SHA-256;
the hash appears in every report.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .detectors import (AngularTolerances, EnsembleStats, SphericalCap, Verdict, ambient_martingale_check,
                        drift_sign_check, exit_distribution, exit_grid_nonconstant, hitting_time_bound_check,
                        return_probability_check, shrinking_exit_check, summarize, theta_convergence_classify,
                        transience_verdict)
from .errors import ConfigError, MlabError, ProfileError
from .geometry import CurvatureProfile, WarpFunction, radial_return_probability, solve_jacobi
from .paths import Functional, PathConfig, dump_path_csv, make_stream, simulate_path
from .policies import DistributionField, FramePolicy, SurfaceChart

# name: (type, default, help).  Types: int, float, str, bool, list, float|None, list|None.
SCHEMA: dict[str, tuple[str, object, str]] = {
    "experiment": ("str", "custom", "label written into the report"),
    "profile": ("str", "euclidean", "euclidean | hyperbolic | log_family | custom"),
    "profile_a": ("float", 1.0, "hyperbolic: curvature is -a^2"),
    "profile_c": ("float", 1.0, "log_family: K = -c/(r^2 log r) beyond R+1"),
    "profile_R": ("float", 3.0, "log_family: flat up to R, blended on [R, R+1]; needs R > 1"),
    "profile_table_r": ("list|None", None, "custom: radii (starting at 0) of a piecewise-linear K table"),
    "profile_table_K": ("list|None", None, "custom: curvature values at profile_table_r"),
    "rel_tol": ("float", 1e-9, "Jacobi solver local relative tolerance"),
    "warp_r_max": ("float|None", None, "tabulation range of the warp; default 2 * r_out"),
    "policy": ("str", "radial", "radial | sphere_tangent | fixed_angle | random_rotation | distribution | "
                                "custom_distribution | embedded_surface"),
    "phi0": ("float", 0.0, "fixed_angle: angle between the plane and d_r"),
    "rate": ("float", 0.0, "random_rotation: inverse autocorrelation time of cos(phi)"),
    "twist": ("float", 1.0, "distribution: twist of the built-in H^3 example"),
    "chart": ("str", "helicoid", "embedded_surface: helicoid | catenoid | cylinder"),
    "fields": ("list|None", None, "custom_distribution: list of [radial_expr, [tangent_expr, ...]]"),
    "n": ("int", 2, "rank of the martingale"),
    "m": ("int", 3, "dimension of the manifold"),
    "r0": ("float", 1.0, "starting radius"),
    "theta0": ("list|None", None, "starting direction (normalised); default first basis vector"),
    "r_in": ("float", 0.0, "inner barrier (0: none)"),
    "r_out": ("float", 10.0, "outer barrier"),
    "t_max": ("float", 1e6, "time horizon"),
    "dt_max": ("float", 1.0, "largest time step"),
    "eta": ("float", 0.05, "relative displacement per step (0: fixed steps of dt_max)"),
    "max_retries": ("int", 40, "pole-guard retry budget"),
    "max_steps": ("int", 100_000_000, "step budget per path (exhaustion counts as horizon)"),
    "cos0": ("float", 1.0, "random_rotation: initial cos(phi)"),
    "drift_scale": ("float", 1.0, "multiplier on the radial drift (0: pure-martingale control)"),
    "levels": ("list", [], "monitored radii, strictly increasing, above r0"),
    "pairs": ("list", [], "return pairs [a, k]: first return to a after first reaching k"),
    "functionals": ("list", [], "drift tallies [kind, param, lo, hi]; hi null means unbounded"),
    "sample_t0": ("float", 1e-3, "first decimated sample time"),
    "sample_ratio": ("float", 1.05, "ratio between decimated sample times"),
    "tail_span": ("float", 100.0, "samples in [T/tail_span, T] are kept for angular tests"),
    "n_paths": ("int", 1000, "paths per variant"),
    "master_seed": ("int", 0, "seed of the counter-based streams"),
    "confidence": ("float", 0.99, "confidence level of every interval"),
    "censor_cap": ("float", 0.2, "largest censored share for an asymptotic verdict"),
    "variants": ("list", [], "list of {label, key: value...} overrides, one ensemble each"),
    "checks": ("list", [], "detector suite: list of {type, ...}"),
}
# runtime options: never hashed, never change results
RUNTIME_KEYS = {"threads": 1, "out": "mlab_out", "dump_paths": False}

E = math.e
_TWIN_TOL = {"window": 10.0, "z_plateau_tol": 6e-3, "osc_tol": 0.15, "z_growth_floor": 1.5e-2, "osc_floor": 0.15}



def _polar(degrees: float, plane: str) -> list[float]:
    """Unit vector at the given angle from the north pole e_3, tilted toward x or y."""
    a = math.radians(degrees)
    x, z = math.sin(a), math.cos(a)
    x, z = round(x, 15), round(z, 15)
    return [x, 0.0, z] if plane == "xz" else [0.0, x, z]


PRESETS: dict[str, dict] = {
    "transience-n3-euclidean": {
        "description": "Bessel(3) radial process: hitting-time bound and return fractions a/k (~1 min)",
        "profile": "euclidean", "policy": "radial", "n": 3, "m": 4, "r0": 1.0, "r_out": 150.0,
        "t_max": 1e6, "levels": [5.0, 10.0, 30.0, 100.0], "pairs": [[1.0, 10.0], [1.0, 30.0], [1.0, 100.0]],
        "functionals": [["inv_r", 0.0, 2.0, 50.0]], "n_paths": 10000, "master_seed": 20240601,
        "checks": [
            {"type": "hitting_time_bound", "C": 5.0},
            {"type": "return_probability", "regime": "n_ge_3", "a": 1.0, "k": 10.0, "complete_tail": True},
            {"type": "return_probability", "regime": "n_ge_3", "a": 1.0, "k": 30.0, "complete_tail": True},
            {"type": "return_probability", "regime": "n_ge_3", "a": 1.0, "k": 100.0, "complete_tail": True},
            {"type": "transience", "regime": "n_ge_3", "a": 1.0, "ks": [10.0, 30.0, 100.0], "complete_tail": True,
             "expect": "transient"},
            {"type": "drift_sign", "functional": "inv_r"},
        ],
    },
    "transience-n2-hyperbolic": {
        "description": "n = 2 on hyperbolic space: returns vanish, the pole is never hit (~1 min)",
        "profile": "hyperbolic", "profile_a": 1.0, "policy": "radial", "n": 2, "m": 3, "r0": 3.0,
        "r_in": 0.01, "r_out": 20.0, "t_max": 1e5, "levels": [5.0, 10.0],
        "pairs": [[2.0, 4.0], [2.0, 8.0], [2.0, 16.0]], "n_paths": 10000, "master_seed": 20240602,
        "checks": [
            {"type": "hitting_time_bound", "C": 5.0},
            {"type": "transience", "regime": "n2_log", "eps": 0.25, "a": 2.0, "ks": [4.0, 8.0, 16.0],
             "complete_tail": True, "expect": "transient"},
        ],
    },
    "transience-n2-log": {
        "description": "n = 2, K = -1.5/(r^2 log r): return to e^3 after e^9 (~1 min)",
        "profile": "log_family", "profile_c": 1.5, "profile_R": 3.0, "policy": "radial", "n": 2, "m": 3,
        "r0": E ** 3, "r_in": E ** 2, "r_out": E ** 12, "t_max": 1e300, "dt_max": 1e300, "sample_t0": 1.0,
        "pairs": [[E ** 3, E ** 5], [E ** 3, E ** 7], [E ** 3, E ** 9]],
        "functionals": [["inv_log_pow", 0.25, 1.2e3, E ** 12]], "n_paths": 10000, "master_seed": 20240603,
        "checks": [
            {"type": "return_probability", "regime": "n2_log_corrected", "eps": 0.25, "a": E ** 3, "k": E ** 9,
             "complete_tail": True},
            {"type": "transience", "regime": "n2_log_corrected", "eps": 0.25, "a": E ** 3,
             "ks": [E ** 5, E ** 7, E ** 9], "complete_tail": True, "expect": "transient"},
            {"type": "drift_sign", "functional": "inv_log_pow"},
        ],
    },
    "angle-convergence-hyperbolic-n2": {
        "description": "n = 2 on hyperbolic space: exit angles concentrate as r0 grows (~20 s)",
        "profile": "hyperbolic", "profile_a": 1.0, "policy": "radial", "n": 2, "m": 3,
        "r_out": 50.0, "t_max": 1e4, "theta0": [0.0, 0.0, 1.0], "n_paths": 2000, "master_seed": 20240604,
        "variants": [{"label": "r0=5", "r0": 5.0}, {"label": "r0=10", "r0": 10.0}, {"label": "r0=20", "r0": 20.0}],
        "checks": [
            {"type": "theta_convergence", "variant": "r0=5", "window": 10.0, "expect": "theta_converges"},
            {"type": "shrinking_exit", "variants": ["r0=5", "r0=10", "r0=20"], "delta": 0.2},
        ],
    },
    "angle-threshold-n3": {
        "description": "n = 3 at the sharp threshold: c = 1.0 converges, c = 0.4 does not; "
                       "horizon log-radius 40, doubled to 80 (~8 min)",
        "profile": "log_family", "profile_R": 3.0, "policy": "radial", "n": 3, "m": 4, "r0": 100.0,
        "t_max": 1e300, "dt_max": 1e300, "sample_t0": 1.0, "n_paths": 2000, "master_seed": 20240605,
        "variants": [
            {"label": "c=1.0", "profile_c": 1.0, "r_out": E ** 40,
             "functionals": [["neg_inv_log_pow", 0.5, 200.0, E ** 40]]},
            {"label": "c=0.4", "profile_c": 0.4, "r_out": E ** 40,
             "functionals": [["logloglog", 0.0, 200.0, E ** 40]]},
            {"label": "c=1.0,doubled", "profile_c": 1.0, "r_out": E ** 80},
            {"label": "c=0.4,doubled", "profile_c": 0.4, "r_out": E ** 80},
        ],
        "checks": [
            {"type": "theta_convergence", "variant": "c=1.0", "expect": "theta_converges", **_TWIN_TOL},
            {"type": "theta_convergence", "variant": "c=0.4", "expect": "theta_diverges", **_TWIN_TOL},
            {"type": "theta_convergence", "variant": "c=1.0,doubled", "expect": "theta_converges", **_TWIN_TOL},
            {"type": "theta_convergence", "variant": "c=0.4,doubled", "expect": "theta_diverges", **_TWIN_TOL},
            {"type": "drift_sign", "variant": "c=1.0", "functional": "neg_inv_log_pow"},
            {"type": "drift_sign", "variant": "c=0.4", "functional": "logloglog"},
        ],
    },
    "angle-nonconvergence-euclidean-n2": {
        "description": "flat space, n = 2: the direction keeps wandering (~1 min)",
        "profile": "euclidean", "policy": "radial", "n": 2, "m": 3, "r0": 1.0, "r_out": 20.0,
        "t_max": 1e300, "dt_max": 1e300, "max_steps": 200000, "n_paths": 2000, "master_seed": 20240606,
        "checks": [{"type": "theta_convergence", "window": 10.0, "expect": "theta_diverges"}],
    },
    "minimal-surface-helicoid": {
        "description": "Brownian motion on the helicoid: ambient martingale, wandering direction (~1 min)",
        "policy": "embedded_surface", "chart": "helicoid", "n": 2, "m": 3, "r0": 5.0, "r_out": 1000.0,
        "t_max": 1e300, "dt_max": 1e300, "n_paths": 1000, "master_seed": 20240607,
        "variants": [
            {"label": "exit"},
            {"label": "fixed-step", "eta": 0.0, "dt_max": 1e-3, "max_steps": 10000, "t_max": 1e9,
             "r_out": 1e12},
        ],
        "checks": [
            {"type": "theta_convergence", "variant": "exit", "window": 10.0, "expect": "theta_diverges"},
            {"type": "ambient_martingale", "variant": "fixed-step"},
        ],
    },
    "minimal-surface-catenoid": {
        "description": "Brownian motion on the catenoid from the neck (~1 min)",
        "policy": "embedded_surface", "chart": "catenoid", "n": 2, "m": 3, "r0": 1.0, "r_out": 1000.0,
        "t_max": 1e300, "dt_max": 1e300, "n_paths": 1000, "master_seed": 20240608,
        "variants": [
            {"label": "exit"},
            {"label": "fixed-step", "eta": 0.0, "dt_max": 1e-3, "max_steps": 10000, "t_max": 1e9,
             "r_out": 1e12},
        ],
        "checks": [
            {"type": "theta_convergence", "variant": "exit", "window": 10.0, "expect": "theta_diverges"},
            {"type": "ambient_martingale", "variant": "fixed-step"},
        ],
    },
    "subriemannian-h3": {
        "description": "rank-2 bracket-generating distribution on hyperbolic 3-space (~1.5 min)",
        "profile": "hyperbolic", "profile_a": 1.0, "policy": "distribution", "twist": 1.0, "n": 2, "m": 3,
        "r_out": 25.0, "t_max": 1e4, "n_paths": 2000, "master_seed": 20240609,
        "variants": [
            {"label": "returns", "r0": 1.0, "pairs": [[2.0, 5.0], [2.0, 10.0], [2.0, 20.0]], "n_paths": 10000},
            {"label": "grid-0", "r0": 2.0, "theta0": _polar(0, "yz")},
            {"label": "grid-75", "r0": 2.0, "theta0": _polar(75, "yz")},
            {"label": "grid-105", "r0": 2.0, "theta0": _polar(105, "yz")},
            {"label": "grid-180", "r0": 2.0, "theta0": _polar(180, "yz")},
        ],
        "checks": [
            {"type": "transience", "variant": "returns", "regime": "n2_log", "eps": 0.25, "a": 2.0,
             "ks": [5.0, 10.0, 20.0], "expect": "transient"},
            {"type": "return_upper", "variant": "returns", "a": 2.0, "k": 20.0, "limit": 0.02},
            {"type": "exit_grid", "variants": ["grid-0", "grid-75", "grid-105", "grid-180"],
             "cap_center": [0.0, 0.0, 1.0], "cap_radius": math.pi / 2, "window": 10.0},
        ],
    },
    "harmonic-evidence": {
        "description": "exit distribution on hyperbolic space as a bounded harmonic function (~4 min)",
        "profile": "hyperbolic", "profile_a": 1.0, "policy": "radial", "n": 2, "m": 3, "r0": 2.0,
        "r_out": 20.0, "t_max": 1e4, "n_paths": 2000, "master_seed": 20240610,
        "variants": [
            {"label": "polar-0", "theta0": _polar(0, "xz")},
            {"label": "polar-75", "theta0": _polar(75, "xz")},
            {"label": "polar-90", "theta0": _polar(90, "xz")},
            {"label": "polar-105", "theta0": _polar(105, "xz")},
            {"label": "polar-180", "theta0": _polar(180, "xz")},
        ],
        "checks": [
            {"type": "exit_grid", "variants": ["polar-0", "polar-75", "polar-105", "polar-180"],
             "cap_center": [0.0, 0.0, 1.0], "cap_radius": math.pi / 2, "window": 10.0},
            {"type": "exit_distribution", "variant": "polar-90", "cap_center": [0.0, 0.0, 1.0],
             "cap_radius": math.pi / 2, "expect_value": 0.5},
            {"type": "exit_distribution", "variant": "polar-0", "cap_center": [0.0, 0.0, 1.0],
             "cap_radius": math.pi, "expect_value": 1.0},
        ],
    },
}


def list_presets() -> dict[str, str]:
    return {name: p["description"] for name, p in PRESETS.items()}


# ---------------------------------------------------------------------------
# parsing, validation and hashing

def parse_config_text(text: str) -> dict:
    cfg: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            cfg[key] = json.loads(value)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {lineno}: value of {key!r} is not a JSON literal ({exc.msg})") from None
    return cfg


def _strip_comment(line: str) -> str:
    in_str = False
    for i, ch in enumerate(line):
        if ch == '"' and (i == 0 or line[i - 1] != "\\"):
            in_str = not in_str
        elif ch == "#" and not in_str:
            return line[:i]
    return line


def load_config(path: str) -> dict:
    with open(path) as fh:
        return parse_config_text(fh.read())


def _coerce(key: str, value, typ: str, errors: list):
    if value is None:
        if typ.endswith("|None"):
            return None
        errors.append(f"{key}: must not be null")
        return None
    base = typ.split("|")[0]
    if base == "int":
        if isinstance(value, bool) or not isinstance(value, (int, float)) or float(value) != int(value):
            errors.append(f"{key}: expected an integer")
            return value
        return int(value)
    if base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append(f"{key}: expected a number")
            return value
        return float(value)
    if base == "str":
        if not isinstance(value, str):
            errors.append(f"{key}: expected a string")
        return value
    if base == "bool":
        if not isinstance(value, bool):
            errors.append(f"{key}: expected true or false")
        return value
    if base == "list":
        if not isinstance(value, list):
            errors.append(f"{key}: expected a list")
        return _normalize_numbers(value)
    return value


def _normalize_numbers(obj):
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return obj
    if isinstance(obj, (int, float)):
        return float(obj)
    if isinstance(obj, list):
        return [_normalize_numbers(x) for x in obj]
    if isinstance(obj, dict):
        return {k: _normalize_numbers(v) for k, v in obj.items()}
    return obj


def _merge_preset(raw: dict) -> dict:
    raw = dict(raw)
    name = raw.pop("preset", None)
    if name is None:
        return raw
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(PRESETS)}")
    base = copy.deepcopy(PRESETS[name])
    base.pop("description")
    base["experiment"] = name
    base.update(raw)
    return base


def validate(config: dict) -> dict:
    """Return the normalised configuration or raise ConfigError listing every problem."""
    raw = _merge_preset(config)
    errors: list[str] = []
    out: dict = {}
    for key in raw:
        if key not in SCHEMA and key not in RUNTIME_KEYS:
            errors.append(f"{key}: unknown key")
    for key, (typ, default, _) in SCHEMA.items():
        out[key] = _coerce(key, raw.get(key, copy.deepcopy(default)), typ, errors)
    for key, default in RUNTIME_KEYS.items():
        out[key] = raw.get(key, default)
    if errors:
        raise ConfigError("; ".join(errors))
    variants = out["variants"] or [{"label": "main"}]
    labels = []
    for v in variants:
        if not isinstance(v, dict) or "label" not in v:
            raise ConfigError("variants: each variant needs a label")
        labels.append(v["label"])
        bad = [k for k in v if k != "label" and (k not in SCHEMA or k in ("variants", "checks"))]
        if bad:
            raise ConfigError(f"variants[{v['label']}]: cannot override {bad}")
    if len(set(labels)) != len(labels):
        raise ConfigError("variants: labels must be unique")
    for v in variants:
        _check_variant(resolve_variant(out, v["label"]))
    for chk in out["checks"]:
        if not isinstance(chk, dict) or "type" not in chk:
            raise ConfigError("checks: each check needs a type")
        for key in ("variant",):
            if key in chk and chk[key] not in labels:
                raise ConfigError(f"checks: unknown variant {chk[key]!r}")
        for lab in chk.get("variants", []):
            if lab not in labels:
                raise ConfigError(f"checks: unknown variant {lab!r}")
    return out


def variant_labels(cfg: dict) -> list[str]:
    return [v["label"] for v in cfg["variants"]] or ["main"]


def resolve_variant(cfg: dict, label: str) -> dict:
    """Flat configuration of one variant (base keys overridden by the variant's)."""
    flat = {k: v for k, v in cfg.items() if k not in ("variants", "checks")}
    for v in cfg["variants"]:
        if v["label"] == label:
            errors: list[str] = []
            for k, val in v.items():
                if k != "label":
                    flat[k] = _coerce(k, val, SCHEMA[k][0], errors)
            if errors:
                raise ConfigError(f"variants[{label}]: " + "; ".join(errors))
            break
    flat["label"] = label
    return flat


def _check_variant(v: dict) -> None:
    where = f"[{v['label']}] " if v["label"] != "main" else ""
    try:
        build_policy(v)
        build_profile(v)
        build_path_config(v)
    except (ConfigError, ProfileError) as exc:
        raise ConfigError(f"{where}{exc}") from None
    for key in ("r0", "r_out", "t_max", "dt_max", "rel_tol", "sample_t0"):
        if not v[key] > 0:
            raise ConfigError(f"{where}{key}: must be positive")
    if not v["n_paths"] >= 1:
        raise ConfigError(f"{where}n_paths: must be at least 1")
    if not (0 < v["confidence"] < 1):
        raise ConfigError(f"{where}confidence: must lie in (0, 1)")


def canonical_form(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if k not in RUNTIME_KEYS}


def canonical_json(cfg: dict) -> str:
    return json.dumps(_normalize_numbers(canonical_form(cfg)), sort_keys=True, separators=(",", ":"),
                      allow_nan=False)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


# ---------------------------------------------------------------------------
# builders

def build_profile(v: dict) -> CurvatureProfile | None:
    if v["policy"] == "embedded_surface":
        return None
    kind = v["profile"]
    if kind == "custom":
        if v["profile_table_r"] is None or v["profile_table_K"] is None:
            raise ConfigError("profile_table_r and profile_table_K are required for a custom profile")
        return CurvatureProfile("custom", table_r=tuple(v["profile_table_r"]), table_K=tuple(v["profile_table_K"]))
    return CurvatureProfile(kind, a=v["profile_a"], c=v["profile_c"], R=v["profile_R"])


def build_policy(v: dict) -> FramePolicy:
    kind = v["policy"]
    if kind == "embedded_surface":
        return FramePolicy(kind, v["n"], v["m"], chart=SurfaceChart(v["chart"]))
    if kind == "custom_distribution":
        if not v["fields"]:
            raise ConfigError("fields: required for custom_distribution")
        fields = tuple(DistributionField(str(f[0]), tuple(str(t) for t in f[1])) for f in v["fields"])
        from .policies import distribution_policy
        return distribution_policy(fields, v["n"], v["m"])
    return FramePolicy(kind, v["n"], v["m"], phi0=v["phi0"], rate=v["rate"], twist=v["twist"])


def build_path_config(v: dict) -> PathConfig:
    funcs = tuple(Functional(str(f[0]), float(f[1]), float(f[2]), math.inf if f[3] is None else float(f[3]))
                  for f in v["functionals"])
    pairs = tuple((float(a), float(k)) for a, k in v["pairs"])
    return PathConfig(r0=v["r0"], r_out=v["r_out"], t_max=v["t_max"], dt_max=v["dt_max"],
                      theta0=None if v["theta0"] is None else tuple(v["theta0"]), r_in=v["r_in"], eta=v["eta"],
                      max_retries=v["max_retries"], max_steps=v["max_steps"], levels=tuple(v["levels"]),
                      pairs=pairs, sample_t0=v["sample_t0"], sample_ratio=v["sample_ratio"],
                      drift_scale=v["drift_scale"], cos0=v["cos0"], functionals=funcs)


def build_warp(v: dict) -> WarpFunction | None:
    profile = build_profile(v)
    if profile is None:
        return None
    r_max = v["warp_r_max"] or 2.0 * v["r_out"]
    return solve_jacobi(profile, r_max, v["rel_tol"])


# ---------------------------------------------------------------------------
# running

class PathError(MlabError, RuntimeError):
    """A module error raised while simulating one path."""

    def __init__(self, label: str, index: int, cause: Exception):
        super().__init__(f"variant {label!r}, path {index}: {type(cause).__name__}: {cause}")
        self.label = label
        self.index = index
        self.cause = cause

    def to_dict(self) -> dict:
        d = {"error": type(self.cause).__name__, "message": str(self.cause), "variant": self.label,
             "path_index": self.index}
        state = getattr(self.cause, "state", None)
        if state is not None:
            d["state"] = {"t": state.t, "r": state.r, "cos_phi": state.cos_phi, "z": state.z_accum}
        diag = getattr(self.cause, "diagnostics", None)
        if diag:
            d["diagnostics"] = diag
        return d


def run_ensemble(pcfg: PathConfig, warp, policy: FramePolicy, n_paths: int, master_seed: int,
                 threads: int = 1, levels=(), pairs=(), functionals=(), tail_span: float = 100.0,
                 dump_dir: str | None = None, label: str = "main", confidence: float = 0.99,
                 censor_cap: float = 0.2, chunk: int = 64) -> EnsembleStats:
    """Simulate ``n_paths`` independent paths and reduce them to :class:`EnsembleStats`.

    Workers take disjoint index ranges; summaries are ordered by path index,
    so the result does not depend on ``threads``.
    """
    levels = np.asarray(levels, dtype=float)
    theta0 = pcfg.theta_start(policy.m)

    def work(lo: int, hi: int):
        out = []
        for i in range(lo, hi):
            try:
                rec = simulate_path(pcfg, warp, policy, make_stream(master_seed, i))
            except MlabError as exc:
                raise PathError(label, i, exc) from exc
            if dump_dir is not None:
                dump_path_csv(rec, dump_dir)
            out.append(summarize(rec, levels, tail_span))
        return out

    ranges = [(lo, min(lo + chunk, n_paths)) for lo in range(0, n_paths, chunk)]
    stats = EnsembleStats(levels, np.asarray(pairs, dtype=float).reshape(-1, 2), theta0, tuple(functionals),
                          [], confidence, censor_cap)
    if threads <= 1:
        parts = [work(lo, hi) for lo, hi in ranges]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda r: work(*r), ranges))
    stats.summaries = sorted((s for part in parts for s in part), key=lambda s: s.index)
    return stats


@dataclass
class ExperimentReport:
    experiment: str
    config_hash: str
    master_seed: int
    config: dict
    ensembles: dict = field(default_factory=dict)
    verdicts: list = field(default_factory=list)
    outcomes: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    version: str = __version__

    @property
    def passed(self) -> bool:
        return all(self.outcomes)

    def ensemble_metrics(self) -> dict:
        out = {}
        for label, st in self.ensembles.items():
            reasons = st.stop_reasons
            out[label] = {"n_paths": st.n_paths, "censored_fraction": st.censored_fraction,
                          "total_steps": st.total_steps,
                          "stop_reasons": {r: int(np.sum(reasons == r)) for r in sorted(set(reasons.tolist()))},
                          "levels": st.level_table(), "returns": st.return_table()}
        return out

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {"experiment": self.experiment,
             "verdict": "pass" if self.passed else "fail",
             "confidence": self.config.get("confidence", 0.99),
             "censored_fraction": max([st.censored_fraction for st in self.ensembles.values()], default=0.0),
             "config_hash": self.config_hash, "master_seed": self.master_seed, "software_version": self.version,
             "metrics": self.ensemble_metrics(),
             "checks": [dict(v.to_dict(), outcome="pass" if ok else "fail")
                        for v, ok in zip(self.verdicts, self.outcomes)]}
        if include_timing:
            d["timing"] = self.timing
        return _json_safe(d)

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), sort_keys=True, indent=2, allow_nan=False)

    def write(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            fh.write(self.to_json())
            fh.write("\n")
        with open(os.path.join(out_dir, "stats.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "table", "a_or_level", "k", "count", "value", "se", "ci_lo", "ci_hi"])
            for label, st in self.ensembles.items():
                for row in st.level_table():
                    w.writerow([label, "hitting_time", row["level"], "", row["count"], row["mean"], row["se"],
                                row["ci_lo"], row["ci_hi"]])
                for row in st.return_table():
                    w.writerow([label, "return_fraction", row["a"], row["k"], row["armed"], row["fraction"], "",
                                row["ci_lo"], row["ci_hi"]])


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(x) for x in obj]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    return obj


def run(config: dict, threads: int | None = None, out_dir: str | None = None,
        dump_paths: bool | None = None, write: bool = True) -> ExperimentReport:
    """Validate, simulate every variant, apply the detector suite, write reports."""
    cfg = validate(config)
    threads = int(threads if threads is not None else cfg["threads"])
    out_dir = out_dir if out_dir is not None else cfg["out"]
    dump = bool(dump_paths if dump_paths is not None else cfg["dump_paths"])
    report = ExperimentReport(cfg["experiment"], config_hash(cfg), cfg["master_seed"], canonical_form(cfg))
    t_start = time.perf_counter()
    for label in variant_labels(cfg):
        v = resolve_variant(cfg, label)
        t0 = time.perf_counter()
        warp = build_warp(v)
        policy = build_policy(v)
        pcfg = build_path_config(v)
        dump_dir = None
        if dump:
            dump_dir = os.path.join(out_dir, "paths", label.replace("/", "_"))
            os.makedirs(dump_dir, exist_ok=True)
        levels = list(pcfg.levels) + ([pcfg.r_out] if pcfg.r_out not in pcfg.levels else [])
        report.ensembles[label] = run_ensemble(pcfg, warp, policy, v["n_paths"], v["master_seed"], threads,
                                               levels, pcfg.pairs, pcfg.functionals, v["tail_span"], dump_dir,
                                               label, v["confidence"], v["censor_cap"])
        report.timing[label] = time.perf_counter() - t0
    for chk in cfg["checks"]:
        verdict, ok = evaluate_check(chk, cfg, report.ensembles)
        report.verdicts.append(verdict)
        report.outcomes.append(ok)
    report.timing["total"] = time.perf_counter() - t_start
    report.timing["threads"] = threads
    if write:
        report.write(out_dir)
    return report


def tail_return_probability(v: dict, chk: dict) -> dict:
    """Probability of ever reaching ``a`` from the outer barrier (radial policy only)."""
    if v["policy"] != "radial" or v["drift_scale"] != 1.0:
        raise ConfigError("complete_tail needs the radial policy with drift_scale 1")
    profile = build_profile(v)
    warp = solve_jacobi(profile, 1e300 if not profile.closed_form() else v["r_out"], v["rel_tol"])
    a_values = [chk["a"]] if "a" in chk else []
    return {float(a): radial_return_probability(warp, v["n"], a, v["r_out"]) for a in a_values}


def _tolerances(chk: dict, n: int) -> AngularTolerances:
    base = AngularTolerances.default(n)
    return AngularTolerances(chk.get("z_plateau_tol", base.z_plateau_tol), chk.get("osc_tol", base.osc_tol),
                             chk.get("osc_floor", base.osc_floor),
                             chk.get("z_growth_floor", 10 * chk.get("z_plateau_tol", base.z_plateau_tol)))


def evaluate_check(chk: dict, cfg: dict, ensembles: dict) -> tuple[Verdict, bool]:
    """Apply one detector; the outcome is a pass when the verdict holds (and
    matches ``expect`` if given) or is inconclusive with censoring within the cap."""
    typ = chk["type"]
    label = chk.get("variant", variant_labels(cfg)[0])
    v = resolve_variant(cfg, label)
    st = ensembles.get(label)
    window = chk.get("window", 2.0)
    tail = tail_return_probability(v, chk) if chk.get("complete_tail") else None
    if typ == "hitting_time_bound":
        verdict = hitting_time_bound_check(st, v["n"], v["r0"], chk["C"], chk.get("min_paths", 1000))
    elif typ == "return_probability":
        verdict = return_probability_check(st, chk["regime"], chk["a"], chk["k"], chk.get("eps"), tail)
    elif typ == "transience":
        verdict = transience_verdict(st, chk["regime"], chk["a"], chk["ks"], chk.get("eps"), tail)
    elif typ == "return_upper":
        row = next(r for r in st.return_table(tail) if np.isclose(r["a"], chk["a"]) and np.isclose(r["k"], chk["k"]))
        ok = row["ci_hi"] < chk["limit"]
        verdict = Verdict("return_upper", "transient" if ok else "bound_violated", bool(ok), st.confidence,
                          st.censored_fraction, {**row, "limit": chk["limit"]})
    elif typ == "theta_convergence":
        verdict = theta_convergence_classify(st, window, _tolerances(chk, v["n"]), v["n"])
    elif typ == "drift_sign":
        verdict = drift_sign_check(st, chk["functional"])
    elif typ == "ambient_martingale":
        verdict = ambient_martingale_check(st)
    elif typ == "shrinking_exit":
        labels = chk["variants"]
        r0s = [resolve_variant(cfg, lab)["r0"] for lab in labels]
        verdict = shrinking_exit_check([ensembles[lab] for lab in labels], r0s, chk["delta"], window=window,
                                       tolerances=_tolerances(chk, v["n"]))
    elif typ in ("exit_distribution", "exit_grid"):
        cap = SphericalCap(tuple(chk["cap_center"]), chk["cap_radius"], chk.get("complement", False))
        labels = chk["variants"] if typ == "exit_grid" else [label]
        ests = [exit_distribution(ensembles[lab], cap, window, _tolerances(chk, v["n"])) for lab in labels]
        if typ == "exit_grid":
            sep = exit_grid_nonconstant(ests)
            diag = {"estimates": {lab: e.diagnostics for lab, e in zip(labels, ests)}, **sep}
            verdict = Verdict("exit_grid", "estimate", sep["all_separated"], st.confidence,
                              max(ensembles[lab].censored_fraction for lab in labels), diag)
        else:
            verdict = ests[0]
            if "expect_value" in chk:
                d = verdict.diagnostics
                verdict.passed = bool(d["ci_lo"] <= chk["expect_value"] <= d["ci_hi"])
                d["expect_value"] = chk["expect_value"]
    else:
        raise ConfigError(f"unknown check type {typ!r}")
    verdict.diagnostics["variant"] = label if typ not in ("shrinking_exit", "exit_grid") else chk["variants"]
    return verdict, check_outcome(verdict, chk.get("expect"), st.censor_cap)


def check_outcome(verdict: Verdict, expect: str | None, censor_cap: float) -> bool:
    """Pass when the verdict holds (and has the expected kind), or when it is
    inconclusive with censoring within the cap."""
    if verdict.kind == "inconclusive":
        return bool(verdict.censored_fraction <= censor_cap)
    return bool(verdict.passed and (expect is None or verdict.kind == expect))

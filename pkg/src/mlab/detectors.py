"""Statistical verdicts from ensembles of simulated paths.

Paths are reduced to compact :class:`PathSummary` objects as soon as they
finish; :class:`EnsembleStats` stacks the summaries ordered by path index, so
merging partial ensembles is associative and commutative.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from .errors import ConfigError, LogicError
from .paths import FUNCTIONALS, Functional, PathRecord

VERDICT_KINDS = ("transient", "recurrent_evidence", "theta_converges", "theta_diverges", "inconclusive",
                 "bound_holds", "bound_violated", "estimate")

DEFAULT_CONFIDENCE = 0.99
DEFAULT_CENSOR_CAP = 0.2

# sign each functional's drift must have: -1 supermartingale, +1 submartingale
EXPECTED_SIGN = {"inv_r": -1, "inv_log_pow": -1, "neg_inv_log_pow": 1, "logloglog": 1}


@dataclass
class Verdict:
    check: str
    kind: str
    passed: bool
    confidence: float = DEFAULT_CONFIDENCE
    censored_fraction: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in VERDICT_KINDS:
            raise ValueError(f"unknown verdict kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"check": self.check, "verdict": self.kind, "passed": self.passed,
                "confidence": self.confidence, "censored_fraction": self.censored_fraction,
                "metrics": self.diagnostics}


def clopper_pearson(successes: int, trials: int, confidence: float = DEFAULT_CONFIDENCE):
    """Exact two-sided binomial interval."""
    if trials <= 0:
        return 0.0, 1.0
    alpha = 1 - confidence
    lo = 0.0 if successes == 0 else float(sps.beta.ppf(alpha / 2, successes, trials - successes + 1))
    hi = 1.0 if successes == trials else float(sps.beta.ppf(1 - alpha / 2, successes + 1, trials - successes))
    return lo, hi


def t_interval(x: np.ndarray, confidence: float = DEFAULT_CONFIDENCE):
    """Mean, standard error and two-sided Student-t interval."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 2:
        return float(x.mean()) if n else math.nan, math.nan, (math.nan, math.nan)
    mean = float(x.mean())
    se = float(x.std(ddof=1) / math.sqrt(n))
    q = float(sps.t.ppf(0.5 + confidence / 2, n - 1))
    return mean, se, (mean - q * se, mean + q * se)


def geodesic_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Great-circle distance on the unit sphere (rows broadcast)."""
    dot = np.clip(np.sum(np.asarray(a) * np.asarray(b), axis=-1), -1.0, 1.0)
    cross = np.linalg.norm(np.asarray(a) - np.asarray(b), axis=-1)
    # 2 asin(|a-b|/2) is accurate for small angles where arccos is not
    return np.where(dot > 0, 2 * np.arcsin(np.clip(cross / 2, 0, 1)), np.arccos(dot))


def spherical_diameter(points: np.ndarray) -> float:
    if len(points) < 2:
        return 0.0
    P = np.asarray(points)
    d = geodesic_distance(P[:, None, :], P[None, :, :])
    return float(d.max())


# ---------------------------------------------------------------------------
# reduction

@dataclass
class PathSummary:
    index: int
    stop_reason: str
    failure: str
    n_steps: int
    hit_times: np.ndarray
    pair_arm: np.ndarray
    pair_ret: np.ndarray
    final_t: float
    final_r: float
    final_z: float
    exit_theta: np.ndarray
    tail: np.ndarray
    functional_sums: np.ndarray
    ambient_sums: np.ndarray


def summarize(record: PathRecord, levels, tail_span: float = 100.0) -> PathSummary:
    """Keep what the detectors need: hit times, pair events, and samples in
    ``[T / tail_span, T]``."""
    hits = np.array([record.hitting_times.get(float(lv), math.nan) for lv in levels], dtype=float)
    T = record.final_state.t
    s = record.samples
    tail = s[s[:, 0] >= T / tail_span]
    if len(tail) < len(s):
        # keep one sample before the window so Z can be interpolated at its left edge
        tail = s[len(s) - len(tail) - 1:]
    pt = record.pair_times
    return PathSummary(record.path_index, record.stop_reason, record.failure, record.n_steps, hits,
                       pt[:, 2].copy() if pt.size else np.zeros(0), pt[:, 3].copy() if pt.size else np.zeros(0),
                       T, record.final_state.r, record.final_state.z_accum,
                       np.asarray(record.final_state.theta, dtype=float), tail.copy(),
                       record.functional_sums.copy(), record.ambient_sums.copy())


@dataclass
class EnsembleStats:
    levels: np.ndarray
    pairs: np.ndarray
    theta0: np.ndarray
    functionals: tuple = ()
    summaries: list = field(default_factory=list)
    confidence: float = DEFAULT_CONFIDENCE
    censor_cap: float = DEFAULT_CENSOR_CAP

    @classmethod
    def from_records(cls, records, levels, pairs=(), theta0=None, functionals=(), tail_span=100.0, **kw):
        records = list(records)
        if theta0 is None:
            theta0 = records[0].samples[0, 4:] if records else np.zeros(0)
        st = cls(np.asarray(levels, dtype=float), np.asarray(pairs, dtype=float).reshape(-1, 2),
                 np.asarray(theta0, dtype=float), tuple(functionals), **kw)
        st.summaries = sorted((summarize(r, st.levels, tail_span) for r in records), key=lambda s: s.index)
        return st

    def add(self, summary: PathSummary) -> None:
        self.summaries.append(summary)
        self.summaries.sort(key=lambda s: s.index)

    def merge(self, other: "EnsembleStats") -> "EnsembleStats":
        if not (np.array_equal(self.levels, other.levels) and np.array_equal(self.pairs, other.pairs)):
            raise ConfigError("cannot merge ensembles with different monitoring")
        out = EnsembleStats(self.levels, self.pairs, self.theta0, self.functionals, [], self.confidence,
                            self.censor_cap)
        out.summaries = sorted(self.summaries + other.summaries, key=lambda s: s.index)
        return out

    # -- basic arrays
    @property
    def n_paths(self) -> int:
        return len(self.summaries)

    @property
    def stop_reasons(self) -> np.ndarray:
        return np.array([s.stop_reason for s in self.summaries])

    @property
    def censored_fraction(self) -> float:
        if not self.summaries:
            return 0.0
        return float(np.mean([s.stop_reason in ("horizon", "step_failure") for s in self.summaries]))

    @property
    def hit_times(self) -> np.ndarray:
        return np.array([s.hit_times for s in self.summaries]).reshape(self.n_paths, self.levels.size)

    @property
    def exit_thetas(self) -> np.ndarray:
        return np.array([s.exit_theta for s in self.summaries])

    @property
    def total_steps(self) -> int:
        return int(sum(s.n_steps for s in self.summaries))

    # -- per-level and per-pair tables
    def level_table(self) -> list[dict]:
        H = self.hit_times
        rows = []
        for j, lv in enumerate(self.levels):
            x = H[:, j][np.isfinite(H[:, j])]
            mean, se, (lo, hi) = t_interval(x, self.confidence)
            rows.append({"level": float(lv), "count": int(x.size), "mean": mean, "se": se, "ci_lo": lo, "ci_hi": hi})
        return rows

    def return_table(self, tail_return: dict | None = None) -> list[dict]:
        """Return fractions among armed paths.

        ``tail_return`` maps ``a`` to the probability of ever reaching ``a``
        from the outer barrier; when given, paths that left through the barrier
        count with that probability, so the fraction estimates the probability
        of ever returning rather than returning before the barrier.
        """
        rows = []
        outer = self.stop_reasons == "hit_outer" if self.summaries else np.zeros(0, dtype=bool)
        for j, (a, k) in enumerate(self.pairs):
            arm = np.array([s.pair_arm[j] for s in self.summaries])
            ret = np.array([s.pair_ret[j] for s in self.summaries])
            armed = np.isfinite(arm)
            returned = np.isfinite(ret) & armed
            x = int(returned.sum())
            N = int(armed.sum())
            lo, hi = clopper_pearson(x, N, self.confidence)
            row = {"a": float(a), "k": float(k), "armed": N, "returned": x,
                   "fraction": x / N if N else math.nan, "ci_lo": lo, "ci_hi": hi}
            h = None if tail_return is None else tail_return.get(float(a))
            if h is not None and N:
                escaped = int(np.sum(armed & ~returned & outer))
                row.update({"before_barrier": row["fraction"], "escaped": escaped, "tail_return": h,
                            "fraction": (x + escaped * h) / N, "ci_lo": lo + (1 - lo) * h,
                            "ci_hi": hi + (1 - hi) * h})
            rows.append(row)
        return rows

    # -- angular tails
    def tail_metrics(self, window: float):
        """Per path: Z(T) - Z(T/window), tail theta-diameter, number of tail samples."""
        dz = np.empty(self.n_paths)
        diam = np.empty(self.n_paths)
        count = np.empty(self.n_paths, dtype=int)
        for i, s in enumerate(self.summaries):
            tail = s.tail
            T = s.final_t
            t0 = T / window
            if tail[0, 0] > t0:
                dz[i], diam[i], count[i] = math.nan, math.nan, 0
                continue
            z0 = float(np.interp(t0, tail[:, 0], tail[:, 3]))
            sel = tail[:, 0] >= t0
            dz[i] = s.final_z - z0
            diam[i] = spherical_diameter(tail[sel, 4:])
            count[i] = int(sel.sum())
        return dz, diam, count

    def z_tail(self, window: float = 2.0) -> np.ndarray:
        return self.tail_metrics(window)[0]

    def oscillation(self, window: float = 2.0) -> np.ndarray:
        return self.tail_metrics(window)[1]

    # -- functionals
    def functional_index(self, functional) -> int:
        for j, f in enumerate(self.functionals):
            if f == functional or (isinstance(functional, str) and f.kind == functional):
                return j
        raise ConfigError(f"functional {functional!r} was not tallied during simulation")


# ---------------------------------------------------------------------------
# checks

def _censor_guard(stats: EnsembleStats, check: str, **diag):
    cf = stats.censored_fraction
    if cf > stats.censor_cap:
        return Verdict(check, "inconclusive", True, stats.confidence, cf,
                       {"reason": f"censored fraction {cf:.3f} exceeds cap {stats.censor_cap}", **diag})
    return None


def hitting_time_bound_check(stats: EnsembleStats, n: int, r0: float, C: float, min_paths: int = 1000) -> Verdict:
    """Mean first passage to ``{r = C}`` against ``(C^2 - r0^2)/n`` (plus 3 SE)."""
    name = "hitting_time_bound"
    bound = (C * C - r0 * r0) / n
    j = np.flatnonzero(np.isclose(stats.levels, C))
    if j.size == 0:
        raise ConfigError(f"level {C} was not monitored")
    x = stats.hit_times[:, j[0]]
    x = x[np.isfinite(x)]
    if x.size < min_paths:
        return Verdict(name, "inconclusive", True, stats.confidence, stats.censored_fraction,
                       {"reason": f"only {x.size} uncensored passages", "bound": bound})
    guard = _censor_guard(stats, name, bound=bound)
    if guard:
        return guard
    mean, se, (lo, hi) = t_interval(x, stats.confidence)
    ok = mean <= bound + 3 * se
    return Verdict(name, "bound_holds" if ok else "bound_violated", bool(ok), stats.confidence,
                   stats.censored_fraction,
                   {"mean": mean, "se": se, "ci": [lo, hi], "bound": bound, "paths": int(x.size)})


def regime_bound(regime: str, a: float, k: float, eps: float | None = None) -> float:
    """Upper bound on the return probability: ``a/k`` for ``n >= 3``;
    ``(log a/log k)^(1+eps)`` (``n2_log``) or ``(log a/log k)^eps``
    (``n2_log_corrected``) for ``n = 2``."""
    if regime == "n_ge_3":
        return a / k
    if regime in ("n2_log", "n2_log_corrected"):
        if eps is None or eps <= 0:
            raise ConfigError(f"{regime} regime needs eps > 0")
        if a <= 1:
            raise ConfigError(f"{regime} regime needs a > 1")
        power = 1 + eps if regime == "n2_log" else eps
        return (math.log(a) / math.log(k)) ** power
    raise ConfigError(f"unknown regime {regime!r}")


def return_probability_check(stats: EnsembleStats, regime: str, a: float, k: float,
                             eps: float | None = None, tail_return: dict | None = None) -> Verdict:
    """Return fraction against the regime's bound.

    The bound holds unless the fraction exceeds the upper end of the binomial
    acceptance interval of the bound itself; ``strict`` additionally records
    whether the fraction's own upper confidence limit is below the bound.
    """
    name = "return_probability"
    if not a < k:
        raise ConfigError("return check needs a < k")
    bound = regime_bound(regime, a, k, eps)
    row = next((r for r in stats.return_table(tail_return) if np.isclose(r["a"], a) and np.isclose(r["k"], k)),
               None)
    if row is None:
        raise ConfigError(f"pair (a={a}, k={k}) was not monitored")
    if row["armed"] == 0:
        return Verdict(name, "inconclusive", True, stats.confidence, stats.censored_fraction,
                       {"reason": "no path reached k", **row, "bound": bound})
    N = row["armed"]
    limit = sps.binom.ppf(1 - (1 - stats.confidence) / 2, N, bound) / N
    ok = row["fraction"] <= limit
    return Verdict(name, "bound_holds" if ok else "bound_violated", bool(ok), stats.confidence,
                   stats.censored_fraction,
                   {**row, "bound": bound, "bound_upper": float(limit), "strict": bool(row["ci_hi"] <= bound)})


def transience_verdict(stats: EnsembleStats, regime: str, a: float, ks, eps: float | None = None,
                       tail_return: dict | None = None) -> Verdict:
    """Transient iff every bound check passes and return fractions fall as k grows."""
    name = "transience"
    ks = sorted(ks)
    if len(ks) < 3:
        raise ConfigError("transience verdict needs at least three values of k")
    checks = [return_probability_check(stats, regime, a, k, eps, tail_return) for k in ks]
    fr = [c.diagnostics.get("fraction", math.nan) for c in checks]
    diag = {"k": ks, "fractions": fr, "upper": [c.diagnostics.get("ci_hi") for c in checks],
            "bounds": [c.diagnostics.get("bound") for c in checks]}
    lows = [c.diagnostics.get("ci_lo", 0.0) for c in checks]
    if all(lo > 0.9 for lo in lows):
        return Verdict(name, "recurrent_evidence", False, stats.confidence, stats.censored_fraction, diag)
    if any(c.kind == "inconclusive" for c in checks):
        return Verdict(name, "inconclusive", True, stats.confidence, stats.censored_fraction, diag)
    if not all(c.passed for c in checks):
        return Verdict(name, "bound_violated", False, stats.confidence, stats.censored_fraction, diag)
    decreasing = all(x >= y for x, y in zip(fr, fr[1:])) and fr[0] > fr[-1]
    if not decreasing:
        return Verdict(name, "inconclusive", True, stats.confidence, stats.censored_fraction,
                       {**diag, "reason": "return fractions do not decrease in k"})
    return Verdict(name, "transient", True, stats.confidence, stats.censored_fraction, diag)


@dataclass(frozen=True)
class AngularTolerances:
    z_plateau_tol: float
    osc_tol: float = 0.05
    osc_floor: float = 0.5
    z_growth_floor: float | None = None
    min_tail_samples: int = 10
    diverge_share: float = 0.9

    @classmethod
    def default(cls, n: int) -> "AngularTolerances":
        # remaining displacement sqrt(z_tail) * (n - 1) below 0.01 rad
        tol = (0.01 / (n - 1)) ** 2
        return cls(tol, 0.05, 0.5, 10 * tol)

    @property
    def growth_floor(self) -> float:
        return self.z_growth_floor if self.z_growth_floor is not None else 10 * self.z_plateau_tol

    def to_dict(self) -> dict:
        return {"z_plateau_tol": self.z_plateau_tol, "osc_tol": self.osc_tol, "osc_floor": self.osc_floor,
                "z_growth_floor": self.growth_floor, "min_tail_samples": self.min_tail_samples,
                "diverge_share": self.diverge_share}


def theta_convergence_classify(stats: EnsembleStats, window: float = 2.0,
                               tolerances: AngularTolerances | None = None, n: int = 2) -> Verdict:
    """Dual test: Z-plateau together with a small tail diameter, or sustained
    Z growth together with a large tail diameter."""
    name = "theta_convergence"
    tol = tolerances or AngularTolerances.default(n)
    dz, diam, count = stats.tail_metrics(window)
    short = count < tol.min_tail_samples
    diag = {"window": window, "tolerances": tol.to_dict(), "short_tails": int(short.sum())}
    if short.mean() > stats.censor_cap or stats.n_paths == 0:
        return Verdict(name, "inconclusive", True, stats.confidence, stats.censored_fraction,
                       {**diag, "reason": "too few tail samples"})
    guard = _censor_guard(stats, name, **diag)
    if guard:
        return guard
    dz_ok, diam_ok = dz[~short], diam[~short]
    med_dz = float(np.median(dz_ok))
    med_diam = float(np.median(diam_ok))
    share = float(np.mean((dz_ok > tol.growth_floor) & (diam_ok > tol.osc_floor)))
    diag.update({"median_z_tail": med_dz, "median_diameter": med_diam,
                 "z_tail_quartiles": np.quantile(dz_ok, [0.25, 0.75]).tolist(),
                 "diameter_quartiles": np.quantile(diam_ok, [0.25, 0.75]).tolist(),
                 "share_divergent": share})
    if med_dz < tol.z_plateau_tol and med_diam < tol.osc_tol:
        kind = "theta_converges"
    elif share >= tol.diverge_share:
        kind = "theta_diverges"
    else:
        kind = "inconclusive"
    return Verdict(name, kind, True, stats.confidence, stats.censored_fraction, diag)


@dataclass(frozen=True)
class SphericalCap:
    """``{theta : dist(theta, center) < radius}``, or its complement."""

    center: tuple[float, ...]
    radius: float
    complement: bool = False

    def contains(self, thetas: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center, dtype=float)
        c = c / np.linalg.norm(c)
        inside = geodesic_distance(np.asarray(thetas), c) < self.radius
        if self.radius >= math.pi:
            inside = np.ones(len(thetas), dtype=bool)
        return ~inside if self.complement else inside


def _exit_sample(stats: EnsembleStats) -> np.ndarray:
    mask = stats.stop_reasons == "hit_outer"
    return stats.exit_thetas[mask]


def _require_convergent(stats: EnsembleStats, name: str, window: float, tolerances) -> None:
    if tolerances is None:
        return
    v = theta_convergence_classify(stats, window, tolerances)
    if v.kind == "theta_diverges":
        raise LogicError(f"{name} needs the convergent regime; the ensemble classifies as theta_diverges")


def shrinking_exit_check(ensembles, r0s, delta: float, theta0=None, window: float = 2.0,
                         tolerances: AngularTolerances | None = None) -> Verdict:
    """Exit angles concentrate in ``B_delta(theta0)`` as the start radius grows."""
    name = "shrinking_exit"
    order = np.argsort(r0s)
    rows = []
    for i in order:
        st = ensembles[i]
        _require_convergent(st, name, window, tolerances)
        th0 = np.asarray(theta0 if theta0 is not None else st.theta0, dtype=float)
        ex = _exit_sample(st)
        inside = int(np.sum(geodesic_distance(ex, th0 / np.linalg.norm(th0)) < delta)) if delta < math.pi else len(ex)
        lo, hi = clopper_pearson(inside, len(ex), st.confidence)
        rows.append({"r0": float(r0s[i]), "paths": len(ex), "inside": inside,
                     "fraction": inside / len(ex) if len(ex) else math.nan, "ci_lo": lo, "ci_hi": hi,
                     "censored_fraction": st.censored_fraction})
    cf = max(r["censored_fraction"] for r in rows)
    diag = {"delta": delta, "rows": rows}
    if cf > ensembles[0].censor_cap:
        return Verdict(name, "inconclusive", True, ensembles[0].confidence, cf, diag)
    # monotone up to Monte Carlo noise: a drop must stay inside the combined intervals
    monotone = all(b["ci_hi"] >= a["fraction"] for a, b in zip(rows, rows[1:]))
    last = rows[-1]
    ok = last["ci_hi"] >= 1 - delta and monotone
    diag["monotone"] = monotone
    return Verdict(name, "bound_holds" if ok else "bound_violated", bool(ok), ensembles[0].confidence, cf, diag)


def exit_distribution(stats: EnsembleStats, U: SphericalCap, window: float = 2.0,
                      tolerances: AngularTolerances | None = None) -> Verdict:
    """Estimate ``P(theta_exit in U)`` with a Clopper-Pearson interval."""
    name = "exit_distribution"
    _require_convergent(stats, name, window, tolerances)
    ex = _exit_sample(stats)
    x = int(U.contains(ex).sum()) if len(ex) else 0
    lo, hi = clopper_pearson(x, len(ex), stats.confidence)
    return Verdict(name, "estimate", True, stats.confidence, stats.censored_fraction,
                   {"estimate": x / len(ex) if len(ex) else math.nan, "ci_lo": lo, "ci_hi": hi,
                    "paths": len(ex), "inside": x})


def exit_grid_nonconstant(verdicts) -> dict:
    """Pairs of starting points whose exit estimates differ beyond both intervals."""
    pairs = []
    for i in range(len(verdicts)):
        for j in range(i + 1, len(verdicts)):
            a, b = verdicts[i].diagnostics, verdicts[j].diagnostics
            sep = a["ci_hi"] < b["ci_lo"] or b["ci_hi"] < a["ci_lo"]
            pairs.append({"i": i, "j": j, "separated": bool(sep)})
    return {"pairs": pairs, "all_separated": all(p["separated"] for p in pairs)}


def drift_sign_check(stats: EnsembleStats, functional) -> Verdict:
    """Sign of the mean one-step increment of a test function inside its region."""
    j = stats.functional_index(functional)
    f: Functional = stats.functionals[j]
    name = f"drift_sign[{f.kind}]"
    S = np.sum([s.functional_sums[j] for s in stats.summaries], axis=0) if stats.summaries else np.zeros(4)
    total, sq, count, dt = S
    if count < 2:
        return Verdict(name, "inconclusive", True, stats.confidence, stats.censored_fraction,
                       {"reason": "region never visited"})
    mean = total / count
    var = max(sq / count - mean * mean, 0.0) * count / (count - 1)
    se = math.sqrt(var / count)
    sign = EXPECTED_SIGN[f.kind]
    ok = sign * mean >= -3 * se
    return Verdict(name, "bound_holds" if ok else "bound_violated", bool(ok), stats.confidence,
                   stats.censored_fraction,
                   {"mean_increment": mean, "se": se, "z_score": mean / se if se > 0 else math.inf,
                    "increments": int(count), "drift_per_time": total / dt if dt > 0 else math.nan,
                    "expected_sign": sign, "region": [f.lo, f.hi], "param": f.param})


def ambient_martingale_check(stats: EnsembleStats) -> Verdict:
    """Componentwise mean ambient increment is zero within 3 standard errors."""
    name = "ambient_martingale"
    A = np.sum([s.ambient_sums for s in stats.summaries], axis=0)
    N = sum(s.n_steps for s in stats.summaries)
    if N < 2:
        return Verdict(name, "inconclusive", True, stats.confidence, stats.censored_fraction,
                       {"reason": "no ambient increments"})
    mean = A[:, 0] / N
    var = np.maximum(A[:, 1] / N - mean ** 2, 0.0) * N / (N - 1)
    se = np.sqrt(var / N)
    z = mean / np.where(se > 0, se, np.inf)
    ok = bool(np.all(np.abs(z) < 3))
    return Verdict(name, "bound_holds" if ok else "bound_violated", ok, stats.confidence,
                   stats.censored_fraction,
                   {"mean_increment": mean.tolist(), "se": se.tolist(), "z_scores": z.tolist(), "increments": int(N)})

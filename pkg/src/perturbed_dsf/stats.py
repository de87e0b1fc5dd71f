"""Monte Carlo drivers: one function per quantitative claim.

Every trial draws its field seed from ``SeedSequence(seed, spawn_key=(stream,
trial))`` so any number in a report can be regenerated from the run seed and
the trial index alone.  Trials are mapped in a fixed order and reduced in that
order, so the worker count never changes a report.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
import json
import math
import zlib

import numpy as np
from scipy import stats as sps

from . import _kernels as K
from .dsf import build_forest, is_acyclic, max_step, path_value, trace_path
from .dual import (build_dual, between_flanks, check_edges, forest_index,
                   primal_dual_crossings, probe_bi_infinite)
from .explore import default_m, run_exploration
from .field import FieldConfig, SitePoint, coupled_config
from .scaling import (PathFamily, eta_count, estimate_gamma_sigma,
                      estimate_height_diffusivity, scale_path)

SEED_SCHEME = "SeedSequence(seed, spawn_key=(crc32(stream), trial)) -> uint64"


def trial_seed(seed, stream, trial):
    ss = np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(stream.encode()), int(trial)))
    return int(ss.generate_state(1, np.uint64)[0])


def trial_rng(seed, stream, trial):
    ss = np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(stream.encode()), int(trial)))
    return np.random.default_rng(ss)


def field_for(seed, stream, trial, d, rho=1.0):
    return FieldConfig(dimension=d, seed=trial_seed(seed, stream, trial), half_width=rho)


def pmap(fn, items, workers=1):
    """Ordered map, in a process pool when ``workers`` > 1."""
    items = list(items)
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    chunk = max(1, len(items) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items, chunksize=chunk))


# -- report -----------------------------------------------------------------------

def _clean(x):
    """JSON-safe copy: numpy scalars unwrapped, non-finite floats to None."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


@dataclass
class Verdict:
    name: str
    estimate: float
    se: float
    threshold: float
    rule: str
    passed: bool


@dataclass
class ExperimentReport:
    experiment: str
    params: dict
    tables: dict = field(default_factory=dict)    # name -> {"columns", "rows"}
    verdicts: list = field(default_factory=list)
    censoring: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    records: list = field(default=None, repr=False)  # NDJSON payload, not in JSON

    def add_table(self, name, columns, rows):
        self.tables[name] = {"columns": list(columns), "rows": [list(r) for r in rows]}

    def check(self, name, estimate, threshold, rule, se=0.0):
        """Record ``estimate rule threshold`` for rule in <=, >=, true."""
        if rule == "<=":
            ok = estimate <= threshold
        elif rule == ">=":
            ok = estimate >= threshold
        elif rule == "true":
            ok = bool(estimate)
        else:
            raise ValueError(f"unknown rule {rule}")
        ok = bool(ok) and not (isinstance(estimate, float) and math.isnan(estimate))
        self.verdicts.append(Verdict(name, estimate, se, threshold, rule, ok))
        return ok

    @property
    def passed(self):
        return all(v.passed for v in self.verdicts)

    def to_dict(self):
        return _clean({"experiment": self.experiment, "params": self.params,
                       "tables": self.tables,
                       "verdicts": [vars(v) for v in self.verdicts],
                       "censoring": self.censoring, "notes": self.notes,
                       "passed": self.passed})

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"

    def to_text(self):
        lines = [f"experiment {self.experiment}"]
        for name, t in self.tables.items():
            lines.append(f"[{name}]")
            cols = t["columns"]
            body = [[_fmt(c) for c in r] for r in t["rows"]]
            width = [max([len(c)] + [len(r[i]) for r in body]) for i, c in enumerate(cols)]
            lines.append("  ".join(c.rjust(w) for c, w in zip(cols, width)))
            lines += ["  ".join(c.rjust(w) for c, w in zip(r, width)) for r in body]
        for v in self.verdicts:
            tag = "PASS" if v.passed else "FAIL"
            lines.append(f"{tag} {v.name}: {_fmt(v.estimate)} {v.rule} {_fmt(v.threshold)}"
                         + (f" (se {_fmt(v.se)})" if v.se else ""))
        for k, v in self.censoring.items():
            lines.append(f"censored {k}: {v}")
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines) + "\n"


def _fmt(x):
    if isinstance(x, float):
        return f"{x:.6g}"
    return str(x)


def _linfit(x, y):
    """(slope, slope stderr, intercept, r^2); NaNs with fewer than 3 points."""
    if len(x) < 3:
        return math.nan, math.nan, math.nan, math.nan
    r = sps.linregress(x, y)
    return float(r.slope), float(r.stderr), float(r.intercept), float(r.rvalue ** 2)


def _prop_se(p, n):
    return math.sqrt(p * (1 - p) / n) if n else math.nan


# -- geometric invariants ----------------------------------------------------------

def _invariant_trial(args):
    seed, d, steps, sep, i = args
    cfg = field_for(seed, "invariants", i, d)
    v = np.zeros(d)
    v[0] = sep
    r = run_exploration(cfg, np.zeros(d), v, steps=steps, check=True, classify=True)
    return r.violations, r.first_violation, r.max_history_height, r.max_increment


def invariant_sweep(d, steps, trials, seed=0, separation=4, workers=1):
    """Joint exploration with every geometric invariant checked at every step."""
    m_d = default_m(d)
    rep = ExperimentReport("invariants", {"d": d, "steps": steps, "trials": trials,
                                          "seed": seed, "separation": separation,
                                          "m_d": m_d, "seed_scheme": SEED_SCHEME})
    out = pmap(_invariant_trial, [(seed, d, steps, separation, i) for i in range(trials)], workers)
    rows = []
    for i, (viol, first, h, inc) in enumerate(out):
        rows.append([i, viol["interior"], viol["cone"], viol["cone_low_apex"], viol["height"],
                     viol["increment"], first["cone"], h, inc])
    rep.add_table("trials", ["trial", "interior", "cone", "cone_low_apex", "height",
                             "increment", "first_cone_step", "max_history_height",
                             "max_increment"], rows)
    tot = {k: sum(o[0][k] for o in out) for k in out[0][0]}
    rep.check("interior_points", tot["interior"], 0, "<=")
    rep.check("cone_meets_history", tot["cone"], 0, "<=")
    rep.check("history_height", max(o[2] for o in out), m_d - 4, "<=")
    rep.check("max_increment", max(o[3] for o in out), max_step(d), "<=")
    rep.notes.append("cone_low_apex counts cone hits by balls whose apex lies below the "
                     "baseline; cone hits by higher apexes arise when both paths move on "
                     "a common floor")
    return rep


# -- coalescence tail --------------------------------------------------------------

def _coalescence_trial(args):
    seed, dx, i, cap, rho = args
    cfg = field_for(seed, f"coalesce/{dx}", i, 2, rho)
    starts = np.array([[0.0, 0.0], [float(dx), 0.0]])
    _, h, _ = K.merge_paths(cfg.arrays(), starts, 2 ** 62, cap)
    return h


def coalescence_times(dx, trials, cap, seed=0, rho=1.0, workers=1):
    """Coalescence heights of paths from (0,0) and (dx,0); NaN when censored at ``cap``."""
    return np.array(pmap(_coalescence_trial, [(seed, dx, i, cap, rho) for i in range(trials)],
                         workers))


def coalescence_experiment(dx_list=(2, 8), t_grid=None, trials=2000, seed=0, rho=1.0,
                           slope=-0.5, slope_tol=0.1, const_tol=0.2, workers=1):
    """Survival of the coalescence height T(u, v) for u = (0,0), v = (dx,0).

    Censored pairs (not merged by the top of the grid) are counted as
    surviving in the conservative curve and as coalesced in the optimistic one.
    """
    t_grid = np.geomspace(100, 1e4, 9) if t_grid is None else np.asarray(t_grid, float)
    cap = float(t_grid.max())
    rep = ExperimentReport("coalesce", {"dx": list(dx_list), "t_grid": t_grid, "trials": trials,
                                        "seed": seed, "rho": rho, "slope_target": slope,
                                        "slope_tol": slope_tol, "const_tol": const_tol,
                                        "seed_scheme": SEED_SCHEME})
    rows, consts = [], []
    for dx in dx_list:
        T = coalescence_times(dx, trials, cap, seed, rho, workers)
        cens = np.isnan(T)
        rep.censoring[f"dx={dx}"] = int(cens.sum())
        surv = []
        for t in t_grid:
            hi = float(np.mean(cens | (T > t)))
            lo = float(np.mean(~cens & (T > t)))
            surv.append(hi)
            rows.append([dx, float(t), trials, hi, _prop_se(hi, trials), lo,
                         hi * math.sqrt(t) / dx])
        surv = np.array(surv)
        ok = surv > 0
        s, se, _, r2 = _linfit(np.log(t_grid[ok]), np.log(surv[ok]))
        rep.check(f"slope_dx{dx}", abs(s - slope), slope_tol, "<=", se)
        consts.append(float(np.max(surv * np.sqrt(t_grid) / dx)))
        rep.notes.append(f"dx={dx}: log-log slope {s:.4f} (se {se:.4f}, r2 {r2:.4f}), "
                         f"sup P*sqrt(t)/dx = {consts[-1]:.4f}")
        if np.any(np.diff(surv) > 0):
            rep.notes.append(f"dx={dx}: survival not monotone")
    rep.add_table("survival", ["dx", "t", "trials", "survival", "se", "survival_optimistic",
                               "scaled"], rows)
    spread = max(consts) / min(consts) - 1 if min(consts) > 0 else math.inf
    rep.check("scaled_constant_spread", spread, const_tol, "<=")
    return rep


# -- renewal gaps ------------------------------------------------------------------

def _renewal_trial(args):
    seed, d, steps, delta, m_d, i, rho = args
    cfg = field_for(seed, "renewals", i, d, rho)
    r = run_exploration(cfg, np.zeros(d), steps=steps, delta=delta, m_d=m_d)
    return r.renewal_steps.copy(), r.renewal_sites[:, 0].copy()


def renewal_runs(d, trials, steps, delta=None, m_d=None, seed=0, rho=1.0, workers=1):
    """(renewal steps, hat sites) of single-path runs from the origin."""
    return pmap(_renewal_trial, [(seed, d, steps, delta, m_d, i, rho) for i in range(trials)],
                workers)


def renewal_tail_experiment(d=2, trials=20, steps=10 ** 6, delta=0.05, m_d=None, seed=0,
                            rho=1.0, min_r2=0.98, floor=1e-3, min_gaps=10 ** 4, workers=1):
    """Pooled survival of the renewal gaps tau_{j+1} - tau_j, j >= 1."""
    m_d = default_m(d) if m_d is None else m_d
    rep = ExperimentReport("renewals", {"d": d, "trials": trials, "steps": steps,
                                        "delta": delta, "m_d": m_d, "seed": seed, "rho": rho,
                                        "min_r2": min_r2, "floor": floor,
                                        "min_gaps": min_gaps, "seed_scheme": SEED_SCHEME})
    runs = renewal_runs(d, trials, steps, delta, m_d, seed, rho, workers)
    gaps = []
    short = 0
    for i, (tau, _) in enumerate(runs):
        if len(tau) < 2:
            short += 1
        gaps += [(i, j + 1, int(g)) for j, g in enumerate(np.diff(tau))]
    rep.censoring["runs_with_fewer_than_two_renewals"] = short
    rep.censoring["renewals_total"] = int(sum(len(t) for t, _ in runs))
    rep.add_table("gaps", ["trial", "j", "gap"], gaps)
    g = np.array([x[2] for x in gaps], np.int64)
    rep.check("gap_count", len(g), min_gaps, ">=")
    if len(g) == 0:
        rep.check("log_linear_r2", math.nan, min_r2, ">=")
        rep.notes.append("no renewal gaps within the step budget")
        return rep
    ns = np.unique(np.concatenate([[0], g]))
    surv = np.array([np.mean(g > n) for n in ns])
    rep.add_table("survival", ["n", "survival"], zip(ns.tolist(), surv.tolist()))
    keep = surv >= floor
    rate, se, _, r2 = _linfit(ns[keep], np.log(surv[keep]))
    rep.notes.append(f"exponential rate {-rate:.6g} (se {se:.3g})")
    rep.check("log_linear_r2", r2, min_r2, ">=")
    return rep


# -- increments --------------------------------------------------------------------

def increment_samples(runs, first=2):
    """Transverse hat increments Y_j (j >= first) of each run, pooled in run order."""
    out = []
    for _, hats in runs:
        for j in range(max(first - 1, 1), len(hats)):
            out.append(hats[j, :-1] - hats[j - 1, :-1])
    return np.array(out, np.int64).reshape(-1, runs[0][1].shape[1] - 1 if runs else 1)


def increment_tests(Y, alpha=0.01, n_se=3.0, min_samples=10 ** 3):
    """Symmetry and independence diagnostics of an (N, d-1) sample of Y."""
    Y = np.asarray(Y, np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    N, k = Y.shape
    if N < min_samples:
        raise ValueError(f"need at least {min_samples} samples, got {N}")
    rep = ExperimentReport("increments", {"samples": N, "alpha": alpha, "n_se": n_se})
    rows = []
    for i in range(k):
        y = Y[:, i]
        ks = sps.ks_2samp(y, -y)
        se = float(np.std(y, ddof=1) / math.sqrt(N))
        m = float(np.mean(y))
        c = y - m
        lag1 = float(np.sum(c[1:] * c[:-1]) / np.sum(c * c)) if np.any(c) else 0.0
        rows.append([i + 1, m, se, float(ks.statistic), float(ks.pvalue), lag1])
        rep.check(f"symmetry_ks_p_{i + 1}", float(ks.pvalue), alpha, ">=")
        rep.check(f"mean_{i + 1}", abs(m) / se if se > 0 else 0.0, n_se, "<=", se)
        rep.check(f"lag1_{i + 1}", abs(lag1) * math.sqrt(N), 3.0, "<=")
    rep.add_table("coordinates", ["coordinate", "mean", "se", "ks_sign_flip", "ks_p",
                                  "lag1"], rows)
    if k == 2:
        prod = Y[:, 0] * Y[:, 1]
        m = float(prod.mean())
        se = float(prod.std(ddof=1) / math.sqrt(N))
        rep.check("cross_moment", abs(m) / se if se > 0 else 0.0, n_se, "<=", se)
        ex = sps.ks_2samp(Y[:, 0], Y[:, 1])
        rep.check("exchange_ks_p", float(ex.pvalue), alpha, ">=")
        rep.add_table("cross", ["moment", "estimate", "se"], [["E[Y1 Y2]", m, se]])
    return rep


def increments_experiment(d=2, trials=20, steps=10 ** 6, delta=None, m_d=None, seed=0,
                          rho=1.0, min_samples=10 ** 3, alpha=0.01, workers=1):
    runs = renewal_runs(d, trials, steps, delta, m_d, seed, rho, workers)
    Y = increment_samples(runs)
    params = {"d": d, "trials": trials, "steps": steps, "delta": delta,
              "m_d": default_m(d) if m_d is None else m_d, "seed": seed, "rho": rho,
              "min_samples": min_samples, "seed_scheme": SEED_SCHEME}
    try:
        rep = increment_tests(Y, alpha=alpha, min_samples=min_samples)
        rep.params.update(params)
    except ValueError as exc:
        rep = ExperimentReport("increments", params)
        rep.notes.append(str(exc))
    rep.check("sample_count", len(Y), min_samples, ">=")
    rep.add_table("samples", ["j"] + [f"Y{i + 1}" for i in range(d - 1)],
                  [[j] + row.tolist() for j, row in enumerate(Y)])
    return rep


# -- Donsker marginal --------------------------------------------------------------

def variance_time_fit(samples, times):
    """Fit var(t) = a t + b over the columns of ``samples``; returns (a, b, r^2, variances)."""
    v = np.var(np.asarray(samples, float), axis=0, ddof=1)
    a, _, b, r2 = _linfit(np.asarray(times, float), v)
    return a, b, r2, v


def _donsker_trial(args):
    seed, d, n, gamma, sigma, times, i, rho = args
    cfg = field_for(seed, "donsker", i, d, rho)
    heights = n * n * gamma * np.asarray(times)
    p = trace_path(cfg, np.zeros(d), height=float(heights.max()))
    return path_value(p, heights)[:, 0] / (n * sigma)


def donsker_test(d, n_ladder, trials, gamma, sigma, times=(0.25, 0.5, 1.0), seed=0, rho=1.0,
                 ks_max=0.05, r2_min=0.99, var_tol=0.1, workers=1):
    """Law of pi_n(t) = pi(n^2 gamma t)/(n sigma) for the path from the origin."""
    rep = ExperimentReport("donsker", {"d": d, "n": list(n_ladder), "trials": trials,
                                       "gamma": gamma, "sigma": sigma, "times": list(times),
                                       "seed": seed, "rho": rho, "ks_max": ks_max,
                                       "r2_min": r2_min, "var_tol": var_tol,
                                       "seed_scheme": SEED_SCHEME})
    if not (gamma > 0 and sigma > 0):
        rep.check("normalisation_available", False, True, "true")
        rep.notes.append("gamma/sigma estimates unavailable; no scaled sample drawn")
        return rep
    t1 = list(times).index(1.0) if 1.0 in times else len(times) - 1
    rows = []
    for n in n_ladder:
        X = np.array(pmap(_donsker_trial, [(seed, d, n, gamma, sigma, tuple(times), i, rho)
                                           for i in range(trials)], workers))
        ks = sps.kstest(X[:, t1], "norm")
        a, b, r2, v = variance_time_fit(X, times)
        rows.append([n, trials, float(ks.statistic), float(ks.pvalue), float(v[t1]), a, b, r2])
        rep.check(f"ks_n{n}", float(ks.statistic), ks_max, "<=")
        rep.check(f"variance_linear_r2_n{n}", r2, r2_min, ">=")
        rep.check(f"variance_at_1_n{n}", abs(float(v[t1]) - 1.0), var_tol, "<=")
    rep.add_table("marginals", ["n", "trials", "ks", "ks_p", "variance_t1", "var_slope",
                                "var_intercept", "r2"], rows)
    return rep


def normalising_constants(d, method, trials, steps_or_height, seed=0, rho=1.0, delta=None,
                          m_d=None):
    """gamma and sigma from renewal blocks or from height-normalised displacements,
    on a seed stream disjoint from the experiment's."""
    fields = [field_for(seed, f"normalise/{method}", i, d, rho) for i in range(trials)]
    if method == "renewal":
        return estimate_gamma_sigma(fields, int(steps_or_height), delta, m_d)
    if method == "height":
        return estimate_height_diffusivity(fields, float(steps_or_height))
    raise ValueError(f"unknown normalisation {method!r}")


def donsker_experiment(d=2, n_ladder=(50,), trials=2000, normalization="renewal",
                       norm_trials=30, norm_budget=10 ** 6, seed=0, rho=1.0, delta=None,
                       m_d=None, ks_max=0.05, r2_min=0.99, var_tol=0.1, workers=1):
    gs = normalising_constants(d, normalization, norm_trials, norm_budget, seed, rho, delta, m_d)
    rep = donsker_test(d, n_ladder, trials, gs.gamma, gs.sigma, seed=seed, rho=rho,
                       ks_max=ks_max, r2_min=r2_min, var_tol=var_tol, workers=workers)
    rep.params["normalization"] = gs.as_dict()
    rep.censoring["normalisation_shortfall"] = gs.shortfall
    return rep


# -- tree-ness ---------------------------------------------------------------------

def tree_starts(d, k, spread):
    """k lattice starts on level 0 spaced evenly along the transverse vector ``spread``."""
    spread = np.broadcast_to(np.asarray(spread, float), (d - 1,))
    out = np.zeros((k, d))
    for i in range(k):
        frac = i / (k - 1) if k > 1 else 0.0
        out[i, :-1] = np.round(frac * spread)
    return out


def _tree_trial(args):
    seed, d, k, spread, cap, i, rho = args
    cfg = field_for(seed, "treeness", i, d, rho)
    _, h, _ = K.merge_paths(cfg.arrays(), tree_starts(d, k, spread), 2 ** 62, cap)
    return h


def treeness_experiment(d=2, k=5, spread=20, budgets=(10 ** 5,), trials=200, seed=0, rho=1.0,
                        min_fraction=0.99, require_increasing=True, workers=1):
    """Fraction of trials whose k paths all merge within each height budget.

    Paths are traced once up to the largest budget; smaller budgets read the
    same merge heights.
    """
    budgets = sorted(float(b) for b in budgets)
    rep = ExperimentReport("treeness", {"d": d, "k": k, "spread": spread, "budgets": budgets,
                                        "trials": trials, "seed": seed, "rho": rho,
                                        "min_fraction": min_fraction,
                                        "require_increasing": require_increasing,
                                        "budget_unit": "height",
                                        "seed_scheme": SEED_SCHEME})
    H = np.array(pmap(_tree_trial, [(seed, d, k, spread, budgets[-1], i, rho)
                                    for i in range(trials)], workers))
    done = ~np.isnan(H)
    fr = [float(np.mean(done & (H <= b))) for b in budgets]
    rep.add_table("fractions", ["budget", "trials", "coalesced_fraction", "se"],
                  [[b, trials, f, _prop_se(f, trials)] for b, f in zip(budgets, fr)])
    q = np.quantile(H[done], [0.5, 0.9, 0.99]).tolist() if done.any() else [math.nan] * 3
    rep.add_table("merge_height_quantiles", ["q50", "q90", "q99"], [q])
    rep.add_table("trials", ["trial", "merge_height"], [[i, h] for i, h in enumerate(H)])
    rep.censoring["not_merged_at_largest_budget"] = int((~done).sum())
    rep.check("coalesced_fraction", fr[-1], min_fraction, ">=", _prop_se(fr[-1], trials))
    if require_increasing and len(fr) > 1:
        inc = all(b > a or a == 1.0 for a, b in zip(fr, fr[1:]))
        rep.check("fraction_increasing", inc, True, "true")
    return rep


# -- Foster drift ------------------------------------------------------------------

def lyapunov(z):
    z = np.asarray(z, float)
    return np.sqrt(np.log1p(np.sum(z * z, axis=-1)))


def _foster_trial(args):
    seed, steps, r_lo, r_hi, delta, m_d, i, rho = args
    rng = trial_rng(seed, "foster/start", i)
    cfg = field_for(seed, "foster", i, 3, rho)
    rad = rng.uniform(r_lo, r_hi)
    ang = rng.uniform(0, 2 * math.pi)
    v = np.array([round(rad * math.cos(ang)), round(rad * math.sin(ang)), 0.0])
    r = run_exploration(cfg, np.zeros(3), v, steps=steps, delta=delta, m_d=m_d)
    hats = r.renewal_sites
    return [(hats[j, 0, :-1] - hats[j, 1, :-1]).tolist() for j in range(len(hats))]


def foster_drift_experiment(shells=((20, 40), (40, 80)), trials=20, steps=2 * 10 ** 5,
                            min_transitions=10 ** 4, delta=None, m_d=None, seed=0, rho=1.0,
                            n_se=2.0, workers=1):
    """Mean change of f(Z) = sqrt(log(1 + |Z|^2)) across joint renewals, by shell of |Z|."""
    d = 3
    m_d = default_m(d) if m_d is None else m_d
    shells = [tuple(float(a) for a in s) for s in shells]
    rep = ExperimentReport("foster", {"d": d, "shells": shells, "trials": trials, "steps": steps,
                                      "min_transitions": min_transitions, "delta": delta,
                                      "m_d": m_d, "seed": seed, "rho": rho, "n_se": n_se,
                                      "seed_scheme": SEED_SCHEME})
    r_lo = min(s[0] for s in shells)
    r_hi = max(s[1] for s in shells)
    seqs = pmap(_foster_trial, [(seed, steps, r_lo, r_hi, delta, m_d, i, rho)
                                for i in range(trials)], workers)
    trans = []
    for i, zs in enumerate(seqs):
        for j in range(len(zs) - 1):
            if any(zs[j]):
                trans.append((i, j + 1, zs[j], zs[j + 1]))
    rep.censoring["transitions"] = len(trans)
    rep.censoring["runs_without_two_renewals"] = sum(len(z) < 2 for z in seqs)
    norms = np.array([math.hypot(*t[2]) for t in trans])
    drift = np.array([float(lyapunov(t[3]) - lyapunov(t[2])) for t in trans])
    rows = []
    radius = None
    for lo, hi in shells:
        sel = (norms >= lo) & (norms < hi) if len(trans) else np.zeros(0, bool)
        c = int(sel.sum())
        m = float(drift[sel].mean()) if c else math.nan
        se = float(drift[sel].std(ddof=1) / math.sqrt(c)) if c > 1 else math.nan
        sparse = c < min_transitions
        rows.append([lo, hi, c, m, se, sparse])
        rep.check(f"transitions_{lo:g}_{hi:g}", c, min_transitions, ">=")
        ok = rep.check(f"drift_{lo:g}_{hi:g}", m + n_se * se, 0.0, "<=", se)
        if ok and radius is None:
            radius = lo
        elif not ok:
            radius = None
    rep.add_table("shells", ["lo", "hi", "transitions", "drift", "se", "sparse"], rows)
    rep.notes.append(f"negative drift beyond radius {radius}" if radius is not None
                     else "no radius beyond which every shell drifts inwards")
    return rep


# -- coupling ----------------------------------------------------------------------

def exploration_radius(path, start, rho):
    """Transverse L1 reach of every h-step query of ``path`` (from ``start``):
    sites further than this cannot affect the path."""
    pts = np.vstack([np.asarray(start, float)[None, :], path.positions])
    steps = np.abs(np.diff(pts, axis=0)).sum(axis=1)
    off = np.abs(pts[:-1, :-1] - np.asarray(start, float)[:-1]).sum(axis=1)
    d = pts.shape[1]
    return float(np.max(off + steps)) + (d - 1) * rho if len(steps) else 0.0


def _coupling_trial(args):
    seed, r_ladder, sep, height, steps, delta, m_d, i, rho = args
    d = 3
    fa, fb, fc = (field_for(seed, f"coupling/{s}", i, d, rho) for s in "abc")
    u = np.zeros(d)
    v = np.zeros(d)
    v[0] = sep
    pa = trace_path(fa, u, height=height)
    pb = trace_path(fb, v, height=height)
    W = max(exploration_radius(pa, u, rho), exploration_radius(pb, v, rho))
    out = []
    for r in r_ladder:
        cfg = coupled_config(fa, fb, fc, u, v, r)
        ex = run_exploration(cfg, u, v, steps=steps, delta=delta, m_d=m_d, max_renewals=1)
        H = float(ex.renewal_sites[0, 0, -1]) if len(ex.renewal_steps) else height
        H = min(H, height)
        same = True
        for start, ind in ((u, pa), (v, pb)):
            pc = trace_path(cfg, start, height=H)
            m = len(pc)
            same &= len(ind) >= m and np.array_equal(pc.positions, ind.positions[:m])
        out.append((bool(same), bool(len(ex.renewal_steps)), H))
    return W, out


def coupling_experiment(r_ladder=(5, 10, 20, 40), trials=100, separation=None, height=50.0,
                        steps=2000, delta=None, m_d=None, seed=0, rho=1.0, workers=1):
    """How often paths on the coupled field reproduce the paths on the
    independent fields, up to the first joint renewal (or ``height``)."""
    r_ladder = [float(r) for r in r_ladder]
    sep = 3 * max(r_ladder) + 3 if separation is None else float(separation)
    if not sep > 3 * max(r_ladder):
        raise ValueError("separation must exceed three times the largest radius")
    rep = ExperimentReport("coupling", {"d": 3, "r": r_ladder, "trials": trials,
                                        "separation": sep, "height": height, "steps": steps,
                                        "delta": delta, "m_d": m_d, "seed": seed, "rho": rho,
                                        "seed_scheme": SEED_SCHEME})
    res = pmap(_coupling_trial, [(seed, tuple(r_ladder), sep, height, steps, delta, m_d, i, rho)
                                 for i in range(trials)], workers)
    W = np.array([x[0] for x in res])
    ok = np.array([[o[0] for o in x[1]] for x in res])
    renewed = np.array([[o[1] for o in x[1]] for x in res])
    freq = ok.mean(axis=0)
    se = np.array([_prop_se(f, trials) for f in freq])
    rows = [[r, trials, float(f), float(s), int((~renewed[:, j]).sum())]
            for j, (r, f, s) in enumerate(zip(r_ladder, freq, se))]
    rep.add_table("frequency", ["r", "trials", "coupled_fraction", "se", "censored"], rows)
    rep.add_table("trials", ["trial", "W"] + [f"ok_r{r:g}" for r in r_ladder],
                  [[i, float(w)] + o.tolist() for i, (w, o) in enumerate(zip(W, ok))])
    rep.censoring["no_joint_renewal_before_height"] = int((~renewed).sum())
    rep.check("frequency_non_decreasing", bool(np.all(np.diff(freq) >= 0)), True, "true")
    # failures can only come from trials whose exploration reached the radius
    fail_ok = all(W[i] >= r for j, r in enumerate(r_ladder) for i in np.flatnonzero(~ok[:, j]))
    rep.check("failures_have_W_at_least_r", fail_ok, True, "true")
    # exponential tail of W fitted above its median; failures need W >= r
    ws = np.sort(W)
    surv = 1.0 - np.arange(len(ws)) / len(ws)
    top = ws >= np.median(ws)
    if top.sum() >= 3 and np.ptp(ws[top]) > 0:
        lam, a = np.polyfit(ws[top], np.log(surv[top]), 1)
        bound = 1 - np.minimum(1.0, np.exp(a + lam * np.array(r_ladder)))
        rep.notes.append(f"fitted tail P(W >= r) = exp({a:.4g} + {lam:.4g} r)")
        rep.check("above_exponential_fit", float(np.min(freq - bound + 2 * se)), 0.0, ">=")
    return rep


# -- dual forest -------------------------------------------------------------------

def _dual_check_trial(args):
    seed, width, height, margin, i = args
    cfg = field_for(seed, "dual", i, 2)
    f = build_dual(cfg, (np.array([-width / 2, 0.0]), np.array([width / 2, height])), margin)
    deg, down, acyc = check_edges(f)
    return deg, down, acyc, primal_dual_crossings(f), between_flanks(f), len(f.vertex_ids())


def _dual_probe_trial(args):
    seed, width, height, band, margin, i = args
    cfg = field_for(seed, f"dual/probe/{height:g}", i, 2)
    f = build_dual(cfg, (np.array([-width / 2, 0.0]), np.array([width / 2, height])), margin)
    r = probe_bi_infinite(f, band)
    return r.traversing, r.starts, r.multi


def dual_experiment(width=200.0, height=200.0, seeds=20, probe_width=60.0,
                    probe_heights=(100, 200, 400), probe_trials=50, band=(-10.0, 10.0),
                    margin=20.0, seed=0, workers=1):
    rep = ExperimentReport("dual", {"width": width, "height": height, "seeds": seeds,
                                    "probe_width": probe_width,
                                    "probe_heights": list(probe_heights),
                                    "probe_trials": probe_trials, "band": list(band),
                                    "margin": margin, "seed": seed,
                                    "seed_scheme": SEED_SCHEME})
    res = pmap(_dual_check_trial, [(seed, width, height, margin, i) for i in range(seeds)],
               workers)
    rep.add_table("windows", ["trial", "out_degree_one", "downward", "acyclic", "crossings",
                              "between_flanks", "dual_vertices"],
                  [[i] + list(r) for i, r in enumerate(res)])
    rep.check("out_degree_one", all(r[0] for r in res), True, "true")
    rep.check("downward", all(r[1] for r in res), True, "true")
    rep.check("acyclic", all(r[2] for r in res), True, "true")
    rep.check("primal_dual_crossings", sum(r[3] for r in res), 0, "<=")
    rep.check("between_flanks", all(r[4] for r in res), True, "true")
    rows = []
    fr = []
    for h in probe_heights:
        pr = pmap(_dual_probe_trial, [(seed, probe_width, float(h), tuple(band), margin, i)
                                      for i in range(probe_trials)], workers)
        f = float(np.mean([p[2] for p in pr]))
        fr.append(f)
        rows.append([h, probe_trials, f, _prop_se(f, probe_trials),
                     float(np.mean([p[0] for p in pr]))])
    rep.add_table("probe", ["height", "trials", "multi_fraction", "se", "mean_traversing"], rows)
    rep.check("multi_fraction_non_increasing", bool(np.all(np.diff(fr) <= 0)), True, "true")
    return rep


def dual_records(seed, width, height, margin=20.0):
    """NDJSON records of the first window of :func:`dual_experiment`."""
    cfg = field_for(seed, "dual", 0, 2)
    f = build_dual(cfg, (np.array([-width / 2, 0.0]), np.array([width / 2, height])), margin)
    out = []
    for i in f.vertex_ids():
        j = int(f.target[i])
        out.append({"id": int(i), "position": f.pos[i].tolist(),
                    "side": "right" if i % 2 else "left", "target": j,
                    "target_position": f.pos[j].tolist()})
    return out


# -- forest ------------------------------------------------------------------------

def forest_experiment(d=2, lo=None, hi=None, seed=0, rho=1.0):
    """Edges of the forest in a box, with its structural checks."""
    lo = np.full(d, -10.0) if lo is None else np.asarray(lo, float)
    hi = np.full(d, 10.0) if hi is None else np.asarray(hi, float)
    cfg = FieldConfig(dimension=d, seed=seed, half_width=rho)
    edges = build_forest(cfg, lo, hi)
    rep = ExperimentReport("forest", {"d": d, "lo": lo, "hi": hi, "seed": seed, "rho": rho})
    up = all(b.height > a.height for a, b in edges)
    inc = max((sum(abs(p - q) for p, q in zip(a.position, b.position)) for a, b in edges),
              default=0.0)
    rep.check("out_degree_one_acyclic", is_acyclic(edges), True, "true")
    rep.check("edges_upward", up, True, "true")
    rep.check("max_edge_length", inc, max_step(d), "<=")
    rep.add_table("summary", ["vertices", "max_edge_length"], [[len(edges), inc]])
    rep.records = [{"site": list(a.site), "position": list(a.position),
                    "target_site": list(b.site), "target_position": list(b.position)}
                   for a, b in edges]
    return rep


# -- eta ---------------------------------------------------------------------------

def eta_family(cfg, n, gamma, sigma, a, b, t):
    """Scaled paths through [a, b] at scaled time 0, traced to scaled time t.

    A path born below height 0 passes 0 along one edge (z, h(z)) with
    z_2 < 0 <= h(z)_2, so tracing from the starts of those edges gives every
    qualifying path."""
    reach = max_step(2)
    A, B = a * n * sigma, b * n * sigma
    ix = forest_index(cfg, np.array([A - reach - 1, -reach - 1]), np.array([B + reach + 1, 0.0]))
    z, h = ix.zpos, ix.hpos
    sel = (z[:, 1] < 0) & (h[:, 1] >= 0)
    c = z[:, 0] + (h[:, 0] - z[:, 0]) * (0 - z[:, 1]) / (h[:, 1] - z[:, 1])
    sel &= (c >= A - 1) & (c <= B + 1)
    top = n * n * gamma * t
    paths = []
    for k in np.flatnonzero(sel):
        p = trace_path(cfg, SitePoint.from_arrays(ix.zsite[k], z[k]), height=top)
        paths.append(scale_path(p, n, gamma, sigma))
    return PathFamily(tuple(paths))


def _eta_trial(args):
    seed, e, eps, n, gamma, sigma, a, t, i, rho = args
    cfg = field_for(seed, f"eta/{e}", i, 2, rho)
    fam = eta_family(cfg, n, gamma, sigma, a, a + eps, t)
    return eta_count(fam, 0.0, t, a, a + eps)


def eta_experiment(n=50, epsilons=(0.4, 0.2, 0.1, 0.05), t=1.0, a=0.0, trials=500,
                   normalization="height", norm_trials=500, norm_budget=2500.0, seed=0,
                   rho=1.0, delta=None, m_d=None, workers=1):
    """P(eta >= 2) and P(eta >= 3)/eps along a shrinking-eps ladder."""
    gs = normalising_constants(2, normalization, norm_trials, norm_budget, seed, rho, delta, m_d)
    eps_l = [float(e) for e in epsilons]
    rep = ExperimentReport("eta", {"n": n, "epsilons": eps_l, "t": t, "a": a, "trials": trials,
                                   "normalization": gs.as_dict(), "seed": seed, "rho": rho,
                                   "seed_scheme": SEED_SCHEME})
    if not (gs.gamma > 0 and gs.sigma > 0):
        rep.check("normalisation_available", False, True, "true")
        return rep
    rows = []
    p2s, p3s = [], []
    for e, eps in enumerate(eps_l):
        cnt = np.array(pmap(_eta_trial, [(seed, e, eps, n, gs.gamma, gs.sigma, a, t, i, rho)
                                         for i in range(trials)], workers))
        p2 = float(np.mean(cnt >= 2))
        p3 = float(np.mean(cnt >= 3)) / eps
        p2s.append(p2)
        p3s.append(p3)
        rows.append([eps, t, trials, p2, p3])
    rep.add_table("eta", ["epsilon", "t", "trials", "p_eta_ge_2", "p_eta_ge_3_over_eps"], rows)
    rep.check("p_eta_ge_2_non_increasing", bool(np.all(np.diff(p2s) <= 0)), True, "true")
    rep.check("p_eta_ge_3_over_eps_non_increasing", bool(np.all(np.diff(p3s) <= 0)), True, "true")
    return rep

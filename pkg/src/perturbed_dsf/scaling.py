"""Diffusive rescaling of paths and the path-space metrics.

A path with vertices (x_k, t_k) is scaled to t -> pi(n^2 gamma t) / (n sigma).
Forward paths live on [start, end], backward (dual) paths on [end, start].
"""

from dataclasses import dataclass
import math

import numpy as np
from scipy import stats as sps

from .explore import run_exploration


@dataclass(frozen=True)
class ScaledPath:
    """``times``/``values`` are the source vertices (heights and first
    coordinate) in order of travel; the scaled path interpolates them."""
    times: np.ndarray
    values: np.ndarray
    n: float = 1.0
    gamma: float = 1.0
    sigma: float = 1.0
    direction: str = "forward"
    keys: tuple = None  # optional vertex identities, same order as times

    @property
    def start(self):
        return float(self.times[0]) / (self.n ** 2 * self.gamma)

    @property
    def end(self):
        return float(self.times[-1]) / (self.n ** 2 * self.gamma)

    def scaled_times(self):
        return self.times / (self.n ** 2 * self.gamma)

    def scaled_values(self):
        return self.values / (self.n * self.sigma)

    def __call__(self, t):
        ts = self.scaled_times()
        vs = self.scaled_values()
        if self.direction == "backward":
            ts, vs = ts[::-1], vs[::-1]
        t = np.asarray(t, np.float64)
        lo, hi = ts[0], ts[-1]
        if np.any(t < lo - 1e-12) or np.any(t > hi + 1e-12):
            raise ValueError(f"time outside the path domain [{lo}, {hi}]")
        return np.interp(t, ts, vs)


def scale_path(path, n, gamma, sigma, direction="forward"):
    """Scaled version of a :class:`DsfPath` or of a ``(times, values)`` pair."""
    if n < 1 or gamma <= 0 or sigma <= 0:
        raise ValueError("need n >= 1, gamma > 0, sigma > 0")
    if hasattr(path, "positions"):
        times = path.positions[:, -1].astype(np.float64)
        values = path.positions[:, 0].astype(np.float64)
        keys = tuple(tuple(int(c) for c in s) for s in path.sites)
    else:
        times, values = (np.asarray(a, np.float64) for a in path)
        keys = None
    step = np.diff(times)
    if direction == "forward" and np.any(step <= 0):
        raise ValueError("forward path times must increase")
    if direction == "backward" and np.any(step >= 0):
        raise ValueError("backward path times must decrease")
    return ScaledPath(times, values, float(n), float(gamma), float(sigma), direction, keys)


@dataclass(frozen=True)
class PathFamily:
    paths: tuple
    direction: str = "forward"

    def __post_init__(self):
        if any(p.direction != self.direction for p in self.paths):
            raise ValueError("mixed directions in a family")
        sc = {(p.n, p.gamma, p.sigma) for p in self.paths}
        if len(sc) > 1:
            raise ValueError("paths of a family must share (n, gamma, sigma)")

    def __len__(self):
        return len(self.paths)


# -- metric -----------------------------------------------------------------------

def _extended(p, t):
    """Value at t with constant extension outside the traced range."""
    ts = p.scaled_times()
    vs = p.scaled_values()
    if p.direction == "backward":
        ts, vs = ts[::-1], vs[::-1]
    return np.interp(t, ts, vs)


def _compact(p, t):
    return np.tanh(_extended(p, t)) / (1.0 + np.abs(t))


def _max_slope(p):
    ts = p.scaled_times()
    vs = p.scaled_values()
    dt = np.abs(np.diff(ts))
    if len(dt) == 0:
        return 0.0
    return float(np.max(np.abs(np.diff(vs)) / dt))


def d_pi(p1, p2, tol=1e-6):
    """Distance of two scaled paths in the compactified path space.

    The sup over time is taken over the pieces between all breakpoints of
    either path.  On a piece each compactified path is Lipschitz with
    constant slope/(1+|t|) + 1/(1+|t|)^2, so max(endpoint values) plus
    L * length / 2 bounds the piece.  Pieces are bisected until every bound
    is within ``tol`` of the best value seen.
    """
    if p1.direction != p2.direction:
        raise ValueError("paths must share a direction")
    fwd = p1.direction == "forward"
    s1, s2 = (p.start for p in (p1, p2))
    head = abs(math.tanh(s1) - math.tanh(s2))
    # forward paths: sup over t >= min start; backward: t <= max start
    bps = np.concatenate([p1.scaled_times(), p2.scaled_times(), [0.0]])
    if fwd:
        lo = min(s1, s2)
        hi = max(p1.end, p2.end, lo)
    else:
        hi = max(s1, s2)
        lo = min(p1.end, p2.end, hi)
    bps = np.unique(np.clip(bps, lo, hi))
    lip_slope = _max_slope(p1) + _max_slope(p2)

    def f(t):
        return np.abs(_compact(p1, t) - _compact(p2, t))

    a, b = bps[:-1], bps[1:]
    vals = f(bps)
    best = float(vals.max()) if len(vals) else 0.0
    fa, fb = vals[:-1], vals[1:]
    for _ in range(200):
        if len(a) == 0:
            break
        near = np.where((a <= 0) & (b >= 0), 0.0, np.minimum(np.abs(a), np.abs(b)))
        lip = lip_slope / (1 + near) + 2.0 / (1 + near) ** 2
        bound = np.maximum(fa, fb) + lip * (b - a) / 2
        open_ = bound > best + tol
        if not open_.any():
            break
        a, b, fa, fb = a[open_], b[open_], fa[open_], fb[open_]
        m = 0.5 * (a + b)
        fm = f(m)
        best = max(best, float(fm.max()))
        a, b, fa, fb = (np.concatenate([a, m]), np.concatenate([m, b]),
                        np.concatenate([fa, fm]), np.concatenate([fm, fb]))
    # beyond the last breakpoint both terms decay like 1/(1+|t|)
    return max(head, best)


def d_hausdorff(K1, K2, tol=1e-6):
    if len(K1) == 0 or len(K2) == 0:
        raise ValueError("families must be non-empty")
    D = np.array([[d_pi(a, b, tol) for b in K2.paths] for a in K1.paths])
    return float(max(D.min(axis=1).max(), D.min(axis=0).max()))


# -- counting statistic -------------------------------------------------------------

def _segment_key(p, t):
    """Identity of the segment a forward path occupies at scaled time t."""
    ts = p.scaled_times()
    i = int(np.searchsorted(ts, t, side="left"))
    if i < len(ts) and ts[i] == t:
        return ("v",) + ((p.keys[i],) if p.keys else (float(p.values[i]),))
    if p.keys:
        return ("s", p.keys[i - 1], p.keys[i])
    return ("x", float(_extended(p, t)))


def eta_count(family, t0, t, a, b):
    """Number of distinct positions at time t0 + t of the paths that start
    by t0 and pass through [a, b] at t0.  Paths must be traced past t0 + t."""
    if not t > 0 or not a < b:
        raise ValueError("need t > 0 and a < b")
    keys = set()
    for p in family.paths:
        if p.start > t0 or p.end < t0 + t:
            continue
        x = float(p(t0))
        if a <= x <= b:
            keys.add(_segment_key(p, t0 + t))
    return len(keys)


# -- normalising constants ----------------------------------------------------------

@dataclass
class GammaSigma:
    gamma: float
    sigma: float
    gamma_ci: tuple
    sigma_ci: tuple
    samples: int
    shortfall: int
    method: str

    def as_dict(self):
        return {"gamma": self.gamma, "sigma": self.sigma,
                "gamma_ci": list(self.gamma_ci), "sigma_ci": list(self.sigma_ci),
                "samples": self.samples, "shortfall": self.shortfall,
                "method": self.method}


def _ci_mean(x):
    m = float(np.mean(x))
    se = float(np.std(x, ddof=1) / math.sqrt(len(x)))
    return m, (m - 1.96 * se, m + 1.96 * se)


def _ci_sd(x):
    n = len(x)
    s2 = float(np.var(x, ddof=1))
    lo = (n - 1) * s2 / sps.chi2.ppf(0.975, n - 1)
    hi = (n - 1) * s2 / sps.chi2.ppf(0.025, n - 1)
    return math.sqrt(s2), (math.sqrt(lo), math.sqrt(hi))


def renewal_blocks(fields, steps, delta=None, m_d=None):
    """(Y_2(1), vertical hat increment) per field, or None when the run has
    fewer than two renewals within ``steps``."""
    out = []
    for cfg in fields:
        d = cfg.dimension
        r = run_exploration(cfg, np.zeros(d), steps=steps, delta=delta, m_d=m_d,
                            max_renewals=2)
        if len(r.renewal_steps) < 2:
            out.append(None)
            continue
        h1, h2 = r.renewal_sites[0, 0], r.renewal_sites[1, 0]
        out.append((int(h2[0] - h1[0]), int(h2[-1] - h1[-1])))
    return out


def estimate_gamma_sigma(fields, steps, delta=None, m_d=None):
    """gamma = mean vertical hat increment between the first two renewals,
    sigma^2 = variance of the first transverse hat increment over the same
    block, one block per independent field."""
    if len(fields) < 30:
        raise ValueError("need at least 30 trials")
    blocks = renewal_blocks(fields, steps, delta, m_d)
    got = [b for b in blocks if b is not None]
    short = len(blocks) - len(got)
    if len(got) < 2:
        return GammaSigma(math.nan, math.nan, (math.nan, math.nan), (math.nan, math.nan),
                          len(got), short, "renewal")
    y = np.array([g[0] for g in got], np.float64)
    v = np.array([g[1] for g in got], np.float64)
    gamma, gci = _ci_mean(v)
    sigma, sci = _ci_sd(y)
    return GammaSigma(gamma, sigma, gci, sci, len(got), short, "renewal")


def estimate_height_diffusivity(fields, height):
    """gamma = 1 and sigma^2 = variance of the transverse displacement per
    unit height, from one path per field traced from the origin to
    ``height``.

    With gamma fixed to one the scaled path pi(n^2 t)/(n sigma) equals the
    renewal-normalised one at the index n sqrt(gamma_renewal); only the
    ratio sigma^2/gamma enters the limit.
    """
    from .dsf import path_value, trace_path
    xs = []
    for cfg in fields:
        d = cfg.dimension
        p = trace_path(cfg, np.zeros(d), height=height)
        xs.append(path_value(p, float(height))[0])
    x = np.array(xs, np.float64) / math.sqrt(height)
    sigma, sci = _ci_sd(x)
    return GammaSigma(1.0, sigma, (1.0, 1.0), sci, len(xs), 0, "height")

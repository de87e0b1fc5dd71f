"""Joint exploration of one or two DSF paths.

Two routes implement the same process.  The classes and functions at the top
(:class:`ExplorationState`, :func:`joint_step`, :func:`update_history`,
:func:`classify_step`) are a plain Python state machine that is easy to read
and to drive by hand on synthetic fields.  :func:`run_exploration` runs the
compiled loop for long simulations.  The tests drive both on the same fields
and require identical trajectories, step kinds and renewals.

Conventions
-----------
* Starting points are lattice points, not field vertices.  They carry no
  site identity, so a path can never "land on" a start.
* A step is *up* when the movers' floors were equal before the step and
  every mover lands in the upper L1 cap of radius ``delta`` around its up
  site (the lattice site above its floor, nearest transversally).
* A step is *special* when it is up and every site of the upper sup-norm
  neighbourhood of each up site has its offset in the ``delta`` cap.
* A renewal is the first step more than ``m_d`` steps after the previous
  renewal that closes a run of ``m_d`` up steps with a special one.
"""

from dataclasses import dataclass, field as dc_field
import math

import numpy as np

from . import _kernels as K
from .dsf import h_step, max_step
from .field import SitePoint, coupled_config, neighbourhood, perturbation, points_in_box

BASIC, UP, SPECIAL_UP = "basic", "up", "special_up"
KIND_NAMES = {K.BASIC: BASIC, K.UP: UP, K.SPECIAL_UP: SPECIAL_UP}
_EPS = K._EPS


def default_m(d):
    """Smallest run length for which the history height stays below m - 4."""
    return int(math.ceil(max_step(d))) + 4


DEFAULT_DELTA = 0.05


def default_delta(d, rho=1.0):
    """Cap radius used when none is given.  It does not scale with d or rho;
    ``d * rho`` is the largest useful value (every offset then lies in the
    cap whenever its last coordinate is non-negative)."""
    return DEFAULT_DELTA


# -- history region ---------------------------------------------------------

@dataclass(frozen=True)
class UpperBall:
    apex: tuple
    radius: float

    def contains(self, y, strict=False):
        y = np.asarray(y, np.float64)
        a = np.asarray(self.apex, np.float64)
        if self.radius <= 0:
            return False
        dist = np.abs(y - a).sum()
        if strict:
            return y[-1] > a[-1] + _EPS and dist < self.radius - _EPS
        return y[-1] >= a[-1] and dist <= self.radius


@dataclass
class HistoryRegion:
    """Union of upper balls, clipped to heights at or above ``baseline``."""
    baseline: float = -math.inf
    balls: list = dc_field(default_factory=list)

    def contains(self, y, strict=False):
        y = np.asarray(y, np.float64)
        if strict:
            if y[-1] <= self.baseline + _EPS:
                return False
        elif y[-1] < self.baseline:
            return False
        return any(b.contains(y, strict) for b in self.balls)

    def bounding_box(self):
        if not self.balls:
            return None
        a = np.array([b.apex for b in self.balls])
        r = np.array([b.radius for b in self.balls])
        lo = a - r[:, None]
        hi = a + r[:, None]
        lo[:, -1] = np.maximum(a[:, -1], self.baseline)
        return lo.min(axis=0), hi.max(axis=0)


def update_history(H, moves, new_baseline):
    """Add B+(from, |to - from|_1) per move, raise the baseline and drop balls
    that lie entirely below it.  ``moves`` holds (from, to) pairs of
    coordinate vectors; the second leg of a merging double step must not be
    passed in."""
    balls = list(H.balls)
    for a, b in moves:
        a = np.asarray(a, np.float64)
        b = np.asarray(b, np.float64)
        if not b[-1] > a[-1]:
            raise ValueError("a move must go strictly up")
        balls.append(UpperBall(tuple(float(c) for c in a), float(np.abs(b - a).sum())))
    balls = [bl for bl in balls if bl.apex[-1] + bl.radius >= new_baseline]
    return HistoryRegion(float(new_baseline), balls)


def history_height(H):
    """Vertical extent of the clipped region (0 when empty)."""
    live = [b for b in H.balls if b.radius > 0 and b.apex[-1] + b.radius >= H.baseline]
    if not live:
        return 0.0
    top = max(b.apex[-1] + b.radius for b in live)
    bottom = min(max(b.apex[-1], H.baseline) for b in live)
    return float(top - bottom)


def cone_meets(x, H):
    """Whether the open cone {y : y_d - x_d > |ybar - xbar|_1} meets H."""
    x = np.asarray(x, np.float64)
    for b in H.balls:
        if b.radius <= 0 or b.apex[-1] + b.radius < H.baseline:
            continue
        a = np.asarray(b.apex)
        if np.abs(a[:-1] - x[:-1]).sum() + x[-1] - a[-1] < b.radius - _EPS:
            return True
    return False


# -- state machine ------------------------------------------------------------

@dataclass
class StepEvent:
    index: int
    movers: str  # "u", "v" or "uv"
    kind: str
    positions: tuple  # SitePoint per path after the step
    event_a: bool


@dataclass
class ExplorationState:
    """Current vertices, history and bookkeeping of the exploration.

    ``positions`` holds SitePoints, or plain coordinate tuples for lattice
    starting points that are not field vertices yet.
    """
    mode: str
    positions: list
    coalesced: bool = False
    history: HistoryRegion = dc_field(default_factory=HistoryRegion)
    used_sites: set = dc_field(default_factory=set)
    step_index: int = 0
    log: list = dc_field(default_factory=list)

    @classmethod
    def start(cls, u, v=None):
        u = tuple(float(c) for c in u)
        if v is None:
            return cls("single", [u], history=HistoryRegion(u[-1]))
        v = tuple(float(c) for c in v)
        same = u == v
        return cls("pair", [u, v], coalesced=same,
                   history=HistoryRegion(min(u[-1], v[-1])))

    def coords(self, i):
        p = self.positions[i]
        return np.array(p.position if isinstance(p, SitePoint) else p, np.float64)

    def site(self, i):
        p = self.positions[i]
        return p.site if isinstance(p, SitePoint) else None

    def hat(self, i):
        """Lattice site of the current vertex; a lattice start is its own."""
        p = self.positions[i]
        return p.site if isinstance(p, SitePoint) else tuple(int(round(c)) for c in p)

    @property
    def baseline(self):
        return min(self.coords(i)[-1] for i in range(len(self.positions)))


def up_site(x):
    x = np.asarray(x, np.float64)
    return tuple(int(math.floor(c + 0.5)) for c in x[:-1]) + (int(math.floor(x[-1])) + 1,)


def in_cap(y, apex, delta):
    return UpperBall(tuple(float(c) for c in apex), delta).contains(y)


def event_a(cfg, w, delta):
    """Every neighbourhood site of ``w`` has its offset in the delta cap."""
    for y in neighbourhood(w):
        off = perturbation(cfg, y)
        if off[-1] < 0 or np.abs(off).sum() > delta:
            return False
    return True


def _step_targets(state, cfg):
    """New positions, movers and ball-generating moves for one step."""
    if state.mode == "single":
        x = state.coords(0)
        y = h_step(cfg, x)
        return [y], "u", [(x, np.array(y.position))]
    xu, xv = state.coords(0), state.coords(1)
    if state.coalesced:
        y = h_step(cfg, xu)
        return [y, y], "uv", [(xu, np.array(y.position))]
    fu, fv = math.floor(xu[-1]), math.floor(xv[-1])
    if fu < fv:
        y = h_step(cfg, xu)
        return [y, state.positions[1]], "u", [(xu, np.array(y.position))]
    if fu > fv:
        y = h_step(cfg, xv)
        return [state.positions[0], y], "v", [(xv, np.array(y.position))]
    yu, yv = h_step(cfg, xu), h_step(cfg, xv)
    moves = [(xu, np.array(yu.position)), (xv, np.array(yv.position))]
    # h(g_u) = g_v: u takes the second leg h(g_v) as well
    if yu.site == state.site(1):
        return [yv, yv], "uv", moves
    if yv.site == state.site(0):
        return [yu, yu], "uv", moves
    return [yu, yv], "uv", moves


def classify_step(before, after, cfg, delta):
    """(kind, event flag) of the step from ``before`` to ``after``."""
    n = len(before.positions)
    xs = [before.coords(i) for i in range(n)]
    floors = {math.floor(x[-1]) for x in xs}
    ups = [up_site(x) for x in xs]
    up = len(floors) == 1 and all(in_cap(after.coords(i), ups[i], delta) for i in range(n))
    ev = all(event_a(cfg, g, delta) for g in ups)
    if not up:
        return BASIC, ev
    return (SPECIAL_UP if ev else UP), ev


def joint_step(state, cfg, delta=None, track_history=True):
    """One transition of the exploration; returns a new state."""
    d = cfg.dimension
    delta = default_delta(d, cfg.half_width) if delta is None else delta
    targets, movers, moves = _step_targets(state, cfg)
    nxt = ExplorationState(state.mode, list(targets), state.coalesced,
                           state.history, set(state.used_sites),
                           state.step_index + 1, state.log)
    if state.mode == "pair" and not state.coalesced and nxt.site(0) is not None \
            and nxt.site(0) == nxt.site(1):
        nxt.coalesced = True
    if state.coalesced:
        # absorbed: the pair moves as one and adds no history
        moves = []
    if track_history:
        nxt.history = update_history(state.history, moves, nxt.baseline)
    else:
        nxt.history = HistoryRegion(nxt.baseline, [])
    for t in targets:
        if isinstance(t, SitePoint):
            nxt.used_sites.add(t.site)
    kind, ev = classify_step(state, nxt, cfg, delta)
    nxt.log = state.log + [StepEvent(nxt.step_index, movers, kind, tuple(targets), ev)]
    return nxt


# -- renewals -------------------------------------------------------------------

@dataclass
class RenewalRecord:
    j: int
    tau: int
    hat_sites: tuple
    gap: int
    width: float
    Y: tuple = None
    Z: tuple = None


def detect_renewals(kinds, m_d, hats=None, start_hats=None):
    """Renewal steps of a classified step sequence.

    ``kinds`` lists step kinds (strings or kernel codes) for steps 1, 2, ...;
    ``hats[n-1]`` gives the hat sites after step n.  The j-th renewal is the
    first n > tau_{j-1} + m_d such that steps n - m_d + 1 .. n are up and
    step n is special.
    """
    if m_d < 5:
        raise ValueError("m_d must be at least 5")
    out = []
    last = 0
    run = 0
    for n, k in enumerate(kinds, start=1):
        k = KIND_NAMES.get(k, k)
        run = run + 1 if k in (UP, SPECIAL_UP) else 0
        if k == SPECIAL_UP and run >= m_d and n > last + m_d:
            gap = n - last
            hs = tuple(hats[n - 1]) if hats is not None else None
            out.append(RenewalRecord(len(out) + 1, n, hs, gap, 2.0 * m_d * gap))
            last = n
    return out


def extract_observables(records, mode="single", start_hats=None):
    """Y, Z, gap and width sequences plus the first j >= 2 with Z_j = 0.

    Y_j is the transverse hat increment between renewals j - 1 and j (with
    renewal 0 at the start); pass ``start_hats`` to get Y_1.  Z_j is the
    transverse difference of the two hat sites at renewal j.
    """
    Y, Z = [], []
    prev = None if start_hats is None else start_hats[0]
    for r in records:
        hu = r.hat_sites[0]
        if prev is not None:
            r.Y = tuple(int(a - b) for a, b in zip(hu[:-1], prev[:-1]))
            Y.append(r.Y)
        prev = hu
        if mode == "pair":
            hv = r.hat_sites[1]
            r.Z = tuple(int(a - b) for a, b in zip(hu[:-1], hv[:-1]))
            Z.append(r.Z)
    nu = None
    for r in records:
        if mode == "pair" and r.j >= 2 and not any(r.Z):
            nu = r.j
            break
    return {"Y": Y, "Z": Z,
            "gaps": [r.gap for r in records],
            "widths": [r.width for r in records],
            "nu": nu}


# -- invariants ------------------------------------------------------------------

@dataclass
class InvariantReport:
    ok: bool
    interior_points: list
    cone_hits: list
    height: float
    height_bound: float

    def __bool__(self):
        return self.ok


def verify_exploration_invariants(state, cfg, m_d=None):
    """Empty interior, cone disjointness and the height bound for ``state``."""
    d = cfg.dimension
    m_d = default_m(d) if m_d is None else m_d
    H = state.history
    bad = []
    box = H.bounding_box()
    if box is not None:
        lo, hi = box
        for p in points_in_box(cfg, lo - 1e-6, hi + 1e-6):
            if H.contains(p.position, strict=True):
                bad.append(p)
    cones = [i for i in range(len(state.positions)) if cone_meets(state.coords(i), H)]
    h = history_height(H)
    ok = not bad and not cones and h <= m_d - 4 + _EPS
    return InvariantReport(ok, bad, cones, h, m_d - 4)


# -- compiled route ----------------------------------------------------------------

_SENTINEL = np.iinfo(np.int64).min


@dataclass
class ExplorationResult:
    steps: int
    positions: np.ndarray   # (2, d) final vertices, row 1 unused in single mode
    sites: np.ndarray
    coalesced: bool
    coalescence_step: int
    coalescence_height: float
    renewal_steps: np.ndarray
    renewal_sites: np.ndarray  # (n, 2, d)
    violations: dict
    first_violation: dict
    max_history_height: float
    max_increment: float
    witness: np.ndarray
    log_movers: np.ndarray = None
    log_kinds: np.ndarray = None
    log_event_a: np.ndarray = None
    log_positions: np.ndarray = None
    log_sites: np.ndarray = None
    start_sites: np.ndarray = None
    pair: bool = False

    def renewals(self, m_d):
        hats = [tuple(tuple(int(c) for c in s) for s in (row if self.pair else row[:1]))
                for row in self.renewal_sites]
        out = []
        last = 0
        for j, (tau, h) in enumerate(zip(self.renewal_steps, hats), start=1):
            gap = int(tau) - last
            out.append(RenewalRecord(j, int(tau), h, gap, 2.0 * m_d * gap))
            last = int(tau)
        return out

    def observables(self, m_d):
        starts = [tuple(int(c) for c in s) for s in self.start_sites]
        return extract_observables(self.renewals(m_d), "pair" if self.pair else "single",
                                   start_hats=starts)


_VIOLATION_NAMES = ("interior", "cone", "height", "increment", "cone_low_apex")


def run_exploration(cfg, u, v=None, steps=10_000, delta=None, m_d=None, log=False,
                    track_history=False, check=False, max_renewals=0,
                    stop_on_coalesce=False, height_cap=math.inf, classify=True):
    """Run the compiled exploration from lattice point ``u`` (and ``v``)."""
    d = cfg.dimension
    F = cfg.arrays()
    delta = default_delta(d, cfg.half_width) if delta is None else float(delta)
    m_d = default_m(d) if m_d is None else int(m_d)
    pair = v is not None
    u = np.asarray(u, np.float64)
    v = u.copy() if v is None else np.asarray(v, np.float64)
    if u.shape != (d,) or v.shape != (d,):
        raise ValueError(f"starts must have {d} coordinates")
    if check:
        track_history = True
    pos = np.stack([u, v]).astype(np.float64)
    site = np.full((2, d), _SENTINEL, np.int64)
    site[1, 0] += 1
    istate = np.zeros(K.N_ISTATE, np.int64)
    istate[K.S_COAL_STEP] = -1
    fstate = np.zeros(K.N_FSTATE, np.float64)
    fstate[K.F_COAL_HEIGHT] = np.nan
    if pair and np.array_equal(u, v):
        site[1] = site[0]
        istate[K.S_COALESCED] = 1
        istate[K.S_COAL_STEP] = 0
        fstate[K.F_COAL_HEIGHT] = u[-1]
    nlog = steps if log else 0
    hcap = 256 if track_history else 0
    apex = np.zeros((max(hcap, 1), d))
    rad = np.zeros(max(hcap, 1))
    if not track_history:
        # the core checks capacity before every step
        apex = np.zeros((2, d))
        rad = np.zeros(2)
    rcap = max_renewals if max_renewals > 0 else 64
    ren_tau = np.zeros(rcap, np.int64)
    ren_site = np.zeros((rcap, 2, d), np.int64)
    log_movers = np.zeros(nlog, np.int8)
    log_kind = np.zeros(nlog, np.int8)
    log_a = np.zeros(nlog, np.bool_)
    log_pos = np.zeros((nlog, 2, d))
    log_site = np.zeros((nlog, 2, d), np.int64)
    viol = np.zeros(K.N_VIOL, np.int64)
    first = np.full(K.N_VIOL, -1, np.int64)
    witness = np.full(d, np.nan)
    npos = np.zeros((2, d))
    nsite = np.zeros((2, d), np.int64)
    gu = np.zeros(d, np.int64)
    gf = np.zeros(d)
    w = np.zeros(d, np.int64)
    off = np.zeros(d)
    y = np.zeros(d)
    flags = (1 if log else 0) | (2 if track_history else 0) | (4 if check else 0) \
        | (8 if stop_on_coalesce else 0) | (16 if classify else 0)
    while True:
        status = K.explore_core(F, pos, site, pair, int(steps), delta, m_d, flags,
                                int(max_renewals), float(height_cap), istate, fstate,
                                apex, rad, log_movers, log_kind, log_a, log_pos, log_site,
                                ren_tau, ren_site, viol, first, witness,
                                npos, nsite, gu, gf, w, off, y)
        if status == K.DONE:
            break
        if status == K.RENEWALS_FULL:
            ren_tau = np.concatenate([ren_tau, np.zeros_like(ren_tau)])
            ren_site = np.concatenate([ren_site, np.zeros_like(ren_site)])
        elif status == K.HISTORY_FULL:
            if not track_history:
                raise RuntimeError("history buffer full without tracking")
            apex = np.concatenate([apex, np.zeros_like(apex)])
            rad = np.concatenate([rad, np.zeros_like(rad)])
    nren = int(istate[K.S_NREN])
    n = int(istate[K.S_N])
    starts = np.stack([np.round(u), np.round(v)]).astype(np.int64)
    return ExplorationResult(
        steps=n, positions=pos.copy(), sites=site.copy(),
        coalesced=bool(istate[K.S_COALESCED]),
        coalescence_step=int(istate[K.S_COAL_STEP]),
        coalescence_height=float(fstate[K.F_COAL_HEIGHT]),
        renewal_steps=ren_tau[:nren].copy(), renewal_sites=ren_site[:nren].copy(),
        violations=dict(zip(_VIOLATION_NAMES, (int(c) for c in viol))),
        first_violation=dict(zip(_VIOLATION_NAMES, (int(c) for c in first))),
        max_history_height=float(fstate[K.F_MAX_HEIGHT]),
        max_increment=float(fstate[K.F_MAX_INCR]),
        witness=witness,
        log_movers=log_movers[:n] if log else None,
        log_kinds=log_kind[:n] if log else None,
        log_event_a=log_a[:n] if log else None,
        log_positions=log_pos[:n] if log else None,
        log_sites=log_site[:n] if log else None,
        start_sites=starts if pair else starts[:1],
        pair=pair)


# -- independent paths and the coupled field ---------------------------------------

@dataclass
class SimultaneousRenewals:
    steps_a: np.ndarray   # common renewal indices in each marginal run
    steps_b: np.ndarray
    heights: np.ndarray   # common hat level
    hats_a: np.ndarray
    hats_b: np.ndarray
    marginal_a: np.ndarray
    marginal_b: np.ndarray
    truncated: bool


def match_renewals(levels_a, levels_b):
    """Indices of renewals whose hat levels coincide in both sequences.

    Two strictly increasing level sequences are walked together: whichever
    is behind advances to its first renewal at or above the other's level,
    and a common level is recorded when they agree.
    """
    ia, ib = [], []
    i = j = 0
    while i < len(levels_a) and j < len(levels_b):
        if levels_a[i] == levels_b[j]:
            ia.append(i)
            ib.append(j)
            i += 1
            j += 1
        elif levels_a[i] < levels_b[j]:
            i += 1
        else:
            j += 1
    return np.array(ia, np.int64), np.array(ib, np.int64)


def independent_pair_renewals(field_a, field_b, u, v, budget, delta=None, m_d=None):
    """Simultaneous renewals of two single paths on independent fields.

    The marginal renewal sequences are matched by the height of their hat
    sites, so both paths renew on the same lattice level.
    """
    u = np.asarray(u, np.float64)
    v = np.asarray(v, np.float64)
    if u[-1] != v[-1]:
        raise ValueError("starts must share the last coordinate")
    ra = run_exploration(field_a, u, steps=budget, delta=delta, m_d=m_d)
    rb = run_exploration(field_b, v, steps=budget, delta=delta, m_d=m_d)
    la = ra.renewal_sites[:, 0, -1]
    lb = rb.renewal_sites[:, 0, -1]
    ia, ib = match_renewals(la, lb)
    # censored when one run has renewals beyond the last match that the other
    # run never reached
    top = min(la[-1] if len(la) else -np.inf, lb[-1] if len(lb) else -np.inf)
    last = la[ia[-1]] if len(ia) else -np.inf
    truncated = bool(len(ia) == 0 or last < top or ra.steps >= budget or rb.steps >= budget)
    return SimultaneousRenewals(ra.renewal_steps[ia], rb.renewal_steps[ib], la[ia],
                                ra.renewal_sites[ia, 0], rb.renewal_sites[ib, 0],
                                ra.renewal_steps, rb.renewal_steps, truncated)


def coupled_field(field_a, field_b, field_c, u, v, r):
    """Field reading ``field_a`` within transverse L1 distance r of u,
    ``field_b`` within r of v and ``field_c`` elsewhere."""
    return coupled_config(field_a, field_b, field_c, u, v, r)

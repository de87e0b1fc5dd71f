"""Compiled inner loops.

Everything that runs per step lives here so the Python layer only does
bookkeeping.  A field is passed around as the tuple ``(ip, fp, seeds, okeys,
ovals)`` built by :meth:`perturbed_dsf.field.FieldConfig.arrays`:

* ``ip``    int64[3]   dimension, mode (0 plain, 1 coupled), unused
* ``fp``    float64[6] half width, coupling radius, u-centre (2), v-centre (2)
* ``seeds`` uint64[3]  seed (plain) or the three seeds A, B, C (coupled)
* ``okeys`` int64[n]   sorted packed override keys
* ``ovals`` float64[n, d] override offsets, same order as ``okeys``

The hot kernels are compiled with ``_nrt=False`` and take their scratch
buffers from the caller.  With reference counting enabled numba emits
incref/decref pairs around every inlined site lookup, which made a lookup
roughly eight times slower than the hash itself.
"""

import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0
# offsets live on this grid so that site + offset is exact in float64
_GRID = 4294967296.0
_INV_GRID = 1.0 / 4294967296.0

PACK_OFFSET = 1 << 20
PACK_BITS = 21

# step kinds
BASIC = 0
UP = 1
SPECIAL_UP = 2

# movers bit mask
MOVE_U = 1
MOVE_V = 2

# violation slots
V_INTERIOR = 0
V_CONE = 1
V_HEIGHT = 2
V_INCREMENT = 3
# cone hits restricted to balls whose apex lies below the baseline
V_CONE_LOW = 4
N_VIOL = 5

# integer state slots of the exploration core
S_N = 0
S_RUN = 1
S_LAST_TAU = 2
S_NREN = 3
S_NB = 4
S_COALESCED = 5
S_COAL_STEP = 6
N_ISTATE = 7

# float state slots
F_COAL_HEIGHT = 0
F_MAX_HEIGHT = 1
F_MAX_INCR = 2
N_FSTATE = 3

# exploration core return codes
DONE = 0
RENEWALS_FULL = 1
HISTORY_FULL = 2

_EPS = 1e-9


@njit(cache=True, inline='always')
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True, inline='always')
def _hash_offset(seed, w, d, rho, out):
    h = mix64(seed ^ _GOLDEN)
    for i in range(d):
        h = mix64(h ^ (np.uint64(w[i]) + _GOLDEN))
    for i in range(d):
        z = mix64(h + np.uint64(i + 1) * _GOLDEN)
        u = float(z >> _S11) * _INV53
        out[i] = np.trunc(rho * (2.0 * u - 1.0) * _GRID) * _INV_GRID


@njit(cache=True, inline='always', _nrt=False)
def site_offset(F, w, out):
    ip, fp, seeds, okeys, ovals = F
    d = ip[0]
    n_ov = okeys.shape[0]
    if n_ov > 0:
        key = 0
        for i in range(d):
            c = w[i] + PACK_OFFSET
            if c < 0 or c >= (1 << PACK_BITS):
                key = -1
                break
            key |= c << (PACK_BITS * i)
        if key >= 0:
            lo = 0
            hi = n_ov
            while lo < hi:
                mid = (lo + hi) >> 1
                if okeys[mid] < key:
                    lo = mid + 1
                else:
                    hi = mid
            if lo < n_ov and okeys[lo] == key:
                for i in range(d):
                    out[i] = ovals[lo, i]
                return
    si = 0
    if ip[1] == 1:
        du = 0.0
        dv = 0.0
        for i in range(d - 1):
            du += abs(w[i] - fp[2 + i])
            dv += abs(w[i] - fp[4 + i])
        if du < fp[1]:
            si = 0
        elif dv < fp[1]:
            si = 1
        else:
            si = 2
    _hash_offset(seeds[si], w, d, fp[0], out)


@njit(cache=True)
def offsets_for(F, sites):
    """Offsets of a block of lattice sites (rows)."""
    n, d = sites.shape
    out = np.empty((n, d), np.float64)
    for k in range(n):
        site_offset(F, sites[k], out[k])
    return out


@njit(cache=True, inline='always')
def l1(a, b, d):
    s = 0.0
    for i in range(d):
        s += abs(a[i] - b[i])
    return s


@njit(cache=True, inline='always')
def lex_less(a, b, d):
    for i in range(d):
        if a[i] < b[i]:
            return True
        if a[i] > b[i]:
            return False
    return False


@njit(cache=True, inline='always')
def same_site(a, b, d):
    for i in range(d):
        if a[i] != b[i]:
            return False
    return True


@njit(cache=True, inline='always')
def shell_limit(d, rho):
    # far beyond any admissible step; the shell loop exits long before
    return int(np.ceil((d - 1) * (0.5 + rho) + 2.0 + 3.0 * rho)) + 4


@njit(cache=True, _nrt=False)
def h_step_into(F, x, out_pos, out_site, w, off, y):
    """Nearest (L1) field point with strictly larger last coordinate.

    ``w``, ``off``, ``y`` are scratch vectors of length d.  Returns the L1
    distance; the point and its lattice site go to ``out_pos``/``out_site``.
    """
    ip = F[0]
    d = ip[0]
    rho = F[1][0]
    ct0 = int(np.floor(x[0] + 0.5))
    ct1 = int(np.floor(x[1] + 0.5)) if d == 3 else 0
    wlow = int(np.floor(x[d - 1] - rho)) + 1
    best = np.inf
    found = False
    shell_slack = max(2.0 * rho, 0.5 + rho)
    kmax = shell_limit(d, rho)
    for k in range(kmax + 1):
        if found and k - shell_slack > best:
            break
        bl = -k if d == 3 else 0
        bh = k if d == 3 else 0
        for a in range(-k, k + 1):
            for b in range(bl, bh + 1):
                for c in range(0, k + 1):
                    if max(abs(a), abs(b), c) != k:
                        continue
                    w[0] = ct0 + a
                    if d == 3:
                        w[1] = ct1 + b
                    w[d - 1] = wlow + c
                    lb = 0.0
                    for i in range(d - 1):
                        g = abs(w[i] - x[i]) - rho
                        if g > 0.0:
                            lb += g
                    g = w[d - 1] - rho - x[d - 1]
                    if g > 0.0:
                        lb += g
                    if found and lb > best:
                        continue
                    site_offset(F, w, off)
                    for i in range(d):
                        y[i] = w[i] + off[i]
                    if y[d - 1] <= x[d - 1]:
                        continue
                    dist = l1(y, x, d)
                    if (not found) or dist < best or (dist == best and lex_less(y, out_pos, d)):
                        best = dist
                        found = True
                        for i in range(d):
                            out_pos[i] = y[i]
                            out_site[i] = w[i]
    return best


@njit(cache=True)
def h_step(F, x):
    d = F[0][0]
    pos = np.empty(d, np.float64)
    site = np.empty(d, np.int64)
    dist = h_step_into(F, x, pos, site, np.empty(d, np.int64),
                       np.empty(d, np.float64), np.empty(d, np.float64))
    return pos, site, dist


@njit(cache=True, _nrt=False)
def _trace_core(F, start, max_steps, height_cap, out_pos, out_site, w, off, y):
    d = F[0][0]
    n = 0
    cur = start
    while n < max_steps:
        h_step_into(F, cur, out_pos[n], out_site[n], w, off, y)
        cur = out_pos[n]
        n += 1
        if cur[d - 1] >= height_cap:
            break
    return n


@njit(cache=True)
def trace(F, start, max_steps, height_cap):
    """Vertices h(start), h^2(start), ... until a step count or height cap."""
    d = F[0][0]
    out_pos = np.empty((max_steps, d), np.float64)
    out_site = np.empty((max_steps, d), np.int64)
    n = _trace_core(F, start.astype(np.float64), max_steps, height_cap,
                    out_pos, out_site, np.empty(d, np.int64),
                    np.empty(d, np.float64), np.empty(d, np.float64))
    return out_pos[:n].copy(), out_site[:n].copy()


@njit(cache=True, _nrt=False)
def _merge_core(F, pos, site, alive, max_steps, height_cap, w, off, y, npos, nsite):
    """Advance k paths lowest-first and merge them on a shared vertex.

    A path is only ever advanced while it is the lowest live one, so two
    paths that share a vertex are both sitting on it at some moment and the
    site comparison after each move sees it.  Returns (steps used, height of
    the last merge, number of live paths).
    """
    k, d = pos.shape
    n = 0
    last_merge = -np.inf
    live = 0
    for i in range(k):
        if alive[i]:
            live += 1
    while live > 1 and n < max_steps:
        lo = -1
        for i in range(k):
            if alive[i] and (lo < 0 or pos[i, d - 1] < pos[lo, d - 1]):
                lo = i
        if pos[lo, d - 1] >= height_cap:
            break
        h_step_into(F, pos[lo], npos, nsite, w, off, y)
        n += 1
        for i in range(d):
            pos[lo, i] = npos[i]
            site[lo, i] = nsite[i]
        for j in range(k):
            if j != lo and alive[j] and same_site(site[j], nsite, d) \
                    and pos[j, d - 1] == npos[d - 1]:
                alive[lo] = False
                live -= 1
                last_merge = npos[d - 1]
                break
    return n, last_merge, live


@njit(cache=True)
def merge_paths(F, starts, max_steps, height_cap):
    """Trace paths from ``starts`` (rows) until all share one vertex.

    Identical starts are merged up front at their common start height.
    Returns (steps, merge height or nan, live paths at exit).
    """
    k, d = starts.shape
    pos = starts.astype(np.float64).copy()
    site = np.zeros((k, d), np.int64)
    alive = np.ones(k, np.bool_)
    last = -np.inf
    for i in range(k):
        for j in range(i):
            if alive[j] and (starts[i] == starts[j]).all():
                alive[i] = False
                last = max(last, pos[i, d - 1])
                break
    # a start is not a field vertex: give it an impossible site key
    for i in range(k):
        site[i, :] = np.iinfo(np.int64).min + i
    n, merge, live = _merge_core(F, pos, site, alive, max_steps, height_cap,
                                 np.empty(d, np.int64), np.empty(d, np.float64),
                                 np.empty(d, np.float64), np.empty(d, np.float64),
                                 np.empty(d, np.int64))
    if live > 1:
        return n, np.nan, live
    merge = max(merge, last)
    if merge == -np.inf:
        merge = starts[0, d - 1]
    return n, merge, live


@njit(cache=True, inline='always')
def up_site(x, d, out):
    """Closest lattice site one level above the floor of ``x``."""
    for i in range(d - 1):
        out[i] = int(np.floor(x[i] + 0.5))
    out[d - 1] = int(np.floor(x[d - 1])) + 1


@njit(cache=True, inline='always')
def in_upper_ball(y, apex, radius, d):
    if radius <= 0.0:
        return False
    if y[d - 1] < apex[d - 1]:
        return False
    s = 0.0
    for i in range(d):
        s += abs(y[i] - apex[i])
    return s <= radius


@njit(cache=True, _nrt=False)
def event_a_into(F, wsite, delta, y, off):
    """All sites of the upper sup-norm neighbourhood sit in their delta caps."""
    d = F[0][0]
    bl = -1 if d == 3 else 0
    bh = 1 if d == 3 else 0
    for c in range(0, 2):
        for a in range(-1, 2):
            for b in range(bl, bh + 1):
                y[0] = wsite[0] + a
                if d == 3:
                    y[1] = wsite[1] + b
                y[d - 1] = wsite[d - 1] + c
                site_offset(F, y, off)
                if off[d - 1] < 0.0:
                    return False
                s = 0.0
                for i in range(d):
                    s += abs(off[i])
                if s > delta:
                    return False
    return True


@njit(cache=True)
def event_a(F, wsite, delta):
    d = F[0][0]
    return event_a_into(F, wsite, delta, np.empty(d, np.int64), np.empty(d, np.float64))


@njit(cache=True, _nrt=False)
def history_height(apex, rad, nb, baseline, d):
    top = -np.inf
    bottom = np.inf
    for i in range(nb):
        t = apex[i, d - 1] + rad[i]
        if t < baseline or rad[i] <= 0.0:
            continue
        bt = max(apex[i, d - 1], baseline)
        if t > top:
            top = t
        if bt < bottom:
            bottom = bt
    if top == -np.inf:
        return 0.0
    return top - bottom


@njit(cache=True, _nrt=False)
def count_interior(F, apex, rad, nb, baseline, witness, w, off, y):
    """Field points strictly inside the clipped history region."""
    d = F[0][0]
    rho = F[1][0]
    bad = 0
    for i in range(nb):
        l = rad[i]
        if l <= 0.0 or apex[i, d - 1] + l < baseline:
            continue
        lo0 = int(np.floor(apex[i, 0] - l - rho))
        hi0 = int(np.ceil(apex[i, 0] + l + rho))
        lo1 = int(np.floor(apex[i, 1] - l - rho)) if d == 3 else 0
        hi1 = int(np.ceil(apex[i, 1] + l + rho)) if d == 3 else 0
        zlo = int(np.floor(max(apex[i, d - 1], baseline) - rho))
        zhi = int(np.ceil(apex[i, d - 1] + l + rho))
        for a in range(lo0, hi0 + 1):
            for b in range(lo1, hi1 + 1):
                for c in range(zlo, zhi + 1):
                    w[0] = a
                    if d == 3:
                        w[1] = b
                    w[d - 1] = c
                    lb = 0.0
                    for k in range(d):
                        g = abs(w[k] - apex[i, k]) - rho
                        if g > 0.0:
                            lb += g
                    if lb >= l:
                        continue
                    site_offset(F, w, off)
                    for k in range(d):
                        y[k] = w[k] + off[k]
                    if y[d - 1] <= apex[i, d - 1] + _EPS or y[d - 1] <= baseline + _EPS:
                        continue
                    s = 0.0
                    for k in range(d):
                        s += abs(y[k] - apex[i, k])
                    if s < l - _EPS:
                        if bad == 0:
                            for k in range(d):
                                witness[k] = y[k]
                        bad += 1
    return bad


@njit(cache=True, _nrt=False)
def cone_hits(x, apex, rad, nb, baseline, d, low_only):
    """Number of history balls meeting the open cone above ``x``.

    The clipped ball B+(a, l) meets {y : y_d - x_d > |ybar - xbar|_1} iff
    |abar - xbar|_1 + x_d - a_d < l (Minkowski sum of two L1 balls at each
    height; the sum of radii does not depend on the height).
    """
    n = 0
    for i in range(nb):
        l = rad[i]
        if l <= 0.0 or apex[i, d - 1] + l < baseline:
            continue
        if low_only and apex[i, d - 1] >= baseline:
            continue
        s = 0.0
        for k in range(d - 1):
            s += abs(apex[i, k] - x[k])
        if s + x[d - 1] - apex[i, d - 1] < l - _EPS:
            n += 1
    return n


@njit(cache=True, _nrt=False)
def _prune(apex, rad, nb, baseline, d):
    j = 0
    for i in range(nb):
        if apex[i, d - 1] + rad[i] < baseline:
            continue
        if j != i:
            for k in range(d):
                apex[j, k] = apex[i, k]
            rad[j] = rad[i]
        j += 1
    return j


@njit(cache=True, _nrt=False)
def explore_core(F, pos, site, pair, n_steps, delta, m_d, flags, max_renewals,
                 height_cap, istate, fstate, apex, rad,
                 log_movers, log_kind, log_a, log_pos, log_site,
                 ren_tau, ren_site, viol, first_viol, witness,
                 npos, nsite, gu, gfu, w, off, y):
    """Run the (joint) exploration process in place.

    ``pos``/``site`` hold the current vertices (row 0 is u, row 1 is v).
    ``flags`` bits: 1 log steps, 2 track history, 4 check invariants,
    8 stop on coalescence, 16 classify steps.  All counters live in
    ``istate``/``fstate`` so the caller can grow a full buffer and resume.
    """
    d = F[0][0]
    log_steps = (flags & 1) != 0
    track = (flags & 2) != 0
    check = (flags & 4) != 0
    stop_on_coalesce = (flags & 8) != 0
    classify = (flags & 16) != 0
    rmax = 1.5 * (d - 1) + 3.0
    hcap = rad.shape[0]
    rcap = ren_tau.shape[0]

    n = istate[S_N]
    run = istate[S_RUN]
    last_tau = istate[S_LAST_TAU]
    nren = istate[S_NREN]
    nb = istate[S_NB]
    coalesced = istate[S_COALESCED] != 0
    status = DONE

    while n < n_steps:
        if nren >= rcap:
            status = RENEWALS_FULL
            break
        if nb + 2 > hcap:
            status = HISTORY_FULL
            break
        fu = int(np.floor(pos[0, d - 1]))
        fv = int(np.floor(pos[1, d - 1])) if pair else fu
        movers = 0
        lu = 0.0
        lv = 0.0
        if not pair:
            lu = h_step_into(F, pos[0], npos[0], nsite[0], w, off, y)
            movers = MOVE_U
        elif coalesced:
            lu = h_step_into(F, pos[0], npos[0], nsite[0], w, off, y)
            for k in range(d):
                npos[1, k] = npos[0, k]
                nsite[1, k] = nsite[0, k]
            movers = MOVE_U | MOVE_V
        elif fu < fv:
            lu = h_step_into(F, pos[0], npos[0], nsite[0], w, off, y)
            for k in range(d):
                npos[1, k] = pos[1, k]
                nsite[1, k] = site[1, k]
            movers = MOVE_U
        elif fu > fv:
            lv = h_step_into(F, pos[1], npos[1], nsite[1], w, off, y)
            for k in range(d):
                npos[0, k] = pos[0, k]
                nsite[0, k] = site[0, k]
            movers = MOVE_V
        else:
            lu = h_step_into(F, pos[0], npos[0], nsite[0], w, off, y)
            lv = h_step_into(F, pos[1], npos[1], nsite[1], w, off, y)
            movers = MOVE_U | MOVE_V
            if same_site(nsite[0], site[1], d):
                # u steps onto v: u follows with a second step
                for k in range(d):
                    npos[0, k] = npos[1, k]
                    nsite[0, k] = nsite[1, k]
            elif same_site(nsite[1], site[0], d):
                for k in range(d):
                    npos[1, k] = npos[0, k]
                    nsite[1, k] = nsite[0, k]

        # an absorbed pair adds no history
        if track and not coalesced:
            if movers & MOVE_U:
                for k in range(d):
                    apex[nb, k] = pos[0, k]
                rad[nb] = lu
                nb += 1
            if movers & MOVE_V:
                for k in range(d):
                    apex[nb, k] = pos[1, k]
                rad[nb] = lv
                nb += 1

        # classification uses the pre-step positions
        up = False
        ev = False
        if classify and fu == fv:
            up_site(pos[0], d, gu)
            for k in range(d):
                gfu[k] = gu[k]
            up = in_upper_ball(npos[0], gfu, delta, d)
            if up and pair:
                up_site(pos[1], d, gu)
                for k in range(d):
                    gfu[k] = gu[k]
                up = in_upper_ball(npos[1], gfu, delta, d)
        if classify and (up or log_steps):
            up_site(pos[0], d, gu)
            ev = event_a_into(F, gu, delta, w, off)
            if ev and pair:
                up_site(pos[1], d, gu)
                ev = event_a_into(F, gu, delta, w, off)
        kind = BASIC
        if up:
            kind = SPECIAL_UP if ev else UP

        # h-step lengths; the second leg of a merge is the partner's step
        step_inc = max(lu, lv)
        if step_inc > fstate[F_MAX_INCR]:
            fstate[F_MAX_INCR] = step_inc

        for k in range(d):
            pos[0, k] = npos[0, k]
            site[0, k] = nsite[0, k]
            if pair:
                pos[1, k] = npos[1, k]
                site[1, k] = nsite[1, k]
        n += 1

        if pair and not coalesced and same_site(site[0], site[1], d):
            coalesced = True
            istate[S_COAL_STEP] = n
            fstate[F_COAL_HEIGHT] = pos[0, d - 1]

        baseline = min(pos[0, d - 1], pos[1, d - 1]) if pair else pos[0, d - 1]
        if track:
            nb = _prune(apex, rad, nb, baseline, d)
            hh = history_height(apex, rad, nb, baseline, d)
            if hh > fstate[F_MAX_HEIGHT]:
                fstate[F_MAX_HEIGHT] = hh
            if check:
                if count_interior(F, apex, rad, nb, baseline, witness, w, off, y) > 0:
                    viol[V_INTERIOR] += 1
                    if first_viol[V_INTERIOR] < 0:
                        first_viol[V_INTERIOR] = n
                c = cone_hits(pos[0], apex, rad, nb, baseline, d, False)
                if pair:
                    c += cone_hits(pos[1], apex, rad, nb, baseline, d, False)
                if c > 0:
                    viol[V_CONE] += 1
                    if first_viol[V_CONE] < 0:
                        first_viol[V_CONE] = n
                    c = cone_hits(pos[0], apex, rad, nb, baseline, d, True)
                    if pair:
                        c += cone_hits(pos[1], apex, rad, nb, baseline, d, True)
                    if c > 0:
                        viol[V_CONE_LOW] += 1
                        if first_viol[V_CONE_LOW] < 0:
                            first_viol[V_CONE_LOW] = n
                if hh > m_d - 4 + _EPS:
                    viol[V_HEIGHT] += 1
                    if first_viol[V_HEIGHT] < 0:
                        first_viol[V_HEIGHT] = n
        if check and step_inc > rmax + _EPS:
            viol[V_INCREMENT] += 1
            if first_viol[V_INCREMENT] < 0:
                first_viol[V_INCREMENT] = n

        if log_steps:
            i = n - 1
            log_movers[i] = movers
            log_kind[i] = kind
            log_a[i] = ev
            for k in range(d):
                log_pos[i, 0, k] = pos[0, k]
                log_site[i, 0, k] = site[0, k]
                log_pos[i, 1, k] = pos[1, k]
                log_site[i, 1, k] = site[1, k]

        if up:
            run += 1
        else:
            run = 0
        if kind == SPECIAL_UP and run >= m_d and n > last_tau + m_d:
            ren_tau[nren] = n
            for k in range(d):
                ren_site[nren, 0, k] = site[0, k]
                ren_site[nren, 1, k] = site[1, k]
            nren += 1
            last_tau = n
            if max_renewals > 0 and nren >= max_renewals:
                break
        if stop_on_coalesce and coalesced:
            break
        if baseline >= height_cap:
            break

    istate[S_N] = n
    istate[S_RUN] = run
    istate[S_LAST_TAU] = last_tau
    istate[S_NREN] = nren
    istate[S_NB] = nb
    istate[S_COALESCED] = 1 if coalesced else 0
    return status

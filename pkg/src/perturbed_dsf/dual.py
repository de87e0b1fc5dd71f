"""The downward dual forest of a planar DSF, built over a finite window.

For a point (x, t) the right flank is the path that started strictly below t
and passes closest to the right of x at height t; the left flank mirrors it.
Every vertex a = (x, t) gets dual vertices halfway to its flanks, and a dual
vertex steps down to a dual vertex of whichever flank started higher.

Any path passing height t does so along one edge (z, h(z)) with
z_2 < t <= h(z)_2, and edges are shorter than the h-step bound, so a flank
query only needs the edges that start within that bound of the answer.  The
index keeps the edges of every vertex in an inflated box and refuses (with
:class:`MarginExhausted`) any answer it cannot certify from that box.
"""

from dataclasses import dataclass
import json

import numpy as np
from numba import njit

from . import _kernels as K
from .dsf import DsfPath, max_step, trace_path
from .field import SitePoint, offsets, sites_in_range

LEFT, RIGHT = 0, 1


class MarginExhausted(RuntimeError):
    """A flank could not be certified from the indexed edges."""


@dataclass
class ForestIndex:
    """Edges (z, h(z)) of every vertex with site in a box, sorted by z_2."""
    zpos: np.ndarray
    zsite: np.ndarray
    hpos: np.ndarray
    hsite: np.ndarray
    lo: np.ndarray  # box of certified start positions
    hi: np.ndarray
    reach: float

    def __len__(self):
        return len(self.zpos)


@njit(cache=True)
def _edges(F, sites, offs, hpos, hsite):
    d = sites.shape[1]
    x = np.empty(d)
    w = np.empty(d, np.int64)
    off = np.empty(d)
    y = np.empty(d)
    for k in range(sites.shape[0]):
        for i in range(d):
            x[i] = sites[k, i] + offs[k, i]
        K.h_step_into(F, x, hpos[k], hsite[k], w, off, y)


def forest_index(cfg, lo, hi):
    """Index all field vertices whose site lies in the box [lo, hi]."""
    if cfg.dimension != 2:
        raise ValueError("the dual forest is planar")
    rho = cfg.half_width
    sites = sites_in_range(np.ceil(np.asarray(lo) - rho), np.floor(np.asarray(hi) + rho))
    offs = offsets(cfg, sites)
    pos = sites + offs
    keep = np.all((pos >= lo) & (pos <= hi), axis=1)
    sites, pos = sites[keep], pos[keep]
    hpos = np.empty_like(pos)
    hsite = np.empty_like(sites)
    _edges(cfg.arrays(), sites, offs[keep], hpos, hsite)
    order = np.lexsort((pos[:, 0], pos[:, 1]))
    return ForestIndex(pos[order], sites[order], hpos[order], hsite[order],
                       np.asarray(lo, np.float64), np.asarray(hi, np.float64),
                       max_step(2))


@njit(cache=True)
def _flank(zpos, hpos, reach, lo0, hi0, lo1, x, t, side):
    """Index of the flanking edge, or -2 when the box cannot certify it."""
    n = zpos.shape[0]
    # edges crossing t start in [t - reach, t)
    a = np.searchsorted(zpos[:, 1], t - reach, side="left")
    b = np.searchsorted(zpos[:, 1], t, side="left")
    best = -1
    bc = 0.0
    bs = 0.0
    for k in range(a, b):
        if hpos[k, 1] < t:
            continue
        dt = hpos[k, 1] - zpos[k, 1]
        slope = (hpos[k, 0] - zpos[k, 0]) / dt
        # exact at the edge's end so paths through (x, t) itself drop out
        c = hpos[k, 0] if hpos[k, 1] == t else zpos[k, 0] + slope * (t - zpos[k, 1])
        if side == 1:
            if c <= x:
                continue
            # ties (edges meeting at height t): the one closest just below t
            if best < 0 or c < bc or (c == bc and slope > bs):
                best, bc, bs = k, c, slope
        else:
            if c >= x:
                continue
            if best < 0 or c > bc or (c == bc and slope < bs):
                best, bc, bs = k, c, slope
    if best < 0 or t - reach < lo1:
        return -2
    # every edge crossing between x and the flank starts within reach of it
    if min(x, bc) - reach < lo0 or max(x, bc) + reach > hi0:
        return -2
    return best


def flank_edge(index, x, t, side):
    k = _flank(index.zpos, index.hpos, index.reach, index.lo[0], index.hi[0],
               index.lo[1], float(x), float(t), int(side))
    if k < 0:
        raise MarginExhausted(f"flank of ({x}, {t}) not certifiable in the indexed box")
    return int(k)


def flank_value(index, k, t):
    z, h = index.zpos[k], index.hpos[k]
    if h[1] == t:
        return float(h[0])
    return float(z[0] + (h[0] - z[0]) * (t - z[1]) / (h[1] - z[1]))


def nearest_path(cfg, point, side, window=None, index=None, margin=20.0):
    """The path started strictly before t that passes nearest to x on the
    given side at height t, traced from its start up to height t."""
    x, t = (float(c) for c in point)
    side = RIGHT if side in ("right", RIGHT) else LEFT
    if index is None:
        if window is None:
            window = (np.array([x, t]) - 1.0, np.array([x, t]) + 1.0)
        lo = np.asarray(window[0], np.float64) - margin
        hi = np.asarray(window[1], np.float64) + margin
        index = forest_index(cfg, lo, hi)
    k = flank_edge(index, x, t, side)
    start = SitePoint.from_arrays(index.zsite[k], index.zpos[k])
    return trace_path(cfg, start, height=t)


@dataclass
class DualForest:
    """Dual vertices of the primal vertices of ``index`` that lie in the
    window.  Dual vertex 2k + side belongs to primal vertex k of the index.

    ``pos[i]`` is NaN for dual vertices that were not needed; ``target[i]``
    is the dual ancestor (an index into the same arrays) or -1.
    """
    index: ForestIndex
    window: tuple
    margin: float
    pos: np.ndarray
    target: np.ndarray
    flank: np.ndarray  # flank edge index per dual vertex
    in_window: np.ndarray  # dual vertices of window primal vertices

    def vertex_ids(self):
        return np.flatnonzero(self.in_window)

    def path(self, i, bottom=None):
        """Dual path from vertex i down to ``bottom`` (window bottom by default)."""
        bottom = self.window[0][1] if bottom is None else bottom
        out = [i]
        while self.pos[i, 1] > bottom and self.target[i] >= 0:
            i = int(self.target[i])
            out.append(i)
        return out


def _dual_vertex(index, k, side, pos, flank):
    i = 2 * k + side
    if not np.isnan(pos[i, 0]):
        return i
    x, t = index.zpos[k]
    e = flank_edge(index, x, t, side)
    pos[i] = ((x + flank_value(index, e, t)) / 2.0, t)
    flank[i] = e
    return i


def build_dual(cfg, window, margin=20.0):
    """Dual forest over ``window`` = (lo, hi) with primal edges indexed over
    the window inflated by ``margin`` (more below, for the dual steps)."""
    lo = np.asarray(window[0], np.float64)
    hi = np.asarray(window[1], np.float64)
    reach = max_step(2)
    ilo = lo - np.array([margin, margin + 3 * reach])
    ihi = hi + np.array([margin, 0.0])
    index = forest_index(cfg, ilo, ihi)
    n = len(index)
    pos = np.full((2 * n, 2), np.nan)
    target = np.full(2 * n, -1, np.int64)
    flank = np.full(2 * n, -1, np.int64)
    in_win = np.zeros(2 * n, bool)
    zp = index.zpos
    win = np.flatnonzero(np.all((zp >= lo) & (zp <= hi), axis=1))
    for k in win:
        for side in (LEFT, RIGHT):
            i = _dual_vertex(index, k, side, pos, flank)
            in_win[i] = True
    for i in np.flatnonzero(in_win):
        y, s = pos[i]
        er = flank_edge(index, y, s, RIGHT)
        el = flank_edge(index, y, s, LEFT)
        if index.zpos[er, 1] > index.zpos[el, 1]:
            target[i] = _dual_vertex(index, er, LEFT, pos, flank)
        else:
            target[i] = _dual_vertex(index, el, RIGHT, pos, flank)
    return DualForest(index, (lo, hi), margin, pos, target, flank, in_win)


# -- consistency checks ---------------------------------------------------------------

def check_edges(forest):
    """(out-degree one, strictly downward, acyclic) over the window's dual
    vertices."""
    ids = forest.vertex_ids()
    degree_ok = bool(np.all(forest.target[ids] >= 0))
    down_ok = bool(np.all(forest.pos[forest.target[ids], 1] < forest.pos[ids, 1]))
    # strictly decreasing heights along edges rule out cycles; walk anyway
    seen_ok = True
    for i in ids[:200]:
        visited = set()
        j = int(i)
        while j >= 0 and j not in visited and forest.in_window[j]:
            visited.add(j)
            j = int(forest.target[j])
        if j in visited:
            seen_ok = False
    return degree_ok, down_ok, seen_ok


@njit(cache=True)
def _crossings(ap, bp, zpos, hpos, reach):
    """Proper crossings between segments ap[i]-bp[i] (dual, downward) and the
    primal edges (sorted by start height)."""
    count = 0
    for i in range(ap.shape[0]):
        ax, at = ap[i, 0], ap[i, 1]
        bx, bt = bp[i, 0], bp[i, 1]
        tlo = min(at, bt)
        thi = max(at, bt)
        a = np.searchsorted(zpos[:, 1], tlo - reach, side="left")
        b = np.searchsorted(zpos[:, 1], thi, side="right")
        for k in range(a, b):
            cx, ct = zpos[k, 0], zpos[k, 1]
            dx, dt = hpos[k, 0], hpos[k, 1]
            d1 = (dx - cx) * (at - ct) - (dt - ct) * (ax - cx)
            d2 = (dx - cx) * (bt - ct) - (dt - ct) * (bx - cx)
            d3 = (bx - ax) * (ct - at) - (bt - at) * (cx - ax)
            d4 = (bx - ax) * (dt - at) - (bt - at) * (dx - ax)
            if ((d1 > 0 and d2 < 0) or (d1 < 0 and d2 > 0)) and \
                    ((d3 > 0 and d4 < 0) or (d3 < 0 and d4 > 0)):
                count += 1
    return count


def primal_dual_crossings(forest):
    """Number of (dual edge, primal edge) pairs that cross properly."""
    ids = forest.vertex_ids()
    ap = forest.pos[ids]
    bp = forest.pos[forest.target[ids]]
    ix = forest.index
    return int(_crossings(ap, bp, ix.zpos, ix.hpos, ix.reach))


def between_flanks(forest):
    """Whether every window dual vertex lies strictly between its primal
    vertex and the flank it was built from."""
    ids = forest.vertex_ids()
    ok = True
    for i in ids:
        k, side = divmod(int(i), 2)
        x, t = forest.index.zpos[k]
        c = flank_value(forest.index, forest.flank[i], t)
        y = forest.pos[i, 0]
        ok &= (x < y < c) if side == RIGHT else (c < y < x)
    return bool(ok)


@dataclass
class BiInfiniteReport:
    traversing: int
    starts: int
    multi: bool


def probe_bi_infinite(forest, band=None):
    """Dual paths from the window's top band that reach its bottom.

    Dual vertices within one unit of the window top and (optionally) inside
    the transverse ``band`` are followed down; the report counts the distinct
    dual vertices where they leave the window.  More than one means two dual
    paths crossed the whole window without meeting.
    """
    lo, hi = forest.window
    ids = forest.vertex_ids()
    p = forest.pos[ids]
    sel = p[:, 1] >= hi[1] - 1.0
    if band is not None:
        sel &= (p[:, 0] >= band[0]) & (p[:, 0] <= band[1])
    exits = set()
    for i in ids[sel]:
        path = forest.path(int(i), bottom=lo[1])
        if forest.pos[path[-1], 1] <= lo[1]:
            exits.add(path[-1])
    return BiInfiniteReport(len(exits), int(sel.sum()), len(exits) > 1)


def write_dual_ndjson(forest, fh):
    for i in forest.vertex_ids():
        j = int(forest.target[i])
        fh.write(json.dumps({"id": int(i), "position": [float(c) for c in forest.pos[i]],
                             "side": "right" if i % 2 else "left",
                             "target": j,
                             "target_position": [float(c) for c in forest.pos[j]]}) + "\n")

"""Single-path navigation on the perturbed lattice.

Every field vertex x points to h(x), the L1-nearest vertex with a strictly
larger last coordinate.  Following h from any start gives a path; the edges
x -> h(x) form the directed spanning forest.
"""

from dataclasses import dataclass
import json

import numpy as np

from . import _kernels as K
from .field import SitePoint, points_in_box

def max_step(d):
    """Upper bound on the L1 length of any h-step."""
    return 1.5 * (d - 1) + 3.0


class PathDomainError(ValueError):
    """Path evaluated outside the traced height range."""


def h_step(cfg, x):
    """The nearest field vertex strictly above ``x`` as a SitePoint."""
    x = np.asarray(x, np.float64)
    if x.shape != (cfg.dimension,):
        raise ValueError(f"query must have {cfg.dimension} coordinates")
    pos, site, _ = K.h_step(cfg.arrays(), x)
    return SitePoint.from_arrays(site, pos)


@dataclass
class DsfPath:
    """Vertices of a path in order of increasing height.

    ``positions`` and ``sites`` are (n, d) arrays; the path as a function of
    height joins consecutive vertices linearly.
    """
    positions: np.ndarray
    sites: np.ndarray

    def __len__(self):
        return len(self.positions)

    @property
    def dimension(self):
        return self.positions.shape[1]

    @property
    def start_time(self):
        return float(self.positions[0, -1])

    @property
    def end_time(self):
        return float(self.positions[-1, -1])

    @property
    def vertices(self):
        return [SitePoint.from_arrays(s, p) for s, p in zip(self.sites, self.positions)]

    def value(self, t):
        return path_value(self, t)


def trace_path(cfg, start, steps=None, height=None):
    """Follow h from ``start`` for ``steps`` steps or until the height
    reaches ``height``, whichever comes first.

    A :class:`SitePoint` start is a field vertex and is kept as the first
    vertex; a plain coordinate vector is not a vertex and is dropped.
    """
    if steps is None and height is None:
        raise ValueError("need a step count or a height bound")
    if steps is not None and steps <= 0:
        raise ValueError("step count must be positive")
    d = cfg.dimension
    F = cfg.arrays()
    cap = np.inf if height is None else float(height)
    head = None
    if isinstance(start, SitePoint):
        head = (np.array(start.site, np.int64), np.array(start.position, np.float64))
        x0 = head[1]
    else:
        x0 = np.asarray(start, np.float64)
    if steps is not None:
        pos, site = K.trace(F, x0, int(steps), cap)
    else:
        # grow the buffer until the height bound is met
        chunks_p, chunks_s = [], []
        x = x0
        block = max(64, int(2 * (cap - x0[-1])) + 16)
        while True:
            p, s = K.trace(F, x, block, cap)
            chunks_p.append(p)
            chunks_s.append(s)
            x = p[-1]
            if x[-1] >= cap:
                break
        pos = np.concatenate(chunks_p)
        site = np.concatenate(chunks_s)
    if head is not None:
        pos = np.vstack([head[1][None, :], pos])
        site = np.vstack([head[0][None, :], site])
    return DsfPath(pos, site)


def path_value(path, t):
    """Transverse coordinates of ``path`` at height ``t`` (linear between
    vertices).  Accepts a scalar or an array of heights."""
    h = path.positions[:, -1]
    ts = np.asarray(t, np.float64)
    if np.any(ts < h[0]) or np.any(ts > h[-1]):
        raise PathDomainError(f"height outside [{h[0]}, {h[-1]}]")
    out = np.stack([np.interp(ts, h, path.positions[:, i])
                    for i in range(path.dimension - 1)], axis=-1)
    return out


def build_forest(cfg, lo, hi):
    """Edges (x, h(x)) for every field vertex x in the box [lo, hi]."""
    F = cfg.arrays()
    edges = []
    for x in points_in_box(cfg, lo, hi):
        pos, site, _ = K.h_step(F, np.array(x.position))
        edges.append((x, SitePoint.from_arrays(site, pos)))
    return edges


def is_acyclic(edges):
    """Out-degree one and no directed cycle (checked by walking each chain
    with a visited set)."""
    nxt = {}
    for a, b in edges:
        if a.site in nxt:
            return False
        nxt[a.site] = b.site
    state = {}
    for s in nxt:
        trail = []
        while s in nxt and s not in state:
            state[s] = 1
            trail.append(s)
            s = nxt[s]
        if s in state and state[s] == 1:
            return False
        for q in trail:
            state[q] = 2
    return True


def crossing_heights(p1, p2):
    """Heights (2-D paths) where the two paths are on strictly opposite sides
    compared with some other common height.  Empty means non-crossing."""
    lo = max(p1.start_time, p2.start_time)
    hi = min(p1.end_time, p2.end_time)
    if hi < lo:
        return np.empty(0)
    hs = np.concatenate([p1.positions[:, -1], p2.positions[:, -1]])
    hs = np.unique(hs[(hs >= lo) & (hs <= hi)])
    if len(hs) == 0:
        return hs
    diff = path_value(p1, hs)[:, 0] - path_value(p2, hs)[:, 0]
    if np.all(diff >= 0) or np.all(diff <= 0):
        return np.empty(0)
    sign = np.sign(diff)
    return hs[sign != sign[np.flatnonzero(sign)[0]]]


def path_records(path, index=0):
    for s, p in zip(path.sites, path.positions):
        yield {"path": index,
               "site": [int(c) for c in s],
               "offset": [float(a - b) for a, b in zip(p, s)],
               "position": [float(c) for c in p]}


def write_paths_ndjson(paths, fh):
    """One JSON record per vertex; consecutive lines of a path share its
    ``path`` index."""
    for i, path in enumerate(paths):
        for rec in path_records(path, i):
            fh.write(json.dumps(rec) + "\n")

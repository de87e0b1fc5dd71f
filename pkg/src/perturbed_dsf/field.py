"""Perturbed integer lattice: every site w carries the point w + U_w.

Offsets are drawn lazily from a counter-based keyed hash of (seed, w), so the
field is an infinite, reproducible object that costs O(1) per queried site.
"""

from dataclasses import dataclass, field as dc_field, replace
from functools import cached_property
import itertools

import numpy as np

from . import _kernels as K


class FieldError(ValueError):
    """Invalid field parameters or queries."""


LatticeSite = tuple  # tuple of d ints


def _as_site(w, d):
    w = tuple(int(c) for c in w)
    if len(w) != d:
        raise FieldError(f"site {w} has {len(w)} coordinates, field has d={d}")
    return w


@dataclass(frozen=True)
class Coupling:
    """Composite field: sites near ``centre_u`` read field A, near ``centre_v``
    read field B, everything else reads field C.  Distances are L1 in the
    transverse coordinates."""
    seeds: tuple
    centre_u: tuple
    centre_v: tuple
    radius: float


@dataclass(frozen=True)
class FieldConfig:
    dimension: int = 2
    seed: int = 0
    half_width: float = 1.0
    overrides: tuple = ()  # sorted ((site, offset), ...)
    coupling: Coupling = None

    def __post_init__(self):
        if self.dimension not in (2, 3):
            raise FieldError(f"dimension must be 2 or 3, got {self.dimension}")
        if not self.half_width > 0:
            raise FieldError(f"half_width must be positive, got {self.half_width}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise FieldError("seed must fit in 64 unsigned bits")
        for site, off in self.overrides:
            if len(site) != self.dimension or len(off) != self.dimension:
                raise FieldError(f"override at {site} has wrong dimension")
            if any(abs(o) > self.half_width for o in off):
                raise FieldError(f"override offset {off} at {site} leaves the box")

    @property
    def rho(self):
        return self.half_width

    @cached_property
    def override_map(self):
        return dict(self.overrides)

    @cached_property
    def _arrays(self):
        d = self.dimension
        ip = np.array([d, 0, 0], np.int64)
        fp = np.zeros(6, np.float64)
        fp[0] = self.half_width
        seeds = np.array([self.seed, 0, 0], np.uint64)
        if self.coupling is not None:
            c = self.coupling
            ip[1] = 1
            fp[1] = c.radius
            fp[2:2 + d - 1] = c.centre_u[:d - 1]
            fp[4:4 + d - 1] = c.centre_v[:d - 1]
            seeds[:] = np.array(c.seeds, np.uint64)
        keys = []
        vals = []
        for site, off in self.overrides:
            key = _pack(site)
            if key < 0:
                raise FieldError(f"override site {site} outside the packable range")
            keys.append(key)
            vals.append(off)
        order = np.argsort(np.array(keys, np.int64), kind="stable")
        okeys = np.array(keys, np.int64)[order]
        ovals = np.array(vals, np.float64).reshape(-1, d)[order]
        return ip, fp, seeds, np.ascontiguousarray(okeys), np.ascontiguousarray(ovals)

    def arrays(self):
        """Tuple consumed by the compiled kernels."""
        return self._arrays


def _pack(site):
    key = 0
    for i, c in enumerate(site):
        c = c + K.PACK_OFFSET
        if c < 0 or c >= (1 << K.PACK_BITS):
            return -1
        key |= c << (K.PACK_BITS * i)
    return key


@dataclass(frozen=True)
class SitePoint:
    """A field vertex together with the lattice site it belongs to."""
    site: tuple
    offset: tuple
    position: tuple = dc_field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "position",
                           tuple(float(w) + float(o) for w, o in zip(self.site, self.offset)))

    @property
    def height(self):
        return self.position[-1]

    @classmethod
    def from_arrays(cls, site, pos):
        site = tuple(int(c) for c in site)
        return cls(site, tuple(float(p) - w for p, w in zip(pos, site)))


def perturbation(cfg, w):
    """Offset U_w of site ``w``."""
    w = _as_site(w, cfg.dimension)
    if w in cfg.override_map:
        return np.array(cfg.override_map[w], np.float64)
    return K.offsets_for(cfg.arrays(), np.array([w], np.int64))[0]


def offsets(cfg, sites):
    """Vectorised :func:`perturbation` over the rows of ``sites``."""
    sites = np.ascontiguousarray(sites, np.int64)
    if sites.ndim != 2 or sites.shape[1] != cfg.dimension:
        raise FieldError(f"sites must have shape (n, {cfg.dimension})")
    return K.offsets_for(cfg.arrays(), sites)


def site_point(cfg, w):
    w = _as_site(w, cfg.dimension)
    return SitePoint(w, tuple(perturbation(cfg, w)))


def sites_in_range(lo, hi):
    """All integer sites of the box prod [lo_i, hi_i] as an (n, d) array."""
    axes = [np.arange(int(a), int(b) + 1) for a, b in zip(lo, hi)]
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1).astype(np.int64)


def points_in_box(cfg, lo, hi):
    """Field vertices whose position lies in the closed box [lo, hi].

    Every vertex lies within ``half_width`` of its site per coordinate, so
    scanning the sites of the inflated box is exhaustive.
    """
    d = cfg.dimension
    lo = np.asarray(lo, np.float64)
    hi = np.asarray(hi, np.float64)
    if lo.shape != (d,) or hi.shape != (d,):
        raise FieldError(f"box corners must have {d} coordinates")
    if np.any(hi <= lo):
        raise FieldError("box is degenerate")
    rho = cfg.half_width
    sites = sites_in_range(np.floor(lo - rho), np.ceil(hi + rho))
    offs = offsets(cfg, sites)
    pos = sites + offs
    keep = np.all((pos >= lo) & (pos <= hi), axis=1)
    return [SitePoint(tuple(int(c) for c in s), tuple(float(o) for o in off))
            for s, off in zip(sites[keep], offs[keep])]


def with_overrides(cfg, assignments):
    """Copy of ``cfg`` where the listed sites carry fixed offsets."""
    d = cfg.dimension
    merged = dict(cfg.overrides)
    for site, off in dict(assignments).items():
        site = _as_site(site, d)
        off = tuple(float(o) for o in off)
        if len(off) != d:
            raise FieldError(f"offset {off} has wrong dimension")
        if any(abs(o) > cfg.half_width for o in off):
            raise FieldError(f"offset {off} at {site} leaves [-rho, rho]^d")
        merged[site] = off
    return replace(cfg, overrides=tuple(sorted(merged.items())))


def coupled_config(field_a, field_b, field_c, u, v, r):
    """Composite field reading A near u, B near v and C elsewhere."""
    fields = (field_a, field_b, field_c)
    d = field_a.dimension
    if any(f.dimension != d or f.half_width != field_a.half_width for f in fields):
        raise FieldError("coupled fields must share dimension and half width")
    if any(f.overrides or f.coupling is not None for f in fields):
        raise FieldError("coupled fields must be plain fields")
    ub = np.asarray(u, np.float64)[:d - 1]
    vb = np.asarray(v, np.float64)[:d - 1]
    sep = float(np.abs(ub - vb).sum())
    if not r < sep / 3.0:
        raise FieldError(f"coupling radius {r} must be below a third of the separation {sep}")
    return FieldConfig(dimension=d, seed=field_c.seed, half_width=field_a.half_width,
                       coupling=Coupling(tuple(int(f.seed) for f in fields),
                                         tuple(float(c) for c in ub),
                                         tuple(float(c) for c in vb), float(r)))


def neighbourhood(w):
    """Sites of the upper sup-norm neighbourhood of ``w``: transverse offsets
    in {-1, 0, 1} at levels w_d and w_d + 1."""
    d = len(w)
    out = []
    for c in (0, 1):
        for t in itertools.product((-1, 0, 1), repeat=d - 1):
            out.append(tuple(int(w[i]) + t[i] for i in range(d - 1)) + (int(w[-1]) + c,))
    return out

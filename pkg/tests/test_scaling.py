import math

import numpy as np
import pytest
from scipy.optimize import minimize_scalar
from hypothesis import given, strategies as st

from perturbed_dsf.dsf import path_value, trace_path
from perturbed_dsf.field import FieldConfig, points_in_box
from perturbed_dsf.scaling import (PathFamily, d_hausdorff, d_pi, estimate_gamma_sigma,
                                   eta_count, scale_path)
from perturbed_dsf.stats import eta_family


def const(value, t0=0.0, t1=1.0):
    return scale_path(([t0, t1], [value, value]), 1, 1.0, 1.0)


def grid_distance(p1, p2, n=200001):
    """max over a dense grid of the compactified difference; a lower bound
    for d_pi, tight up to the grid spacing."""
    lo = min(p1.start, p2.start)
    hi = max(p1.end, p2.end, lo) + 1.0
    t = np.linspace(lo, hi, n)

    def ext(p):
        return np.interp(t, p.scaled_times(), p.scaled_values())

    f = np.abs(np.tanh(ext(p1)) - np.tanh(ext(p2))) / (1 + np.abs(t))
    return max(float(f.max()), abs(math.tanh(p1.start) - math.tanh(p2.start)))


def piecewise_distance(p1, p2):
    """Bounded scalar maximisation on every piece between breakpoints."""
    lo = min(p1.start, p2.start)
    hi = max(p1.end, p2.end, lo)
    bps = np.unique(np.clip(np.concatenate([p1.scaled_times(), p2.scaled_times(), [0.0]]),
                            lo, hi))

    def g(t):
        a = np.interp(t, p1.scaled_times(), p1.scaled_values())
        b = np.interp(t, p2.scaled_times(), p2.scaled_values())
        return -abs(math.tanh(a) - math.tanh(b)) / (1 + abs(t))

    best = max(-g(t) for t in bps)
    for a, b in zip(bps[:-1], bps[1:]):
        r = minimize_scalar(g, bounds=(a, b), method="bounded",
                            options={"xatol": 1e-12})
        best = max(best, -r.fun)
    return max(best, grid_distance(p1, p2))


def test_scale_identity_and_endpoint():
    p = scale_path(([0.0, 1.0, 4.0], [0.0, 2.0, -2.0]), 1, 1.0, 1.0)
    assert p(4.0) == -2.0 and p(0.5) == 1.0
    q = scale_path(([0.0, 1.0, 4.0], [0.0, 2.0, -2.0]), 2, 1.0, 2.0)
    assert q.end == 1.0 and q(1.0) == -0.5
    with pytest.raises(ValueError):
        q(1.5)


def test_scale_path_validation():
    with pytest.raises(ValueError):
        scale_path(([0.0, 0.0], [0.0, 1.0]), 1, 1.0, 1.0)
    with pytest.raises(ValueError):
        scale_path(([0.0, 1.0], [0.0, 1.0]), 1, 1.0, 1.0, direction="backward")
    with pytest.raises(ValueError):
        scale_path(([0.0, 1.0], [0.0, 1.0]), 1, 0.0, 1.0)


def test_scale_dsf_path():
    p = trace_path(FieldConfig(2, 3), np.zeros(2), steps=20)
    s = scale_path(p, 3, 2.0, 0.5)
    assert s.keys[0] == tuple(p.sites[0])
    t = p.positions[-1, 1] / 18.0
    assert s(t) == pytest.approx(p.positions[-1, 0] / 1.5)


def test_d_pi_constant_paths():
    assert d_pi(const(0.0), const(0.0)) == 0.0
    assert d_pi(const(0.0), const(1.0)) == pytest.approx(math.tanh(1.0), abs=1e-9)
    assert d_pi(const(0.0), const(1.0)) == pytest.approx(0.761594, abs=1e-6)


def test_d_pi_different_starts_uses_head_term():
    a, b = const(0.0, 0.0, 2.0), const(0.0, 1.0, 2.0)
    assert d_pi(a, b) == pytest.approx(math.tanh(1.0))


def test_d_pi_direction_mismatch():
    f = const(0.0)
    b = scale_path(([1.0, 0.0], [0.0, 0.0]), 1, 1.0, 1.0, direction="backward")
    with pytest.raises(ValueError):
        d_pi(f, b)


paths = st.lists(st.tuples(st.floats(0.01, 2.0), st.floats(-3, 3)), min_size=1, max_size=6)


def build(start, segs):
    t = [start]
    x = [0.0]
    for dt, v in segs:
        t.append(t[-1] + dt)
        x.append(v)
    return scale_path((t, x), 1, 1.0, 1.0)


@given(st.floats(-2, 2), paths, st.floats(-2, 2), paths)
def test_d_pi_symmetric_and_above_grid(s1, a, s2, b):
    p, q = build(s1, a), build(s2, b)
    dpq = d_pi(p, q)
    assert dpq == pytest.approx(d_pi(q, p), abs=2e-6)
    g = grid_distance(p, q, 20001)
    assert dpq >= g - 1e-9
    assert dpq <= g + 1e-3


@given(st.floats(-2, 2), paths, st.floats(-2, 2), paths, st.floats(-2, 2), paths)
def test_d_pi_triangle(s1, a, s2, b, s3, c):
    p, q, r = build(s1, a), build(s2, b), build(s3, c)
    assert d_pi(p, r) <= d_pi(p, q) + d_pi(q, r) + 3e-6


def test_d_pi_matches_dense_grid():
    rng = np.random.default_rng(4)
    for _ in range(5):
        t = np.cumsum(rng.uniform(0.05, 0.5, 12)) - 1.0
        p = scale_path((t, rng.normal(size=12)), 1, 1.0, 1.0)
        q = scale_path((t + 0.1, rng.normal(size=12)), 1, 1.0, 1.0)
        ref = piecewise_distance(p, q)
        assert ref - 1e-9 <= d_pi(p, q, tol=1e-8) <= ref + 1e-6


def test_d_hausdorff():
    A = PathFamily((const(0.0), const(1.0)))
    B = PathFamily((const(0.0),))
    assert d_hausdorff(A, A) == 0.0
    assert d_hausdorff(A, B) == pytest.approx(math.tanh(1.0))
    assert d_hausdorff(B, A) == pytest.approx(math.tanh(1.0))
    with pytest.raises(ValueError):
        d_hausdorff(A, PathFamily(()))


def test_family_rejects_mixed_scales():
    with pytest.raises(ValueError):
        PathFamily((const(0.0), scale_path(([0.0, 1.0], [0.0, 0.0]), 2, 1.0, 1.0)))


def test_eta_count_examples():
    times = [0.0, 1.0, 2.0]
    fam = PathFamily((scale_path((times, [0.0, 0.0, 0.0]), 1, 1.0, 1.0),
                      scale_path((times, [0.5, 0.2, 0.0]), 1, 1.0, 1.0),
                      scale_path((times, [3.0, 3.0, 3.0]), 1, 1.0, 1.0)))
    assert eta_count(fam, 0.0, 2.0, 0.0, 1.0) == 1
    assert eta_count(fam, 0.0, 2.0, -1.0, 4.0) == 2
    assert eta_count(fam, 0.0, 2.0, 5.0, 6.0) == 0
    # the second path is at 0.35 at time 0.5 and still apart at 1.5
    assert eta_count(fam, 0.5, 1.0, 0.0, 1.0) == 2
    with pytest.raises(ValueError):
        eta_count(fam, 0.0, 0.0, 0.0, 1.0)


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_eta_count_monotone_in_interval_and_time(seed):
    cfg = FieldConfig(2, seed)
    fam = eta_family(cfg, 10, 1.0, 1.0, -0.5, 0.5, 1.0)
    c_small = eta_count(fam, 0.0, 1.0, -0.2, 0.2)
    c_big = eta_count(fam, 0.0, 1.0, -0.5, 0.5)
    assert 1 <= c_small <= c_big
    assert eta_count(fam, 0.0, 0.2, -0.5, 0.5) >= c_big


@pytest.mark.parametrize("seed", [9, 10])
def test_eta_family_has_every_crossing_path(seed):
    cfg = FieldConfig(2, seed)
    fam = eta_family(cfg, 5, 1.0, 1.0, 0.0, 1.0, 0.5)
    got = {round(float(p(0.0)) * 5, 9) for p in fam.paths if 0.0 <= p(0.0) <= 1.0}
    # trace every vertex of a deep box below 0 up to height 0
    want = set()
    for v in points_in_box(cfg, np.array([-15.0, -12.0]), np.array([20.0, 0.0])):
        if v.height < 0:
            c = float(path_value(trace_path(cfg, v, height=0.0), 0.0)[0])
            if 0.0 <= c <= 5.0:
                want.add(round(c, 9))
    assert got == want and len(got) >= 1


def test_estimate_gamma_sigma_needs_thirty_fields():
    with pytest.raises(ValueError):
        estimate_gamma_sigma([FieldConfig(2, i) for i in range(10)], 100)

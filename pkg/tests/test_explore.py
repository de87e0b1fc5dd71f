import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles as O
from perturbed_dsf.explore import (BASIC, KIND_NAMES, SPECIAL_UP, UP, ExplorationState,
                                   HistoryRegion, RenewalRecord, UpperBall, classify_step,
                                   cone_meets, default_m, detect_renewals, extract_observables,
                                   history_height, independent_pair_renewals, joint_step,
                                   match_renewals, run_exploration, update_history,
                                   verify_exploration_invariants)
from perturbed_dsf.field import FieldConfig, SitePoint, with_overrides


def regular2(top=80):
    return O.regular_field(2, (-6, -3), (9, top))


def run_reference(cfg, u, v=None, steps=100, delta=None):
    s = ExplorationState.start(u, v)
    for _ in range(steps):
        s = joint_step(s, cfg, delta)
    return s


# -- history ---------------------------------------------------------------------

def test_update_history_single_move():
    H = update_history(HistoryRegion(), [((0.0, 0.0), (0.4, 1.1))], 1.1)
    assert H.baseline == 1.1
    assert len(H.balls) == 1
    assert H.balls[0].apex == (0.0, 0.0)
    assert H.balls[0].radius == pytest.approx(1.5)


def test_update_history_prunes_and_rejects_downward():
    H = HistoryRegion(0.0, [UpperBall((0.0, 0.0), 1.0), UpperBall((0.0, 0.5), 2.0)])
    H2 = update_history(H, [], 1.2)
    assert [b.apex for b in H2.balls] == [(0.0, 0.5)]
    with pytest.raises(ValueError):
        update_history(H, [((0.0, 1.0), (0.0, 0.5))], 1.0)


def test_history_height():
    assert history_height(HistoryRegion()) == 0.0
    assert history_height(HistoryRegion(0.0, [UpperBall((0.0, 0.0), 1.5)])) == 1.5
    # clipped from below by the baseline
    assert history_height(HistoryRegion(1.0, [UpperBall((0.0, 0.0), 1.5)])) == 0.5


def test_upper_ball_membership():
    b = UpperBall((0.0, 0.0), 1.0)
    assert b.contains((0.5, 0.5)) and not b.contains((0.5, -0.1))
    assert not b.contains((0.5, 0.5), strict=True)
    assert b.contains((0.2, 0.2), strict=True)
    assert not UpperBall((0.0, 0.0), 0.0).contains((0.0, 0.0))


def test_cone_meets():
    H = HistoryRegion(0.0, [UpperBall((0.0, 0.0), 1.0)])
    assert cone_meets((0.0, 0.5), H)
    assert not cone_meets((3.0, 0.0), H)


# -- transitions -------------------------------------------------------------------

def test_lower_floor_moves_alone():
    cfg = FieldConfig(2, 8)
    s = ExplorationState.start((0.0, 0.0), (5.0, 1.5))
    n = joint_step(s, cfg)
    assert n.log[-1].movers == "u"
    assert n.positions[1] == s.positions[1]
    assert n.positions[0] != s.positions[0]


def test_absorbed_pair_adds_no_history():
    cfg = FieldConfig(2, 8)
    s = ExplorationState.start((0.0, 0.0), (0.0, 0.0))
    assert s.coalesced
    n = joint_step(s, cfg)
    assert n.positions[0] == n.positions[1]
    assert n.history.balls == []


def test_merge_step_takes_double_step():
    assign = {(1, 0): (-0.5, 0.5), (0, 1): (0.0, 0.2)}
    cfg = with_overrides(O.regular_field(2, (-5, -3), (6, 6)), assign)
    u = SitePoint((0, 0), (0.0, 0.01))
    v = SitePoint((1, 0), (-0.5, 0.5))
    s = ExplorationState("pair", [u, v], history=HistoryRegion(0.01))
    n = joint_step(s, cfg)
    assert n.coalesced
    assert n.positions[0] == n.positions[1]
    assert n.site(0) == (1, 1)
    assert n.coords(0) == pytest.approx((1.0, 1.01))
    # the second leg of u's double step adds no ball of its own
    assert {b.apex for b in n.history.balls} <= {u.position, v.position}


def test_single_mode_is_plain_h_iteration():
    from perturbed_dsf.dsf import trace_path
    cfg = FieldConfig(3, 2)
    s = run_reference(cfg, (0.0, 0.0, 0.0), steps=40)
    p = trace_path(cfg, np.zeros(3), steps=40)
    assert np.array_equal(s.coords(0), p.positions[-1])


# -- classification ----------------------------------------------------------------

def test_regular_field_steps_are_special_up():
    cfg = regular2()
    s = run_reference(cfg, (0.0, 0.0), (3.0, 0.0), steps=12)
    kinds = [e.kind for e in s.log]
    assert kinds[0] == BASIC
    assert set(kinds[1:]) == {SPECIAL_UP}


def test_landing_outside_cap_is_basic():
    cfg = with_overrides(regular2(), {(0, 3): (0.3, 0.3)})
    s = run_reference(cfg, (0.0, 0.0), (3.0, 0.0), steps=3)
    nxt = joint_step(s, cfg)
    assert nxt.positions[0].site == (0, 3)
    assert classify_step(s, nxt, cfg, 0.05)[0] == BASIC


def test_neighbour_outside_cap_is_up_not_special():
    # (1, 3) belongs to N((0, 3)) but its point sits off the cap
    cfg = with_overrides(regular2(), {(1, 3): (0.0, -0.3)})
    s = run_reference(cfg, (0.0, 0.0), (4.0, 0.0), steps=3)
    nxt = joint_step(s, cfg)
    kind, ev = classify_step(s, nxt, cfg, 0.05)
    assert kind == UP and not ev


# -- renewals --------------------------------------------------------------------------

def test_detect_renewals_cases():
    m = 9
    assert detect_renewals([BASIC] * 50, m) == []
    kinds = [BASIC] * 9 + [UP] * (m - 1) + [SPECIAL_UP] + [BASIC] * 5
    r = detect_renewals(kinds, m)
    assert [x.tau for x in r] == [10 + m - 1]
    with pytest.raises(ValueError):
        detect_renewals(kinds, 4)


@given(st.lists(st.sampled_from([BASIC, UP, SPECIAL_UP]), max_size=400), st.integers(5, 12))
def test_renewal_spacing_and_width(kinds, m):
    r = detect_renewals(kinds, m)
    taus = [0] + [x.tau for x in r]
    assert all(b > a + m for a, b in zip(taus, taus[1:]))
    assert all(x.width == 2 * m * x.gap for x in r)
    for x in r:
        assert kinds[x.tau - 1] == SPECIAL_UP
        assert all(k != BASIC for k in kinds[x.tau - m:x.tau])


def test_extract_observables_coalesced_and_telescoping():
    recs = [RenewalRecord(1, 10, ((0, 5), (4, 5)), 10, 180.0),
            RenewalRecord(2, 25, ((2, 9), (2, 9)), 15, 270.0),
            RenewalRecord(3, 40, ((-1, 14), (-1, 14)), 15, 270.0)]
    obs = extract_observables(recs, "pair")
    assert obs["Z"] == [(-4,), (0,), (0,)]
    assert obs["nu"] == 2
    assert np.sum(obs["Y"], axis=0).tolist() == [-1 - 0]
    assert obs["widths"] == [180.0, 270.0, 270.0]
    assert extract_observables([], "pair") == {"Y": [], "Z": [], "gaps": [], "widths": [],
                                               "nu": None}


def test_kernel_renewals_on_regular_field():
    cfg = regular2()
    m = default_m(2)
    r = run_exploration(cfg, np.zeros(2), np.array([3.0, 0.0]), steps=60, log=True)
    assert r.renewal_steps.tolist() == [10, 20, 30, 40, 50, 60]
    assert r.renewal_steps[0] == m + 1
    obs = r.observables(m)
    assert obs["Y"] == [(0,)] * 6
    assert obs["Z"] == [(-3,)] * 6
    assert obs["widths"] == [2 * m * 10.0] + [2 * m * 10.0] * 5
    ref = detect_renewals(r.log_kinds.tolist(), m)
    assert [x.tau for x in ref] == r.renewal_steps.tolist()


def test_independent_pair_renewals_identity():
    cfg = regular2()
    u = np.zeros(2)
    s = independent_pair_renewals(cfg, cfg, u, u, budget=60)
    assert np.array_equal(s.steps_a, s.marginal_a)
    assert np.array_equal(s.steps_b, s.marginal_b)
    assert np.array_equal(s.steps_a, s.steps_b)


def test_match_renewals_members():
    a = [3, 7, 9, 15, 20]
    b = [1, 7, 8, 15, 21]
    ia, ib = match_renewals(a, b)
    assert [a[i] for i in ia] == [7, 15] == [b[i] for i in ib]


def test_independent_pair_requires_common_level():
    with pytest.raises(ValueError):
        independent_pair_renewals(FieldConfig(2, 1), FieldConfig(2, 2), np.zeros(2),
                                  np.array([0.0, 1.0]), budget=10)


# -- compiled route against the reference route ---------------------------------------

@pytest.mark.parametrize("d,seed,v", [(2, 1, (3.0, 0.0)), (2, 5, (2.0, 0.0)),
                                      (2, 17, (6.0, 1.0)), (3, 2, (2.0, 2.0, 0.0)),
                                      (3, 7, (1.0, 0.0, 0.0))])
def test_kernel_matches_reference_pair(d, seed, v):
    cfg = FieldConfig(d, seed)
    delta = float(d)
    u = np.zeros(d)
    n = 250
    ref = run_reference(cfg, u, v, steps=n, delta=delta)
    ker = run_exploration(cfg, u, np.array(v), steps=n, delta=delta, log=True)
    for i, e in enumerate(ref.log):
        assert KIND_NAMES[int(ker.log_kinds[i])] == e.kind
        assert bool(ker.log_event_a[i]) == e.event_a
        for j in range(2):
            p = e.positions[j]
            pos = p.position if isinstance(p, SitePoint) else p
            assert np.array_equal(ker.log_positions[i, j], pos)
    assert ker.coalesced == ref.coalesced


def test_kernel_matches_reference_single():
    cfg = FieldConfig(2, 3)
    ref = run_reference(cfg, (0.0, 0.0), steps=300, delta=2.0)
    ker = run_exploration(cfg, np.zeros(2), steps=300, delta=2.0, log=True)
    assert [KIND_NAMES[int(k)] for k in ker.log_kinds] == [e.kind for e in ref.log]
    assert np.array_equal(ker.positions[0], ref.coords(0))


def test_kernel_history_matches_reference_height():
    cfg = FieldConfig(2, 12)
    u, v = np.zeros(2), np.array([4.0, 0.0])
    s = ExplorationState.start(u, v)
    hmax = 0.0
    for _ in range(300):
        s = joint_step(s, cfg, 2.0)
        hmax = max(hmax, history_height(s.history))
    ker = run_exploration(cfg, u, v, steps=300, delta=2.0, track_history=True)
    assert ker.max_history_height == pytest.approx(hmax, abs=1e-12)


# -- invariants ---------------------------------------------------------------------------

def test_fresh_state_passes():
    cfg = FieldConfig(2, 1)
    rep = verify_exploration_invariants(ExplorationState.start((0.0, 0.0), (3.0, 0.0)), cfg)
    assert rep.ok


def test_planted_interior_point_reported():
    cfg = FieldConfig(2, 1)
    s = ExplorationState.start((0.0, 0.0), (3.0, 0.0))
    s.history = HistoryRegion(0.0, [UpperBall((0.0, 0.0), 3.0)])
    rep = verify_exploration_invariants(s, cfg)
    assert not rep.ok and rep.interior_points
    assert all(s.history.contains(p.position, strict=True) for p in rep.interior_points)


@pytest.mark.parametrize("seed", [3, 4])
def test_reference_invariants_along_run(seed):
    cfg = FieldConfig(2, seed)
    s = ExplorationState.start((0.0, 0.0), (4.0, 0.0))
    for _ in range(150):
        s = joint_step(s, cfg)
        rep = verify_exploration_invariants(s, cfg)
        assert not rep.interior_points
        assert rep.height <= default_m(2) - 4


def test_cone_hit_from_high_apex_agrees_across_routes():
    # both paths step on a common floor; the ball of the higher one can reach
    # into the cone above the lower one
    cfg = FieldConfig(2, 1)
    u, v = np.zeros(2), np.array([3.0, 0.0])
    ker = run_exploration(cfg, u, v, steps=200, check=True)
    first = ker.first_violation["cone"]
    assert first > 0 and ker.violations["cone_low_apex"] == 0
    s = ExplorationState.start(u, v)
    hit = None
    for n in range(1, first + 1):
        s = joint_step(s, cfg)
        if any(cone_meets(s.coords(i), s.history) for i in range(2)):
            hit = n
            break
    assert hit == first


def test_kernel_check_mode_clean_on_regular_field():
    r = run_exploration(regular2(), np.zeros(2), np.array([3.0, 0.0]), steps=70, check=True)
    assert all(c == 0 for c in r.violations.values())
    assert r.max_increment <= 4.5


def test_z_sign_with_ordered_starts():
    cfg = regular2()
    r = run_exploration(cfg, np.zeros(2), np.array([3.0, 0.0]), steps=60)
    assert all(z[0] <= 0 for z in r.observables(default_m(2))["Z"])


def test_run_exploration_errors_and_stops():
    cfg = FieldConfig(2, 1)
    with pytest.raises(ValueError):
        run_exploration(cfg, np.zeros(3))
    r = run_exploration(cfg, np.zeros(2), np.array([2.0, 0.0]), steps=10 ** 6,
                        stop_on_coalesce=True)
    assert r.coalesced and r.steps == r.coalescence_step
    r = run_exploration(cfg, np.zeros(2), steps=10 ** 6, height_cap=50.0)
    assert r.positions[0, -1] >= 50.0 and r.steps < 10 ** 6
    assert math.isnan(run_exploration(cfg, np.zeros(2), steps=5).coalescence_height)

"""One test per acceptance criterion, at the stated sizes and tolerances.

Each test appends a PASS/FAIL line to the terminal summary before asserting.
"""

import os
import time

import numpy as np
import pytest

import conftest
import oracles as O
from perturbed_dsf import cli, stats as S
from perturbed_dsf.dsf import h_step, max_step
from perturbed_dsf.field import FieldConfig

pytestmark = pytest.mark.acceptance


def record(n, title, ok, detail, t0):
    line = f"CRITERION {n} {title}: {'PASS' if ok else 'FAIL'} ({detail}; {time.time() - t0:.0f}s)"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def failed(rep):
    return ", ".join(f"{v.name}={v.estimate!r}" for v in rep.verdicts if not v.passed) or "none"


def test_criterion_01_geometric_invariants():
    t0 = time.time()
    r2 = S.invariant_sweep(2, 10 ** 5, 10)
    r3 = S.invariant_sweep(3, 10 ** 4, 10)
    ok = r2.passed and r3.passed
    assert record(1, "geometric invariants", ok,
                  f"d=2 failed: {failed(r2)}; d=3 failed: {failed(r3)}", t0)


def test_criterion_02_h_step_oracle():
    t0 = time.time()
    rng = np.random.default_rng(2)
    bad = 0
    for d in (2, 3):
        for _ in range(10 ** 4):
            cfg = FieldConfig(d, int(rng.integers(0, 2 ** 63)))
            x = rng.uniform(-1e4, 1e4, d)
            y = h_step(cfg, x)
            site, pos, dist = O.h_step_bruteforce(cfg, x)
            bad += not (y.site == site and np.array_equal(y.position, pos)
                        and dist <= max_step(d))
    assert record(2, "h-step oracle", bad == 0, f"{bad} disagreements in 2x10^4 queries", t0)


def test_criterion_03_renewal_tail():
    t0 = time.time()
    rep = S.renewal_tail_experiment(d=2, trials=20, steps=10 ** 6, delta=0.05)
    assert record(3, "renewal tail", rep.passed,
                  f"gaps={len(rep.tables['gaps']['rows'])}, failed: {failed(rep)}", t0)


def test_criterion_04_increments():
    t0 = time.time()
    r2 = S.increments_experiment(d=2, trials=20, steps=10 ** 6, min_samples=10 ** 4)
    r3 = S.increments_experiment(d=3, trials=20, steps=2 * 10 ** 5, min_samples=10 ** 4)
    n2, n3 = (len(r.tables["samples"]["rows"]) for r in (r2, r3))
    assert record(4, "increment structure", r2.passed and r3.passed,
                  f"samples d=2 {n2}, d=3 {n3}; failed: {failed(r2)}; {failed(r3)}", t0)


def test_criterion_05_coalescence_tail():
    t0 = time.time()
    rep = S.coalescence_experiment(dx_list=(2, 8), t_grid=np.geomspace(100, 1e4, 9),
                                   trials=2000)
    slopes = "; ".join(n for n in rep.notes if "slope" in n)
    assert record(5, "coalescence tail", rep.passed, f"{slopes}; failed: {failed(rep)}", t0)


def test_criterion_06_treeness():
    t0 = time.time()
    r2 = S.treeness_experiment(d=2, k=5, spread=20, budgets=(10 ** 5,), trials=200)
    r3 = S.treeness_experiment(d=3, k=2, spread=(2, 2), budgets=(1e3, 1e4, 1e5), trials=200,
                               min_fraction=0.0)
    f2 = r2.tables["fractions"]["rows"][-1][2]
    f3 = [r[2] for r in r3.tables["fractions"]["rows"]]
    assert record(6, "tree-ness", r2.passed and r3.passed,
                  f"d=2 fraction {f2:.3f} (need 0.99); d=3 fractions {f3}", t0)


def test_criterion_07_donsker():
    t0 = time.time()
    rep = S.donsker_experiment(d=2, n_ladder=(50,), trials=2000, normalization="renewal",
                               norm_trials=30, norm_budget=10 ** 6)
    # informational: the same marginal with height-based normalisation
    alt = S.donsker_experiment(d=2, n_ladder=(50,), trials=2000, normalization="height",
                               norm_trials=500, norm_budget=2500)
    row = alt.tables["marginals"]["rows"][0]
    conftest.ACCEPTANCE_LINES.append(
        f"  criterion 7 with height normalisation (informational): ks={row[2]:.4f}, "
        f"r2={row[7]:.4f}, {'PASS' if alt.passed else 'FAIL'}")
    g = rep.params["normalization"]
    assert record(7, "Donsker marginal", rep.passed,
                  f"renewal blocks {g['samples']}/30, failed: {failed(rep)}", t0)


def test_criterion_08_foster_drift():
    t0 = time.time()
    rep = S.foster_drift_experiment(shells=((20, 40), (40, 80)), trials=20, steps=2 * 10 ** 5,
                                    min_transitions=10 ** 4)
    assert record(8, "Foster drift", rep.passed,
                  f"transitions={rep.censoring['transitions']}, failed: {failed(rep)}", t0)


def test_criterion_09_dual():
    t0 = time.time()
    rep = S.dual_experiment(width=200, height=200, seeds=20, probe_width=60,
                            probe_heights=(100, 200, 400), probe_trials=50, band=(-10, 10))
    fr = [r[2] for r in rep.tables["probe"]["rows"]]
    assert record(9, "dual consistency", rep.passed,
                  f"multi fractions {fr}; failed: {failed(rep)}", t0)


def test_criterion_10_eta():
    t0 = time.time()
    rep = S.eta_experiment(n=50, epsilons=(0.4, 0.2, 0.1, 0.05), trials=500)
    rows = rep.tables["eta"]["rows"]
    p2 = [round(r[3], 3) for r in rows]
    p3 = [round(r[4], 3) for r in rows]
    assert record(10, "eta trends", rep.passed, f"P(eta>=2) {p2}; P(eta>=3)/eps {p3}", t0)


TINY = {
    "forest": ["--set", "forest.lo=[-5,-5]", "--set", "forest.hi=[5,5]"],
    "coalesce": ["--set", "coalesce.trials=12", "--set", "coalesce.t_max=1000"],
    "renewals": ["--set", "renewals.trials=3", "--set", "renewals.steps=5000"],
    "increments": ["--set", "increments.trials=3", "--set", "increments.steps=5000"],
    "donsker": ["--set", "donsker.trials=20", "--set", "donsker.n=[5]",
                "--set", "donsker.normalization=height", "--set", "donsker.norm_trials=20",
                "--set", "donsker.norm_budget=100"],
    "treeness": ["--set", "treeness.trials=8", "--set", "treeness.budgets=[100,1000]"],
    "foster": ["--set", "field.d=3", "--set", "foster.trials=3", "--set", "foster.steps=3000"],
    "coupling": ["--set", "field.d=3", "--set", "coupling.trials=4",
                 "--set", "coupling.r=[3,6]", "--set", "coupling.height=10"],
    "dual": ["--set", "dual.width=30", "--set", "dual.height=30", "--set", "dual.seeds=3",
             "--set", "dual.probe_width=20", "--set", "dual.probe_heights=[10,20]",
             "--set", "dual.probe_trials=3"],
    "eta": ["--set", "eta.n=5", "--set", "eta.trials=10", "--set", "eta.norm_trials=20",
            "--set", "eta.norm_budget=25"],
    "dump-paths": ["--set", "paths.height=30"],
}


def test_criterion_11_determinism(tmp_path):
    t0 = time.time()
    assert set(TINY) == set(cli.EXPERIMENTS)
    diffs = []
    for name, extra in TINY.items():
        dirs = []
        for tag, w in (("a", 1), ("b", 1), ("c", 2)):
            out = tmp_path / name / tag
            code = cli.main([name, "--seed", "11", "--out", str(out), "--workers", str(w),
                             "--quiet", *extra])
            assert code in (0, 2), f"{name} exited {code}"
            dirs.append(out)
        files = sorted(os.listdir(dirs[0]))
        for other in dirs[1:]:
            if sorted(os.listdir(other)) != files or any(
                    (dirs[0] / f).read_bytes() != (other / f).read_bytes() for f in files):
                diffs.append(f"{name}/{other.name}")
    assert record(11, "determinism", not diffs,
                  f"{len(TINY)} experiments x (rerun, 2 workers); differing: {diffs or 'none'}",
                  t0)

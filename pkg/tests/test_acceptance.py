"""Acceptance criteria, each checked at its stated tolerance.

Every test records a single PASS/FAIL line that pytest prints in an
"acceptance criteria" section at the end of the run.  Run only this file with
``pytest tests/test_acceptance.py -v``.
"""

import math
import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES

from lgpsearch.features import (ResidualProjector, approx_reduction, nystrom_build)
from lgpsearch.harness import ExperimentPlan, benchmark, emulate, grid_points, sobol_points
from lgpsearch.kernel import KernelSpec
from lgpsearch.linalg import GrowableSPDInverse, min_eigenvalue
from lgpsearch.localgp import Dataset, LocalState, accept, variance_reduction
from lgpsearch.search import SearchConfig, SearchContext, run_search
from lgpsearch.spatial import KDTree, linear_knn_excluding, linear_within_radius_of_any

from oracles import all_reductions, dense_variance, gauss

GRID_X = (0.216, 0.303)
STAGES = (10, 15, 20, 25, 30)
# variances in the reference tables are reproduced by a dense solve with this
# nugget on the selected points; selection itself uses no nugget
EVAL_NUGGET = 1e-7


def record(number, ok, detail):
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
    assert ok, detail


def grid_problem():
    X = grid_points([50, 50], [-10, 10])
    return Dataset(X, np.zeros(len(X))), KernelSpec.gaussian(3.0, 2)


def grid_plan(strategies, locations=None, n_locations=100):
    doc = {"design": {"type": "grid", "counts": [50, 50], "bounds": [[-10, 10], [-10, 10]]},
           "locations": locations or {"type": "sobol", "n": n_locations,
                                      "bounds": [[-10, 10], [-10, 10]],
                                      "scramble": True, "seed": 0},
           "kernel": {"theta": [3.0, 3.0]},
           "eval_nugget": EVAL_NUGGET,
           "strategies": strategies}
    return ExperimentPlan.from_dict(doc)


# -- criteria 1 and 2 -----------------------------------------------------------------

def _random_problem(seed):
    rng = np.random.default_rng(seed)
    d = (1, 2, 4)[seed % 3]
    n = int(rng.integers(100, 2001))
    X = rng.uniform(0, 1, size=(n, d))
    spacing = n ** (-1.0 / d)
    theta = float((rng.uniform(2.0, 5.0) * spacing) ** 2)
    x = rng.uniform(0, 1, size=d)
    budget = int(rng.integers(5, 26))
    return X, theta, x, budget


@pytest.fixture(scope="module")
def exactness_runs():
    runs = []
    t0 = time.perf_counter()
    for seed in range(50):
        X, theta, x, budget = _random_problem(seed)
        data = Dataset(X, np.zeros(len(X)))
        spec = KernelSpec.gaussian(theta, X.shape[1])
        audits = []

        def observer(state, rec, pool, X=X, theta=theta, x=x, audits=audits):
            audits.append((list(state.chosen), rec.delta, pool.copy()))

        md = run_search(data, spec, x, SearchConfig(budget=budget), observer=observer)
        ex = run_search(data, spec, x, SearchConfig(budget=budget, strategy="exhaustive"))
        runs.append((X, theta, x, md, ex, audits))
    return runs, time.perf_counter() - t0


def test_criterion_1_exactness(exactness_runs):
    runs, seconds = exactness_runs
    mismatches = sum(md.chosen != ex.chosen for *_, md, ex, _ in runs)
    incomplete = sum(md.incomplete or ex.incomplete for *_, md, ex, _ in runs)
    record(1, mismatches == 0 and seconds < 120,
           f"{mismatches} mismatches over {len(runs)} problems ({incomplete} stopped early), "
           f"{seconds:.0f}s")


def test_criterion_2_radius_safety(exactness_runs):
    runs, _ = exactness_runs
    violations = stages = 0
    worst = -math.inf
    for X, theta, x, md, ex, audits in runs:
        for chosen, delta, pool in audits:
            r = all_reductions(X, theta, x, chosen)
            outside = np.ones(len(X), dtype=bool)
            outside[pool] = False
            outside[chosen] = False
            vals = r[outside]
            vals = vals[~np.isnan(vals)]
            stages += 1
            if vals.size:
                excess = float(vals.max() - delta)
                worst = max(worst, excess)
                violations += int(np.count_nonzero(vals > delta + 1e-12))
    record(2, violations == 0,
           f"{violations} violations over {stages} stages (max excess {worst:.2e})")


# -- criterion 3 ----------------------------------------------------------------------

def test_criterion_3_recurrence():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    passed = skipped = tested = 0
    worst = 0.0
    while tested < 500:
        d = int(rng.integers(1, 4))
        X = rng.uniform(-1, 1, size=(40, d))
        theta = float(rng.uniform(0.3, 2.0))
        j = int(rng.integers(1, 15))
        chosen = [int(i) for i in rng.choice(40, j + 1, replace=False)]
        x = rng.uniform(-1, 1, size=d)
        # the dense reference is itself only good to ~cond * eps
        if np.linalg.cond(gauss(X[chosen], X[chosen], theta)) > 1e6:
            skipped += 1
            continue
        v_direct = dense_variance(X, theta, x, chosen)
        if v_direct < 1e-6:
            skipped += 1
            continue
        tested += 1
        spec = KernelSpec.gaussian(theta, d)
        st = LocalState.start(spec, x)
        for i in chosen[:-1]:
            accept(st, i, spec.scale_points(X[i]))
        v_prev = st.variance
        r = variance_reduction(st, X[chosen[-1]])
        err = abs(v_direct - (v_prev - spec.scale * r)) / v_direct
        worst = max(worst, err)
        passed += err < 1e-8
    seconds = time.perf_counter() - t0
    record(3, passed == 500 and seconds < 30,
           f"{passed}/500 triples within 1e-8 (worst {worst:.1e}, {skipped} ill-conditioned "
           f"draws skipped), {seconds:.1f}s")


# -- criterion 4 ----------------------------------------------------------------------

def test_criterion_4_candidate_counts():
    data, spec = grid_problem()
    t0 = time.perf_counter()
    rep = run_search(data, spec, GRID_X, SearchConfig(budget=31, k=8))
    seconds = time.perf_counter() - t0
    first = rep.stage(1).candidate_set_size
    third = rep.stage(3).candidate_set_size
    last = rep.stage(30).candidate_set_size
    # "185 in the beginning" is the first searched stage (one point chosen);
    # with three points chosen the set holds `third` candidates
    record(4, first == 185 and last == 1423 and seconds < 60,
           f"first search stage {first} (want 185), stage 30 {last} (want 1423); "
           f"stage 3 has {third}; {seconds:.1f}s")


# -- criterion 5 ----------------------------------------------------------------------

TABLE3_MD = (22.78, 28.04, 32.68, 36.10, 39.15)


def test_criterion_5_table3_candidate_pct():
    plan = grid_plan([{"strategy": "maxdist", "budget": 31}])
    t0 = time.perf_counter()
    table = benchmark(plan, workers=1)
    seconds = time.perf_counter() - t0
    got = [table.lookup("maxdist", s)["mean_candidate_pct"] for s in STAGES]
    ok = all(abs(g - w) <= 2.0 for g, w in zip(got, TABLE3_MD)) and seconds < 600
    record(5, ok and not table.failures,
           "maxdist mean candidate % " + ", ".join(f"{g:.2f}" for g in got)
           + f" vs {TABLE3_MD}; {len(table.failures)} failed locations; {seconds:.0f}s")


# -- criterion 6 ----------------------------------------------------------------------

def test_criterion_6_table2_feature_accuracy():
    t0 = time.perf_counter()
    plan = grid_plan([{"strategy": "maxdist", "budget": 31},
                      {"strategy": "feature", "budget": 31, "n_features": 500,
                       "n_landmarks": 2500},
                      {"strategy": "feature", "budget": 31, "n_features": 10}],
                     locations={"type": "list", "points": [list(GRID_X)]})
    table = benchmark(plan, workers=1)
    seconds = time.perf_counter() - t0
    d500 = [table.lookup("feature(D=500,m=2500)", s)["relative_difference"] for s in STAGES]
    d10 = [table.lookup("feature(D=10)", s)["relative_difference"] for s in STAGES]
    c500 = [int(table.lookup("feature(D=500,m=2500)", s)["mean_examined"]) for s in STAGES]
    ok = max(map(abs, d500)) <= 1e-6 and max(map(abs, d10)) <= 0.2 and seconds < 180
    record(6, ok, "D=500 rel. diff " + ", ".join(f"{v:.1e}" for v in d500)
           + f" (candidates {c500}); D=10 rel. diff " + ", ".join(f"{v:.3f}" for v in d10)
           + f"; {seconds:.0f}s")


# -- criterion 7 ----------------------------------------------------------------------

def test_criterion_7_exact_feature_identity():
    worst = 0.0
    checked = 0
    for seed in range(20):
        rng = np.random.default_rng(700 + seed)
        n = int(rng.integers(50, 301))
        d = int(rng.integers(1, 4))
        theta = float(rng.uniform(0.2, 1.0))
        X = rng.uniform(-3, 3, size=(n, d))
        data = Dataset(X, np.zeros(n))
        spec = KernelSpec.gaussian(theta, d)
        vals = np.linalg.eigvalsh(gauss(X, X, theta))[::-1]
        rank = int((vals > vals[0] * n * np.finfo(float).eps * 10).sum())
        fmap = nystrom_build(spec, data, rank, n_landmarks=n)
        x = rng.uniform(-3, 3, size=d)
        st = LocalState.start(spec, x)
        proj = ResidualProjector(fmap.n_features)
        chosen = [int(i) for i in rng.choice(n, int(rng.integers(1, 6)), replace=False)]
        for i in chosen:
            accept(st, i, spec.scale_points(X[i]))
            proj.extend(fmap.features[:, i])
        cx = proj.residual(fmap.transform(x[None])[:, 0])
        rest = np.setdiff1d(np.arange(n), chosen)
        approx = approx_reduction(cx, proj.residual(fmap.features[:, rest]))
        for pos, u in enumerate(rest):
            exact = variance_reduction(st, X[u])
            if exact < 1e-8:
                continue  # relative error of a numerically zero reduction is meaningless
            checked += 1
            worst = max(worst, abs(approx[pos] - exact) / exact)
    record(7, worst < 1e-6, f"worst relative error {worst:.1e} over {checked} candidates, 20 seeds")


# -- criterion 8 ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def sobol6_runs():
    t0 = time.perf_counter()
    X = sobol_points(10_000, 6, [-1, 1])
    data = Dataset(X, np.zeros(len(X)))
    spec = KernelSpec.gaussian(1.5, 6)
    locs = sobol_points(5, 6, [-1, 1], seed=1, scramble=True)
    fmap = nystrom_build(spec, data, 300, n_landmarks=360, seed=0)
    md_cfg = SearchConfig(budget=31, k=30)
    ex_cfg = SearchConfig(budget=31, k=30, strategy="exhaustive")
    fa_cfg = SearchConfig(budget=31, k=30, strategy="feature", n_features=300, n_landmarks=360)
    md_ctx = SearchContext.build(data, spec, md_cfg)
    fa_ctx = SearchContext.build(data, spec, fa_cfg, fmap)
    out = []
    for x in locs:
        md = run_search(data, spec, x, md_cfg, md_ctx)
        ex = run_search(data, spec, x, ex_cfg, md_ctx)
        fa = run_search(data, spec, x, fa_cfg, fa_ctx)
        out.append((md, ex, fa))
    return data, out, time.perf_counter() - t0


def test_criterion_8a_candidate_fraction(sobol6_runs):
    data, runs, seconds = sobol6_runs
    n = data.n_rows
    worst = max(r.candidate_set_size / n for md, _, _ in runs for r in md.records[1:])
    at30 = np.mean([md.stage(30).candidate_set_size / n for md, _, _ in runs])
    record("8a", worst < 0.12 and seconds < 900,
           f"max maxdist candidate fraction {100 * worst:.2f}% (stage-30 mean {100 * at30:.2f}%),"
           f" want < 12%; {seconds:.0f}s")


def test_criterion_8b_examined_reduction(sobol6_runs):
    _, runs, _ = sobol6_runs
    md30 = np.mean([md.stage(30).candidates_examined for md, _, _ in runs])
    ex30 = np.mean([ex.stage(30).candidates_examined for _, ex, _ in runs])
    ratio = ex30 / md30
    record("8b", ratio >= 8.0, f"exhaustive/maxdist examined at stage 30 = {ratio:.2f}, want >= 8")


def test_criterion_8c_feature_variance(sobol6_runs):
    _, runs, _ = sobol6_runs
    same = all(md.chosen == ex.chosen for md, ex, _ in runs)
    v_md = np.mean([md.stage(30).variance for md, _, _ in runs])
    v_fa = np.mean([fa.stage(30).variance for _, _, fa in runs])
    rel = (v_fa - v_md) / v_md
    record("8c", abs(rel) <= 0.05 and same,
           f"D=300 relative variance difference {rel:.4f} at stage 30, want <= 0.05; "
           f"maxdist == exhaustive: {same}")


# -- criterion 9 ----------------------------------------------------------------------

def test_criterion_9_property_suites():
    notes = []
    ok = True

    # spatial brute-force equivalence, 200 queries
    rng = np.random.default_rng(90)
    pts = rng.uniform(-1, 1, size=(3000, 3))
    tree = KDTree(pts)
    bad = 0
    for _ in range(200):
        c = rng.uniform(-1, 1, size=3)
        excl = rng.choice(3000, 10, replace=False)
        k = int(rng.integers(1, 30))
        bad += not np.array_equal(tree.knn_excluding(c, k, excl),
                                  linear_knn_excluding(pts, c, k, excl))
        centers = np.vstack([c, pts[rng.choice(3000, 4)]])
        r = float(rng.uniform(0, 0.4))
        bad += not np.array_equal(tree.within_radius_of_any(centers, r, excl),
                                  linear_within_radius_of_any(pts, centers, r, excl))
    ok &= bad == 0
    notes.append(f"spatial {bad} mismatches/400")

    # partitioned inverse vs dense inverse along growth chains up to 50
    worst = 0.0
    chains = 0
    for seed in range(40):
        rng = np.random.default_rng(900 + seed)
        n = int(rng.integers(2, 51))
        p = rng.uniform(-3, 3, size=(n, 2))
        theta = float(rng.uniform(0.05, 0.3))
        k = gauss(p, p, theta)
        if np.linalg.cond(k) > 1e8:
            continue
        chains += 1
        inv = GrowableSPDInverse()
        for i in range(n):
            inv.extend(k[i, :i], 1.0)
        dense = np.linalg.inv(k)
        worst = max(worst, np.abs(inv.inverse - dense).max() / max(1.0, np.abs(dense).max()))
    ok &= worst <= 1e-7
    notes.append(f"inverse worst {worst:.1e} over {chains} chains")

    # lambda_min underestimation over 1000 trials
    rng = np.random.default_rng(91)
    trials = under = 0
    while trials < 1000:
        j = int(rng.integers(9, 33))
        p = rng.uniform(-1, 1, size=(j, int(rng.integers(2, 5))))
        theta = float(rng.uniform(0.01, 0.1))
        k = gauss(p, p, theta)
        if np.linalg.cond(k) > 1e8:
            continue
        trials += 1
        inv = GrowableSPDInverse()
        for i in range(j):
            inv.extend(k[i, :i], 1.0)
        under += min_eigenvalue(inv, seed=trials) <= np.linalg.eigvalsh(k)[0]
    ok &= under >= 990
    notes.append(f"lambda_min under {under}/1000")

    # LSH recall over 50 seeds
    from types import SimpleNamespace
    from lgpsearch.features import LshIndex
    recalls = []
    for seed in range(50):
        rng = np.random.default_rng(seed)
        q = rng.normal(size=20)
        q /= np.linalg.norm(q)
        vecs = rng.normal(size=(2000, 20))
        vecs[:200] = q + rng.normal(size=(200, 20)) * rng.uniform(0, 0.08, size=(200, 1))
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        members = np.flatnonzero(np.arccos(np.clip(vecs @ q, -1, 1)) <= math.pi / 20)
        fake = SimpleNamespace(n_features=20, n_points=2000, features=vecs.T, kernel_hash=b"")
        hits = LshIndex(fake, seed=seed).query(q, math.pi / 20)
        recalls.append(float(np.isin(members, hits).mean()))
    ok &= np.mean(recalls) >= 0.9
    notes.append(f"LSH recall {np.mean(recalls):.3f}")

    # determinism across worker counts
    plan = grid_plan([{"strategy": "maxdist", "budget": 16},
                      {"strategy": "feature", "budget": 16, "n_features": 200, "use_lsh": True}],
                     n_locations=8)
    same = benchmark(plan, workers=1).raw_csv() == benchmark(plan, workers=8).raw_csv()
    ok &= same
    notes.append(f"raw CSV identical across 1/8 workers: {same}")
    record(9, ok, "; ".join(notes))


# -- search-module invariants with reference magnitudes -------------------------------

def test_feature_d200_single_location_accuracy():
    plan = grid_plan([{"strategy": "maxdist", "budget": 31},
                      {"strategy": "feature", "budget": 31, "n_features": 200}],
                     locations={"type": "list", "points": [list(GRID_X)]})
    table = benchmark(plan, workers=1)
    rel = [table.lookup("feature(D=200)", s)["relative_difference"] for s in STAGES]
    record("invariant D=200 single location", abs(rel[-1]) < 0.25,
           "relative differences " + ", ".join(f"{v:.3f}" for v in rel)
           + " (final stage must be below 0.25)")


def test_feature_d200_average_accuracy():
    plan = grid_plan([{"strategy": "maxdist", "budget": 31},
                      {"strategy": "feature", "budget": 31, "n_features": 200}])
    table = benchmark(plan, workers=1)
    rel = [table.lookup("feature(D=200)", s)["relative_difference"] for s in STAGES]
    pct = [table.lookup("feature(D=200)", s)["mean_candidate_pct"] for s in STAGES]
    record("invariant D=200 100 locations", max(map(abs, rel)) <= 0.35,
           "relative differences " + ", ".join(f"{v:.3f}" for v in rel)
           + " (each within 0.35); candidate % " + ", ".join(f"{p:.1f}" for p in pct))


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-v"]))

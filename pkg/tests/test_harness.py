import json

import numpy as np
import pytest

from lgpsearch.cli import main
from lgpsearch.harness import (ExperimentPlan, PlanError, benchmark, emulate, grid_points,
                               read_points_csv, six_hump_camel, sobol_points, write_points_csv)

from oracles import star_discrepancy_grid


def test_sobol_first_point_and_prefix():
    for d in (1, 3, 21):
        assert np.array_equal(sobol_points(1, d), np.full((1, d), 0.5))
    assert sobol_points(3, 1)[:, 0].tolist() == [0.5, 0.75, 0.25]
    long = sobol_points(64, 4, seed=5)
    assert np.array_equal(sobol_points(10, 4), long[:10])
    a = sobol_points(16, 2, scramble=True, seed=3)
    assert np.array_equal(a, sobol_points(16, 2, scramble=True, seed=3))
    with pytest.raises(PlanError):
        sobol_points(4, 22)


def test_sobol_bounds_scaling():
    pts = sobol_points(8, 2, [[-10, 10], [0, 1]])
    assert pts[0].tolist() == [0.0, 0.5]
    assert pts[:, 0].min() >= -10 and pts[:, 0].max() <= 10
    with pytest.raises(PlanError):
        sobol_points(4, 2, [1.0, 0.0])


def test_sobol_low_discrepancy():
    sob = star_discrepancy_grid(sobol_points(100, 2))
    wins = 0
    for seed in range(10):
        rnd = np.random.default_rng(seed).uniform(size=(100, 2))
        wins += sob < star_discrepancy_grid(rnd)
    assert wins >= 9


def test_grid_points():
    g = grid_points([2, 2], [0, 1])
    assert g.tolist() == [[0, 0], [0, 1], [1, 0], [1, 1]]
    big = grid_points([50, 50], [-10, 10])
    assert big.shape == (2500, 2)
    assert big.min(axis=0).tolist() == [-10, -10] and big[0].tolist() == [-10, -10]
    assert big[1, 1] - big[0, 1] == pytest.approx(20 / 49, rel=1e-14)
    assert big[50, 0] - big[0, 0] == pytest.approx(20 / 49, rel=1e-14)
    with pytest.raises(PlanError):
        grid_points([0, 3], [0, 1])


def test_camel_known_minimum():
    assert six_hump_camel([[0.0898, -0.7126]])[0] == pytest.approx(-1.0316, abs=1e-4)


def test_csv_round_trip(tmp_path):
    pts = np.random.default_rng(0).normal(size=(5, 3))
    y = np.arange(5.0) / 3
    p = tmp_path / "d.csv"
    write_points_csv(p, pts, y)
    assert p.read_text().splitlines()[0] == "x1,x2,x3,y"
    x2, y2 = read_points_csv(p)
    assert np.array_equal(x2, pts) and np.array_equal(y2, y)
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    with pytest.raises(PlanError):
        read_points_csv(bad)


def _plan_doc(**extra):
    doc = {"design": {"type": "grid", "counts": [20, 20], "bounds": [[-5, 5], [-5, 5]]},
           "locations": {"type": "sobol", "n": 6, "bounds": [[-4, 4], [-4, 4]]},
           "kernel": {"theta": 2.0},
           "responses": "camel",
           "stages": [2, 4],
           "strategies": [{"strategy": "maxdist", "budget": 5},
                          {"strategy": "exhaustive", "budget": 5},
                          {"strategy": "feature", "budget": 5, "n_features": 40}]}
    doc.update(extra)
    return doc


def test_plan_validation():
    with pytest.raises(PlanError):
        ExperimentPlan.from_dict(_plan_doc(strategies=[]))
    with pytest.raises(PlanError):
        ExperimentPlan.from_dict(_plan_doc(strategies=[{"strategy": "maxdist", "budget": 401}]))
    with pytest.raises(PlanError):
        ExperimentPlan.from_dict(_plan_doc(strategies=[{"strategy": "maxdist", "bogus": 1}]))
    doc = _plan_doc()
    doc["design"] = {"type": "grid", "counts": [4, 4], "bounds": [[1, 0], [0, 1]]}
    with pytest.raises(PlanError):
        ExperimentPlan.from_dict(doc)
    with pytest.raises(PlanError):
        ExperimentPlan.from_dict(_plan_doc(kernel={"theta": [1.0, 2.0, 3.0]}))


def test_budget_one_predicts_nearest_response():
    doc = _plan_doc(locations={"type": "list", "points": [[0.3, -1.2], [5.0, -5.0]]},
                    strategies=[{"strategy": "maxdist", "budget": 1}])
    plan = ExperimentPlan.from_dict(doc)
    off, on = emulate(plan, workers=1)
    d2 = ((plan.data.inputs - [0.3, -1.2]) ** 2).sum(1)
    nn = int(np.argmin(d2))
    assert off.report.chosen == [nn]
    # zero-mean kriging on one point shrinks the response by the correlation
    weight = np.exp(-d2[nn] / 2.0)
    assert off.mean == pytest.approx(weight * plan.data.responses[nn], rel=1e-12)
    assert on.mean == pytest.approx(plan.data.responses[on.report.chosen[0]], abs=1e-12)
    assert on.variance == 0.0


def test_raw_csv_identical_across_worker_counts():
    plan = ExperimentPlan.from_dict(_plan_doc())
    one = benchmark(plan, workers=1)
    eight = benchmark(plan, workers=8)
    assert one.raw_csv() == eight.raw_csv()
    assert not one.failures


def test_baseline_relative_difference_zero_and_required():
    plan = ExperimentPlan.from_dict(_plan_doc())
    table = benchmark(plan, workers=1)
    for stage in (2, 4):
        row = table.lookup("maxdist", stage)
        assert row["relative_difference"] == 0.0
        assert 0 <= row["mean_candidate_pct"] <= 100
        assert table.lookup("exhaustive", stage)["relative_difference"] == pytest.approx(0.0, abs=1e-12)
    single = ExperimentPlan.from_dict(_plan_doc(strategies=[{"strategy": "maxdist", "budget": 5}]))
    assert all(r["relative_difference"] == 0.0 for r in benchmark(single, 1).rows)
    nobase = ExperimentPlan.from_dict(_plan_doc(strategies=[{"strategy": "nn", "budget": 5}]))
    with pytest.raises(PlanError):
        benchmark(nobase, 1)


def test_worker_env_default(monkeypatch):
    from lgpsearch.harness import default_workers
    monkeypatch.setenv("LOCALGP_WORKERS", "3")
    assert default_workers() == 3
    monkeypatch.setenv("LOCALGP_WORKERS", "x")
    with pytest.raises(PlanError):
        default_workers()


# -- CLI --------------------------------------------------------------------------

def test_cli_gen_predict_features(tmp_path):
    design = tmp_path / "design.csv"
    locs = tmp_path / "locs.csv"
    assert main(["gen", "grid", "--counts", "15,15", "--bounds=-3,3",
                 "--response", "camel", "--out", str(design)]) == 0
    assert main(["gen", "sobol", "--n", "4", "--d", "2", "--bounds=-2,2",
                 "--out", str(locs)]) == 0
    x, y = read_points_csv(design)
    assert x.shape == (225, 2) and y is not None
    out = tmp_path / "pred.csv"
    assert main(["predict", "--design", str(design), "--locations", str(locs), "--theta", "1.0",
                 "--budget", "10", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "x1,x2,mean,variance,size,status" and len(lines) == 5
    side = tmp_path / "f.lgpf"
    assert main(["features", "build", "--design", str(design), "--theta", "1.0",
                 "--d-features", "40", "--out", str(side)]) == 0
    out2 = tmp_path / "pred2.csv"
    assert main(["predict", "--design", str(design), "--locations", str(locs), "--theta", "1.0",
                 "--budget", "10", "--strategy", "feature", "--d-features", "40",
                 "--features", str(side), "--out", str(out2)]) == 0
    # a sidecar built for another kernel is a validation error
    assert main(["predict", "--design", str(design), "--locations", str(locs), "--theta", "2.0",
                 "--strategy", "feature", "--features", str(side), "--out", str(out2)]) == 2


def test_cli_bench_and_exit_codes(tmp_path, capsys):
    plan = tmp_path / "plan.json"
    doc = _plan_doc(output=str(tmp_path / "table.csv"))
    plan.write_text(json.dumps(doc))
    raw = tmp_path / "raw.csv"
    assert main(["bench", "--plan", str(plan), "--workers", "2", "--raw", str(raw)]) == 0
    assert (tmp_path / "table.csv").read_text().startswith("strategy,stage,locations")
    assert raw.read_text().startswith("location,strategy,stage")
    assert main(["bench", "--plan", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(_plan_doc(strategies=[])))
    assert main(["bench", "--plan", str(bad)]) == 2


def test_cli_numerical_breakdown_exit_code(tmp_path):
    # vanishing lengthscale-free design: two nearly coincident points break the factor
    design = tmp_path / "d.csv"
    write_points_csv(design, np.array([[0.0], [1e-9], [5.0]]), np.zeros(3))
    locs = tmp_path / "l.csv"
    write_points_csv(locs, np.array([[0.0]]))
    out = tmp_path / "p.csv"
    code = main(["predict", "--design", str(design), "--locations", str(locs), "--theta", "1.0",
                 "--budget", "3", "--strategy", "nn", "--out", str(out)])
    assert code == 3

"""Experiment plans, batch emulation and benchmark tables.

A plan is one JSON document::

    {
      "design":     {"type": "grid", "counts": [50, 50], "bounds": [[-10, 10], [-10, 10]]},
      "locations":  {"type": "sobol", "n": 100, "bounds": [[-10, 10], [-10, 10]],
                     "scramble": true, "seed": 0},
      "kernel":     {"kernel": "gaussian", "theta": [3, 3], "sigma2": 1.0},
      "strategies": [{"strategy": "maxdist", "budget": 31, "k": 8},
                     {"strategy": "feature", "budget": 31, "k": 8, "n_features": 200}],
      "responses":  "zero",
      "stages":     [10, 15, 20, 25, 30]
    }

Design sources are ``grid``, ``sobol`` or ``file`` (CSV with header
``x1,...,xd[,y]``); locations are ``sobol``, ``list`` (``"points"``) or
``file``.  Everything that feeds the raw CSV is seeded, so the same plan
gives byte-identical output whatever the worker count.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from .features import FeatureMap
from .kernel import KernelSpec
from .localgp import Dataset, EigenParams, NumericalBreakdown, dense_variance, predictive_mean
from .search import SearchConfig, SearchContext, SearchReport, run_search

SOBOL_MAX_DIMS = 21
DEFAULT_STAGES = (10, 15, 20, 25, 30)
BASELINE = "maxdist"
RESPONSES = ("zero", "camel", "file")


class PlanError(ValueError):
    """Invalid experiment plan or CLI arguments."""


# -- point sets -----------------------------------------------------------------

def _bounds_array(bounds, d: int) -> np.ndarray:
    b = np.asarray(bounds, dtype=float)
    if b.shape == (2,):
        b = np.tile(b, (d, 1))
    if b.shape != (d, 2):
        raise PlanError(f"bounds must be one (lo, hi) pair or {d} of them")
    if not np.all(b[:, 0] < b[:, 1]):
        raise PlanError("bounds must satisfy lo < hi")
    return b


def sobol_points(n: int, d: int, bounds=(0.0, 1.0), seed: int | None = None,
                 scramble: bool = False) -> np.ndarray:
    """First ``n`` Sobol points after the origin, scaled to ``bounds``.

    Uses the Joe-Kuo direction numbers.  ``seed`` only matters with
    ``scramble=True`` (Owen-type scrambling plus digital shift).
    """
    if not 1 <= d <= SOBOL_MAX_DIMS:
        raise PlanError(f"Sobol dimension must be in 1..{SOBOL_MAX_DIMS}, got {d}")
    if n < 1:
        raise PlanError("need at least one Sobol point")
    b = _bounds_array(bounds, d)
    engine = qmc.Sobol(d, scramble=scramble, seed=seed)
    with warnings.catch_warnings():
        # balance warnings for non-power-of-two counts are irrelevant here
        warnings.simplefilter("ignore", UserWarning)
        u = engine.random(n + 1)[1:]
    return b[:, 0] + u * (b[:, 1] - b[:, 0])


def grid_points(counts, bounds) -> np.ndarray:
    """Regular grid in row-major order (last coordinate varies fastest)."""
    counts = [int(c) for c in counts]
    if not counts or min(counts) < 1:
        raise PlanError("grid counts must be positive")
    b = _bounds_array(bounds, len(counts))
    axes = [np.linspace(lo, hi, c) if c > 1 else np.array([lo]) for (lo, hi), c in zip(b, counts)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.reshape(-1) for m in mesh])


def six_hump_camel(points) -> np.ndarray:
    """Six-hump camel function of the first two coordinates."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    if p.shape[1] < 2:
        raise PlanError("the camel response needs at least two input dimensions")
    a, b = p[:, 0], p[:, 1]
    return (4 - 2.1 * a ** 2 + a ** 4 / 3) * a ** 2 + a * b + (-4 + 4 * b ** 2) * b ** 2


# -- CSV io --------------------------------------------------------------------

def write_points_csv(path, points, responses=None):
    pts = np.atleast_2d(points)
    header = [f"x{i + 1}" for i in range(pts.shape[1])]
    if responses is not None:
        header.append("y")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, row in enumerate(pts):
            vals = [repr(float(v)) for v in row]
            if responses is not None:
                vals.append(repr(float(responses[i])))
            w.writerow(vals)


def read_points_csv(path) -> tuple[np.ndarray, np.ndarray | None]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise PlanError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    has_y = header[-1] == "y"
    xcols = header[:-1] if has_y else header
    if xcols != [f"x{i + 1}" for i in range(len(xcols))] or not xcols:
        raise PlanError(f"{path}: header must be x1,...,xd[,y]")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise PlanError(f"{path}: {exc}") from None
    if data.ndim != 2 or data.shape[1] != len(header):
        raise PlanError(f"{path}: ragged rows")
    if has_y:
        return data[:, :-1], data[:, -1]
    return data, None


# -- plans ---------------------------------------------------------------------

_CONFIG_FIELDS = {f.name for f in fields(SearchConfig)}


def config_from_dict(d: dict) -> SearchConfig:
    d = dict(d)
    unknown = set(d) - _CONFIG_FIELDS
    if unknown:
        raise PlanError(f"unknown strategy fields: {sorted(unknown)}")
    if "eigen" in d:
        d["eigen"] = EigenParams(**d["eigen"])
    try:
        return SearchConfig(**d)
    except (TypeError, ValueError) as exc:
        raise PlanError(str(exc)) from None


def kernel_from_dict(d: dict, dims: int) -> KernelSpec:
    kind = d.get("kernel", "gaussian")
    theta = d.get("theta")
    if theta is None:
        raise PlanError("kernel.theta is required")
    theta = [float(theta)] * dims if np.isscalar(theta) else [float(t) for t in theta]
    power = 2.0 if kind == "gaussian" else float(d.get("power", 2.0))
    if kind not in ("gaussian", "power"):
        raise PlanError(f"unknown kernel {kind!r}")
    if len(theta) != dims:
        raise PlanError(f"kernel has {len(theta)} lengthscales for {dims}-dimensional data")
    try:
        return KernelSpec(tuple(theta), float(d.get("sigma2", 1.0)), power)
    except ValueError as exc:
        raise PlanError(str(exc)) from None


def _points_from_source(src: dict, base: Path, what: str) -> tuple[np.ndarray, np.ndarray | None]:
    kind = src.get("type")
    if kind == "grid":
        return grid_points(src["counts"], src["bounds"]), None
    if kind == "sobol":
        d = int(src.get("d", len(src.get("bounds", [[0, 1]]))))
        return sobol_points(int(src["n"]), d, src.get("bounds", (0.0, 1.0)),
                            src.get("seed"), bool(src.get("scramble", False))), None
    if kind == "file":
        return read_points_csv(base / src["path"])
    if kind == "list" and what == "locations":
        return np.atleast_2d(np.asarray(src["points"], dtype=float)), None
    raise PlanError(f"unknown {what} source {kind!r}")


@dataclass
class ExperimentPlan:
    data: Dataset
    locations: np.ndarray
    spec: KernelSpec
    strategies: list[SearchConfig]
    stages: tuple[int, ...] = DEFAULT_STAGES
    responses: str = "zero"
    output: str | None = None
    repetitions: int = 1
    eval_nugget: float = 0.0
    features_path: str | None = None
    base: Path = Path(".")
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, doc: dict, base: Path | str = ".") -> "ExperimentPlan":
        base = Path(base)
        try:
            xs, ys = _points_from_source(doc["design"], base, "design")
            locs, _ = _points_from_source(doc["locations"], base, "locations")
            responses = doc.get("responses", "file" if ys is not None else "zero")
            if responses not in RESPONSES:
                raise PlanError(f"responses must be one of {RESPONSES}")
            if responses == "file":
                if ys is None:
                    raise PlanError("responses 'file' but the design has no y column")
                y = ys
            elif responses == "camel":
                y = six_hump_camel(xs)
            else:
                y = np.zeros(xs.shape[0])
            data = Dataset(xs, y)
            if locs.shape[1] != data.dims:
                raise PlanError("locations and design have different dimensions")
            spec = kernel_from_dict(doc.get("kernel", {}), data.dims)
            strategies = [config_from_dict(s) for s in doc.get("strategies", [])]
            if not strategies:
                raise PlanError("a plan needs at least one strategy")
            for s in strategies:
                if s.budget > data.n_rows:
                    raise PlanError(f"budget {s.budget} exceeds the design size {data.n_rows}")
            stages = tuple(int(s) for s in doc.get("stages", DEFAULT_STAGES))
            reps = int(doc.get("repetitions", 1))
            if reps < 1:
                raise PlanError("repetitions must be >= 1")
        except KeyError as exc:
            raise PlanError(f"missing plan field {exc}") from None
        except PlanError:
            raise
        except ValueError as exc:
            raise PlanError(str(exc)) from None
        return cls(data, locs, spec, strategies, stages, responses, doc.get("output"), reps,
                   float(doc.get("eval_nugget", 0.0)), doc.get("features"), base, dict(doc))

    @classmethod
    def load(cls, path) -> "ExperimentPlan":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise PlanError(f"{path}: {exc}") from None
        return cls.from_dict(doc, path.parent)


# -- emulation -------------------------------------------------------------------

@dataclass
class LocationResult:
    location_index: int
    strategy_index: int
    strategy: str
    report: SearchReport | None
    mean: float = math.nan
    variance: float = math.nan
    error: str | None = None


_WORKER: dict = {}


def _init_worker_shared(data, spec, strategies, keyed_features):
    _WORKER.clear()
    contexts = []
    for i, cfg in enumerate(strategies):
        ctx = SearchContext.build(data, spec, cfg, keyed_features.get(i))
        contexts.append(ctx)
    _WORKER.update(data=data, spec=spec, strategies=strategies, contexts=contexts)


def _run_location(args) -> list[LocationResult]:
    li, x = args
    data, spec = _WORKER["data"], _WORKER["spec"]
    out = []
    for si, (cfg, ctx) in enumerate(zip(_WORKER["strategies"], _WORKER["contexts"])):
        try:
            rep = run_search(data, spec, x, cfg, ctx)
        except (NumericalBreakdown, ValueError, ArithmeticError) as exc:
            out.append(LocationResult(li, si, cfg.label, None, error=str(exc)))
            continue
        res = LocationResult(li, si, cfg.label, rep, error=rep.error)
        if rep.state is not None and rep.state.order:
            res.mean = predictive_mean(rep.state, data)
            # the recurrence value; the direct 1 - k'A^{-1}k form loses
            # everything to cancellation once A is badly conditioned
            res.variance = rep.state.variance
        rep.state = None  # keep results light to ship between processes
        out.append(res)
    return out


def default_workers() -> int:
    env = os.environ.get("LOCALGP_WORKERS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise PlanError(f"LOCALGP_WORKERS must be an integer, got {env!r}") from None
        return max(1, n)
    return 1


def _plan_features(plan: ExperimentPlan) -> dict[int, FeatureMap]:
    """Feature maps shared by the plan's feature strategies, built once up front."""
    from .features import nystrom_build
    from .search import default_feature_count

    built: dict[tuple, FeatureMap] = {}
    keyed = {}
    for i, cfg in enumerate(plan.strategies):
        if cfg.strategy != "feature":
            continue
        if plan.features_path:
            key = ("file",)
            if key not in built:
                built[key] = FeatureMap.load(plan.base / plan.features_path, plan.spec, plan.data)
        else:
            d = cfg.n_features or default_feature_count(plan.data.dims)
            key = (d, cfg.n_landmarks, cfg.seed)
            if key not in built:
                built[key] = nystrom_build(plan.spec, plan.data, d, cfg.n_landmarks, cfg.seed)
        keyed[i] = built[key]
    return keyed


def emulate(plan: ExperimentPlan, workers: int | None = None,
            features: dict[int, FeatureMap] | None = None) -> list[LocationResult]:
    """Run every strategy at every location; results ordered by (location, strategy)."""
    workers = default_workers() if workers is None else max(1, int(workers))
    keyed = _plan_features(plan) if features is None else features
    init_args = (plan.data, plan.spec, plan.strategies, keyed)
    jobs = list(enumerate(plan.locations))
    if workers == 1:
        _init_worker_shared(*init_args)
        chunks = [_run_location(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker_shared,
                                 initargs=init_args) as pool:
            chunks = list(pool.map(_run_location, jobs, chunksize=1))
    results = [r for chunk in chunks for r in chunk]
    results.sort(key=lambda r: (r.location_index, r.strategy_index))
    return results


# -- benchmark tables --------------------------------------------------------------

RAW_COLUMNS = ("location", "strategy", "stage", "chosen", "reduction", "variance",
               "eval_variance", "candidates_examined", "candidate_set_size", "radius_set_size",
               "radius", "delta", "lambda_min", "fallback")
TABLE_COLUMNS = ("strategy", "stage", "locations", "mean_seconds", "time_ratio_vs_baseline",
                 "mean_candidate_pct", "mean_examined", "mean_variance", "relative_difference")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    return repr(v)


@dataclass
class BenchmarkTable:
    rows: list[dict]
    raw: list[dict]
    failures: list[LocationResult] = field(default_factory=list)

    def _csv(self, columns, rows) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) if not isinstance(r.get(c), str) else r[c] for c in columns])
        return buf.getvalue()

    def table_csv(self) -> str:
        return self._csv(TABLE_COLUMNS, self.rows)

    def raw_csv(self) -> str:
        """Per-location per-stage rows; no timing, so byte-stable across runs."""
        return self._csv(RAW_COLUMNS, self.raw)

    def lookup(self, strategy: str, stage: int) -> dict:
        for r in self.rows:
            if r["strategy"] == strategy and r["stage"] == stage:
                return r
        raise KeyError((strategy, stage))


def _eval_variance(plan: ExperimentPlan, rep: SearchReport, upto: int) -> float:
    """Predictive variance after stage ``upto`` by dense solve with the evaluation nugget."""
    sub = plan.data.inputs[rep.chosen[:upto + 2]]
    return dense_variance(plan.spec, sub, rep.location, plan.eval_nugget)


def benchmark(plan: ExperimentPlan, workers: int | None = None,
              results: list[LocationResult] | None = None) -> BenchmarkTable:
    """Aggregate table at the plan's reporting stages plus raw per-stage rows.

    The relative difference compares the location-averaged variance of each
    strategy with that of the ``maxdist`` baseline: ``(V - V_MD) / V_MD``.
    """
    labels = [c.label for c in plan.strategies]
    if BASELINE not in [c.strategy for c in plan.strategies]:
        raise PlanError("benchmark needs a maxdist strategy as the baseline")
    base_label = next(c.label for c in plan.strategies if c.strategy == BASELINE)
    if len(set(labels)) != len(labels):
        raise PlanError("strategies in one plan must be distinct")
    if results is None:
        results = []
        for _ in range(plan.repetitions):
            results = emulate(plan, workers)
    n = plan.data.n_rows
    raw, failures = [], []
    per = {lab: {s: [] for s in plan.stages} for lab in labels}
    for res in results:
        if res.report is None:
            failures.append(res)
            continue
        if res.report.incomplete:
            failures.append(res)
        for rec in res.report.records:
            ev = _eval_variance(plan, res.report, rec.stage) if plan.eval_nugget > 0 else math.nan
            raw.append({"location": res.location_index, "strategy": res.strategy,
                        "stage": rec.stage, "chosen": rec.chosen, "reduction": rec.reduction,
                        "variance": rec.variance, "eval_variance": ev,
                        "candidates_examined": rec.candidates_examined,
                        "candidate_set_size": rec.candidate_set_size,
                        "radius_set_size": rec.radius_set_size, "radius": rec.radius,
                        "delta": rec.delta, "lambda_min": rec.lambda_min,
                        "fallback": rec.fallback})
            if rec.stage in per[res.strategy]:
                v = ev if plan.eval_nugget > 0 else rec.variance
                per[res.strategy][rec.stage].append(
                    (rec.seconds, 100.0 * rec.candidate_set_size / n, rec.candidates_examined, v))
    rows = []
    for stage in plan.stages:
        base = per[base_label][stage]
        base_v = float(np.mean([b[3] for b in base])) if base else math.nan
        base_t = float(np.mean([b[0] for b in base])) if base else math.nan
        for lab in labels:
            vals = per[lab][stage]
            if not vals:
                continue
            arr = np.array(vals, dtype=float)
            mean_v = float(arr[:, 3].mean())
            mean_t = float(arr[:, 0].mean())
            rel = 0.0 if lab == base_label else (mean_v - base_v) / base_v
            rows.append({"strategy": lab, "stage": stage, "locations": len(vals),
                         "mean_seconds": mean_t,
                         "time_ratio_vs_baseline": mean_t / base_t if base_t > 0 else math.nan,
                         "mean_candidate_pct": float(arr[:, 1].mean()),
                         "mean_examined": float(arr[:, 2].mean()),
                         "mean_variance": mean_v, "relative_difference": rel})
    return BenchmarkTable(rows, raw, failures)

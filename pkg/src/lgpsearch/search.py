"""Greedy sub-design search with pluggable candidate sets.

Each stage adds the candidate with the largest variance reduction ``R`` to the
sub-design.  Strategies differ only in which candidates are scored:

``exhaustive``
    every unchosen design point.
``nn``
    no scoring at all; the sub-design is the ``budget`` nearest neighbours.
``maxdist``
    points within the distance bound ``y`` of the location or of any chosen
    point, where ``y`` is derived from the best reduction ``delta`` among the
    ``k`` nearest unchosen neighbours.  Points farther away provably cannot
    beat ``delta``, so the chosen sequence equals the exhaustive one.
``feature``
    the ``maxdist`` set further cut to the feature-space cone, optionally
    served by an LSH prefilter.

Stage numbering follows sub-design size: the record for stage ``j`` describes
the search run while ``j`` points are chosen, and its ``variance`` is the
predictive variance after its point was added (``j + 1`` points).  The seed
record is stage 0.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .features import (FeatureMap, LshIndex, ResidualProjector, approx_reduction,
                       cone_filter, cone_half_angle, nystrom_build)
from .kernel import DegenerateThreshold, KernelSpec, profile_inverse
from .linalg import SingularAugmentation
from .localgp import (Dataset, EigenParams, LocalState, NumericalBreakdown, accept,
                      candidate_terms, variance_reductions)
from .spatial import KDTree, linear_knn_excluding, linear_within_radius_of_any

STRATEGIES = ("exhaustive", "nn", "maxdist", "feature")
CONE_DELTA_POLICIES = ("min", "feature", "exact")
DEFAULT_LAMBDA_FLOOR = 1e-12
_BLOCK = 4096


def default_feature_count(dims: int) -> int:
    return 200 if dims <= 2 else 300


@dataclass
class SearchConfig:
    budget: int
    k: int = 8
    strategy: str = "maxdist"
    use_tree: bool = True
    n_features: int | None = None
    n_landmarks: int | None = None
    use_lsh: bool = False
    lsh_tables: int = 12
    lsh_bits: int = 16
    lsh_trust: bool = False
    stop_reduction: float | None = None
    eigen: EigenParams = field(default_factory=EigenParams)
    seed: int = 0
    # cone threshold: "exact" uses delta itself, "feature" the best approximate
    # reduction among the k nearest neighbours, "min" the smaller of the two
    # (the union of both cones).  The cone is skipped whenever the exact delta
    # exceeds ||C(x)||^2.
    cone_delta: str = "min"
    lambda_floor: float = DEFAULT_LAMBDA_FLOOR

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.stop_reduction is not None and self.stop_reduction < 0:
            raise ValueError("stop_reduction must be >= 0")
        if self.cone_delta not in CONE_DELTA_POLICIES:
            raise ValueError(f"cone_delta must be one of {CONE_DELTA_POLICIES}")

    @property
    def label(self) -> str:
        if self.strategy == "feature":
            d = self.n_features if self.n_features is not None else "auto"
            m = f",m={self.n_landmarks}" if self.n_landmarks is not None else ""
            return f"feature(D={d}{m}{',lsh' if self.use_lsh else ''}{',trust' if self.lsh_trust else ''})"
        return self.strategy


@dataclass
class StageRecord:
    stage: int
    chosen: int
    reduction: float
    variance: float
    candidates_examined: int
    candidate_set_size: int
    radius_set_size: int | None = None
    radius: float | None = None
    delta: float | None = None
    lambda_min: float | None = None
    seconds: float = 0.0
    fallback: bool = False


@dataclass
class SearchReport:
    strategy: str
    location: np.ndarray
    records: list[StageRecord] = field(default_factory=list)
    incomplete: bool = False
    error: str | None = None
    state: LocalState | None = field(default=None, repr=False)

    @property
    def chosen(self) -> list[int]:
        return [r.chosen for r in self.records]

    @property
    def final_variance(self) -> float:
        return self.records[-1].variance

    def stage(self, j: int) -> StageRecord:
        for r in self.records:
            if r.stage == j:
                return r
        raise KeyError(f"no record for stage {j}")


@dataclass(eq=False)
class SearchContext:
    """Read-only structures shared by every search over one dataset."""

    data: Dataset
    spec: KernelSpec
    scaled: np.ndarray
    tree: KDTree | None = None
    features: FeatureMap | None = None
    lsh: LshIndex | None = None

    @classmethod
    def build(cls, data: Dataset, spec: KernelSpec, config: SearchConfig | None = None,
              features: FeatureMap | None = None) -> "SearchContext":
        if spec.dims != data.dims:
            raise ValueError(f"kernel has {spec.dims} dims, data has {data.dims}")
        scaled = spec.scale_points(data.inputs)
        scaled.setflags(write=False)
        use_tree = config.use_tree if config is not None else True
        tree = KDTree(scaled) if use_tree else None
        ctx = cls(data, spec, scaled, tree)
        if config is not None and config.strategy == "feature":
            ctx.attach_features(config, features)
        return ctx

    def attach_features(self, config: SearchConfig, features: FeatureMap | None = None):
        if features is None:
            dfeat = config.n_features or default_feature_count(self.data.dims)
            features = nystrom_build(self.spec, self.data, dfeat, config.n_landmarks, config.seed)
        features.check_kernel(self.spec)
        if features.n_points != self.data.n_rows:
            raise ValueError("feature map was built for a different design")
        self.features = features
        if config.use_lsh:
            self.lsh = LshIndex(features, None, config.lsh_tables, config.lsh_bits, config.seed)
        return self

    @property
    def n(self) -> int:
        return self.scaled.shape[0]

    def knn(self, q_scaled: np.ndarray, k: int, excluded: np.ndarray | None = None) -> np.ndarray:
        if self.tree is not None:
            return self.tree.knn_excluding(q_scaled, k, excluded)
        return linear_knn_excluding(self.scaled, q_scaled, k, excluded)

    def within(self, centers: np.ndarray, radius: float, excluded: np.ndarray) -> np.ndarray:
        if self.tree is not None:
            return self.tree.within_radius_of_any(centers, radius, excluded)
        return linear_within_radius_of_any(self.scaled, centers, radius, excluded)


def _score(state: LocalState, ctx: SearchContext, idx: np.ndarray) -> np.ndarray:
    """Exact ``R`` for dataset rows ``idx``; ineligible rows get ``-inf`` and are marked."""
    out = np.empty(idx.shape[0])
    for s in range(0, idx.shape[0], _BLOCK):
        blk = idx[s:s + _BLOCK]
        kxu, kux = candidate_terms(state, ctx.scaled[blk])
        out[s:s + _BLOCK] = variance_reductions(state, kxu, kux)
    bad = np.isnan(out)
    if bad.any():
        state.ineligible.update(idx[bad].tolist())
        out[bad] = -np.inf
    return out


def _argmax_lowest(idx: np.ndarray, r: np.ndarray) -> tuple[int, float] | None:
    """Best candidate with ties to the lowest index; ``None`` when none is eligible."""
    if idx.size == 0:
        return None
    best = float(r.max())
    if best == -np.inf:
        return None
    return int(idx[r == best].min()), best


def seed_stage(data: Dataset, spec: KernelSpec, x, ctx: SearchContext | None = None,
               eigen: EigenParams | None = None) -> LocalState:
    """Local state holding the single Theta-nearest design point (ties to lower index)."""
    ctx = ctx or SearchContext.build(data, spec)
    state = LocalState.start(spec, x, eigen)
    first = int(ctx.knn(state.scaled_location, 1)[0])
    accept(state, first, ctx.scaled[first])
    return state


def threshold_delta(state: LocalState, ctx: SearchContext, k: int,
                    excluded: np.ndarray) -> tuple[float, int | None, np.ndarray]:
    """``(delta, best neighbour, neighbours)`` over the ``k`` nearest unchosen points.

    Uses every remaining point when fewer than ``k`` are left.  Ineligible
    neighbours contribute nothing, so if all are ineligible ``delta`` is 0.
    """
    remaining = ctx.n - int(excluded.sum())
    nbrs = ctx.knn(state.scaled_location, min(k, remaining), excluded)
    r = _score(state, ctx, nbrs)
    hit = _argmax_lowest(nbrs, r)
    if hit is None:
        return 0.0, None, nbrs
    return max(hit[1], 0.0), hit[0], nbrs


def maxdist_radius(state: LocalState, delta: float,
                   lambda_floor: float = DEFAULT_LAMBDA_FLOOR) -> float:
    """Distance beyond which no candidate can reduce the variance by more than ``delta``."""
    if delta < 0:
        raise ValueError("delta must be >= 0")
    if delta == 0:
        return math.inf
    j = state.order
    lam = state.lambda_min
    if not lam >= lambda_floor:
        return math.inf
    lead = 1.0 + math.sqrt(j) * state.kweights_norm()
    v = math.sqrt(delta / (lead * lead + j * delta / lam))
    try:
        return profile_inverse(state.spec, min(v, 1.0))
    except DegenerateThreshold:
        return math.inf


class _FeatureState:
    """Per-search feature-space bookkeeping (projector, private LSH copy)."""

    def __init__(self, ctx: SearchContext, state: LocalState):
        fmap = ctx.features
        if fmap is None:
            raise ValueError("feature strategy needs a feature map on the search context")
        fmap.check_kernel(state.spec)
        self.fmap = fmap
        self.proj = ResidualProjector(fmap.n_features, fmap.kernel_hash)
        self.ux = fmap.transform_scaled(state.scaled_location[None, :])[:, 0]
        self.lsh = ctx.lsh
        for i in state.chosen:
            self.proj.extend(fmap.features[:, i])

    def add(self, index: int):
        self.proj.extend(self.fmap.features[:, index])

    def current_lsh(self) -> LshIndex:
        # the shared index is never mutated; stale keys are rebuilt privately
        if self.proj.stage - self.lsh.generation > self.lsh.staleness:
            self.lsh = self.lsh.copy().rehash(self.proj)
        return self.lsh


def _feature_survivors(fs: _FeatureState, config: SearchConfig, radius_set: np.ndarray,
                       nbrs: np.ndarray, delta: float) -> np.ndarray:
    cx = fs.proj.residual(fs.ux)
    feats = fs.fmap.features
    if delta > float(cx @ cx):
        # the features cannot represent a reduction the exact search already
        # achieves, so the cone says nothing useful at this stage
        return np.zeros(0, dtype=int)
    if config.cone_delta == "exact":
        cone_delta = delta
    else:
        a = approx_reduction(cx, fs.proj.residual(feats[:, nbrs]))
        a = a[~np.isnan(a)]
        cone_delta = float(a.max()) if a.size else 0.0
        if config.cone_delta == "min":
            cone_delta = min(cone_delta, delta)
    if config.use_lsh:
        lsh = fs.current_lsh()
        half = cone_half_angle(cx, cone_delta)
        if half == 0.0 and cone_delta > float(cx @ cx):
            return np.zeros(0, dtype=int)
        hits = np.union1d(lsh.query(cx, half), lsh.query(-cx, half))
        cand = np.intersect1d(radius_set, hits, assume_unique=True)
        if config.lsh_trust or cand.size == 0:
            return cand
        return cand[cone_filter(cx, fs.proj.residual(feats[:, cand]), cone_delta)]
    if radius_set.size == 0:
        return radius_set
    return radius_set[cone_filter(cx, fs.proj.residual(feats[:, radius_set]), cone_delta)]


def run_search(data: Dataset, spec: KernelSpec, x, config: SearchConfig,
               ctx: SearchContext | None = None, observer=None) -> SearchReport:
    """Greedy search for one location.

    ``observer``, when given, is called as ``observer(state, record, pool)``
    before each non-seed stage's point is accepted; tests use it to audit the
    pruning against an oracle.
    """
    n = data.n_rows
    if config.budget > n:
        raise ValueError(f"budget {config.budget} exceeds the design size {n}")
    if ctx is None:
        ctx = SearchContext.build(data, spec, config)
    elif config.strategy == "feature" and ctx.features is None:
        ctx.attach_features(config)
    x = np.asarray(x, dtype=float).reshape(-1)
    report = SearchReport(config.label, x)

    t0 = time.perf_counter()
    state = LocalState.start(spec, x, config.eigen)
    if config.strategy == "nn":
        order = ctx.knn(state.scaled_location, config.budget)
    else:
        order = ctx.knn(state.scaled_location, 1)
    first = int(order[0])
    kxu, kux = candidate_terms(state, ctx.scaled[first][None, :])
    r0 = float(variance_reductions(state, kxu, kux)[0])
    accept(state, first, ctx.scaled[first], float(kxu[0]), kux[0], r0)
    report.records.append(StageRecord(0, first, r0, state.variance, n, n,
                                      seconds=time.perf_counter() - t0))
    excluded = np.zeros(n, dtype=bool)
    excluded[first] = True

    fs = _FeatureState(ctx, state) if config.strategy == "feature" else None

    for j in range(1, config.budget):
        t0 = time.perf_counter()
        try:
            if config.strategy == "nn":
                idx = int(order[j])
                r = _score(state, ctx, np.array([idx]))
                if r[0] == -np.inf:
                    raise NumericalBreakdown(f"nearest neighbour {idx} is ineligible")
                pick = (idx, float(r[0]))
                rec = StageRecord(j, idx, pick[1], math.nan, 1, 1)
                pool = np.array([idx])
            elif config.strategy == "exhaustive":
                pool = np.flatnonzero(~excluded)
                pick = _argmax_lowest(pool, _score(state, ctx, pool))
                rec = StageRecord(j, -1, math.nan, math.nan, pool.size, pool.size)
            else:
                delta, nb, nbrs = threshold_delta(state, ctx, config.k, excluded)
                lam = state.lambda_min
                radius = maxdist_radius(state, delta, config.lambda_floor)
                centers = np.vstack([state.scaled_location[None, :], state.chosen_scaled])
                radius_set = ctx.within(centers, radius, excluded)
                fallback = False
                if fs is None:
                    pool = np.union1d(radius_set, nbrs)
                else:
                    surv = _feature_survivors(fs, config, radius_set, nbrs, delta)
                    if surv.size == 0:
                        surv, fallback = radius_set, True
                    pool = surv if nb is None else np.union1d(surv, [nb])
                if state.ineligible:
                    scorable = pool[~np.isin(pool, list(state.ineligible))]
                else:
                    scorable = pool
                pick = _argmax_lowest(scorable, _score(state, ctx, scorable))
                rec = StageRecord(j, -1, math.nan, math.nan, pool.size, pool.size,
                                  radius_set.size, radius, delta, lam, fallback=fallback)
            if pick is None:
                # every remaining candidate duplicates the sub-design
                break
            if config.stop_reduction is not None and pick[1] < config.stop_reduction:
                break
            rec.chosen, rec.reduction = pick
            if observer is not None:
                observer(state, rec, pool)
            accept(state, pick[0], ctx.scaled[pick[0]], reduction=pick[1])
        except (NumericalBreakdown, SingularAugmentation) as exc:
            report.incomplete = True
            report.error = f"stage {j}: {exc}"
            break
        excluded[pick[0]] = True
        if fs is not None:
            fs.add(pick[0])
        rec.variance = state.variance
        rec.seconds = time.perf_counter() - t0
        report.records.append(rec)
    report.state = state
    return report

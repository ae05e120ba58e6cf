"""Command-line entry point: ``lgpsearch gen|features|predict|bench``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .features import InsufficientRank, KernelMismatch, nystrom_build
from .harness import (ExperimentPlan, PlanError, benchmark, emulate, grid_points,
                      kernel_from_dict, read_points_csv, six_hump_camel, sobol_points,
                      write_points_csv)
from .features import FeatureMap
from .linalg import SingularAugmentation
from .localgp import Dataset, NumericalBreakdown
from .search import STRATEGIES, SearchConfig

EXIT_OK = 0
EXIT_PLAN = 2
EXIT_NUMERIC = 3

log = logging.getLogger("lgpsearch")


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _onoff(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return text == "on"


def _bounds(values: list[float], d: int):
    if len(values) == 2:
        return [values] * d
    if len(values) == 2 * d:
        return [values[2 * i:2 * i + 2] for i in range(d)]
    raise PlanError(f"--bounds needs 2 or {2 * d} numbers")


def _add_kernel_args(p):
    p.add_argument("--kernel", default="gaussian", choices=["gaussian"])
    p.add_argument("--theta", type=_floats, required=True, help="lengthscales, comma-separated")
    p.add_argument("--sigma2", type=float, default=1.0)


def _add_search_args(p):
    p.add_argument("--budget", type=int, default=31, help="final sub-design size")
    p.add_argument("--k", type=int, default=8, help="neighbours used for the threshold")
    p.add_argument("--strategy", choices=STRATEGIES, default="maxdist")
    p.add_argument("--kdtree", type=_onoff, default=True, metavar="on|off")
    p.add_argument("--lsh", type=_onoff, default=False, metavar="on|off")
    p.add_argument("--lsh-trust", action="store_true",
                   help="use LSH buckets as the candidate set without exact cone checks")
    p.add_argument("--d-features", type=int, default=None)
    p.add_argument("--landmarks", type=int, default=None)
    p.add_argument("--stop-reduction", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lgpsearch", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a design or location file")
    gsub = gen.add_subparsers(dest="kind", required=True)
    g = gsub.add_parser("grid")
    g.add_argument("--counts", type=_ints, required=True)
    g.add_argument("--bounds", type=_floats, required=True)
    s = gsub.add_parser("sobol")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--d", type=int, required=True)
    s.add_argument("--bounds", type=_floats, default=[0.0, 1.0])
    s.add_argument("--scramble", action="store_true")
    s.add_argument("--seed", type=int, default=None)
    for p in (g, s):
        p.add_argument("--response", choices=["none", "zero", "camel"], default="none")
        p.add_argument("--out", required=True)

    fb = sub.add_parser("features", help="feature sidecar tools")
    fsub = fb.add_subparsers(dest="action", required=True)
    b = fsub.add_parser("build")
    b.add_argument("--design", required=True)
    _add_kernel_args(b)
    b.add_argument("--d-features", type=int, required=True)
    b.add_argument("--landmarks", type=int, default=None)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)

    pr = sub.add_parser("predict", help="local GP predictions at given locations")
    pr.add_argument("--design", required=True)
    pr.add_argument("--locations", required=True)
    _add_kernel_args(pr)
    _add_search_args(pr)
    pr.add_argument("--features", default=None, help="prebuilt feature sidecar")
    pr.add_argument("--workers", type=int, default=None)
    pr.add_argument("--out", required=True)

    be = sub.add_parser("bench", help="run an experiment plan and write the tables")
    be.add_argument("--plan", required=True)
    be.add_argument("--workers", type=int, default=None)
    be.add_argument("--out", default=None, help="aggregate table CSV (defaults to the plan's output)")
    be.add_argument("--raw", default=None, help="per-location raw CSV")
    return ap


def _cmd_gen(args) -> int:
    if args.kind == "grid":
        pts = grid_points(args.counts, _bounds(args.bounds, len(args.counts)))
    else:
        pts = sobol_points(args.n, args.d, _bounds(args.bounds, args.d), args.seed, args.scramble)
    y = None
    if args.response == "zero":
        y = np.zeros(pts.shape[0])
    elif args.response == "camel":
        y = six_hump_camel(pts)
    write_points_csv(args.out, pts, y)
    return EXIT_OK


def _load_design(path) -> Dataset:
    x, y = read_points_csv(path)
    try:
        return Dataset(x, y if y is not None else np.zeros(x.shape[0]))
    except ValueError as exc:
        raise PlanError(f"{path}: {exc}") from None


def _kernel(args, dims):
    return kernel_from_dict({"kernel": args.kernel, "theta": args.theta if len(args.theta) > 1
                             else args.theta[0], "sigma2": args.sigma2}, dims)


def _cmd_features(args) -> int:
    data = _load_design(args.design)
    spec = _kernel(args, data.dims)
    fmap = nystrom_build(spec, data, args.d_features, args.landmarks, args.seed)
    fmap.save(args.out)
    log.info("built %d features over %d points, reconstruction error %.3e",
             fmap.n_features, fmap.n_points, fmap.reconstruction_error)
    return EXIT_OK


def _cmd_predict(args) -> int:
    data = _load_design(args.design)
    locs, _ = read_points_csv(args.locations)
    spec = _kernel(args, data.dims)
    try:
        cfg = SearchConfig(budget=args.budget, k=args.k, strategy=args.strategy, use_tree=args.kdtree,
                           n_features=args.d_features, n_landmarks=args.landmarks,
                           use_lsh=args.lsh, lsh_trust=args.lsh_trust,
                           stop_reduction=args.stop_reduction, seed=args.seed)
    except ValueError as exc:
        raise PlanError(str(exc)) from None
    if cfg.budget > data.n_rows:
        raise PlanError(f"budget {cfg.budget} exceeds the design size {data.n_rows}")
    plan = ExperimentPlan(data, locs, spec, [cfg])
    features = None
    if args.features:
        features = {0: FeatureMap.load(args.features, spec, data)}
    results = emulate(plan, args.workers, features)
    broke = False
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i + 1}" for i in range(data.dims)] + ["mean", "variance", "size", "status"])
        for res in results:
            x = [repr(float(v)) for v in locs[res.location_index]]
            size = len(res.report.chosen) if res.report is not None else 0
            status = "ok" if res.error is None else res.error
            broke |= res.error is not None
            w.writerow(x + [repr(res.mean), repr(res.variance), size, status])
    return EXIT_NUMERIC if broke else EXIT_OK


def _cmd_bench(args) -> int:
    plan = ExperimentPlan.load(args.plan)
    table = benchmark(plan, args.workers)
    out = args.out or plan.output
    text = table.table_csv()
    if out:
        Path(out).write_text(text, encoding="utf-8", newline="\n")
    else:
        sys.stdout.write(text)
    if args.raw:
        with open(args.raw, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(table.raw_csv())
    for f in table.failures:
        log.error("location %d, %s: %s", f.location_index, f.strategy, f.error)
    return EXIT_NUMERIC if table.failures else EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    handlers = {"gen": _cmd_gen, "features": _cmd_features, "predict": _cmd_predict,
                "bench": _cmd_bench}
    try:
        return handlers[args.command](args)
    except (PlanError, InsufficientRank, KernelMismatch, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PLAN
    except (NumericalBreakdown, SingularAugmentation) as exc:
        print(f"numerical breakdown: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

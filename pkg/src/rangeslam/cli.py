"""``rangeslam`` command-line driver.

Exit codes: 0 success, 1 usage/config error, 2 data/precondition error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import default_config, load_config
from .errors import ConfigError, DataError, RangeSlamError
from .evaluation import evaluate_trajectory
from .formats import (
    PRECISION,
    Trajectory,
    fmt,
    fmt_all,
    read_extrinsics,
    read_lm_log,
    read_observations,
    read_range_log,
    read_scale_file,
    read_survey,
    read_trajectory,
    write_extrinsics,
    write_observations,
    write_points,
    write_range_log,
    write_scale_file,
    write_survey,
    write_trajectory,
)
from .graph import apply_scale
from .optimizer import LmConfig, optimize
from .pipeline import build_graph
from .ranging import predict_range, trilaterate_anchor
from .scale import (
    DEFAULT_ASSOCIATION_TOLERANCE,
    DEFAULT_MIN_SAMPLES,
    accumulate_duplets,
    associate,
    select_scale,
)
from .sim import make_scenario, survey_samples

log = logging.getLogger("rangeslam")

SIMULATE_FILES = {
    "ground_truth": "ground_truth.txt",
    "vo_trajectory": "vo_trajectory.txt",
    "ranges": "ranges.txt",
    "observations": "observations.txt",
    "extrinsics": "extrinsics.txt",
}


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with code 1 instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=d(None), help="random seed override")
    parser.add_argument("--verbose", "-v", action="store_true", default=d(False), help="log progress to stderr")
    parser.add_argument("--precision", type=int, default=d(PRECISION),
                        help="significant digits for floats in output files (default 17)")


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# --- simulate ---------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = load_config(args.config) if args.config else default_config()
    seed = cfg.world.seed if args.seed is None else args.seed
    sc = make_scenario(cfg.world, cfg.noise, seed)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = args.precision
    w = sc.world
    write_trajectory(out / SIMULATE_FILES["ground_truth"], Trajectory(w.timestamps, w.poses), p)
    write_trajectory(out / SIMULATE_FILES["vo_trajectory"], Trajectory(w.timestamps, sc.vo_poses), p)
    write_range_log(out / SIMULATE_FILES["ranges"], sc.ranges, p)
    write_observations(out / SIMULATE_FILES["observations"], sc.vo_map.points, sc.vo_map.observations,
                       sc.vo_map.point_ids, p)
    write_extrinsics(out / SIMULATE_FILES["extrinsics"], w.extrinsics, w.intrinsics, p)
    if args.survey:
        sigma = cfg.noise.range_sigma
        write_survey(out / "survey.txt", survey_samples(w, args.survey, sigma, [seed, 3]), p)
    print(f"trajectory        {cfg.world.trajectory}")
    print(f"seed              {seed}")
    print(f"keyframes         {len(w.poses)}")
    print(f"map points        {len(sc.vo_map.points)} of {len(w.points)} triangulated")
    print(f"observations      {len(sc.vo_map.observations)}")
    print(f"ranges            {len(sc.ranges)}")
    print(f"true scale        {fmt(w.true_scale, 10)}")
    print(f"output            {out}")
    return 0


# --- estimate-scale ---------------------------------------------------------

def format_scale_table(est) -> str:
    """Both branch statistics laid out like a two-column results table."""
    sel, rej = (est.alpha, est.std_dev), (est.rejected_branch_mean, est.rejected_branch_std)
    minus, plus = (sel, rej) if est.branch == "minus" else (rej, sel)
    g = lambda x: format(x, ".9g")  # noqa: E731
    rows = [
        f"{'':<20}{'alpha_minus':>18}{'alpha_plus':>18}",
        f"{'Mean':<20}{g(minus[0]):>18}{g(plus[0]):>18}",
        f"{'Standard deviation':<20}{g(minus[1]):>18}{g(plus[1]):>18}",
        f"samples: {est.n_samples}   selected: alpha_{est.branch} = {g(est.alpha)}",
    ]
    return "\n".join(rows)


def cmd_estimate_scale(args) -> int:
    traj = read_trajectory(args.trajectory)
    ranges = read_range_log(args.ranges)
    ext, _ = read_extrinsics(args.extrinsics)
    ds = accumulate_duplets(traj.pairs(), ranges, ext, args.tolerance)
    sk = ds.skipped
    if sk.total:
        print(f"skipped {sk.total} ranges: {sk.unassociated} unassociated, {sk.degenerate} degenerate, "
              f"{sk.no_real_solution} without a real root", file=sys.stderr)
    est = select_scale(ds.duplets, args.min_samples, args.mad)
    print(format_scale_table(est))
    if est.ambiguous:
        print("warning: branch standard deviations differ by less than 10%; selection is ambiguous",
              file=sys.stderr)
    if est.alpha <= 0:
        msg = f"selected scale {est.alpha:.9g} is not positive"
        if not args.allow_negative_scale:
            raise DataError(msg + " (use --allow-negative-scale to keep it)")
        print(f"warning: {msg}", file=sys.stderr)
    if args.output:
        write_scale_file(args.output, est, args.precision)
    return 0


# --- optimize ---------------------------------------------------------------

def cmd_optimize(args) -> int:
    traj = read_trajectory(args.trajectory)
    point_ids, points, obs = read_observations(args.observations)
    ranges = read_range_log(args.ranges)
    ext, K = read_extrinsics(args.extrinsics)
    est = read_scale_file(args.scale)
    try:
        lm = LmConfig(max_iterations=args.max_iterations, initial_lambda=args.initial_lambda,
                      linear_solver=args.linear_solver)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    graph = build_graph(traj.poses, traj.timestamps, points, obs, ranges, K, ext,
                        args.tolerance, args.robust_range)
    if args.robust_range:
        graph = graph.with_loss("huber", args.huber_threshold)
    scaled = apply_scale(graph, est.alpha)
    refined, report = optimize(scaled, lm)

    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = args.precision
    write_trajectory(out / "scaled_trajectory.txt", Trajectory(traj.timestamps, scaled.poses), p)
    write_trajectory(out / "refined_trajectory.txt", Trajectory(traj.timestamps, refined.poses), p)
    write_points(out / "refined_points.txt", refined.points, point_ids, p)
    _write_text(out / "lm_log.txt", report.to_log())
    print(f"scale             {fmt(est.alpha, 10)}")
    print(f"factors           {len(graph.reprojection_factors)} reprojection, {len(graph.range_factors)} range")
    print(f"range loss        {graph.range_loss}")
    print(f"initial cost      {fmt(report.initial_cost, 10)}")
    print(f"final cost        {fmt(report.final_cost, 10)}")
    print(f"iterations        {report.iterations} ({report.termination.value})")
    print(f"output            {out}")
    return 0


# --- evaluate ---------------------------------------------------------------

def cmd_evaluate(args) -> int:
    estimate = read_trajectory(args.estimate)
    if args.scale is not None:
        estimate = estimate.scaled(args.scale)
    truth = read_trajectory(args.ground_truth)
    report = evaluate_trajectory(estimate, truth, args.tolerance, args.align)
    text = report.format(args.precision)
    sys.stdout.write(text)
    if args.output:
        _write_text(Path(args.output), text)
    return 0


# --- plot-data --------------------------------------------------------------

def _csv(path: Path, header, rows, precision) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(x, precision) if isinstance(x, (float, np.floating)) else x for x in r])


def cmd_plot_data(args) -> int:
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = args.precision
    written = []

    sources = []
    if args.ground_truth:
        sources.append(("ground_truth", args.ground_truth))
    for spec in args.estimate or []:
        label, sep, path = spec.partition("=")
        if not sep:
            raise ConfigError(f"--estimate expects LABEL=PATH, got {spec!r}")
        sources.append((label, path))
    if sources:
        rows = []
        for label, path in sources:
            traj = read_trajectory(path)
            rows += [(label, float(t), *map(float, x)) for t, x in zip(traj.timestamps, traj.positions)]
        _csv(out / "trajectories.csv", ["source", "timestamp", "x", "y", "z"], rows, p)
        written.append("trajectories.csv")

    ext = read_extrinsics(args.extrinsics)[0] if args.extrinsics else None
    ranges = read_range_log(args.ranges) if args.ranges else None
    if ranges is not None and ext is not None and args.ground_truth:
        gt = read_trajectory(args.ground_truth)
        rows = []
        for m in ranges:
            k = associate(gt.timestamps, m.timestamp, args.tolerance)
            if k is not None:
                true = predict_range(gt.poses[k], 1.0, ext)
                rows.append((float(m.timestamp), float(m.distance), true, abs(m.distance - true)))
        _csv(out / "range_error.csv", ["timestamp", "measured_m", "true_m", "abs_error_m"], rows, p)
        written.append("range_error.csv")

    if ranges is not None and ext is not None and args.vo:
        vo = read_trajectory(args.vo)
        ds = accumulate_duplets(vo.pairs(), ranges, ext, args.tolerance)
        rows = [(d.timestamp, d.alpha_minus, d.alpha_plus, d.discriminant) for d in ds.duplets]
        _csv(out / "scale_duplets.csv", ["timestamp", "alpha_minus", "alpha_plus", "discriminant"], rows, p)
        written.append("scale_duplets.csv")

    if args.lm_log:
        initial, history = read_lm_log(args.lm_log)
        rows = [(0, initial, "", "", 1)] + [
            (h.iteration, h.cost, h.lambda_, h.step_norm, int(h.accepted)) for h in history
        ]
        _csv(out / "lm_cost.csv", ["iteration", "cost", "lambda", "step_norm", "accepted"], rows, p)
        written.append("lm_cost.csv")

    if not written:
        raise ConfigError("plot-data: no inputs given; nothing to write")
    for name in written:
        print(out / name)
    return 0


# --- trilaterate ------------------------------------------------------------

def cmd_trilaterate(args) -> int:
    samples = read_survey(args.samples)
    anchor, rms = trilaterate_anchor(samples, args.max_iterations)
    text = (f"anchor_position = {fmt_all(anchor, args.precision)}\n"
            f"residual_rms_m = {fmt(rms, args.precision)}\n"
            f"n_samples = {len(samples)}\n")
    sys.stdout.write(text)
    if args.output:
        _write_text(Path(args.output), text)
    return 0


# --- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    _common_flags(common, suppress=True)

    parser = _Parser(prog="rangeslam", description="Scale recovery and refinement of monocular VO with single-anchor ranging.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _common_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic benchmark")
    s.add_argument("output_dir", help="directory for the generated files")
    s.add_argument("--config", help="simulation config (key = value); built-in benchmark if omitted")
    s.add_argument("--survey", type=int, default=0, metavar="N",
                   help="also write N anchor survey samples to survey.txt")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("estimate-scale", parents=[common], help="recover the global scale from ranges")
    s.add_argument("--trajectory", required=True, help="up-to-scale VO trajectory")
    s.add_argument("--ranges", required=True, help="range log")
    s.add_argument("--extrinsics", required=True, help="anchor / lever-arm / camera file")
    s.add_argument("--output", help="write the selected scale here")
    s.add_argument("--min-samples", type=int, default=DEFAULT_MIN_SAMPLES)
    s.add_argument("--tolerance", type=float, default=DEFAULT_ASSOCIATION_TOLERANCE,
                   help="range-to-pose time association tolerance (s)")
    s.add_argument("--mad", type=float, default=None, metavar="K",
                   help="drop duplets further than K robust sigmas from the branch median")
    s.add_argument("--allow-negative-scale", action="store_true")
    s.set_defaults(func=cmd_estimate_scale)

    s = sub.add_parser("optimize", parents=[common], help="scale and jointly refine poses and map")
    s.add_argument("--trajectory", required=True)
    s.add_argument("--observations", required=True)
    s.add_argument("--ranges", required=True)
    s.add_argument("--extrinsics", required=True)
    s.add_argument("--scale", required=True, help="scale file from estimate-scale")
    s.add_argument("--output-dir", required=True)
    s.add_argument("--tolerance", type=float, default=DEFAULT_ASSOCIATION_TOLERANCE)
    s.add_argument("--max-iterations", type=int, default=LmConfig.max_iterations)
    s.add_argument("--initial-lambda", type=float, default=LmConfig.initial_lambda)
    s.add_argument("--linear-solver", choices=("schur", "dense"), default="schur")
    s.add_argument("--robust-range", action="store_true", help="Huber loss on range residuals")
    s.add_argument("--huber-threshold", type=float, default=3.0,
                   help="Huber threshold in whitened units (default 3)")
    s.set_defaults(func=cmd_optimize)

    s = sub.add_parser("evaluate", parents=[common], help="position RMSE against ground truth")
    s.add_argument("--estimate", required=True)
    s.add_argument("--ground-truth", required=True)
    s.add_argument("--tolerance", type=float, default=DEFAULT_ASSOCIATION_TOLERANCE)
    s.add_argument("--align", action="store_true", help="rigidly align before computing errors")
    s.add_argument("--scale", type=float, default=None, help="multiply estimate translations first")
    s.add_argument("--output", help="also write the report here")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("plot-data", parents=[common], help="emit plot-ready CSV files")
    s.add_argument("--output-dir", required=True)
    s.add_argument("--ground-truth")
    s.add_argument("--estimate", action="append", metavar="LABEL=PATH",
                   help="trajectory to include (repeatable)")
    s.add_argument("--vo", help="VO trajectory for the scale-duplet series")
    s.add_argument("--ranges")
    s.add_argument("--extrinsics")
    s.add_argument("--lm-log")
    s.add_argument("--tolerance", type=float, default=DEFAULT_ASSOCIATION_TOLERANCE)
    s.set_defaults(func=cmd_plot_data)

    s = sub.add_parser("trilaterate", parents=[common], help="locate the anchor from survey ranges")
    s.add_argument("--samples", required=True, help="survey file: x y z distance per line")
    s.add_argument("--output")
    s.add_argument("--max-iterations", type=int, default=50)
    s.set_defaults(func=cmd_trilaterate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    if args.precision < 1 or args.precision > 17:
        parser.error("--precision must be between 1 and 17")
    try:
        return args.func(args)
    except RangeSlamError as e:
        print(f"rangeslam: error: {e}", file=sys.stderr)
        return e.exit_code
    except (OSError, ValueError) as e:
        print(f"rangeslam: error: {e}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())

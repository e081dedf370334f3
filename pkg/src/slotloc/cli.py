"""Command-line entry point: simulate scenarios, replay uplink streams
through the collector, and produce accuracy and lifetime reports.

Exit codes: 0 success, 1 unexpected error, 2 usage, 3 missing input file,
4 schema/version mismatch, 5 scenario validation failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import statistics
import sys
from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import collector as collector_mod
from . import energy, selfloc, sim, solver
from .model import DeploymentConfig, load_config, validate

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_NOT_FOUND = 3
EXIT_SCHEMA = 4
EXIT_VALIDATION = 5


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def resolve_scenario(name: str) -> str:
    """A --config value is a path, or the name of a bundled scenario."""
    import os

    if os.path.exists(name):
        return name
    base = name if name.endswith(".cfg") else name + ".cfg"
    bundled = resources.files("slotloc").joinpath("scenarios", base)
    if bundled.is_file():
        return str(bundled)
    raise CliError(f"scenario not found: {name}", EXIT_NOT_FOUND)


def load_scenario(name: str, noise_scale: float | None = None) -> DeploymentConfig:
    config = load_config(resolve_scenario(name))
    if noise_scale is not None:
        config = dataclasses.replace(
            config,
            channel=dataclasses.replace(
                config.channel,
                timestamp_noise_s=config.channel.timestamp_noise_s * noise_scale,
                cfo_noise_ppm=config.channel.cfo_noise_ppm * noise_scale,
            ),
        )
    problems = validate(config)
    if problems:
        raise CliError("invalid scenario:\n  " + "\n  ".join(problems), EXIT_VALIDATION)
    return config


# -- accuracy ------------------------------------------------------------------

@dataclass(frozen=True)
class AccuracyReport:
    """Per-sample absolute errors (cm) and their aggregate statistics for
    one solving variant."""

    variant: str  # "gt_anchors" | "sl_anchors"
    errors_x_cm: tuple[float, ...]
    errors_y_cm: tuple[float, ...]
    errors_2d_cm: tuple[float, ...]

    def stats(self) -> dict[str, dict[str, float]]:
        out = {}
        for axis, values in (
            ("x", self.errors_x_cm),
            ("y", self.errors_y_cm),
            ("2d", self.errors_2d_cm),
        ):
            vals = list(values)
            out[axis] = {
                "avg": statistics.fmean(vals),
                "md": statistics.median(vals),
                "sigma": float(np.std(vals)),
            }
        return out


def _trial_seed(seed: int, trial: int) -> int:
    return int(np.random.SeedSequence((seed, 1000 + trial)).generate_state(1)[0])


def run_accuracy(
    config: DeploymentConfig, n_trials: int, seed: int
) -> tuple[AccuracyReport, AccuracyReport]:
    """Monte Carlo replication of the field accuracy experiment: solve each
    simulated tag range set against (a) the scripted ground-truth anchor
    positions and (b) the self-localized anchor positions, and compare to
    the scripted tag path."""
    if not config.tags:
        raise CliError("scenario has no tags: nothing to evaluate", EXIT_VALIDATION)
    last_t = max(t.motion.waypoints[-1].t for t in config.tags)
    n_periods = max(1, math.ceil(round(last_t / config.localization_period_s, 6)))
    spec = config.frame_spec()
    true_anchor_positions = {
        a.node.id: (a.position.x, a.position.y) for a in config.anchors
    }
    gauge = selfloc.gauge_align(
        true_anchor_positions, spec.origin, spec.x_axis, spec.orientation
    )

    gt_x, gt_y, gt_2d = [], [], []
    sl_x, sl_y, sl_2d = [], [], []

    for trial in range(n_trials):
        report = sim.run(config, n_periods=n_periods, seed=_trial_seed(seed, trial))

        per_period_frames: list[selfloc.AnchorFrame] = []
        for rec in report.periods:
            try:
                base = selfloc.fix_frame(
                    rec.anchor_matrix, spec.origin, spec.x_axis, spec.orientation, slack_m=0.5
                )
                per_period_frames.append(selfloc.estimate_all(rec.anchor_matrix, base))
            except selfloc.FrameError:
                continue
        coords: dict[int, list[tuple[float, float]]] = {}
        for fr in per_period_frames:
            for aid, pos in fr.positions.items():
                coords.setdefault(aid, []).append(pos)
        sl_positions = {
            aid: (
                statistics.median(p[0] for p in plist),
                statistics.median(p[1] for p in plist),
            )
            for aid, plist in sorted(coords.items())
        }

        for rec in report.periods:
            for tag_id, entries in sorted(rec.tag_ranges.items()):
                if tag_id not in rec.tag_truth:
                    continue
                _, tx, ty = rec.tag_truth[tag_id]
                valid = [e for e in entries if e.valid]
                if len(valid) < 3:
                    continue
                rs_gt = solver.RangeSet.from_pairs(
                    [(true_anchor_positions[e.anchor_id], e.distance_m) for e in valid]
                )
                fix = solver.trilaterate(rs_gt)
                gt_x.append(abs(fix.x - tx) * 100)
                gt_y.append(abs(fix.y - ty) * 100)
                gt_2d.append(math.hypot(fix.x - tx, fix.y - ty) * 100)

                sl_pairs = [
                    (sl_positions[e.anchor_id], e.distance_m)
                    for e in valid
                    if e.anchor_id in sl_positions
                ]
                if len(sl_pairs) < 3:
                    continue
                fix_sl = solver.trilaterate(solver.RangeSet.from_pairs(sl_pairs))
                gx, gy = gauge.apply(tx, ty)
                sl_x.append(abs(fix_sl.x - gx) * 100)
                sl_y.append(abs(fix_sl.y - gy) * 100)
                sl_2d.append(math.hypot(fix_sl.x - gx, fix_sl.y - gy) * 100)

    gt = AccuracyReport("gt_anchors", tuple(gt_x), tuple(gt_y), tuple(gt_2d))
    sl = AccuracyReport("sl_anchors", tuple(sl_x), tuple(sl_y), tuple(sl_2d))
    return gt, sl


def format_accuracy(gt: AccuracyReport, sl: AccuracyReport) -> str:
    lines = ["Localization error statistics (cm)", ""]
    header = f"{'':8s}" + "".join(f"{c:>10s}" for c in ("x", "y", "2D"))
    for rep, title in ((gt, "ground-truth anchors"), (sl, "self-localized anchors")):
        stats = rep.stats()
        lines.append(f"[{title}]  n={len(rep.errors_2d_cm)}")
        lines.append(header)
        for row in ("avg", "md", "sigma"):
            lines.append(
                f"{row:8s}"
                + "".join(f"{stats[axis][row]:10.2f}" for axis in ("x", "y", "2d"))
            )
        lines.append("")
    return "\n".join(lines)


# -- subcommands ----------------------------------------------------------------

def cmd_simulate(args: argparse.Namespace) -> int:
    config = load_scenario(args.config)
    report = sim.run(config, n_periods=args.periods, seed=args.seed)
    if args.out:
        report.write(args.out)
    n_frames = sum(len(p.frames) for p in report.periods)
    print(
        f"simulated {args.periods} periods of '{config.name}': "
        f"{n_frames} uplink frames, seed {report.seed}"
    )
    if args.out:
        print(f"report written to {args.out}")
    return EXIT_OK


def cmd_replay(args: argparse.Namespace) -> int:
    config = load_scenario(args.config)
    try:
        frames = sim.load_report_frames(args.infile)
    except FileNotFoundError:
        raise CliError(f"report not found: {args.infile}", EXIT_NOT_FOUND) from None
    except sim.SimulationError as e:
        raise CliError(str(e), EXIT_SCHEMA) from None
    coll = collector_mod.Collector(
        period_s=config.localization_period_s,
        frame_spec=config.frame_spec(),
        store_path=args.store,
    )
    for rx_ns, raw in frames:
        coll.ingest(raw, rx_ns)
    coll.flush()
    if args.out:
        n = coll.export_csv(args.out)
        print(f"wrote {n} position records to {args.out}")
    print(
        f"replayed {len(frames)} frames: {len(coll.positions)} fixes, "
        f"anchor frame version {coll.frame_version}"
    )
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    config = load_scenario(args.config)
    try:
        coll = collector_mod.replay_log(
            args.store, config.localization_period_s, config.frame_spec()
        )
    except FileNotFoundError:
        raise CliError(f"log not found: {args.store}", EXIT_NOT_FOUND) from None
    except collector_mod.LogError as e:
        raise CliError(str(e), EXIT_SCHEMA) from None
    if args.out:
        coll.export_csv(args.out)
    by_node: dict[int, int] = {}
    for r in coll.positions:
        by_node[r.node] = by_node.get(r.node, 0) + 1
    print(f"ingested records: {len(coll.ingest_records)}")
    print(f"position fixes:   {len(coll.positions)}")
    for node in sorted(by_node):
        print(f"  node {node}: {by_node[node]} fixes")
    if coll.current_positions:
        print("anchor positions (running medians):")
        for aid, (x, y) in sorted(coll.current_positions.items()):
            print(f"  anchor {aid}: ({x:.3f}, {y:.3f})")
    if args.out:
        print(f"CSV written to {args.out}")
    return EXIT_OK


def cmd_accuracy(args: argparse.Namespace) -> int:
    config = load_scenario(args.config, noise_scale=args.noise_scale)
    gt, sl = run_accuracy(config, n_trials=args.trials, seed=args.seed)
    print(format_accuracy(gt, sl))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("variant,error_x_cm,error_y_cm,error_2d_cm\n")
            for rep in (gt, sl):
                for ex, ey, e2 in zip(rep.errors_x_cm, rep.errors_y_cm, rep.errors_2d_cm):
                    fh.write(f"{rep.variant},{ex!r},{ey!r},{e2!r}\n")
        print(f"per-sample errors written to {args.out}")
    return EXIT_OK


def cmd_lifetime(args: argparse.Namespace) -> int:
    profile = energy.DEFAULT_PROFILE
    rows = []
    anchor = energy.anchor_trace(args.period, profile, lora=not args.no_anchor_lora)
    label = "anchor" + (" (no LoRa)" if args.no_anchor_lora else "")
    rows.append((label, anchor, args.anchor_battery))
    rows.append(("tag", energy.tag_trace(args.period, profile), args.tag_battery))
    print(f"{'node':16s}{'period_s':>10s}{'avg_mW':>10s}{'batt_mAh':>10s}{'days':>10s}")
    for label, trace, capacity in rows:
        avg = energy.average_power(trace, profile)
        days = energy.battery_lifetime_days(energy.Battery(capacity), avg)
        print(f"{label:16s}{args.period:>10.1f}{avg:>10.2f}{capacity:>10.0f}{days:>10.2f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slotloc",
        description=(
            "Time-slotted UWB ranging system: deterministic simulator, uplink "
            "collector, and accuracy/lifetime reporting."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="run the discrete-event simulation")
    p_sim.add_argument("--config", required=True, help="scenario file or bundled name")
    p_sim.add_argument("--periods", type=int, default=10, help="localization periods to run")
    p_sim.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p_sim.add_argument("--out", default=None, help="report file to write")
    p_sim.set_defaults(fn=cmd_simulate)

    p_rep = sub.add_parser("replay", help="feed a report through the collector")
    p_rep.add_argument("--config", required=True)
    p_rep.add_argument("--in", dest="infile", required=True, help="report file from simulate")
    p_rep.add_argument("--store", default=None, help="ingest log to append to")
    p_rep.add_argument("--out", default=None, help="CSV of position fixes")
    p_rep.set_defaults(fn=cmd_replay)

    p_rpt = sub.add_parser("report", help="summarize a persisted ingest log")
    p_rpt.add_argument("--config", required=True)
    p_rpt.add_argument("--store", required=True, help="ingest log file")
    p_rpt.add_argument("--out", default=None, help="CSV of position fixes")
    p_rpt.set_defaults(fn=cmd_report)

    p_acc = sub.add_parser("accuracy", help="Monte Carlo accuracy statistics")
    p_acc.add_argument("--config", required=True)
    p_acc.add_argument("--trials", type=int, default=100)
    p_acc.add_argument("--seed", type=int, default=1)
    p_acc.add_argument(
        "--noise-scale", type=float, default=None, help="scale all noise sigmas (0 disables noise)"
    )
    p_acc.add_argument("--out", default=None, help="CSV of per-sample errors")
    p_acc.set_defaults(fn=cmd_accuracy)

    p_life = sub.add_parser("lifetime", help="average power and battery lifetime table")
    p_life.add_argument("--period", type=float, default=40.0, help="localization period (s)")
    p_life.add_argument("--anchor-battery", type=float, default=2600.0, help="anchor mAh")
    p_life.add_argument("--tag-battery", type=float, default=1200.0, help="tag mAh")
    p_life.add_argument(
        "--no-anchor-lora",
        action="store_true",
        help="anchors stop uploading once self-localized",
    )
    p_life.set_defaults(fn=cmd_lifetime)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NOT_FOUND
    except (sim.SimulationError, collector_mod.LogError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SCHEMA
    except Exception as e:  # categorized catch-all so scripts get a stable code
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

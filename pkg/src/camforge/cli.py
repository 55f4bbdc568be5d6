"""``camforge`` command line: simulate, variants, eval, matrix, kid, census.

Each stage writes under ``<out>/<stage>/`` and leaves a ``run.log`` there
with the resolved config, library versions and wall time.  Failures exit
non-zero with a single JSON line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, Experiment, load_config, resolve
from .isp import dark_level_census
from .kid import format_result, kid, load_features
from .metrics import (
    ap_by_distance_pooled, average_precision, build_matrix, match, merge_matches, render_asymmetries,
    render_matrix,
)
from .scene_io import LabelSet, atomic_write_text, load_labels, load_manifest
from .sensor import load_raw
from .variants import Axis, VariantSpec, apply_policy_all, generate_variants, parse_axis_value, render_dataset

log = logging.getLogger("camforge")


def _setup_logging() -> None:
    level = os.environ.get("CAMFORGE_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        level = "error"
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _experiment(args) -> Experiment:
    values = load_config(args.config) if args.config else {}
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["output.directory"] = str(Path(args.out).resolve())
    return resolve(values, overrides)


def _stage_dir(exp: Experiment, stage: str) -> Path:
    d = Path(exp.get("output.directory")) / stage
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_run_log(dest: Path, stage: str, exp: Optional[Experiment], jobs: int, started: float,
                   extra: str = "") -> None:
    lines = [
        f"stage = {stage}",
        f"camforge = {__version__}",
        f"numpy = {np.__version__}",
        f"scipy = {scipy.__version__}",
        f"python = {platform.python_version()}",
        f"jobs = {jobs}",
        f"wall_time_s = {time.perf_counter() - started:.3f}",
    ]
    body = "\n".join(lines) + "\n"
    if exp is not None:
        body += "# resolved config\n" + exp.echo()
    atomic_write_text(dest / "run.log", body + extra)


def _finish(dest: Path, stage: str, exp: Optional[Experiment], args, started: float) -> None:
    if exp is not None:
        atomic_write_text(dest / "resolved.cfg", exp.echo())
    _write_run_log(dest, stage, exp, args.jobs, started)


def _require(exp: Experiment, key: str) -> str:
    val = exp.get(key)
    if not val:
        raise ConfigError(f"{key} is required for this command")
    return val


# ---------------------------------------------------------------------------
# stages


def cmd_simulate(args) -> int:
    started = time.perf_counter()
    exp = _experiment(args)
    base = load_manifest(_require(exp, "input.manifest"))
    dest = _stage_dir(exp, "simulate")
    provenance = [("base", base.name), ("seed_base", str(exp.seed))]
    render_dataset(base, exp.sensor, exp.exposure, exp.pipeline, exp.variant_policy, exp.seed, dest,
                   f"{base.name}:simulate", provenance, args.jobs)
    _finish(dest, "simulate", exp, args, started)
    return 0


def cmd_variants(args) -> int:
    started = time.perf_counter()
    exp = _experiment(args)
    base = load_manifest(_require(exp, "input.manifest"))
    axis = Axis(_require(exp, "variants.axis"))
    values = [parse_axis_value(axis, t) for t in _require(exp, "variants.values").split(",")]
    spec = VariantSpec(base, axis, values, exp.sensor, exp.exposure, exp.pipeline, exp.variant_policy, exp.seed)
    dest = _stage_dir(exp, "variants")
    generate_variants(spec, dest, jobs=args.jobs)
    _finish(dest, "variants", exp, args, started)
    return 0


def _eval_pairs(exp: Experiment) -> list[tuple[LabelSet, LabelSet]]:
    det_dir = Path(_require(exp, "eval.detections"))
    if exp.get("eval.labels"):
        label_files = sorted(Path(exp.get("eval.labels")).glob("*.csv"))
        gts = [load_labels(p) for p in label_files]
    else:
        m = load_manifest(_require(exp, "input.manifest"))
        gts = [load_labels(m.resolve(e.label_file), scene_id=e.scene_id) for e in m.entries]
    gts = apply_policy_all(gts, exp.eval_policy)
    pairs = []
    for gt in gts:
        p = det_dir / f"{gt.scene_id}.csv"
        dets = load_labels(p, scene_id=gt.scene_id, require_score=True) if p.exists() else LabelSet([], gt.scene_id)
        pairs.append((dets, gt))
    return pairs


def _only(ls: LabelSet, cls: str) -> LabelSet:
    return LabelSet([b for b in ls.boxes if b.cls == cls], ls.scene_id)


def cmd_eval(args) -> int:
    started = time.perf_counter()
    exp = _experiment(args)
    pairs = _eval_pairs(exp)
    thr = float(exp.get("eval.iou_threshold"))
    if exp.get("eval.classes"):
        classes = [c.strip() for c in exp.get("eval.classes").split(",") if c.strip()]
    else:
        classes = sorted({b.cls for _, gt in pairs for b in gt.boxes})
    bins = [float(x) for x in exp.get("eval.distance_bins").split(",") if x.strip()]
    ap_lines, pr_rows, dist_rows = [], [["class", "rank", "recall", "precision"]], []
    for cls in classes:
        sub = [(_only(d, cls), _only(g, cls)) for d, g in pairs]
        res = merge_matches(match(d, g, thr, image=i) for i, (d, g) in enumerate(sub))
        curve = average_precision(res)
        ap_lines.append(f"class={cls} ap={curve.ap!r} tp={res.tp} fp={res.fp} fn={res.fn} "
                        f"gts={res.num_gt} dets={len(res.records)}\n")
        pr_rows += [[cls, str(k), repr(r), repr(p)] for k, (r, p) in enumerate(curve.points, 1)]
        if bins:
            per_bin, lost = ap_by_distance_pooled(sub, bins, thr)
            dist_rows += [[cls, repr(b.lo), repr(b.hi), repr(b.ap), str(b.num_gt), str(b.num_det)] for b in per_bin]
            dist_rows.append([cls, "unassignable", "", "", "", str(lost)])
    dest = _stage_dir(exp, "eval")
    atomic_write_text(dest / "ap.txt", "".join(ap_lines))
    atomic_write_text(dest / "pr_curve.csv", "".join(",".join(r) + "\n" for r in pr_rows))
    if bins:
        head = "class,bin_lo_m,bin_hi_m,ap,num_gt,num_det\n"
        atomic_write_text(dest / "ap_by_distance.csv", head + "".join(",".join(r) + "\n" for r in dist_rows))
    _finish(dest, "eval", exp, args, started)
    return 0


def read_matrix_cells(path) -> list[dict]:
    cells = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"train", "eval", "ap"} <= set(reader.fieldnames):
            raise ConfigError(f"{path}:1: expected header train,eval,ap[,count]")
        for row in reader:
            try:
                cells.append({
                    "train": row["train"].strip(),
                    "eval": row["eval"].strip(),
                    "ap": float(row["ap"]) if row["ap"].strip() else None,
                    "count": int(row["count"]) if row.get("count", "").strip() else None,
                })
            except ValueError as exc:
                raise ConfigError(f"{path}:{reader.line_num}: {exc}") from None
    return cells


def cmd_matrix(args) -> int:
    started = time.perf_counter()
    m = build_matrix(read_matrix_cells(args.cells_csv), threshold=args.threshold)
    table = render_matrix(m)
    report = render_asymmetries(m)
    sys.stdout.write(table + report)
    if args.out:
        dest = Path(args.out) / "matrix"
        dest.mkdir(parents=True, exist_ok=True)
        rows = ["eval," + ",".join(m.train_sets)]
        for ev in m.eval_sets:
            rows.append(ev + "," + ",".join("" if m.ap[(ev, tr)] is None else repr(m.ap[(ev, tr)])
                                            for tr in m.train_sets))
        atomic_write_text(dest / "matrix.csv", "\n".join(rows) + "\n")
        atomic_write_text(dest / "matrix.txt", table + report)
        _write_run_log(dest, "matrix", None, args.jobs, started)
    return 0


def cmd_kid(args) -> int:
    started = time.perf_counter()
    seed = args.seed if args.seed is not None else 0
    res = kid(load_features(args.features_a), load_features(args.features_b), args.block_size, seed)
    line = format_result(res)
    if res.dropped != (0, 0):
        log.info("dropped %d and %d remainder vectors", *res.dropped)
    sys.stdout.write(line)
    if args.out:
        dest = Path(args.out) / "kid"
        dest.mkdir(parents=True, exist_ok=True)
        atomic_write_text(dest / "kid.txt", line + f"dropped={res.dropped[0]},{res.dropped[1]}\n")
        _write_run_log(dest, "kid", None, args.jobs, started)
    return 0


def cmd_census(args) -> int:
    started = time.perf_counter()
    exp = _experiment(args)
    m = load_manifest(_require(exp, "input.manifest"))
    fraction = float(exp.get("census.fraction"))
    rows = ["scene_id,bit_depth,fraction,distinct_dark_levels"]
    for e in m.entries:
        path = m.resolve(e.scene_file)
        if path.suffix != ".png":
            raise ValueError(f"census needs a rendered manifest (simulate or variants output); "
                             f"scene {e.scene_id!r} points at {path.name}")
        if path.name.endswith(".isp.png"):
            path = path.with_name(path.name[: -len(".isp.png")] + ".png")
        frame = load_raw(path)
        rows.append(f"{e.scene_id},{frame.bit_depth},{fraction!r},{dark_level_census(frame, fraction)}")
    dest = _stage_dir(exp, "census")
    atomic_write_text(dest / "census.csv", "\n".join(rows) + "\n")
    _finish(dest, "census", exp, args, started)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (key = value lines)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes over scenes")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override output.directory")

    parser = argparse.ArgumentParser(prog="camforge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"camforge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="capture + ISP over a manifest").set_defaults(func=cmd_simulate)
    sub.add_parser("variants", parents=[common], help="single-axis dataset variants").set_defaults(func=cmd_variants)
    sub.add_parser("eval", parents=[common], help="AP and distance-binned AP").set_defaults(func=cmd_eval)
    sub.add_parser("census", parents=[common], help="dark-level census of raw frames").set_defaults(func=cmd_census)
    p = sub.add_parser("matrix", parents=[common], help="generalization matrix from a cells CSV")
    p.add_argument("cells_csv")
    p.add_argument("--threshold", type=float, default=0.05, help="asymmetry reporting threshold")
    p.set_defaults(func=cmd_matrix)
    p = sub.add_parser("kid", parents=[common], help="KID between two feature CSVs")
    p.add_argument("features_a")
    p.add_argument("features_b")
    p.add_argument("--block-size", type=int, default=100)
    p.set_defaults(func=cmd_kid)
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if args.jobs < 1:
        return _fail("UsageError", "--jobs must be >= 1", 2)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail("ConfigError", str(exc), 2)
    except (ValueError, OSError) as exc:
        log.debug("failure", exc_info=True)
        return _fail(type(exc).__name__, str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())

"""
Command-line entry point.

Exit codes: 0 success, 2 validation error, 3 I/O error. Set
``AMTUBES_LOG_LEVEL`` (e.g. ``DEBUG``) to change log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

from . import transmat
from .evaluation import frame_ap, mean_ap, read_ground_truth, video_ap
from .geometry import PyramidConfig, build_anchor_grid
from .hmm import HmmModel, em_fit
from .jsonio import RecordError, write_jsonl
from .pipeline import DEFAULT_THRESHOLD, PipelineConfig, dumps_report, run_pipeline
from .proposals import enumerate_proposals, pooling_plan
from .synth import ScenarioSpec, generate, write_scenario
from .tubes import (APPEARANCE, FLOW, LinkParams, TrimConfig, link_videos, mean_fuse,
                    read_detections, read_tubes, trim)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3

log = logging.getLogger("amtubes")


def _pyramid(path: str | None) -> PyramidConfig:
    return PyramidConfig.load(path) if path else PyramidConfig.default()


def _open_out(path: str | None):
    return open(path, "w", newline="") if path and path != "-" else sys.stdout


def cmd_anchors(args) -> None:
    grid = build_anchor_grid(_pyramid(args.config))
    records = (
        {"level": p, "row": r, "col": c, "cell": r * grid.config.levels[p].side + c,
         "slot": s, "box": box.tolist()}
        for p, r, c, s, box in grid.iter_anchors()
    )
    n = write_jsonl(args.out, records)
    log.info("wrote %d anchors to %s", n, args.out)


def cmd_transmat_fit(args) -> None:
    grid = build_anchor_grid(_pyramid(args.config))
    tubes = [mt for mt in transmat.read_annotations(args.annotations, args.strict)
             if args.delta is None or mt.delta == args.delta]
    ts = transmat.fit_transition_set(tubes, grid, delta=args.delta, workers=args.workers)
    transmat.save(ts, args.out)
    log.info("fitted %d micro-tubes; cardinalities %s", ts.n_samples, ts.cardinalities())


def cmd_transmat_normalize(args) -> None:
    transmat.save(transmat.load(args.input).normalized(), args.out)


def cmd_transmat_binarize(args) -> None:
    ts = transmat.load(args.input)
    if ts.mode == transmat.COUNTS:
        ts = ts.normalized()
    transmat.save(ts.binarized(args.threshold), args.out)


def cmd_transmat_stats(args) -> None:
    rows = transmat.stats_rows(transmat.load(args.input))
    fh = _open_out(args.out)
    try:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["level"])
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if fh is not sys.stdout:
            fh.close()


def cmd_hmm_fit(args) -> None:
    grid = build_anchor_grid(PyramidConfig.single(args.grid_side, 1))
    seqs = [t.boxes[::args.delta] for t in read_ground_truth(args.tracks, args.strict)]
    model = HmmModel.from_anchor_grid(grid, 0, sigma=args.sigma)
    res = em_fit(model, seqs, max_iters=args.iters, tol=args.tol)
    for k, ll in enumerate(res.log_likelihoods):
        log.info("iteration %d: log-likelihood %.6f", k, ll)
    doc = res.model.to_dict()
    doc["log_likelihoods"] = list(res.log_likelihoods)
    fh = _open_out(args.out)
    try:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")
    finally:
        if fh is not sys.stdout:
            fh.close()


def cmd_proposals(args) -> None:
    config = _pyramid(args.config)
    ts = transmat.load(args.transmat)
    if ts.mode == transmat.COUNTS:
        ts = ts.normalized()
    if ts.mode == transmat.NORMALIZED:
        ts = ts.binarized(args.threshold)
    props = enumerate_proposals(ts, build_anchor_grid(config))
    plan = pooling_plan(ts, config, args.classes)
    summary = {"kind": "summary", "n_proposals": len(props), **plan.summary()}
    write_jsonl(args.out, [*(p.to_record() for p in props), summary])


def cmd_fuse(args) -> None:
    dets = read_detections(args.detections, args.strict)
    fused = mean_fuse([d for d in dets if d.stream == APPEARANCE],
                      [d for d in dets if d.stream == FLOW], args.gate)
    write_jsonl(args.out, (d.to_record() for d in fused))


def cmd_link(args) -> None:
    dets = read_detections(args.detections, args.strict)
    if args.stream:
        dets = [d for d in dets if d.stream == args.stream]
    params = LinkParams(args.eta, args.iou_gate, args.patience, args.min_score)
    write_jsonl(args.out, (t.to_record() for t in link_videos(dets, params, args.workers)))


def cmd_trim(args) -> None:
    cfg = TrimConfig(args.lam, args.score_floor)
    tubes = read_tubes(args.tubes, args.strict)
    write_jsonl(args.out, (seg.to_record() for t in tubes for seg in trim(t, cfg)))


def cmd_eval(args) -> None:
    tubes = read_tubes(args.tubes, args.strict)
    gts = read_ground_truth(args.gt, args.strict)
    metric = frame_ap if args.metric == "frame-ap" else video_ap
    per_class = metric(tubes, gts, args.iou)
    fh = _open_out(args.report)
    try:
        writer = csv.writer(fh)
        writer.writerow(["class", "ap"])
        for c, ap in per_class.items():
            writer.writerow([c, f"{ap:.6f}"])
        writer.writerow(["mean", f"{mean_ap(per_class):.6f}"])
    finally:
        if fh is not sys.stdout:
            fh.close()


def cmd_synth(args) -> None:
    paths = write_scenario(generate(ScenarioSpec.load(args.spec)), args.out_dir)
    for name, p in paths.items():
        log.info("wrote %s to %s", name, p)


def cmd_pipeline(args) -> None:
    if args.config:
        cfg = PipelineConfig.load(args.config, strict=True)
    else:
        cfg = PipelineConfig()
    overrides = {k: v for k, v in vars(args).items()
                 if k in PipelineConfig.__dataclass_fields__ and v is not None}
    if overrides:
        cfg = PipelineConfig(**{**cfg.__dict__, **overrides})
    report = dumps_report(run_pipeline(cfg))
    fh = _open_out(args.report)
    try:
        fh.write(report)
    finally:
        if fh is not sys.stdout:
            fh.close()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amtubes", description=__doc__.splitlines()[1])
    parser.add_argument("--strict", action="store_true", default=None, help="reject unknown record fields")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("anchors", help="dump the anchor pyramid as JSON lines")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_anchors)

    tm = sub.add_parser("transmat", help="transition matrix estimation").add_subparsers(
        dest="action", required=True)
    p = tm.add_parser("fit")
    p.add_argument("--annotations", required=True)
    p.add_argument("--config")
    p.add_argument("--delta", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transmat_fit)
    p = tm.add_parser("normalize")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transmat_normalize)
    p = tm.add_parser("binarize")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transmat_binarize)
    p = tm.add_parser("stats")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_transmat_stats)

    hm = sub.add_parser("hmm", help="reference HMM").add_subparsers(dest="action", required=True)
    p = hm.add_parser("fit")
    p.add_argument("--tracks", required=True)
    p.add_argument("--grid-side", type=int, required=True)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--delta", type=int, default=1)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--out")
    p.set_defaults(func=cmd_hmm_fit)

    p = sub.add_parser("proposals", help="enumerate anchor micro-tubes and pooling shapes")
    p.add_argument("--transmat", required=True)
    p.add_argument("--config")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_proposals)

    p = sub.add_parser("fuse", help="mean-fuse appearance and flow detections")
    p.add_argument("--detections", required=True)
    p.add_argument("--gate", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("link", help="online action-tube linking")
    p.add_argument("--detections", required=True)
    p.add_argument("--stream", choices=["appearance", "flow", "fused"])
    p.add_argument("--eta", type=float, default=1.0)
    p.add_argument("--iou-gate", type=float, default=0.1)
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--min-score", type=float, default=0.1)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_link)

    p = sub.add_parser("trim", help="temporal trimming by dynamic programming")
    p.add_argument("--tubes", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.add_argument("--score-floor", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trim)

    p = sub.add_parser("eval", help="frame-AP or video-mAP")
    p.add_argument("--tubes", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--metric", choices=["frame-ap", "video-map"], default="video-map")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic scenario")
    p.add_argument("--spec", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pipeline", help="run every stage and emit a JSON report")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--scenario")
    p.add_argument("--pyramid")
    p.add_argument("--annotations")
    p.add_argument("--detections")
    p.add_argument("--ground-truth", dest="ground_truth")
    p.add_argument("--transitions")
    p.add_argument("--delta", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--iou-gate", dest="iou_gate", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--min-score", dest="min_score", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--score-floor", dest="score_floor", type=float)
    p.add_argument("--classes", dest="n_classes", type=int)
    p.add_argument("--fusion-gate", dest="fusion_gate", type=float)
    p.add_argument("--no-fuse", dest="fuse", action="store_const", const=False)
    p.add_argument("--eval-iou", dest="eval_iou", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--report")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("AMTUBES_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except OSError as exc:
        name = getattr(exc, "filename", None)
        print(f"error: {exc.strerror or exc}" + (f": {name}" if name else ""), file=sys.stderr)
        return EXIT_IO
    except (RecordError, ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

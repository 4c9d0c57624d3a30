"""Command line: ``track``, ``synth`` and ``eval``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .metrics import iou_metric, pose_error, relative_rotation_errors
from .tracker import TrackerConfig, TrackerError, init_tracker, track_frame

log = logging.getLogger("rendertrack")

LR_GROUPS = ("translation", "rotation", "offsets", "texture")


def _lr_scale(items: list[str]) -> tuple[tuple[str, float], ...]:
    out = []
    for item in items or []:
        group, _, value = item.partition("=")
        if group not in LR_GROUPS or not value:
            raise argparse.ArgumentTypeError(f"--lr-scale expects GROUP=FACTOR with GROUP in {LR_GROUPS}")
        out.append((group, float(value)))
    return tuple(out)


def cmd_track(args) -> int:
    seq = io.load_sequence(args.manifest)
    cfg = TrackerConfig(features=args.features, tau_f=args.tau_f, keyframes=args.keyframes,
                        flat_prior=args.flat_prior, seed=args.seed, lr_scale=_lr_scale(args.lr_scale),
                        record_history=args.loss_log is not None)
    rgb = {}
    state = None
    for n in range(len(seq)):
        feats = seq.features(n, args.features)
        mask = seq.mask(n)
        rgb[n] = seq.image(n)
        if state is None:
            state = init_tracker(feats, mask, seq.camera, cfg)
        else:
            track_frame(state, feats, mask)
        o = state.outputs[-1]
        log.info("frame %d/%d %s", n + 1, len(seq), "failed" if o.failed else "ok")
    paths = io.export_outputs(state, args.out, rgb)
    if args.loss_log is not None:
        with open(args.loss_log, "w", newline="") as fh:
            rows = [{"frame": o.index, **h} for o in state.outputs for h in o.result.history]
            fields = ["frame"] + sorted({k for r in rows for k in r} - {"frame"})
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            w.writerows(rows)
    failed = sum(o.failed for o in state.outputs)
    print(f"tracked {len(seq)} frames, {failed} failed; wrote {paths['trajectory']}")
    return 0


def cmd_synth(args) -> int:
    from .synth import generate_synthetic_sequence, spec_from_dict

    doc = json.loads(Path(args.spec).read_text()) if args.spec else {}
    seq = generate_synthetic_sequence(spec_from_dict(doc))
    manifest = io.write_synthetic(seq, args.out)
    print(f"wrote {len(seq.frames)} frames; manifest {manifest}")
    return 0


def _masks(directory: Path) -> dict[int, np.ndarray]:
    return {int(p.stem): io.read_mask(p) for p in sorted(directory.glob("*.png")) if p.stem.isdigit()}


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    pred = _masks(pred_dir / "masks")
    gt = _masks(gt_dir / "gt_masks") or _masks(gt_dir / "masks")
    common = sorted(set(pred) & set(gt))
    if not common:
        raise FileNotFoundError(f"no frames in common between {pred_dir} and {gt_dir}")
    ious = [iou_metric(pred[i], gt[i]) for i in common]
    print(f"frames {len(common)}")
    print(f"mean_iou {np.mean(ious):.6f}")
    ptraj, gtraj = pred_dir / "trajectory.json", gt_dir / "gt_trajectory.json"
    if ptraj.exists() and gtraj.exists():
        p = {r.index: r.pose for r in io.read_trajectory(ptraj)}
        g = {r.index: r.pose for r in io.read_trajectory(gtraj)}
        idx = sorted(set(p) & set(g))
        if idx:
            terr = [pose_error(p[i], g[i])[0] for i in idx]
            rerr = relative_rotation_errors([p[i] for i in idx], [g[i] for i in idx])
            print(f"mean_translation_error {np.mean(terr):.6f}")
            print(f"mean_rotation_error_deg {np.mean(rerr):.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rendertrack")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("track", help="refine the masks of one sequence")
    t.add_argument("--manifest", required=True)
    t.add_argument("--features", choices=("rgb", "file"), default="rgb")
    t.add_argument("--tau-f", type=float, default=None, help="convergence threshold (default 0.2 rgb, 0.05 file)")
    t.add_argument("--keyframes", type=int, default=6)
    t.add_argument("--flat-prior", action="store_true")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lr-scale", action="append", metavar="GROUP=FACTOR",
                   help=f"per-group learning-rate factor, GROUP in {', '.join(LR_GROUPS)}")
    t.add_argument("--loss-log", default=None, help="write per-iteration losses as CSV")
    t.set_defaults(func=cmd_track)

    s = sub.add_parser("synth", help="generate a synthetic sequence with ground truth")
    s.add_argument("--spec", default=None, help="JSON synthetic spec (defaults if omitted)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="score tracker output against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"rendertrack: error: file not found: {exc.filename or exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, TrackerError, argparse.ArgumentTypeError) as exc:
        print(f"rendertrack: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

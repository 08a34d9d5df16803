"""Command-line surface: preprocess, train, transfer, eval, stats-report,
render, dump-config.

Exit codes: 0 success, 2 usage, 3 data error, 4 numeric error. Every file
output is written atomically. All commands are deterministic given --seed
(or the ASTF_SEED environment variable).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .autodiff import ContractError, ShapeMismatch
from .bvh import BVHError, forward_kinematics, parse_bvh, select_joints, write_bvh
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, TrainConfig, parse_config
from .ioutil import atomic_write_text
from .metrics import MetricError, clip_geodesic, evaluate_transfer, separation_report
from .motion import (
    ClipError,
    MotionClip,
    clip_rotations,
    clip_to_raw,
    load_clip,
    preprocess_bfa,
    preprocess_xia,
    save_clip,
)
from .networks import Generator  # noqa: F401  (re-export for scripting)
from .stats import export_statistics_csv
from .train import NumericError, load_models, train

DATA_ERRORS = (BVHError, ClipError, ConfigError, CheckpointError, MetricError,
               ContractError, ShapeMismatch, ValueError, OSError, KeyError)


def resolve_seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("ASTF_SEED")
    return int(env) if env else 0


def _load_config(args, data_clips=None) -> TrainConfig:
    text = ""
    if getattr(args, "config", None):
        text = Path(args.config).read_text()
    cfg = parse_config(text)
    explicit = {m.group(1) for m in re.finditer(r"^\s*(\w+)\s*=", text, re.M)}
    cfg.seed = resolve_seed(args)
    if data_clips:
        first = data_clips[0]
        if "frame_len" not in explicit:
            cfg.frame_len = first.frame_len
        if "n_joints" not in explicit:
            cfg.n_joints = first.n_joints
        if "n_styles" not in explicit:
            styles = {c.style_label for c in data_clips if c.style_label}
            cfg.n_styles = max(2, len(styles))
    return cfg


def _load_clip_dir(path) -> list[MotionClip]:
    path = Path(path)
    files = sorted(path.glob("*.astfclip"))
    if not files:
        raise ClipError(f"no .astfclip files under {path}")
    return [load_clip(f) for f in files]


# -- preprocess -----------------------------------------------------------------


def _labels_for(stem: str, dataset: str, sidecar: dict):
    if stem in sidecar:
        return sidecar[stem]
    if dataset == "xia":
        parts = stem.split("_")
        style = parts[0] if parts else None
        content = parts[1] if len(parts) > 1 else None
        return style, content
    return stem.split("_")[0], None


def cmd_preprocess(args) -> int:
    in_dir, out_dir = Path(args.in_dir), Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    joint_names = None
    if args.joints:
        joint_names = [ln.strip() for ln in Path(args.joints).read_text().splitlines()
                       if ln.strip()]
    sidecar = {}
    label_csv = in_dir / "labels.csv"
    if label_csv.exists():
        with open(label_csv) as fh:
            for row in csv.DictReader(fh):
                sidecar[row["file"]] = (row.get("style") or None,
                                        row.get("content") or None)

    files = sorted(in_dir.glob("*.bvh"))

    def process(path):
        raw = parse_bvh(path.read_text())
        if joint_names:
            raw = select_joints(raw, joint_names)
        style, content = _labels_for(path.stem, args.dataset, sidecar)
        if args.dataset == "xia":
            clips = [preprocess_xia(raw, args.frame_len,
                                    style_label=style, content_label=content)]
        else:
            clips = preprocess_bfa(raw, args.frame_len,
                                   style_label=style, content_label=content)
        return clips

    results, failures = {}, []
    workers = max(1, args.workers)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futs = {path: pool.submit(process, path) for path in files}
        for path in files:
            try:
                results[path] = futs[path].result()
            except (BVHError, ClipError) as exc:
                failures.append((path, exc))
    else:
        for path in files:
            try:
                results[path] = process(path)
            except (BVHError, ClipError) as exc:
                failures.append((path, exc))

    rows = []
    for path in files:
        clips = results.get(path)
        if clips is None:
            continue
        for i, clip in enumerate(clips):
            save_clip(clip, out_dir / f"{path.stem}_{i:03d}.astfclip")
        rows.append([path.name, len(clips), sum(c.n_valid for c in clips),
                     clips[0].style_label if clips else "",
                     clips[0].content_label if clips else ""])

    manifest = ["file,clips,valid_frames,style,content"]
    for row in rows:
        manifest.append(",".join("" if v is None else str(v) for v in row))
    atomic_write_text(out_dir / "manifest.csv", "\n".join(manifest) + "\n")

    total_clips = sum(r[1] for r in rows)
    print(f"processed {total_clips} clip(s) from {len(rows)} file(s), "
          f"{len(failures)} failure(s)")
    for path, exc in failures:
        print(f"  skipped {path.name}: {exc}", file=sys.stderr)
    return 3 if failures else 0


# -- train ----------------------------------------------------------------------


def cmd_train(args) -> int:
    clips = _load_clip_dir(args.data)
    cfg = _load_config(args, data_clips=clips)
    if args.iterations is not None:
        cfg.iterations = args.iterations
    ckpt_path, log_path, reports = train(
        clips, cfg, args.out,
        resume=args.resume, force=args.force,
    )
    atomic_write_text(Path(args.out) / "config.cfg", cfg.dump())
    if reports:
        last = reports[-1]
        print(f"iteration {cfg.iterations}: total_G={last.total_g:.6f} "
              f"total_D={last.total_d:.6f}")
    print(f"checkpoint: {ckpt_path}")
    print(f"loss log:   {log_path}")
    return 0


# -- transfer -------------------------------------------------------------------


def cmd_transfer(args) -> int:
    content = load_clip(args.content)
    style = load_clip(args.style)
    cfg = _load_config(args, data_clips=[content])
    ckpt = load_checkpoint(args.checkpoint)
    gen, _ = load_models(ckpt, cfg, force=args.force)
    out_clip, _ = gen.generate(content, style)
    raw = clip_to_raw(out_clip)
    atomic_write_text(args.out, write_bvh(raw))
    geo = clip_geodesic(out_clip, content)
    print(f"wrote {args.out}")
    print(f"geodesic distance to content: {geo:.6f} rad")
    return 0


# -- eval -----------------------------------------------------------------------


def cmd_eval(args) -> int:
    clips = _load_clip_dir(args.data)
    cfg = _load_config(args, data_clips=clips)
    ckpt = load_checkpoint(args.checkpoint)
    gen, _ = load_models(ckpt, cfg, force=args.force)
    metrics = evaluate_transfer(gen, clips, seed=resolve_seed(args),
                                n_pairs=args.pairs, probe_epochs=args.probe_epochs)
    text = json.dumps(metrics, indent=2, sort_keys=True)
    if args.out:
        atomic_write_text(args.out, text + "\n")
    print(text)
    return 0


# -- stats report ---------------------------------------------------------------


def cmd_stats_report(args) -> int:
    clips = _load_clip_dir(args.data)
    report = separation_report(clips, seed=resolve_seed(args),
                               csv_path=args.descriptor_csv)
    if args.channels_csv:
        export_statistics_csv(clips, args.channels_csv)
    text = json.dumps(report.as_dict(), indent=2, sort_keys=True)
    if args.out:
        atomic_write_text(args.out, text + "\n")
    print(text)
    return 0


# -- render ---------------------------------------------------------------------


def cmd_render(args) -> int:
    clip = load_clip(args.clip)
    rotations = clip_rotations(clip)
    stride = max(1, args.stride)
    frames = list(range(0, clip.n_valid, stride)) or [0]
    positions = np.cumsum(clip.features[6:9, : clip.n_valid, 0].T, axis=0)

    figures = []
    for f in frames:
        pts = forward_kinematics(clip.skeleton, list(rotations[f]), positions[f])
        figures.append(pts)
    all_pts = np.concatenate(figures, axis=0)
    span = max(float(np.ptp(all_pts[:, :2], axis=0).max()), 1e-6)
    scale = 100.0 / span
    width_per = 120.0

    lines = []
    for i, pts in enumerate(figures):
        off_x = i * width_per + 60.0
        xy = (pts[:, :2] - all_pts[:, :2].min(axis=0)) * scale
        for j, joint in enumerate(clip.skeleton.joints):
            if joint.parent is None:
                continue
            x1, y1 = xy[joint.parent]
            x2, y2 = xy[j]
            lines.append(
                f'<line x1="{off_x + x1:.2f}" y1="{130.0 - y1:.2f}" '
                f'x2="{off_x + x2:.2f}" y2="{130.0 - y2:.2f}" '
                f'stroke="black" stroke-width="1.5"/>'
            )
        rx, ry = xy[0]
        lines.append(f'<circle cx="{off_x + rx:.2f}" cy="{130.0 - ry:.2f}" '
                     f'r="2.5" fill="crimson"/>')

    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" '
        f'width="{len(figures) * width_per:.0f}" height="150">\n'
        + "\n".join(lines)
        + "\n</svg>\n"
    )
    atomic_write_text(args.out, svg)
    print(f"wrote {args.out} ({len(figures)} frame(s))")
    return 0


def cmd_dump_config(args) -> int:
    print(_load_config(args).dump(), end="")
    return 0


# -- wiring ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="astf", description="Motion style transfer laboratory"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--seed", type=int, default=None,
                       help="RNG seed (default: ASTF_SEED env var, then 0)")
        if config:
            p.add_argument("--config", help="flat key=value config file")

    p = sub.add_parser("preprocess", help="BVH directory -> clip cache")
    p.add_argument("--dataset", choices=["xia", "bfa"], required=True)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--joints", help="file with one joint name per line to keep")
    p.add_argument("--frame-len", type=int, default=200)
    p.add_argument("--workers", type=int, default=1)
    common(p, config=False)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train on a preprocessed clip directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--resume", default=None)
    p.add_argument("--force", action="store_true")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transfer", help="stylize a content clip, write BVH")
    p.add_argument("--content", required=True)
    p.add_argument("--style", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    common(p)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("eval", help="transfer metrics over a clip directory")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--pairs", type=int, default=None)
    p.add_argument("--probe-epochs", type=int, default=60)
    p.add_argument("--force", action="store_true")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats-report", help="statistics separation probe")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--descriptor-csv", default=None)
    p.add_argument("--channels-csv", default=None)
    common(p, config=False)
    p.set_defaults(func=cmd_stats_report)

    p = sub.add_parser("render", help="stick-figure SVG from a clip")
    p.add_argument("--clip", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stride", type=int, default=20)
    common(p, config=False)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("dump-config", help="print the effective config")
    common(p)
    p.set_defaults(func=cmd_dump_config)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

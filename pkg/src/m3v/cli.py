"""Command-line pipeline driver.

Subcommands: build-targets (video -> .m3vt motion targets), train-toy
(dataset dir -> metrics + checkpoint, optionally the static-input probe),
visualize (trajectory overlays), gen-synth (synthetic clips).

Exit codes: 1 configuration/usage, 2 I/O, 3 pipeline, 4 training divergence.
"""

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from . import model, synth, targets, trajectories, viz
from .config import ConfigError, default_config, load_config
from .video_io import gray_plane, load_image_sequence, parse_y4m

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_PIPELINE = 3
EXIT_DIVERGED = 4


def _default_threads():
    raw = os.environ.get("M3V_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _global_flags(parser):
    parser.add_argument("--config", help="key=value pipeline config file")
    parser.add_argument("--seed", type=int, default=None,
                        help="override mask/data/model seeds together")
    parser.add_argument("--threads", type=int, default=_default_threads(),
                        help="worker threads for flow computation "
                             "(default: $M3V_THREADS or 1)")
    parser.add_argument("--compensate-camera", action="store_true",
                        help="remove estimated camera motion before tracking")
    parser.add_argument("--interpolate", action=argparse.BooleanOptionalAction,
                        default=None, help="track at raw-frame stride")
    parser.add_argument("--target-kind", choices=targets.TARGET_KINDS,
                        default=None)


def _load_cfg(args):
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg.mask_seed = args.seed
        cfg.model_seed = args.seed
        cfg.train = model.TrainConfig(**{**cfg.train.__dict__,
                                         "data_seed": args.seed})
    if args.interpolate is not None:
        cfg.interpolate = args.interpolate
    if args.target_kind is not None:
        cfg.target = targets.TargetConfig(length=cfg.target.length,
                                          k=cfg.target.k,
                                          target_kind=args.target_kind)
    return cfg


def _load_video(path):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"input {path} does not exist")
    if p.is_dir():
        frames = sorted(list(p.glob("*.pgm")) + list(p.glob("*.ppm")))
        if not frames:
            raise FileNotFoundError(f"{path} contains no .pgm/.ppm frames")
        return load_image_sequence([str(f) for f in frames])
    with open(p, "rb") as fh:
        return parse_y4m(fh.read())


def _clip_grid(cfg, seq):
    return targets.build_patch_grid(targets.CLIP_LEN, seq.height, seq.width,
                                    cfg.patch_t, cfg.patch_h, cfg.patch_w)


def cmd_build_targets(args):
    cfg = _load_cfg(args)
    seq = _load_video(args.input)
    planes = [gray_plane(f) for f in seq.frames]
    grid = _clip_grid(cfg, seq)
    plan = targets.plan_sampling(len(planes), cfg.s_rgb, cfg.interpolate,
                                 cfg.offset)
    mask = targets.generate_mask(grid, cfg.mask_type, cfg.mask_ratio,
                                 cfg.mask_seed)
    tgts, pack = targets.build_clip_targets(
        planes, plan, grid, mask, cfg.target, cfg.flow,
        threads=args.threads, compensate=args.compensate_camera)
    blob = targets.write_m3vt(tgts, grid, mask, plan, cfg.target)
    with open(args.output, "wb") as fh:
        fh.write(blob)
    if args.pack:
        trajectories.save_m3tp(pack, args.pack)
    n_traj = len(pack.trajectories)
    invalid = sum(1 for t in pack.trajectories if not t.valid)
    frac = invalid / n_traj if n_traj else 0.0
    print(f"patches {grid.n_patches} masked {mask.masked_count} "
          f"trajectories {n_traj} invalid-fraction {frac:.4f}")
    return EXIT_OK


def _scan_dataset(dataset_dir, kinds):
    root = Path(dataset_dir)
    if not root.is_dir():
        raise ConfigError(f"dataset dir {dataset_dir} does not exist")
    entries = []
    for clip_path in sorted(root.glob("*.y4m")):
        stem = clip_path.with_suffix("")
        by_kind = {}
        for kind in kinds:
            cand = Path(f"{stem}.{kind}.m3vt") if kind else stem.with_suffix(".m3vt")
            if cand.exists():
                by_kind[kind] = cand
        if len(by_kind) == len(kinds):
            entries.append((clip_path, by_kind))
    if not entries:
        raise ConfigError(
            f"dataset dir {dataset_dir} has no clips with matching target files"
        )
    return entries


def _write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "lr", "seconds"])
        for row in rows:
            writer.writerow([row["epoch"], f"{row['loss']:.10g}",
                             f"{row['lr']:.10g}", f"{row['seconds']:.3f}"])


def cmd_train_toy(args):
    cfg = _load_cfg(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    slot_rng = np.random.default_rng(cfg.train.data_seed + 1)

    if args.probe_static:
        kinds = ("pixel", "trajectory")
        entries = _scan_dataset(args.dataset_dir, kinds)
        datasets = {k: [] for k in kinds}
        grid_shape = None
        for clip_path, by_kind in entries:
            seq = _load_video(clip_path)
            planes = [gray_plane(f) for f in seq.frames]
            slot = int(slot_rng.integers(0, targets.CLIP_LEN))
            for kind in kinds:
                with open(by_kind[kind], "rb") as fh:
                    tfile = targets.read_m3vt(fh.read())
                clip = targets.training_clip_from_file(
                    planes, tfile, offset=cfg.offset, static_slot=slot)
                datasets[kind].append(clip)
                grid_shape = (tfile.grid.nt, tfile.grid.ny, tfile.grid.nx)
                grid = tfile.grid
        mcfg = cfg.model_config(grid)
        rows, ratios = model.static_video_probe(datasets, cfg.train, mcfg,
                                                grid_shape)
        with open(out / "probe.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "target", "input_mode", "loss"])
            for row in rows:
                writer.writerow([row["epoch"], row["target"],
                                 row["input_mode"], f"{row['loss']:.10g}"])
        for kind, ratio in sorted(ratios.items()):
            print(f"static/multi final-loss ratio {kind}: {ratio:.4f}")
        return EXIT_OK

    entries = _scan_dataset(args.dataset_dir, ("",))
    dataset = []
    grid = None
    for clip_path, by_kind in entries:
        seq = _load_video(clip_path)
        planes = [gray_plane(f) for f in seq.frames]
        with open(by_kind[""], "rb") as fh:
            tfile = targets.read_m3vt(fh.read())
        dataset.append(targets.training_clip_from_file(planes, tfile,
                                                       offset=cfg.offset))
        grid = tfile.grid
    mcfg = cfg.model_config(grid)
    rows, trained = model.train_toy(dataset, cfg.train, mcfg,
                                    (grid.nt, grid.ny, grid.nx))
    _write_metrics(out / "metrics.csv", rows)
    meta = {"embed_dim": mcfg.embed_dim, "heads": mcfg.heads,
            "encoder_depth": mcfg.encoder_depth,
            "decoder_depth": mcfg.decoder_depth,
            "decoder_dim": mcfg.decoder_dim,
            "prediction_dim": mcfg.prediction_dim,
            "patch_dim": mcfg.patch_dim, "seed": mcfg.seed,
            "target_kind": tfile.config.target_kind,
            "final_loss": f"{rows[-1]['loss']:.10g}"}
    model.save_checkpoint(out / "checkpoint.m3ck", trained.params,
                          {k: str(v) for k, v in meta.items()})
    print(f"epochs {len(rows)} final-loss {rows[-1]['loss']:.6f}")
    return EXIT_OK


def cmd_visualize(args):
    seq = _load_video(args.video)
    pack = trajectories.load_m3tp(args.pack)
    if (pack.width, pack.height) != (seq.width, seq.height):
        print(f"pack dimensions {pack.width}x{pack.height} do not match "
              f"video {seq.width}x{seq.height}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_anchor = {}
    for anchor, traj in zip(pack.anchors, pack.trajectories):
        by_anchor.setdefault(anchor, []).append(traj)
    anchors = sorted(by_anchor) if by_anchor else range(len(seq.frames))
    for anchor in anchors:
        if anchor >= len(seq.frames):
            continue
        plane = gray_plane(seq.frames[anchor])
        image = viz.render_frame_overlay(plane, by_anchor.get(anchor, []))
        with open(out / f"frame_{anchor:05d}.ppm", "wb") as fh:
            fh.write(synth.write_ppm(image.astype(np.float64)))
    with open(out / "trajectories.svg", "w", encoding="utf-8") as fh:
        fh.write(viz.trajectories_svg(pack))
    print(f"wrote {len(list(by_anchor) or list(anchors))} overlay frames "
          f"and trajectories.svg")
    return EXIT_OK


def cmd_gen_synth(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    height, width = args.height, args.width
    if args.kind == "translate":
        seq, truth = synth.gen_translating_texture(
            (height, width), tuple(args.velocity), args.frames, args.seed)
        synth.save_y4m(seq, out / "clip_00000.y4m")
        print(f"wrote clip_00000.y4m velocity {truth.velocity}")
        return EXIT_OK
    if args.kind == "disk":
        seq, truth = synth.gen_moving_disk(
            (height, width), args.radius, tuple(args.velocity), args.frames,
            args.seed, wrap=args.wrap)
        synth.save_y4m(seq, out / "clip_00000.y4m")
        print(f"wrote clip_00000.y4m velocity {truth.velocity}")
        return EXIT_OK
    # 4-way direction dataset
    radii = tuple(args.radii) if args.radii else (args.radius,) * args.disks
    clips = synth.make_direction_dataset(
        args.clips, (height, width), args.frames, args.seed,
        disk_radius=radii, speed=args.speed, wrap=args.wrap,
        background_range=(args.bg_low, args.bg_high),
        disk_range=(args.disk_low, args.disk_high))
    with open(out / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file", "label", "vx", "vy"])
        for i, (seq, truth) in enumerate(clips):
            name = f"clip_{i:05d}.y4m"
            synth.save_y4m(seq, out / name)
            writer.writerow([name, truth.label,
                             f"{truth.velocity[0]:g}", f"{truth.velocity[1]:g}"])
    print(f"wrote {len(clips)} clips and labels.csv")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="m3v",
        description="trajectory motion targets and desk-scale masked "
                    "motion pre-training")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-targets",
                       help="video -> .m3vt motion targets")
    p.add_argument("input", help=".y4m file or directory of .pgm/.ppm frames")
    p.add_argument("output", help="output .m3vt path")
    p.add_argument("--pack", help="also write tracked trajectories (.m3tp)")
    _global_flags(p)
    p.set_defaults(func=cmd_build_targets)

    p = sub.add_parser("train-toy", help="train the toy autoencoder")
    p.add_argument("dataset_dir", help="directory of .y4m clips + .m3vt files")
    p.add_argument("out_dir", help="output directory")
    p.add_argument("--probe-static", action="store_true",
                   help="run the static-vs-multi-frame input probe "
                        "(needs <stem>.pixel.m3vt and <stem>.trajectory.m3vt)")
    _global_flags(p)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("visualize", help="render trajectory overlays")
    p.add_argument("video", help=".y4m file or frame directory")
    p.add_argument("pack", help=".m3tp trajectory pack")
    p.add_argument("out_dir")
    _global_flags(p)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("gen-synth", help="generate synthetic clips")
    p.add_argument("out_dir")
    p.add_argument("--kind", choices=("translate", "disk", "direction-dataset"),
                   default="direction-dataset")
    p.add_argument("--clips", type=int, default=16)
    p.add_argument("--frames", type=int, default=22)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--velocity", type=float, nargs=2, default=(2.0, 0.0),
                   metavar=("VX", "VY"))
    p.add_argument("--speed", type=float, default=2.0)
    p.add_argument("--radius", type=float, default=6.0)
    p.add_argument("--radii", type=float, nargs="*", default=None)
    p.add_argument("--disks", type=int, default=3)
    p.add_argument("--wrap", action="store_true")
    p.add_argument("--bg-low", type=float, default=16.0)
    p.add_argument("--bg-high", type=float, default=150.0)
    p.add_argument("--disk-low", type=float, default=190.0)
    p.add_argument("--disk-high", type=float, default=250.0)
    _global_flags(p)
    p.set_defaults(func=cmd_gen_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except model.TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())

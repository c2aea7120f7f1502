"""Command-line entry point wiring the pipeline into reproducible runs.

Subcommands: synth, flow, dataset, train, eval. Flag values resolve as
CLI flag > --config key=value file > built-in default, and every run
writes its resolved configuration next to its outputs. MMREG_THREADS
caps worker counts (0 or unset = auto).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation, flow as flow_mod, model, pipeline, synth
from .offsets import generate_offsets
from .pipeline import Frame, read_frame, read_manifest, rgb_to_gray, write_frame


def worker_count() -> int:
    raw = os.environ.get("MMREG_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"MMREG_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ValueError(f"MMREG_THREADS must be >= 0, got {n}")
    if n == 0:
        return min(os.cpu_count() or 1, 8)
    return n


def parse_channels(text: str) -> list[str]:
    """Accept 'Gr,L,U,V' or compact tokens like 'GrLUV' and 'RGBL'."""
    if "," in text:
        names = [t.strip() for t in text.split(",") if t.strip()]
    else:
        names = []
        rest = text
        by_length = sorted(pipeline.CHANNEL_IDS, key=len, reverse=True)
        while rest:
            for name in by_length:
                if rest.startswith(name):
                    names.append(name)
                    rest = rest[len(name):]
                    break
            else:
                raise ValueError(f"cannot parse channel stack {text!r} at {rest!r}")
    if not names:
        raise ValueError("empty channel stack")
    for name in names:
        if name not in pipeline.CHANNEL_IDS:
            raise ValueError(f"unknown channel {name!r} in {text!r}")
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate channels in {text!r}")
    return names


def _parse_pair(text: str, what: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise ValueError(f"{what} must be 'x,y', got {text!r}")
    return float(parts[0]), float(parts[1])


def _parse_int_list(text: str, what: str) -> list[int]:
    try:
        values = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ValueError(f"{what} must be comma-separated integers, got {text!r}") from None
    if not values:
        raise ValueError(f"{what} is empty")
    return values


def _write_run_config(args: argparse.Namespace, out_dir: Path, extra: dict | None = None) -> None:
    skip = {"func", "command", "config"}
    pairs = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    if extra:
        pairs.update(extra)
    lines = [f"{key}={value}" for key, value in pairs.items()]
    (out_dir / "run_config.txt").write_text("\n".join(lines) + "\n")


def _frame_paths(in_dir: Path) -> list[Path]:
    if not in_dir.is_dir():
        raise ValueError(f"frame directory {in_dir} does not exist")
    paths = sorted(in_dir.glob("*.mmf"))
    if not paths:
        raise ValueError(f"no .mmf frames in {in_dir}")
    return paths


def _resolve_frames_dir(manifest_path: Path, manifest, override: str | None) -> Path:
    if override:
        return Path(override)
    recorded = Path(manifest.frames_dir)
    if recorded.is_absolute():
        return recorded
    return manifest_path.parent / recorded


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.frames < 1:
        raise ValueError(f"--frames must be >= 1, got {args.frames}")
    config = synth.SceneConfig(
        seed=args.seed,
        frame_count=args.frames,
        width=args.width,
        height=args.height,
        object_count=args.objects,
        object_kinds=tuple(k.strip() for k in args.kinds.split(",") if k.strip()),
        depth_range=(args.depth_min, args.depth_max),
        camera_translation=_parse_pair(args.translate, "--translate"),
        jitter=args.jitter,
        noise_amplitude=args.noise,
    )
    frames = synth.generate_sequence(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        write_frame(frame, out / f"frame_{i:05d}.mmf")
    _write_run_config(args, out, extra={"frame_count": len(frames)})
    print(f"wrote {len(frames)} frames to {out}")
    return 0


def cmd_flow(args) -> int:
    paths = _frame_paths(Path(args.in_dir))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prev_gray = None
    for path in paths:
        frame = read_frame(path)
        if not frame.has_channel("Gr"):
            frame = rgb_to_gray(frame)
        gray = frame.plane("Gr")
        if prev_gray is None:
            field = flow_mod.zero_flow(frame.height, frame.width)
        else:
            field = flow_mod.estimate_flow(prev_gray, gray,
                                           alpha=args.alpha, iterations=args.iters)
        u01, v01 = flow_mod.flow_to_channels(field, clamp=args.clamp)
        write_frame(frame.with_channels({"U": u01, "V": v01}), out / path.name)
        prev_gray = gray
    _write_run_config(args, out, extra={"frame_count": len(paths)})
    print(f"wrote {len(paths)} flow-augmented frames to {out}")
    return 0


def cmd_dataset(args) -> int:
    in_dir = Path(args.in_dir)
    paths = _frame_paths(in_dir)
    offsets = generate_offsets(args.classes, args.major, args.minor, args.rot)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    first = read_frame(paths[0])
    channels = first.channel_names

    def frames():
        yield first
        for path in paths[1:]:
            yield read_frame(path)

    count = 0
    for _ in pipeline.iter_patch_samples(frames(), offsets, args.p, args.s, args.tau,
                                         args.fill, channels, workers=worker_count()):
        count += 1
    if count == 0:
        raise ValueError(f"variance filter (tau={args.tau}) dropped every patch; lower tau")

    manifest = pipeline.DatasetManifest(
        patch_size=args.p, stride=args.s, channels=channels, offsets=offsets,
        tau=args.tau, fill=args.fill, seed=args.seed, split=args.split,
        frames_dir=os.path.relpath(in_dir, out),
        frame_files=[p.name for p in paths],
        frame_count=len(paths), patch_count=count)
    pipeline.write_manifest(manifest, out / "manifest.txt")
    _write_run_config(args, out, extra={"patch_count": count})
    print(f"dataset: {count} patches from {len(paths)} frames x {args.classes} offsets "
          f"-> {out / 'manifest.txt'}")
    return 0


def _load_manifest_frames(manifest_path: Path, manifest, override: str | None) -> list[Frame]:
    frames_dir = _resolve_frames_dir(manifest_path, manifest, override)
    names = manifest.frame_files or [p.name for p in _frame_paths(frames_dir)]
    return [read_frame(frames_dir / name) for name in names]


def cmd_train(args) -> int:
    manifest_path = Path(args.dataset)
    manifest = read_manifest(manifest_path)
    requested = parse_channels(args.channels)
    model.require_channels(requested, manifest.channels)
    # stack in manifest order so checkpoints stay portable
    selected = [c for c in manifest.channels if c in requested]

    filters = _parse_int_list(args.filters, "--filters")
    if len(filters) != 3:
        raise ValueError(f"--filters needs three counts, got {args.filters!r}")
    config = model.ModelConfig(
        patch_size=manifest.patch_size,
        channels=tuple(selected),
        filters=tuple(filters),
        kernel_size=args.kernel,
        n_classes=len(manifest.offsets),
        seed=args.seed,
    )
    net = model.build_model(config)

    frames_dir = _resolve_frames_dir(manifest_path, manifest, args.frames)
    names = manifest.frame_files or [p.name for p in _frame_paths(frames_dir)]

    def frames():
        for name in names:
            yield read_frame(frames_dir / name)

    stream = pipeline.iter_patch_samples(frames(), manifest.offsets, manifest.patch_size,
                                         manifest.stride, manifest.tau, manifest.fill,
                                         selected, workers=worker_count())
    data, labels = [], []
    for sample in stream:
        data.append(sample.data)
        labels.append(sample.label)
    if not data:
        raise ValueError("dataset manifest reproduces zero patches; lower tau")
    x = np.stack(data)
    y = np.array(labels, dtype=np.int64)

    train_config = model.TrainConfig(batch_size=args.batch, epochs=args.epochs,
                                     learning_rate=args.lr, momentum=args.momentum,
                                     seed=args.seed)
    net, history = model.train(net, x, y, train_config)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save_checkpoint(net, out / "checkpoint.mmrc")
    loss_lines = ["epoch,mean_loss"] + [f"{i},{loss:.6f}" for i, loss in enumerate(history)]
    (out / "loss.csv").write_text("\n".join(loss_lines) + "\n")
    _write_run_config(args, out, extra={"samples": len(y), "final_loss":
                                        f"{history[-1]:.6f}" if history else "n/a"})
    print(f"trained on {len(y)} patches for {args.epochs} epochs "
          f"-> {out / 'checkpoint.mmrc'}")
    return 0


def cmd_eval(args) -> int:
    checkpoint_path = Path(args.checkpoint)
    if not checkpoint_path.is_file():
        raise ValueError(f"checkpoint {checkpoint_path} does not exist")
    net = model.load_checkpoint(checkpoint_path)

    manifest_path = Path(args.dataset)
    manifest = read_manifest(manifest_path)
    if len(manifest.offsets) != net.config.n_classes:
        raise ValueError(f"manifest has {len(manifest.offsets)} offset classes but the "
                         f"checkpoint predicts {net.config.n_classes}")
    if net.config.patch_size != manifest.patch_size:
        raise ValueError(f"manifest patch size {manifest.patch_size} differs from "
                         f"checkpoint patch size {net.config.patch_size}")
    frames = _load_manifest_frames(manifest_path, manifest, args.frames)
    k_values = _parse_int_list(args.k_list, "--k-list")

    report = evaluation.evaluate_run(net, frames, manifest.offsets, k_values,
                                     stride=manifest.stride, tau=manifest.tau,
                                     fill=manifest.fill)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evaluation.emit_report(report, out)
    _write_run_config(args, out)
    patch_acc = evaluation.mean_diagonal_accuracy(report.patch_cm)
    image_acc = evaluation.mean_diagonal_accuracy(report.image_cm)
    print(f"patch mean-diagonal accuracy: {patch_acc:.2f}%")
    print(f"image mean-diagonal accuracy: {image_acc:.2f}%")
    for k in sorted(report.temporal_accuracy):
        print(f"temporal k={k}: {report.temporal_accuracy[k]:.2f}%")
    print(f"report written to {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser assembly
# ---------------------------------------------------------------------------


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="mmreg",
        description="Detect depth/video misalignment with a patch-vote CNN classifier.")
    subs = parser.add_subparsers(dest="command", required=True)
    registry: dict[str, argparse.ArgumentParser] = {}

    def sub(name, func, help_text):
        p = subs.add_parser(name, help=help_text,
                            formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.add_argument("--config", default=None,
                       help="key=value file; CLI flags override its entries")
        p.set_defaults(func=func)
        registry[name] = p
        return p

    p = sub("synth", cmd_synth, "generate a synthetic multi-modal frame sequence")
    p.add_argument("--out", required=True, help="output directory for MMF frames")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=10, help="frame count (>= 2 allows flow)")
    p.add_argument("--width", type=int, default=pipeline.DEFAULT_WIDTH)
    p.add_argument("--height", type=int, default=pipeline.DEFAULT_HEIGHT)
    p.add_argument("--objects", type=int, default=40)
    p.add_argument("--kinds", default="rectangle,ellipse")
    p.add_argument("--depth-min", type=float, default=0.15)
    p.add_argument("--depth-max", type=float, default=0.8)
    p.add_argument("--translate", default="1,0", help="camera translation px/frame as dx,dy")
    p.add_argument("--jitter", type=float, default=1.0, help="per-object drift amplitude px/frame")
    p.add_argument("--noise", type=float, default=0.02, help="additive noise amplitude")

    p = sub("flow", cmd_flow, "add optical-flow channels U,V to a frame directory")
    p.add_argument("--in-dir", required=True, help="directory of MMF frames")
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=flow_mod.DEFAULT_ALPHA,
                   help="smoothness weight")
    p.add_argument("--iters", type=int, default=flow_mod.DEFAULT_ITERATIONS)
    p.add_argument("--clamp", type=float, default=flow_mod.DEFAULT_CLAMP,
                   help="flow magnitude mapped to the [0,1] channel range")

    p = sub("dataset", cmd_dataset, "build a labeled patch dataset manifest")
    p.add_argument("--in-dir", required=True, help="directory of flow-augmented MMF frames")
    p.add_argument("--out", required=True)
    p.add_argument("--p", type=int, default=32, help="patch size")
    p.add_argument("--s", type=int, default=32, help="patch stride")
    p.add_argument("--tau", type=float, default=pipeline.DEFAULT_TAU,
                   help="depth-variance keep threshold (0 keeps everything)")
    p.add_argument("--classes", type=int, default=9, help="offset class count")
    p.add_argument("--major", type=float, default=32, help="ellipse major axis px")
    p.add_argument("--minor", type=float, default=16, help="ellipse minor axis px")
    p.add_argument("--rot", type=float, default=45, help="clockwise ellipse rotation deg")
    p.add_argument("--fill", type=float, default=pipeline.DEFAULT_FILL,
                   help="value written into vacated depth pixels")
    p.add_argument("--split", default="all", help="split name recorded in the manifest")
    p.add_argument("--seed", type=int, default=0,
                   help="generator seed recorded for provenance")

    p = sub("train", cmd_train, "train a misalignment classifier on a dataset")
    p.add_argument("--dataset", required=True, help="dataset manifest path")
    p.add_argument("--frames", default=None,
                   help="frames directory (default: the manifest's recorded location)")
    p.add_argument("--channels", default="GrLUV",
                   help="channel stack, e.g. GrLUV, RGBL, RGBLUV or Gr,L,U,V")
    p.add_argument("--filters", default="32,32,64", help="conv filter counts")
    p.add_argument("--kernel", type=int, default=5, help="conv kernel size (5, 7 or 9)")
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub("eval", cmd_eval, "evaluate a checkpoint and emit report files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True,
                   help="manifest describing the evaluation frames and offsets")
    p.add_argument("--frames", default=None,
                   help="frames directory (default: the manifest's recorded location)")
    p.add_argument("--k-list", default="1,2,3,4", help="temporal window sizes")
    p.add_argument("--out", required=True)

    return parser, registry


def _typed_config_defaults(sub: argparse.ArgumentParser, pairs: dict[str, str],
                           source: str) -> dict:
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config", "func")}
    defaults = {}
    for key, raw in pairs.items():
        if key not in actions:
            raise ValueError(f"{source}: unknown config key {key!r}")
        action = actions[key]
        defaults[key] = action.type(raw) if action.type else raw
    return defaults


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, registry = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "config", None):
            pairs = pipeline.parse_key_values(Path(args.config).read_text(),
                                              source=args.config)
            registry[args.command].set_defaults(
                **_typed_config_defaults(registry[args.command], pairs, args.config))
            args = parser.parse_args(argv)
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

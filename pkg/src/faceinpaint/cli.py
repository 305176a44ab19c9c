"""``faceinpaint`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
``FACEINPAINT_DATA_ROOT`` supplies the default ``--out`` of ``synth-data``
and ``--data`` of ``train``; config-file values are overridden by flags.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import video_data as vd
from .evaluation import MetricsReport, PairingError, evaluate_corpus
from .generator import inpaint_sample
from .losses import make_extractor
from .training import (CheckpointError, ClipPool, NonFiniteLossError, TrainConfig, TrainState, fit,
                       load_generator, save_checkpoint)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DATA_ROOT_ENV = "FACEINPAINT_DATA_ROOT"

log = logging.getLogger("faceinpaint")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _data_root() -> str | None:
    return os.environ.get(DATA_ROOT_ENV)


def cmd_synth_data(args) -> int:
    out = args.out or _data_root()
    if not out:
        raise UsageError(f"synth-data needs --out or ${DATA_ROOT_ENV}")
    manifest = vd.make_synthetic_dataset(out, args.seed, args.videos, args.frames, (args.size, args.size))
    print(f"wrote {len(manifest.entries)} videos x {args.frames} frames to {out}")
    return EXIT_OK


def cmd_gen_masks(args) -> int:
    try:
        masks = vd.mask_for(args.kind, args.seed, args.frames, (args.size, args.size),
                            (args.min_frac, args.max_frac), args.max_step)
    except vd.ParameterError as exc:
        raise UsageError(str(exc)) from exc
    vd.save_masks(masks, args.out)
    print(f"wrote {args.frames} {args.kind} masks to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    data = args.data or _data_root()
    if not data:
        raise UsageError(f"train needs --data or ${DATA_ROOT_ENV}")
    overrides = dict(shift_mode=args.shift_mode, steps=args.steps, seed=args.seed)
    if args.config:
        config = TrainConfig.from_file(args.config, **overrides)
    else:
        config = TrainConfig.from_dict({k: v for k, v in overrides.items() if v is not None})
    manifest = vd.DatasetManifest.load(data)
    pool = ClipPool.from_manifest(manifest, config)
    state = TrainState(config)
    out = Path(args.out)
    fit(state, pool, config.steps, out)
    path = save_checkpoint(state, out / "checkpoint.pt")
    print(f"trained {state.step} steps; checkpoint {path}")
    return EXIT_OK


def _landmark_file(landmarks: Path, clip_dir: Path) -> Path:
    if landmarks.is_file():
        return landmarks
    candidate = landmarks / f"{clip_dir.name}.txt"
    if candidate.exists():
        return candidate
    txt = sorted(landmarks.glob("*.txt"))
    if len(txt) == 1:
        return txt[0]
    raise vd.IngestionError(f"no landmark file for {clip_dir.name} in {landmarks}")


def cmd_inpaint(args) -> int:
    generator = load_generator(args.checkpoint)
    input_dir = Path(args.input)
    files = vd.frame_files(input_dir)
    frames = vd.load_clip(input_dir)
    size = frames.shape[1:]
    masks = vd.load_masks(args.masks, size)
    if len(masks) != len(frames):
        raise vd.IngestionError(f"{len(masks)} masks for {len(frames)} frames")
    lm = vd.load_landmarks(_landmark_file(Path(args.landmarks), input_dir))
    reference = vd.load_frames([args.reference], size).frames[0]
    sample = vd.make_sample(frames, masks, lm, reference=reference, video_id=input_dir.name)
    result = inpaint_sample(generator, sample)
    vd.save_frames(result, args.out, [f.name for f in files])
    print(f"inpainted {len(files)} frames into {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    extractor = make_extractor(args.extractor)
    report = evaluate_corpus(args.pred, args.gt, extractor)
    report.save(args.out)
    print(report.table())
    return EXIT_OK


def cmd_report(args) -> int:
    print(MetricsReport.load(args.input).table())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="faceinpaint", description="Expression-aware facial video inpainting.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-data", help="write a procedural face dataset")
    s.add_argument("--out")
    s.add_argument("--videos", type=int, default=4)
    s.add_argument("--frames", type=int, default=vd.DEFAULT_CLIP_LENGTH)
    s.add_argument("--size", type=int, default=vd.DEFAULT_SIZE[0])
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("gen-masks", help="write a static or moving box-mask sequence")
    s.add_argument("--kind", choices=("static", "moving"), required=True)
    s.add_argument("--frames", type=int, required=True)
    s.add_argument("--size", type=int, default=vd.DEFAULT_SIZE[0])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--max-step", type=int, default=5)
    s.add_argument("--min-frac", type=float, default=vd.DEFAULT_SIZE_RANGE[0])
    s.add_argument("--max-frac", type=float, default=vd.DEFAULT_SIZE_RANGE[1])
    s.set_defaults(func=cmd_gen_masks)

    s = sub.add_parser("train", help="train generator and critic")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.add_argument("--shift-mode", choices=("online", "offline"))
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("inpaint", help="inpaint one clip with a trained checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--masks", required=True)
    s.add_argument("--landmarks", required=True)
    s.add_argument("--reference", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_inpaint)

    s = sub.add_parser("eval", help="score predicted clips against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--extractor", default="randcnn")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="print a saved metrics report as a table")
    s.add_argument("--in", dest="input", required=True)
    s.set_defaults(func=cmd_report)
    return p


def run(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (vd.IngestionError, PairingError, CheckpointError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

"""Command-line entry point: ``weakseg <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import difflib
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import yaml

log = logging.getLogger("weakseg")

COMMANDS = ("ingest", "generate-labels", "train", "infer", "eval", "report", "overlay",
            "make-fixture")


class UsageError(Exception):
    pass


def _floats(text: str):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _data_arg(text: str):
    name, sep, path = text.partition("=")
    if not sep or not name or not path:
        raise argparse.ArgumentTypeError(f"expected ID=PATH, got {text!r}")
    return name, path


def _args_digest(args) -> str:
    from weakseg.train import config_digest

    return config_digest({k: v for k, v in vars(args).items() if k not in ("func", "verbose")})


# commands -------------------------------------------------------------------

def cmd_ingest(args) -> int:
    from weakseg import ingest
    from weakseg.config import RunManifest

    if args.format == "cocotext":
        if not args.annotations:
            raise UsageError("--annotations is required for cocotext")
        manifest = ingest.load_cocotext(args.annotations, args.images or Path(args.annotations).parent)
    elif args.format == "mlt":
        if not args.annotations or not args.images:
            raise UsageError("--annotations (gt directory) and --images are required for mlt")
        manifest = ingest.load_mlt(args.annotations, args.images, split=args.split)
    else:
        if not args.images:
            raise UsageError(f"--images (dataset root) is required for {args.format}")
        manifest = ingest.load_pixel_gt_dataset(args.format, args.images)
    if args.select != "none":
        manifest = ingest.select_images(manifest, ingest.PREDICATES[args.select])
    ingest.write_manifest(manifest, args.out)
    run = RunManifest("ingest", _args_digest(args))
    run.add(args.out)
    out = Path(args.out)
    run.write(out.parent, f"{out.stem}_run_manifest.json")
    flagged = sum(1 for r in manifest.records if r.flags)
    print(f"{manifest.name}: {len(manifest)} records ({flagged} flagged) -> {args.out}")
    return 0


def _input_manifest(args, kind: str):
    from weakseg import ingest

    if args.manifest:
        return ingest.read_manifest(args.manifest)
    if not args.annotations:
        raise UsageError("give --manifest, or --annotations (and --images)")
    if kind == "cocotext":
        return ingest.load_cocotext(args.annotations, args.images or Path(args.annotations).parent)
    if not args.images:
        raise UsageError("--images is required with mlt annotations")
    return ingest.load_mlt(args.annotations, args.images)


def cmd_generate_labels(args) -> int:
    from weakseg import ingest
    from weakseg.config import RunManifest
    from weakseg.smanet import load_checkpoint
    from weakseg.weaklabel import ThresholdPolicy, generate_dataset

    policy = ThresholdPolicy(args.th1, args.th2)
    manifest = _input_manifest(args, args.dataset)
    if args.split:
        manifest = manifest.split(args.split)
    manifest = ingest.select_images(manifest)
    ckpt = load_checkpoint(args.model)
    name = args.name or {"cocotext": "coco_ts", "mlt": "mlt_s"}[args.dataset]
    run = RunManifest("generate-labels", _args_digest(args))
    generated = generate_dataset(manifest, ckpt.build(), policy, out_dir=args.out, name=name,
                                 workers=args.workers, factor=args.factor, min_side=args.min_side)
    run.add(generated.manifest_path, *(p for _, p in generated.items))
    run.write(args.out)
    print(f"{name}: {len(generated.items)} label maps, {len(generated.failures)} failures -> {args.out}")
    return 1 if generated.failures and not generated.items else 0


def _load_cli_config(args):
    from weakseg.config import config_from_dict, load_config

    raw = {}
    if args.config:
        raw = yaml.safe_load(Path(args.config).read_text(encoding="utf-8")) or {}
        cfg = load_config(args.config, check_datasets=False)
        data = cfg.to_dict()
    else:
        data = {"name": f"{args.task}-{args.network}"}
    if args.network:
        data["network"] = args.network
    if args.stages:
        data["stages"] = args.stages
    if args.seed is not None:
        data["seed"] = args.seed
    if args.task == "bgfg" and "crop_size" not in (raw.get("train") or {}):
        data.setdefault("train", {})["crop_size"] = 185
    datasets = dict(data.get("datasets") or {})
    datasets.update({k: str(Path(v).resolve()) for k, v in args.data or ()})
    data["datasets"] = datasets
    return config_from_dict(data, check_datasets=True)


def cmd_train(args) -> int:
    from weakseg import ingest
    from weakseg.config import RunManifest, dump_config
    from weakseg.smanet import load_checkpoint
    from weakseg.train import train_bgfg, train_segmentation

    cfg = _load_cli_config(args)
    if not cfg.stages:
        raise UsageError("no training stages: pass --stages NAME:STEPS[,...] or set 'stages' in the config")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    run = RunManifest(f"train --task {args.task}", cfg.digest())
    run.add(out / "config.yaml")
    tc = cfg.train_config()
    spec = cfg.spec()
    if args.task == "bgfg":
        if len(cfg.stages) != 1:
            raise UsageError("bgfg training takes exactly one stage (the synthetic crop set)")
        name, steps = cfg.stages[0]
        manifest = ingest.training_split(ingest.read_manifest(cfg.resolve_dataset(name)))
        crops = list(ingest.extract_synth_crops(manifest, args.factor))
        ckpt = train_bgfg(replace(tc, max_steps=steps), crops, spec, out_path=out / "final.pt",
                          trace_path=out / "loss.jsonl", encoder_weights=args.encoder_weights)
        print(f"bgfg: {len(crops)} crops, {steps} steps, held-out F1 "
              f"{ckpt.metrics.get('heldout_f1', float('nan')):.4f} -> {out / 'final.pt'}")
    else:
        stages = [(name, ingest.training_split(ingest.read_manifest(cfg.resolve_dataset(name))), steps)
                  for name, steps in cfg.stages]
        init = load_checkpoint(args.init) if args.init else None
        ckpt = train_segmentation(tc, stages, spec, out_dir=out, init=init,
                                  encoder_weights=args.encoder_weights)
        print(f"seg: {len(stages)} stage(s), {ckpt.step} steps -> {out / 'final.pt'}")
    run.add(out / "final.pt", out / "loss.jsonl", *sorted(out.glob("stage*.pt")))
    run.write(out)
    return 0


def _policy(args):
    from weakseg.config import load_config
    from weakseg.infer import InferencePolicy

    base = load_config(args.config, check_datasets=False).inference if args.config else InferencePolicy()
    over = {k: v for k, v in (("scales", args.scales), ("window", args.window),
                              ("stride", args.stride), ("threshold", args.threshold)) if v is not None}
    return replace(base, **over)


def cmd_infer(args) -> int:
    from weakseg import pngio
    from weakseg.config import RunManifest
    from weakseg.infer import binarize, sliding_window_predict
    from weakseg.smanet import load_model

    policy = _policy(args)
    model = load_model(args.model)
    out = Path(args.out)
    run = RunManifest("infer", _args_digest(args))
    images = pngio.list_images(args.images)
    if not images:
        raise FileNotFoundError(f"no images found in {args.images}")
    for path in images:
        prob = sliding_window_predict(model, pngio.read_image(path), policy)
        prob_path = out / "probs" / f"{path.stem}.png"
        mask_path = out / "masks" / f"{path.stem}.png"
        pngio.write_probability_map(prob, prob_path)
        pngio.write_binary_mask(binarize(prob, policy.threshold), mask_path)
        run.add(prob_path, mask_path)
    run.write(out)
    print(f"infer: {len(images)} images -> {out}")
    return 0


def cmd_eval(args) -> int:
    from weakseg import pngio
    from weakseg.config import RunManifest
    from weakseg.evaluate import (
        PixelCounts,
        accumulate_counts,
        compute_metrics,
        match_prediction_dirs,
        per_image_metrics,
        read_prediction,
    )
    from weakseg.report import ExperimentReport, plot_per_image, write_report

    pairs = match_prediction_dirs(args.pred, args.gt)
    if not pairs:
        raise FileNotFoundError(f"no prediction/ground-truth pairs between {args.pred} and {args.gt}")
    counts, per_image = {}, []
    for stem, pred_path, gt_path in pairs:
        c = accumulate_counts(read_prediction(pred_path), pngio.read_mask(gt_path, args.mask_rule))
        counts[stem] = c
        p, r, f = compute_metrics(c)
        per_image.append({"image": stem, "precision": p, "recall": r, "f1": f,
                          "tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn})
    total = sum(counts.values(), PixelCounts())
    row = ExperimentReport(setup=Path(args.pred).name or "prediction", test_set=Path(args.gt).name,
                           counts=total)
    row.precision, row.recall, row.f1 = compute_metrics(total)
    if args.per_image:
        row.per_image = per_image_metrics(counts.values())
    paths = write_report([row], args.report, extra_records=per_image if args.per_image else ())
    if args.per_image:
        stem = paths[0].with_suffix("")
        paths.append(plot_per_image(per_image, stem.parent / f"{stem.name}_per_image.png"))
    run = RunManifest("eval", _args_digest(args))
    run.add(*paths)
    run.write(paths[0].parent)
    print(f"P={row.precision:.4f} R={row.recall:.4f} F1={row.f1:.4f} over {len(pairs)} images")
    return 0


def cmd_report(args) -> int:
    from weakseg.config import RunManifest, load_matrix
    from weakseg.report import format_table, run_experiment_matrix, write_report
    from weakseg.train import config_digest

    info, configs = load_matrix(args.matrix)
    if args.output_root:
        root = str(Path(args.output_root).resolve())
        configs = [replace(c, output_root=root) for c in configs]
    reports = run_experiment_matrix(configs, per_image=args.per_image)
    out = args.out or str(Path(args.matrix).with_suffix("")) + "_report"
    paths = write_report(reports, out, title=info["title"])
    run = RunManifest("report", config_digest([c.to_dict() for c in configs]))
    run.add(*paths)
    run.write(paths[0].parent)
    sys.stdout.write(format_table(reports, info["title"]))
    return 0


def cmd_overlay(args) -> int:
    from weakseg import pngio
    from weakseg.config import RunManifest
    from weakseg.evaluate import emit_overlays, read_prediction

    images, preds, gts, names = [], [], [], []
    pred_dir = Path(args.pred)
    if (pred_dir / "masks").is_dir():
        pred_dir = pred_dir / "masks"
    for path in pngio.list_images(args.images):
        pred = pngio.find_by_stem(pred_dir, path.stem)
        gt = pngio.find_by_stem(args.gt, path.stem)
        if pred is None or gt is None:
            log.warning("skipping %s: missing prediction or ground truth", path.name)
            continue
        images.append(pngio.read_image(path))
        preds.append(read_prediction(pred))
        gts.append(pngio.read_mask(gt, args.mask_rule))
        names.append(path.stem)
    written = emit_overlays(images, preds, gts, args.out, names)
    run = RunManifest("overlay", _args_digest(args))
    run.add(*written)
    run.write(args.out)
    print(f"overlay: {len(written)} panels -> {args.out}")
    return 0


def cmd_make_fixture(args) -> int:
    from weakseg.config import RunManifest
    from weakseg.fixture import make_fixture

    out = make_fixture(args.out, seed=args.seed)
    run = RunManifest("make-fixture", _args_digest(args))
    run.add(*sorted(str(p) for p in out.rglob("*") if p.is_file() and p.name != "run_manifest.json"))
    run.write(out)
    print(f"fixture written to {args.out}")
    return 0


# parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weakseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("ingest", help="convert a dataset to a manifest")
    p.add_argument("--format", required=True,
                   choices=("cocotext", "mlt", "icdar2013", "totaltext", "synthetic"))
    p.add_argument("--annotations", help="COCO-Text json or MLT gt directory")
    p.add_argument("--images", help="image root (dataset root for pixel-level datasets)")
    p.add_argument("--split", default="train", help="split label for MLT records")
    p.add_argument("--select", default="none", choices=("none", "qualifying", "any"),
                   help="keep images with >=1 box matching the predicate")
    p.add_argument("--out", required=True, help="manifest path (.jsonl)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("generate-labels", help="build three-class label maps from boxes")
    p.add_argument("--dataset", required=True, choices=("cocotext", "mlt"))
    p.add_argument("--model", required=True, help="background/foreground checkpoint")
    p.add_argument("--manifest", help="ingested manifest of the box dataset")
    p.add_argument("--annotations", help="COCO-Text json or MLT gt directory")
    p.add_argument("--images", help="image root")
    p.add_argument("--split", help="only label records of this split (default: all)")
    p.add_argument("--th1", type=float, default=0.3, help="background below this (default 0.3)")
    p.add_argument("--th2", type=float, default=0.7, help="foreground above this (default 0.7)")
    p.add_argument("--factor", type=float, default=0.3, help="box enlargement factor")
    p.add_argument("--min-side", type=int, default=185, help="crop resize target for the network")
    p.add_argument("--name", help="generated dataset name (default coco_ts / mlt_s)")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_generate_labels)

    p = sub.add_parser("train", help="train a network")
    p.add_argument("--network", choices=("smanet", "psp", "psp-dd"))
    p.add_argument("--task", required=True, choices=("bgfg", "seg"))
    p.add_argument("--config", help="experiment config (YAML)")
    p.add_argument("--stages", help='ordered stages, e.g. "synth:200k,coco_ts:100k"')
    p.add_argument("--seed", type=int)
    p.add_argument("--data", type=_data_arg, action="append", metavar="ID=PATH",
                   help="dataset manifest for a stage id (repeatable)")
    p.add_argument("--init", help="checkpoint to fine-tune from (seg only)")
    p.add_argument("--encoder-weights", help="pretrained ResNet state dict (ignored with --init)")
    p.add_argument("--factor", type=float, default=0.3, help="word box enlargement (bgfg)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="sliding-window inference on a folder of images")
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="take the inference policy from this config")
    p.add_argument("--scales", type=_floats, help="e.g. 0.75,1.0,1.25")
    p.add_argument("--window", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="pixel precision/recall/F1 of predictions")
    p.add_argument("--pred", required=True, help="binary masks (infer output directory)")
    p.add_argument("--gt", required=True, help="ground-truth masks or label maps")
    p.add_argument("--report", required=True, help="report path stem")
    p.add_argument("--per-image", action="store_true", help="also report per-image metrics")
    p.add_argument("--mask-rule", default="nonzero", choices=("nonzero", "nonwhite"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="run an experiment matrix and tabulate it")
    p.add_argument("--matrix", required=True)
    p.add_argument("--out", help="report path stem (default: next to the matrix file)")
    p.add_argument("--output-root", help="directory for per-setup checkpoints (overrides the matrix)")
    p.add_argument("--per-image", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("overlay", help="input | prediction | ground-truth panels")
    p.add_argument("--images", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask-rule", default="nonzero", choices=("nonzero", "nonwhite"))
    p.set_defaults(func=cmd_overlay)

    p = sub.add_parser("make-fixture", help="render the tiny synthetic fixture")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_make_fixture)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    command = next((a for a in argv if not a.startswith("-")), None)
    if command is not None and command not in COMMANDS:
        hint = difflib.get_close_matches(command, COMMANDS, n=1)
        parser.print_usage(sys.stderr)
        msg = f"weakseg: error: unknown command {command!r}"
        if hint:
            msg += f" (did you mean {hint[0]!r}?)"
        print(msg, file=sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    from weakseg.config import ConfigError
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"weakseg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("failure", exc_info=True)
        print(f"weakseg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

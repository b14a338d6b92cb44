"""Command-line entry point: ``forada <subcommand> ...``.

Configuration precedence is preset/file < ``FORADA__*`` environment < ``--set``.
Every subcommand writes ``resolved_config.yaml`` into its output directory.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import cv2
import numpy as np

from . import config as config_mod
from .config import WEIGHTS_ENV, ConfigError, RunConfig

log = logging.getLogger("forada")


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--preset", default=None, help="built-in preset: default or desk (default: default)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, e.g. --set optim.lr=1e-4 (repeatable)")


def _resolve(args) -> RunConfig:
    preset = args.preset or (None if args.config else "default")
    return config_mod.resolve(args.config, args.overrides, preset=preset)


def _snapshot(cfg: RunConfig, out_dir, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.yaml"
    config_mod.dump(cfg, path)
    if extra:
        (out / "command.json").write_text(json.dumps(extra, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _load_dataset(manifest, cfg: RunConfig):
    from .data import FaceDataset
    from .dataprep.manifest import load_manifest

    return FaceDataset(load_manifest(manifest), cfg)


def _checkpoint_config(args) -> tuple[object, dict, RunConfig]:
    from .train import load_model

    model, meta = load_model(args.checkpoint)
    cfg = config_mod.from_dict(meta["config"])
    if args.overrides:
        data = cfg.to_dict()
        for item in args.overrides:
            key, value = config_mod.parse_override(item)
            config_mod.set_dotted(data, key, value)
        requested = config_mod.from_dict(data)
        if requested.config_hash() != cfg.config_hash():
            log.warning("overrides change the model config; evaluating the checkpoint as trained:\n  %s",
                        "\n  ".join(config_mod.diff(meta["config"], requested.to_dict())))
        cfg.video_aggregate = requested.video_aggregate
    return model, meta, cfg


# ------------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    from .dataprep.synth import write_synthetic_dataset

    write_synthetic_dataset(args.out, args.n, seed=args.seed, side=args.side,
                            frames_per_video=args.frames_per_video)
    _snapshot(_resolve(args), args.out, {"command": "synth", "n": args.n, "seed": args.seed,
                                         "side": args.side, "frames_per_video": args.frames_per_video})
    log.info("wrote %d synthetic pairs to %s", args.n, args.out)
    return 0


def cmd_prepare(args) -> int:
    from .dataprep.prepare import prepare_dataset

    cfg = _resolve(args)
    _snapshot(cfg, args.out, {"command": "prepare", "raw": args.raw})
    manifest, problems = prepare_dataset(args.raw, args.out, cfg.data, cfg.target_side,
                                         cfg.adapter.patch_size, strict=args.strict,
                                         frames_per_video=args.frames_per_video)
    report = Path(args.out) / "prepare_problems.txt"
    report.write_text("".join(p + "\n" for p in problems))
    n = sum(1 for _ in open(manifest)) - 1
    log.info("manifest %s: %d records, %d skipped", manifest, n, len(problems))
    if n == 0:
        log.warning("no records prepared from %s", args.raw)
    return 0


def cmd_train(args) -> int:
    from .data import FaceDataset, split_by_group
    from .dataprep.manifest import load_manifest
    from .train import fit

    cfg = _resolve(args)
    out = Path(args.out)
    _snapshot(cfg, out, {"command": "train", "manifest": args.manifest, "val_manifest": args.val_manifest,
                         "val_fraction": args.val_fraction, "resume": args.resume})
    samples = load_manifest(args.manifest)
    if args.val_manifest:
        train, val = samples, load_manifest(args.val_manifest)
    elif args.val_fraction > 0:
        train, val = split_by_group(samples, args.val_fraction, cfg.seed)
    else:
        train, val = samples, []
    val_set = FaceDataset(val, cfg) if val else None

    def progress(rec):
        if rec["step"] % max(1, args.log_every) == 0:
            extra = f" val_auc={rec['val_auc']:.4f}" if rec.get("val_auc") is not None else ""
            log.info("step %d total=%.4f l0=%.4f%s", rec["step"], rec["total"], rec["l0"], extra)

    path = fit(cfg, FaceDataset(train, cfg), out, val_set, resume=args.resume, progress=progress)
    log.info("selected checkpoint: %s", path)
    print(path)
    return 0


def _eval(args, perturbations, levels) -> int:
    from .eval import EvalOptions, evaluate_model, write_report

    model, meta, cfg = _checkpoint_config(args)
    out = Path(args.out)
    _snapshot(cfg, out, {"command": args.command, "checkpoint": args.checkpoint, "manifest": args.manifest})
    dataset = _load_dataset(args.manifest, cfg)
    opts = EvalOptions(batch_size=args.batch_size, video_aggregate=cfg.video_aggregate,
                       perturbations=perturbations, levels=tuple(levels),
                       perturb_seed=args.perturb_seed, embeddings=getattr(args, "embeddings", False))
    report, artifacts = evaluate_model(model, dataset, opts, {
        "checkpoint": str(args.checkpoint), "config_hash": meta["config_hash"], "step": meta["step"],
        "manifest": str(args.manifest)})
    paths = write_report(report, artifacts, out, name=args.name)
    frame = report["frame"]
    log.info("frame AUC %s AP %s EER %s -> %s", frame.get("auc"), frame.get("ap"), frame.get("eer"),
             paths["report"])
    print(json.dumps({"frame": report["frame"], "video": report["video"]}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    return _eval(args, args.perturb or [], args.levels)


def cmd_perturb_sweep(args) -> int:
    from .eval.perturb import KINDS

    return _eval(args, args.kinds or list(KINDS), [0, 1, 2, 3, 4, 5])


IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")


def _overlay(image: np.ndarray, bmap: np.ndarray) -> np.ndarray:
    heat = cv2.applyColorMap((np.clip(bmap, 0, 1) * 255).astype(np.uint8), cv2.COLORMAP_JET)
    heat = cv2.resize(heat, (image.shape[1], image.shape[0]), interpolation=cv2.INTER_LINEAR)
    return cv2.addWeighted(cv2.cvtColor(image, cv2.COLOR_RGB2BGR), 0.6, heat, 0.4, 0)


def cmd_score(args) -> int:
    import torch

    from .data import resize_image

    model, meta, cfg = _checkpoint_config(args)
    out = Path(args.out)
    _snapshot(cfg, out, {"command": "score", "checkpoint": args.checkpoint, "input": args.input})
    src = Path(args.input)
    files = sorted(p for p in src.rglob("*") if p.suffix.lower() in IMAGE_EXTS) if src.is_dir() else [src]
    side = max(cfg.backbone.visual.input_side, cfg.adapter.input_side)
    rows, failures = [], []
    for f in files:
        raw = cv2.imread(str(f), cv2.IMREAD_COLOR)
        if raw is None:
            failures.append({"file": str(f), "error": "unreadable image"})
            log.warning("skipping unreadable %s", f)
            continue
        image = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
        x = torch.from_numpy(resize_image(image, side)).permute(2, 0, 1)[None].float()
        with torch.no_grad():
            res = model(x)
        score = float(res.fake_prob[0])
        row = {"file": str(f), "score": score}
        if args.heatmaps:
            hm_dir = out / "heatmaps"
            hm_dir.mkdir(parents=True, exist_ok=True)
            rel = f.relative_to(src) if src.is_dir() else Path(f.name)
            hm_path = hm_dir / (str(rel.with_suffix("")).replace("/", "__") + "_boundary.png")
            cv2.imwrite(str(hm_path), _overlay(image, res.heads.boundary_map[0, 0].numpy()))
            row["heatmap"] = str(hm_path)
        rows.append(row)
    with (out / "scores.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["file", "score"], extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    (out / "scores.json").write_text(json.dumps({"scores": rows, "failures": failures}, indent=2) + "\n")
    for r in rows:
        print(f"{r['score']:.6f}\t{r['file']}")
    return 0 if not failures else 2


def cmd_inspect(args) -> int:
    target = Path(args.target) if args.target else None
    if target is not None and target.suffix == ".safetensors":
        from .train import read_checkpoint

        meta, tensors = read_checkpoint(target)
        n = sum(t.numel() for k, t in tensors.items() if k.startswith("model."))
        info = {"step": meta["step"], "config_hash": meta["config_hash"],
                "schema_version": meta["schema_version"], "mode": meta["config"]["mode"],
                "trainable_parameters": n, "extra": meta.get("extra", {})}
    elif target is not None and target.suffix == ".jsonl":
        from .dataprep.manifest import load_manifest

        samples = load_manifest(target, check_files=False)
        info = {"records": len(samples), "fake": sum(s.is_fake for s in samples),
                "videos": len({s.video_id for s in samples})}
    else:
        import torch

        from .model import ForgeryDetector

        cfg = _resolve(args)
        with torch.device("meta"):
            model = ForgeryDetector(cfg)
        counts = model.count_trainable()
        info = {"mode": cfg.mode, "config_hash": cfg.config_hash(), "trainable_parameters": counts}
    print(json.dumps(info, indent=2, sort_keys=True, default=str))
    return 0


# --------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="forada", description="Face forgery detector on a frozen CLIP-style backbone.",
        epilog=f"Relative backbone weight paths are looked up under ${WEIGHTS_ENV}.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a seeded synthetic blended-face dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=100, help="number of real/fake pairs (default 100)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--side", type=int, default=64, help="image side in pixels (default 64)")
    p.add_argument("--frames-per-video", type=int, default=1)
    _add_config_args(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="build a manifest and target sidecars from a raw directory")
    p.add_argument("raw")
    p.add_argument("--out", required=True)
    p.add_argument("--strict", action="store_true", help="fail on the first bad record")
    p.add_argument("--frames-per-video", type=int, default=None, help="cap frames per video (default: all)")
    _add_config_args(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train the adapter and heads")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--val-manifest", default=None)
    p.add_argument("--val-fraction", type=float, default=0.0,
                   help="hold out this fraction of videos for checkpoint selection (default 0)")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--log-every", type=int, default=50)
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "frame/video metrics on a manifest"),
                                 ("perturb-sweep", cmd_perturb_sweep, "metrics under every perturbation level")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--name", default=name.replace("-", "_"), help="report file prefix")
        p.add_argument("--batch-size", type=int, default=32)
        p.add_argument("--perturb-seed", type=int, default=0)
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="e.g. --set video_aggregate=max")
        if name == "eval":
            p.add_argument("--perturb", nargs="*", default=None, help="perturbation kinds to sweep")
            p.add_argument("--levels", nargs="*", type=int, default=[1, 2, 3, 4, 5])
            p.add_argument("--embeddings", action="store_true", help="dump pooled CLS* embeddings")
        else:
            p.add_argument("--kinds", nargs="*", default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("score", help="score an image or a directory of frames")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--heatmaps", action="store_true", help="write boundary-map overlays")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("inspect", help="summarise a checkpoint, a manifest or a config")
    p.add_argument("target", nargs="?", default=None)
    _add_config_args(p)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return int(args.func(args) or 0)
    except (ConfigError, FileNotFoundError, ValueError, RuntimeError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())

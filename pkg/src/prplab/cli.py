"""Command-line entry point: ``prplab <subcommand> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from prplab import plotting
from prplab.attention import attention_to_uint8, motion_attention
from prplab.config import RunConfig, config_hash, resolve_config, train_config_from_dict, write_resolved_config
from prplab.downstream import (
    build_retrieval_index,
    encoder_from_checkpoint,
    evaluate,
    finetune,
    parameter_digest,
    topk_report,
)
from prplab.errors import ConfigError, DatasetError, InputError, PRPError
from prplab.models import ActionClassifier, Checkpoint, clips_to_tensor, load_checkpoint, save_checkpoint
from prplab.sampling import augment_sample, make_training_sample
from prplab.training import TrainConfig, pretrain, split_videos
from prplab.video_data import (
    RawVideo,
    SyntheticSpec,
    VideoDataset,
    generate_synthetic_corpus,
    write_synthetic_dataset,
)

log = logging.getLogger("prplab")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for runtime failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# Shared plumbing
# --------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, ckpt: str = "optional") -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--profile", choices=("desk", "paper"), help="preset defaults applied before --config")
    p.add_argument("--seed", type=int, help="overrides the configured seed")
    p.add_argument("--out", help="output directory (default: output_dir from the config)")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    if ckpt == "required":
        p.add_argument("--ckpt", required=True, help="checkpoint to load")
    elif ckpt == "optional":
        p.add_argument("--ckpt", help="checkpoint to load")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="prplab", description="Playback-rate pretext training for video encoders")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain", help="train the pretext task and keep the best-validation checkpoint")
    _common(p, ckpt="none")

    p = sub.add_parser("finetune", help="train an action classifier from a checkpoint (random init without --ckpt)")
    _common(p)
    p.add_argument("--freeze-backbone", action="store_true", help="train the classifier head only")

    p = sub.add_parser("eval", help="10-clip action recognition accuracy on the test split")
    _common(p, ckpt="required")

    p = sub.add_parser("retrieve", help="nearest-neighbour retrieval: test split queries against the train split")
    _common(p, ckpt="required")

    p = sub.add_parser("visualize-attention", help="frame / motion attention / conv5 activation images")
    _common(p, ckpt="required")
    p.add_argument("--video-index", type=int, default=0, help="video of the test split to render")
    p.add_argument("--interval", type=int, help="sampling interval (default: smallest configured)")
    p.add_argument("--frames", type=int, default=4, help="number of evenly spaced frames to render")

    p = sub.add_parser("gen-synthetic", help="write the synthetic moving-pattern corpus as frame directories")
    _common(p, ckpt="none")
    return parser


def _out_dir(args, cfg: RunConfig) -> Path:
    return Path(args.out or cfg.output_dir)


def _guard(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise UsageError(f"{path} already exists (use --force to overwrite)")


def _write_json(path: Path, payload: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=False, default=_json_default) + "\n")
    return path


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    raise TypeError(f"not serialisable: {type(obj).__name__}")


def _synthetic_spec(cfg: RunConfig) -> SyntheticSpec:
    if cfg.data.synthetic is not None:
        return cfg.data.synthetic
    h, w = cfg.train.augment.resize_hw
    return SyntheticSpec(height=h, width=w, seed=cfg.seed)


def load_split(cfg: RunConfig, split: str) -> list[RawVideo]:
    """Videos of the train or test split: the configured directory, else the synthetic corpus."""
    root = cfg.data.train_dir if split == "train" else cfg.data.test_dir
    resize = cfg.train.augment.resize_hw
    if root:
        return list(VideoDataset(root, resize_hw=resize))
    if split == "test" and cfg.data.train_dir:
        raise ConfigError("data.test_dir is required when data.train_dir is set")
    spec = _synthetic_spec(cfg)
    if (spec.height, spec.width) != tuple(resize):
        raise ConfigError(
            f"synthetic frames are {spec.height}x{spec.width} but augment.resize_hw is {tuple(resize)}; "
            "set data.train_dir or match the sizes"
        )
    videos = generate_synthetic_corpus(spec)
    train_idx, test_idx = split_videos(videos, cfg.data.synthetic_test_fraction, spec.seed)
    chosen = train_idx if split == "train" else test_idx
    log.info("using %d synthetic %s videos", len(chosen), split)
    return [videos[i] for i in chosen]


def _num_classes(cfg: RunConfig, *splits: Sequence[RawVideo]) -> int:
    if not cfg.data.train_dir:
        return len(_synthetic_spec(cfg).motion_classes)
    return max(v.label for s in splits for v in s) + 1


def _prepare(args) -> tuple[RunConfig, Path, str]:
    cfg = resolve_config(args.config, args.profile, args.seed)
    out = _out_dir(args, cfg)
    write_resolved_config(cfg, out)
    torch.manual_seed(cfg.seed)
    return cfg, out, config_hash(cfg)


def _classifier_checkpoint(model: ActionClassifier, cfg: TrainConfig, num_classes: int, extra: dict) -> Checkpoint:
    return Checkpoint(kind="classifier", config=json.loads(json.dumps(cfg.to_dict())),
                      model_state={k: v.detach().clone() for k, v in model.state_dict().items()},
                      epoch=extra.get("epochs", 0), extra={"num_classes": num_classes, **extra})


def _load_classifier(path) -> tuple[ActionClassifier, TrainConfig, Checkpoint]:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "classifier":
        raise UsageError(f"{path} holds a {ckpt.kind!r} checkpoint; eval needs a finetuned classifier")
    tcfg = train_config_from_dict(ckpt.config)
    model = ActionClassifier(tcfg.backbone, int(ckpt.extra["num_classes"]))
    model.load_state_dict(ckpt.model_state)
    model.eval()
    return model, tcfg, ckpt


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    cfg, out, digest = _prepare(args)
    ckpt_path = out / "best.ckpt"
    _guard(ckpt_path, args.force)
    videos = load_split(cfg, "train")
    log_path = out / "log.jsonl"
    log_path.write_text("")

    def on_epoch(entry):
        with log_path.open("a") as fh:
            fh.write(json.dumps(entry) + "\n")

    result = pretrain(videos, cfg.train, on_epoch=on_epoch)
    result.checkpoint.extra["config_hash"] = digest
    save_checkpoint(result.checkpoint, ckpt_path)
    _write_csv(out / "log.csv", result.log)
    fig = plotting.plot_training_log(result.log, out / "figures" / "pretrain_curves.png")
    last = result.log[-1] if result.log else {}
    _write_json(out / "pretrain_report.json", {
        "config_hash": digest,
        "mode": cfg.train.mode,
        "num_videos": len(videos),
        "best_epoch": result.checkpoint.epoch,
        "best_val_loss": result.checkpoint.val_loss,
        "final": last,
        "checkpoint": str(ckpt_path),
        "figure": str(fig),
    })
    print(f"pretrain: best epoch {result.checkpoint.epoch} val_loss {result.checkpoint.val_loss:.4f} -> {ckpt_path}")
    return EXIT_OK


def _write_csv(path: Path, rows: Sequence[dict]) -> Path:
    if not rows:
        path.write_text("")
        return path
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return path


def cmd_finetune(args) -> int:
    cfg, out, digest = _prepare(args)
    ckpt_path = out / "classifier.ckpt"
    _guard(ckpt_path, args.force)
    source = load_checkpoint(args.ckpt) if args.ckpt else None
    ft = replace(cfg.finetune, freeze_backbone=cfg.finetune.freeze_backbone or args.freeze_backbone)
    train_videos = load_split(cfg, "train")
    test_videos = load_split(cfg, "test")
    n_cls = _num_classes(cfg, train_videos, test_videos)
    result = finetune(source, train_videos, cfg.train, ft, num_classes=n_cls, eval_videos=test_videos)
    meta = {
        "init": "checkpoint" if source is not None else "random",
        "source_checkpoint": str(args.ckpt) if args.ckpt else None,
        "freeze_backbone": ft.freeze_backbone,
        "encoder_digest": parameter_digest(result.model.encoder),
        "epochs": ft.epochs,
        "config_hash": digest,
    }
    save_checkpoint(_classifier_checkpoint(result.model, cfg.train, n_cls, meta), ckpt_path)
    _write_csv(out / "finetune_log.csv", result.history)
    fig = plotting.plot_finetune_history({meta["init"]: result.history}, out / "figures" / "finetune_curve.png")
    final = result.history[-1] if result.history else {}
    _write_json(out / "finetune_report.json", {**meta, "num_classes": n_cls, "final": final,
                                               "checkpoint": str(ckpt_path), "figure": str(fig)})
    print(f"finetune ({meta['init']} init, freeze_backbone={ft.freeze_backbone}): "
          f"test video accuracy {final.get('eval_video_accuracy', float('nan')):.3f} -> {ckpt_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, out, digest = _prepare(args)
    model, tcfg, ckpt = _load_classifier(args.ckpt)
    test_videos = load_split(cfg, "test")
    if not test_videos:
        raise DatasetError("test split is empty")
    report = evaluate(model, test_videos, tcfg, num_clips=cfg.finetune.num_clips)
    report.metadata.update({"config_hash": digest, "checkpoint": str(args.ckpt),
                            "freeze_backbone": ckpt.extra.get("freeze_backbone"),
                            "init": ckpt.extra.get("init")})
    _write_json(out / "eval_report.json", report.to_dict())
    print(f"eval: clip accuracy {report.clip_accuracy:.3f}  video accuracy {report.video_accuracy:.3f}")
    return EXIT_OK


def cmd_retrieve(args) -> int:
    cfg, out, digest = _prepare(args)
    ckpt = load_checkpoint(args.ckpt)
    tcfg = train_config_from_dict(ckpt.config)
    encoder = encoder_from_checkpoint(ckpt)
    gallery = load_split(cfg, "train")
    queries = load_split(cfg, "test")
    if not queries:
        raise DatasetError("no query videos in the test split")
    index = build_retrieval_index(encoder, gallery, tcfg, cfg.retrieval)
    index.save(out / "index.npy")
    report = topk_report(index, queries, cfg.retrieval.ks, encoder, tcfg, cfg.retrieval)
    report.metadata.update({"config_hash": digest, "checkpoint": str(args.ckpt), "layer": cfg.retrieval.layer})
    _write_json(out / "retrieval_report.json", report.to_dict())
    with (out / "retrieval_topk.tsv").open("w") as fh:
        fh.write("\t".join(report.topk_accuracy) + "\n")
        fh.write("\t".join(f"{100 * v:.1f}" for v in report.topk_accuracy.values()) + "\n")
    plotting.plot_topk(report.topk_accuracy, out / "figures" / "retrieval_topk.png")
    print("retrieve: " + "  ".join(f"{k} {100 * v:.1f}" for k, v in report.topk_accuracy.items()))
    return EXIT_OK


def _to_png(arr: np.ndarray, path: Path) -> None:
    Image.fromarray(arr).save(path)


def _activation_maps(encoder, clip: np.ndarray) -> np.ndarray:
    """Channel-summed conv5 activation upsampled to the clip grid, min-max scaled to uint8.

    Taken before the last pooling layer, which collapses the grid to 1x1x1 at desk scale.
    """
    with torch.no_grad():
        x = clips_to_tensor([clip])
        for block, pool in zip(encoder.blocks[:-1], encoder.pools[:-1]):
            x = pool(block(x))
        summed = encoder.blocks[-1](x).sum(dim=1, keepdim=True)
        up = F.interpolate(summed, size=clip.shape[:3], mode="trilinear", align_corners=True)[0, 0].numpy()
    lo, hi = float(up.min()), float(up.max())
    scaled = (up - lo) / (hi - lo) if hi > lo else np.zeros_like(up)
    return np.round(scaled * 255).astype(np.uint8)


def cmd_visualize_attention(args) -> int:
    cfg, out, digest = _prepare(args)
    ckpt = load_checkpoint(args.ckpt)
    tcfg = train_config_from_dict(ckpt.config)
    encoder = encoder_from_checkpoint(ckpt)
    videos = load_split(cfg, "test")
    if not 0 <= args.video_index < len(videos):
        raise UsageError(f"--video-index must be in [0, {len(videos) - 1}]")
    if args.frames < 1:
        raise UsageError("--frames must be >= 1")
    spec = tcfg.sampling
    s = args.interval if args.interval is not None else spec.intervals[0]
    if s not in spec.intervals:
        raise UsageError(f"--interval {s} is not one of the configured intervals {spec.intervals}")
    video = videos[args.video_index]
    sample = make_training_sample(video, spec, s, 0)
    sample = augment_sample(sample, tcfg.augment, np.random.default_rng(0), center=True)
    r, l = spec.recon_rate, spec.clip_len
    g = sample.ground_truth
    m = motion_attention(sample.attention_source, tcfg.attention, g.shape[:3])
    att = attention_to_uint8(m, tcfg.attention)
    act = _activation_maps(encoder, sample.input_clip)

    frames_dir = out / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    picks = sorted({int(v) for v in np.round(np.linspace(0, l - 1, min(args.frames, l)))})
    panel_f, panel_a, panel_c = [], [], []
    for u in picks:
        rgb = np.round(np.clip(sample.input_clip[u], 0, 1) * 255).astype(np.uint8)
        if rgb.shape[-1] == 1:
            rgb = rgb[..., 0]
        # input frame u sits at ground-truth position u*r, so the attention row is taken there
        a_u, c_u = att[u * r], act[u]
        _to_png(rgb, frames_dir / f"frame_{u:03d}_input.png")
        _to_png(a_u, frames_dir / f"frame_{u:03d}_attention.png")
        _to_png(c_u, frames_dir / f"frame_{u:03d}_conv5.png")
        panel_f.append(rgb)
        panel_a.append(a_u)
        panel_c.append(c_u)
    fig = plotting.attention_panel(panel_f, panel_a, panel_c, out / "figures" / "attention_overview.png")
    _write_json(out / "attention_report.json", {
        "config_hash": digest, "checkpoint": str(args.ckpt), "video_id": video.source_id,
        "interval": s, "recon_rate": r, "frames": picks,
        "attention_range": [tcfg.attention.lambda1, tcfg.attention.lambda2],
        "attention_mean": float(np.mean(np.asarray(m))), "figure": str(fig),
    })
    print(f"visualize-attention: {len(picks)} frames of {video.source_id} -> {frames_dir}")
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    cfg = resolve_config(args.config, args.profile, args.seed)
    out = _out_dir(args, cfg)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"output directory {out} is not empty (use --force)")
    spec = _synthetic_spec(cfg)
    videos = generate_synthetic_corpus(spec)
    train_idx, test_idx = split_videos(videos, cfg.data.synthetic_test_fraction, spec.seed)
    write_synthetic_dataset(spec, out / "train", force=True, indices=train_idx)
    write_synthetic_dataset(spec, out / "test", force=True, indices=test_idx)
    write_resolved_config(cfg, out)
    print(f"gen-synthetic: {len(train_idx)} train / {len(test_idx)} test videos -> {out} "
          f"(set data.train_dir / data.test_dir to use them)")
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "retrieve": cmd_retrieve,
    "visualize-attention": cmd_visualize_attention,
    "gen-synthetic": cmd_gen_synthetic,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, InputError) as err:
        print(f"prplab {args.command}: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (PRPError, RuntimeError, OSError) as err:
        print(f"prplab {args.command}: failed: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Pretext pretraining loop: batch preparation, SGD, validation, best-checkpoint selection, ablations."""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from prplab.attention import AttentionParams, motion_attention
from prplab.errors import ConfigError, DatasetError, DivergenceError
from prplab.losses import LossReport, LossWeights, discriminative_loss, generative_loss, joint_loss
from prplab.models import (
    BackboneConfig,
    Checkpoint,
    DecoderConfig,
    PRPNet,
    clips_to_tensor,
)
from prplab.sampling import (
    SamplingSpec,
    TrainingSample,
    augment_sample,
    make_training_sample,
    required_last_index,
    sample_batch,
    supported_intervals,
)
from prplab.video_data import AugmentSpec, RawVideo

log = logging.getLogger(__name__)

MODES = ("DP", "GP", "DGP")
MODE_ALIASES = {"DG-P": "DGP", "DGP": "DGP", "DP": "DP", "GP": "GP"}


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    epochs: int = 300
    batch_size: int = 16
    # < 1 is a fraction of the videos, otherwise a count
    val_count: float = 800
    val_clips_per_interval: int = 2
    seed: int = 0
    mode: str = "DGP"
    attention_enabled: bool = True
    grad_clip: Optional[float] = None
    lr_step_epochs: Optional[int] = None
    lr_gamma: float = 0.1
    loss_weights: LossWeights = field(default_factory=LossWeights)
    sampling: SamplingSpec = field(default_factory=SamplingSpec)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    attention: AttentionParams = field(default_factory=AttentionParams)
    augment: AugmentSpec = field(default_factory=AugmentSpec)

    def __post_init__(self) -> None:
        self.mode = MODE_ALIASES.get(str(self.mode).upper(), str(self.mode))
        if self.mode not in MODES:
            raise ConfigError(f"train.mode must be one of {MODES}, got {self.mode!r}")
        if not self.learning_rate >= 0:
            raise ConfigError("train.learning_rate must be >= 0")
        if self.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.val_count <= 0:
            raise ConfigError("train.val_count must be positive")
        self.sync()

    def sync(self) -> "TrainConfig":
        """Derive the dependent shapes (backbone input, decoder rate) from sampling/augment."""
        l = self.sampling.clip_len
        ch, cw = self.augment.crop_hw
        self.backbone = replace(self.backbone, input_shape=(l, ch, cw, self.backbone.input_shape[3]))
        self.decoder = replace(self.decoder, recon_rate=self.sampling.recon_rate)
        t5 = self.backbone.conv5_shape()[0]
        if t5 * 8 != l:
            raise ConfigError(
                f"sampling.clip_len={l} must equal 8 x conv5 temporal length ({t5}) "
                "so the decoder emits recon_rate * clip_len frames"
            )
        return self

    @property
    def uses_decoder(self) -> bool:
        return self.mode in ("GP", "DGP")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PreparedBatch:
    clip: torch.Tensor
    ground_truth: Optional[torch.Tensor]
    attention: Optional[torch.Tensor]
    rate_labels: torch.Tensor


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]
    model: PRPNet


def build_model(cfg: TrainConfig) -> PRPNet:
    decoder = cfg.decoder if cfg.uses_decoder else None
    return PRPNet(cfg.backbone, cfg.sampling.num_classes, decoder, target_hw=cfg.augment.crop_hw)


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay)


def prepare_batch(samples: Sequence[TrainingSample], cfg: TrainConfig,
                  need_target: bool = True) -> PreparedBatch:
    """Stack samples into tensors and compute attention on the (already cropped) source frames."""
    clip = clips_to_tensor([s.input_clip for s in samples])
    labels = torch.tensor([s.rate_class for s in samples], dtype=torch.long)
    if not need_target:
        return PreparedBatch(clip, None, None, labels)
    gt = clips_to_tensor([s.ground_truth for s in samples])
    target = tuple(gt.shape[2:])
    if cfg.attention_enabled:
        R = torch.from_numpy(np.stack([s.attention_source for s in samples]).astype(np.float32))
        att = motion_attention(R, cfg.attention, target)
    else:
        att = torch.ones((len(samples),) + target)
    return PreparedBatch(clip, gt, att, labels)


def compute_losses(model: PRPNet, batch: PreparedBatch, cfg: TrainConfig):
    """Return (objective, l_d, l_g, logits) for the configured mode."""
    out = model(batch.clip, with_decoder=cfg.uses_decoder)
    logits = out["logits"]
    l_d = discriminative_loss(logits, batch.rate_labels)
    if cfg.uses_decoder:
        l_g = generative_loss(out["recon"], batch.ground_truth, batch.attention)
    else:
        l_g = torch.zeros((), dtype=l_d.dtype)
    if cfg.mode == "DP":
        objective = l_d
    elif cfg.mode == "GP":
        objective = l_g
    else:
        objective = joint_loss(l_d, l_g, cfg.loss_weights)
    return objective, l_d, l_g, logits


def split_videos(videos: Sequence[RawVideo], val_count: float, seed: int) -> tuple[list[int], list[int]]:
    """Seeded shuffle of video indices, stratified by label when labels exist."""
    n = len(videos)
    if n == 0:
        raise DatasetError("dataset is empty")
    if n == 1:
        return [0], []
    k = int(round(val_count * n)) if val_count < 1 else int(val_count)
    k = min(max(k, 1), n - 1)
    rng = np.random.default_rng(seed)
    labels = [v.label for v in videos]
    if all(lab is not None for lab in labels):
        groups: dict[int, list[int]] = {}
        for i, lab in enumerate(labels):
            groups.setdefault(lab, []).append(i)
        for g in groups.values():
            rng.shuffle(g)
        # round-robin over classes gives a stratified prefix
        order = []
        pools = [groups[key] for key in sorted(groups)]
        depth = max(len(p) for p in pools)
        for j in range(depth):
            order.extend(p[j] for p in pools if j < len(p))
    else:
        order = list(rng.permutation(n))
    val = sorted(int(i) for i in order[:k])
    train = sorted(set(range(n)) - set(val))
    return train, val


def build_eval_samples(videos: Sequence[RawVideo], cfg: TrainConfig, seed: int,
                       clips_per_interval: Optional[int] = None) -> list[TrainingSample]:
    """Fixed, class-balanced evaluation clips (centre crop) for every supported interval of every video."""
    per = clips_per_interval or cfg.val_clips_per_interval
    rng = np.random.default_rng(seed)
    samples = []
    for vi, video in enumerate(videos):
        for s in supported_intervals(video, cfg.sampling):
            max_start = video.frame_count - 1 - required_last_index(cfg.sampling, s)
            for _ in range(per):
                start = int(rng.integers(max_start + 1))
                sample = make_training_sample(video, cfg.sampling, s, start, video_index=vi)
                samples.append(augment_sample(sample, cfg.augment, center=True))
    return samples


@torch.no_grad()
def validate(model: PRPNet, val_samples: Sequence[TrainingSample], cfg: TrainConfig,
             batch_size: Optional[int] = None) -> LossReport:
    """Eval-mode losses and rate accuracy over a fixed sample list."""
    if not val_samples:
        raise DatasetError("validation set is empty")
    was_training = model.training
    model.eval()
    bs = batch_size or max(cfg.batch_size, 32)
    totals = {"obj": 0.0, "l_d": 0.0, "l_g": 0.0, "correct": 0}
    for i in range(0, len(val_samples), bs):
        chunk = val_samples[i:i + bs]
        batch = prepare_batch(chunk, cfg, need_target=cfg.uses_decoder)
        obj, l_d, l_g, logits = compute_losses(model, batch, cfg)
        n = len(chunk)
        totals["obj"] += float(obj) * n
        totals["l_d"] += float(l_d) * n
        totals["l_g"] += float(l_g) * n
        totals["correct"] += int((logits.argmax(-1) == batch.rate_labels).sum())
    model.train(was_training)
    n = len(val_samples)
    return LossReport(l_d=totals["l_d"] / n, l_g=totals["l_g"] / n, joint=totals["obj"] / n,
                      dp_accuracy=totals["correct"] / n)


def dp_accuracy_from_logits(logits, labels) -> float:
    """Fraction of rows whose argmax equals the label (chance = 1/C)."""
    logits = torch.as_tensor(logits)
    labels = torch.as_tensor(labels)
    return float((logits.argmax(-1) == labels).float().mean())


def _state_copy(module: torch.nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def pretrain(videos: Sequence[RawVideo], cfg: TrainConfig,
             on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Run the pretext task and return the lowest-validation-loss checkpoint plus the per-epoch log."""
    if len(videos) == 0:
        raise DatasetError("dataset is empty")
    cfg.sync()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    train_idx, val_idx = split_videos(videos, cfg.val_count, cfg.seed)
    train_videos = [videos[i] for i in train_idx]
    val_videos = [videos[i] for i in val_idx] or train_videos
    val_samples = build_eval_samples(val_videos, cfg, seed=cfg.seed + 1)
    if not val_samples:
        raise DatasetError("no validation clip fits the sampling configuration")

    model = build_model(cfg)
    optimizer = make_optimizer(model, cfg)
    scheduler = None
    if cfg.lr_step_epochs:
        scheduler = torch.optim.lr_scheduler.StepLR(optimizer, cfg.lr_step_epochs, cfg.lr_gamma)
    steps = max(1, len(train_videos) // cfg.batch_size)

    best_state = _state_copy(model)
    best_opt = copy.deepcopy(optimizer.state_dict())
    best_loss, best_epoch = math.inf, 0
    history: list[dict] = []
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        t0 = time.perf_counter()
        run_obj = run_correct = run_n = 0.0
        for step in range(steps):
            samples = sample_batch(train_videos, cfg.sampling, cfg.batch_size, rng)
            samples = [augment_sample(s, cfg.augment, rng) for s in samples]
            batch = prepare_batch(samples, cfg, need_target=cfg.uses_decoder)
            obj, l_d, l_g, logits = compute_losses(model, batch, cfg)
            if not torch.isfinite(obj):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} step {step}: l_d={float(l_d.detach())} l_g={float(l_g.detach())}"
                )
            optimizer.zero_grad(set_to_none=True)
            obj.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            n = len(samples)
            run_obj += float(obj.detach()) * n
            run_correct += int((logits.detach().argmax(-1) == batch.rate_labels).sum())
            run_n += n
        if scheduler is not None:
            scheduler.step()
        report = validate(model, val_samples, cfg)
        entry = {
            "epoch": epoch,
            "train_loss": run_obj / run_n,
            "val_loss": report.joint,
            "dp_accuracy": report.dp_accuracy,
            "train_dp_accuracy": run_correct / run_n,
            "val_l_d": report.l_d,
            "val_l_g": report.l_g,
            "seconds": round(time.perf_counter() - t0, 3),
        }
        history.append(entry)
        log.info("epoch %d train %.4f val %.4f acc %.3f", epoch, entry["train_loss"],
                 entry["val_loss"], entry["dp_accuracy"])
        if on_epoch is not None:
            on_epoch(entry)
        if report.joint < best_loss:
            best_loss, best_epoch = report.joint, epoch
            best_state = _state_copy(model)
            best_opt = copy.deepcopy(optimizer.state_dict())

    model.load_state_dict(best_state)
    model.eval()
    ckpt = Checkpoint(
        kind="pretrain",
        config=_jsonable(cfg.to_dict()),
        model_state=best_state,
        optimizer_state=best_opt,
        epoch=best_epoch,
        val_loss=best_loss,
        extra={"train_videos": [videos[i].source_id for i in train_idx],
               "val_videos": [videos[i].source_id for i in val_idx]},
    )
    return TrainResult(ckpt, history, model)


def _jsonable(obj):
    return json.loads(json.dumps(obj))


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[PRPNet, TrainConfig]:
    from prplab.config import train_config_from_dict

    cfg = train_config_from_dict(ckpt.config)
    model = build_model(cfg)
    model.load_state_dict(ckpt.model_state)
    model.eval()
    return model, cfg


# --------------------------------------------------------------------------
# Ablation grid
# --------------------------------------------------------------------------

# (mode, intervals, recon rate, motion attention) -> UCF101 accuracy reported for the full-scale run
REFERENCE_ACCURACY = {
    ("random", None, None, None): 62.0,
    ("DP", (1, 2), None, None): 68.3,
    ("DP", (1, 2, 4), None, None): 68.7,
    ("DP", (1, 2, 4, 8), None, None): 69.9,
    ("DP", (1, 2, 4, 8, 16), None, None): 67.9,
    ("GP", (1, 2, 4, 8), 1, False): 67.1,
    ("GP", (1, 2, 4, 8), 1, True): 68.1,
    ("GP", (1, 2, 4, 8), 2, True): 68.2,
    ("GP", (1, 2, 4, 8), 4, True): 68.4,
    ("DGP", (1, 2, 4, 8), 2, True): 70.9,
}


@dataclass
class AblationCell:
    mode: str
    intervals: tuple[int, ...] = (1, 2, 4, 8)
    recon_rate: Optional[int] = 2
    attention_enabled: bool = True

    def reference_key(self):
        if self.mode == "random":
            return ("random", None, None, None)
        if self.mode == "DP":
            return ("DP", tuple(self.intervals), None, None)
        return (self.mode, tuple(self.intervals), self.recon_rate, bool(self.attention_enabled))

    def method_label(self) -> str:
        return {"DGP": "DG-P"}.get(self.mode, self.mode)


def cell_config(base: TrainConfig, cell: AblationCell) -> TrainConfig:
    mode = cell.mode if cell.mode != "random" else base.mode
    sampling = SamplingSpec(
        intervals=tuple(cell.intervals),
        clip_len=base.sampling.clip_len,
        recon_rate=cell.recon_rate if cell.recon_rate is not None else base.sampling.recon_rate,
        attention_source=base.sampling.attention_source,
    )
    return replace(base, mode=mode, sampling=sampling, attention_enabled=cell.attention_enabled)


def run_ablation_grid(videos: Sequence[RawVideo], base_cfg: TrainConfig, grid: Sequence[AblationCell],
                      downstream: Optional[Callable[[Optional[Checkpoint], int], float]] = None) -> list[dict]:
    """Pretrain each cell and score it downstream; every cell is validated before any training."""
    if not grid:
        raise ConfigError("ablation grid is empty")
    cells = [c if isinstance(c, AblationCell) else AblationCell(*c) for c in grid]
    configs = [cell_config(base_cfg, c) for c in cells]
    rows = []
    for cell, cfg in zip(cells, configs):
        ckpt = None
        if cell.mode != "random":
            ckpt = pretrain(videos, cfg).checkpoint
        acc = downstream(ckpt, cfg.seed) if downstream is not None else float("nan")
        rows.append({
            "method": cell.method_label(),
            "sampling_interval": "{" + ",".join(str(s) for s in cell.intervals) + "}" if cell.mode != "random" else "-",
            "reconstructing_rate": "-" if cell.mode in ("DP", "random") else
            f"{cell.recon_rate} ({'w/' if cell.attention_enabled else 'w/o'} MA)",
            "downstream_accuracy": acc,
            "pretrain_val_loss": ckpt.val_loss if ckpt is not None else float("nan"),
            "reference_ucf101": REFERENCE_ACCURACY.get(cell.reference_key(), float("nan")),
        })
    return rows

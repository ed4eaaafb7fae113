"""Transfer evaluation: action-recognition fine-tuning, 10-clip testing and nearest-neighbour retrieval."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from prplab.errors import ConfigError, DatasetError, InputError
from prplab.losses import softmax
from prplab.models import ActionClassifier, BackboneConfig, Checkpoint, Encoder, clips_to_tensor
from prplab.training import TrainConfig
from prplab.video_data import RawVideo, apply_crop, center_crop_params, sample_crop

log = logging.getLogger(__name__)

TOPK_COLUMNS = (1, 5, 10, 20, 50)
INDEX_FORMAT = "prp-index-v1"
LAYERS = ("conv1", "conv2", "conv3", "conv4", "conv5")


@dataclass
class FinetuneConfig:
    epochs: int = 150
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 16
    freeze_backbone: bool = False
    dropout: float = 0.0
    num_clips: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0:
            raise ConfigError("finetune: epochs >= 0, batch_size >= 1, learning_rate >= 0 required")
        if self.num_clips < 1:
            raise ConfigError("finetune.num_clips must be >= 1")


@dataclass
class RetrievalConfig:
    ks: tuple[int, ...] = TOPK_COLUMNS
    num_clips: int = 10
    layer: str = "conv5"

    def __post_init__(self) -> None:
        self.ks = tuple(int(k) for k in self.ks)
        if not self.ks or min(self.ks) < 1:
            raise ConfigError("retrieval.ks must be positive integers")
        if self.layer not in LAYERS:
            raise ConfigError(f"retrieval.layer must be one of {LAYERS}")


@dataclass
class EvalReport:
    clip_accuracy: float = float("nan")
    video_accuracy: float = float("nan")
    topk_accuracy: dict[str, float] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FinetuneResult:
    model: ActionClassifier
    history: list[dict]

    def epochs_to_reach(self, threshold: float, key: str = "eval_video_accuracy") -> float:
        for entry in self.history:
            if entry.get(key, float("nan")) >= threshold:
                return entry["epoch"]
        return float("inf")


# --------------------------------------------------------------------------
# Clip handling
# --------------------------------------------------------------------------

def loop_pad(video: RawVideo, length: int) -> np.ndarray:
    """Frames of the video repeated cyclically until at least ``length`` frames exist."""
    frames = video.frames
    if frames.shape[0] >= length:
        return frames
    reps = -(-length // frames.shape[0])
    return np.concatenate([frames] * reps, axis=0)


def clip_starts(frame_count: int, clip_len: int, num_clips: int = 10) -> list[int]:
    """Uniformly spaced start positions over [0, frame_count - clip_len]."""
    last = max(frame_count - clip_len, 0)
    return [int(v) for v in np.round(np.linspace(0, last, num_clips))]


def eval_clips(video: RawVideo, cfg: TrainConfig, num_clips: int = 10) -> torch.Tensor:
    """``num_clips`` centre-cropped s=1 clips as a (num_clips, C, l, H, W) tensor."""
    l = cfg.sampling.clip_len
    frames = loop_pad(video, l)
    params = center_crop_params(cfg.augment)
    clips = [apply_crop(frames[s:s + l], cfg.augment, params) for s in clip_starts(len(frames), l, num_clips)]
    return clips_to_tensor(clips)


# --------------------------------------------------------------------------
# Fine-tuning and recognition
# --------------------------------------------------------------------------

def _config_diff(a: BackboneConfig, b: BackboneConfig) -> list[str]:
    da, db = asdict(a), asdict(b)
    return [f"backbone.{k}: checkpoint={da[k]!r} run={db[k]!r}" for k in da if da[k] != db[k]]


def check_compatible(ckpt: Checkpoint, cfg: TrainConfig) -> None:
    diff = _config_diff(ckpt.backbone_config(), cfg.backbone)
    if diff:
        raise ConfigError("checkpoint incompatible with run config:\n  " + "\n  ".join(diff))


def parameter_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def build_classifier(ckpt: Optional[Checkpoint], cfg: TrainConfig, num_classes: int,
                     ft: FinetuneConfig) -> ActionClassifier:
    torch.manual_seed(ft.seed)
    model = ActionClassifier(cfg.backbone, num_classes, dropout=ft.dropout)
    if ckpt is not None:
        check_compatible(ckpt, cfg)
        model.encoder.load_state_dict(ckpt.encoder_state())
    return model


def _num_classes(videos: Sequence[RawVideo], num_classes: Optional[int]) -> int:
    labels = [v.label for v in videos]
    if any(lab is None for lab in labels):
        raise DatasetError("fine-tuning needs labelled videos")
    needed = max(labels) + 1
    if num_classes is None:
        return needed
    if num_classes < needed:
        raise ConfigError(f"head configured for {num_classes} classes but labels reach {needed - 1}")
    return num_classes


def finetune(ckpt: Optional[Checkpoint], videos: Sequence[RawVideo], cfg: TrainConfig,
             ft: Optional[FinetuneConfig] = None, num_classes: Optional[int] = None,
             eval_videos: Optional[Sequence[RawVideo]] = None) -> FinetuneResult:
    """Train an action classifier whose encoder starts from ``ckpt`` (random init when None)."""
    ft = ft or FinetuneConfig()
    if not videos:
        raise DatasetError("no training videos for fine-tuning")
    n_cls = _num_classes(videos, num_classes)
    model = build_classifier(ckpt, cfg, n_cls, ft)
    if ft.freeze_backbone:
        for p in model.encoder.parameters():
            p.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=ft.learning_rate, momentum=ft.momentum, weight_decay=ft.weight_decay)
    rng = np.random.default_rng(ft.seed)
    l = cfg.sampling.clip_len
    history = []
    for epoch in range(1, ft.epochs + 1):
        model.train()
        if ft.freeze_backbone:
            model.encoder.eval()
        order = rng.permutation(len(videos))
        total, correct, seen = 0.0, 0, 0
        for i in range(0, len(order), ft.batch_size):
            idx = order[i:i + ft.batch_size]
            clips, labels = [], []
            for j in idx:
                frames = loop_pad(videos[j], l)
                start = int(rng.integers(len(frames) - l + 1))
                clips.append(apply_crop(frames[start:start + l], cfg.augment, sample_crop(cfg.augment, rng)))
                labels.append(videos[j].label)
            x = clips_to_tensor(clips)
            y = torch.tensor(labels, dtype=torch.long)
            logits = model(x)
            loss = F.cross_entropy(logits, y)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            correct += int((logits.argmax(-1) == y).sum())
            seen += len(idx)
        entry = {"epoch": epoch, "train_loss": total / seen, "train_accuracy": correct / seen}
        if eval_videos:
            rep = evaluate(model, eval_videos, cfg, num_clips=ft.num_clips)
            entry["eval_clip_accuracy"] = rep.clip_accuracy
            entry["eval_video_accuracy"] = rep.video_accuracy
        history.append(entry)
        log.debug("finetune epoch %d %s", epoch, entry)
    model.eval()
    return FinetuneResult(model, history)


@torch.no_grad()
def video_probabilities(model: ActionClassifier, video: RawVideo, cfg: TrainConfig,
                        num_clips: int = 10) -> np.ndarray:
    """Per-clip softmax probabilities, shape (num_clips, num_classes)."""
    model.eval()
    return softmax(model(eval_clips(video, cfg, num_clips))).numpy()


def average_prediction(clip_probs) -> int:
    """Average the clip probabilities (not logits) and take the argmax."""
    return int(np.argmax(np.mean(np.asarray(clip_probs), axis=0)))


def evaluate_10clip(model: ActionClassifier, video: RawVideo, cfg: TrainConfig, num_clips: int = 10) -> int:
    return average_prediction(video_probabilities(model, video, cfg, num_clips))


def evaluate(model: ActionClassifier, videos: Sequence[RawVideo], cfg: TrainConfig,
             num_clips: int = 10) -> EvalReport:
    if not videos:
        raise DatasetError("no test videos")
    clip_hits = video_hits = n_clips = 0
    for video in videos:
        probs = video_probabilities(model, video, cfg, num_clips)
        clip_hits += int((probs.argmax(-1) == video.label).sum())
        n_clips += probs.shape[0]
        video_hits += int(average_prediction(probs) == video.label)
    return EvalReport(clip_accuracy=clip_hits / n_clips, video_accuracy=video_hits / len(videos),
                      metadata={"num_videos": len(videos), "num_clips": num_clips})


# --------------------------------------------------------------------------
# Retrieval
# --------------------------------------------------------------------------

@dataclass
class RetrievalIndex:
    video_ids: list[str]
    labels: list[Optional[int]]
    features: np.ndarray
    config: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != len(self.video_ids):
            raise InputError("features must be (n_entries, feature_dim)")
        if len(set(self.video_ids)) != len(self.video_ids):
            raise InputError("video ids in a retrieval index must be unique")
        if len(self.labels) != len(self.video_ids):
            raise InputError("one label per entry required")

    def __len__(self) -> int:
        return len(self.video_ids)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def save(self, path) -> Path:
        """Write ``<path>.npy`` (feature blob) and ``<path>.json`` (sidecar)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        blob = path.with_suffix(".npy")
        np.save(blob, self.features)
        row_bytes = self.feature_dim * self.features.itemsize
        sidecar = {
            "format": INDEX_FORMAT,
            "feature_dim": self.feature_dim,
            "dtype": str(self.features.dtype),
            "blob": blob.name,
            "config": self.config,
            "entries": [
                {"video_id": vid, "label": lab, "row": i, "byte_offset": i * row_bytes}
                for i, (vid, lab) in enumerate(zip(self.video_ids, self.labels))
            ],
        }
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))
        return path.with_suffix(".json")

    @classmethod
    def load(cls, path) -> "RetrievalIndex":
        path = Path(path).with_suffix(".json")
        if not path.is_file():
            raise InputError(f"index sidecar not found: {path}")
        meta = json.loads(path.read_text())
        if meta.get("format") != INDEX_FORMAT:
            raise InputError(f"{path} is not a {INDEX_FORMAT} sidecar")
        feats = np.load(path.parent / meta["blob"])
        entries = sorted(meta["entries"], key=lambda e: e["row"])
        return cls([e["video_id"] for e in entries], [e["label"] for e in entries],
                   feats[[e["row"] for e in entries]], meta.get("config", {}))


@torch.no_grad()
def layer_features(encoder: Encoder, clips: torch.Tensor, layer: str = "conv5") -> torch.Tensor:
    """Global-average-pooled activations of the requested block, shape (B, channels)."""
    stop = LAYERS.index(layer)
    x = clips
    for i, (block, pool) in enumerate(zip(encoder.blocks, encoder.pools)):
        x = block(x)
        if i == stop:
            break
        x = pool(x)
    return x.mean(dim=(2, 3, 4))


@torch.no_grad()
def video_descriptor(encoder: Encoder, video: RawVideo, cfg: TrainConfig,
                     rcfg: Optional[RetrievalConfig] = None) -> np.ndarray:
    """Mean of per-clip features over the 10-clip protocol, L2-normalised."""
    rcfg = rcfg or RetrievalConfig()
    encoder.eval()
    feats = layer_features(encoder, eval_clips(video, cfg, rcfg.num_clips), rcfg.layer)
    vec = feats.mean(dim=0).double().numpy()
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


def encoder_from_checkpoint(ckpt: Checkpoint, cfg: Optional[TrainConfig] = None) -> Encoder:
    backbone = ckpt.backbone_config()
    if cfg is not None:
        check_compatible(ckpt, cfg)
    encoder = Encoder(backbone)
    encoder.load_state_dict(ckpt.encoder_state())
    encoder.eval()
    return encoder


def build_retrieval_index(encoder: Encoder, videos: Sequence[RawVideo], cfg: TrainConfig,
                          rcfg: Optional[RetrievalConfig] = None) -> RetrievalIndex:
    rcfg = rcfg or RetrievalConfig()
    if not videos:
        raise DatasetError("cannot index an empty video set")
    feats = np.stack([video_descriptor(encoder, v, cfg, rcfg) for v in videos])
    ids = [v.source_id or f"video_{i:05d}" for i, v in enumerate(videos)]
    snapshot = {"layer": rcfg.layer, "num_clips": rcfg.num_clips, "pooling": "global_average",
                "clip_aggregate": "mean", "normalize": "l2", "metric": "cosine",
                "clip_len": cfg.sampling.clip_len, "crop_hw": list(cfg.augment.crop_hw),
                "resize_hw": list(cfg.augment.resize_hw), "backbone": asdict(cfg.backbone)}
    return RetrievalIndex(ids, [v.label for v in videos], feats, snapshot)


@dataclass
class RetrievalResult:
    ranked_ids: list[str]
    ranked_labels: list[Optional[int]]
    similarities: np.ndarray
    hits: dict[int, bool]


def rank_entries(index: RetrievalIndex, query_vec) -> tuple[np.ndarray, np.ndarray]:
    """Entry order by descending cosine similarity, ties broken by ascending video id."""
    q = np.asarray(query_vec, dtype=np.float64)
    qn = np.linalg.norm(q)
    feats = index.features
    norms = np.linalg.norm(feats, axis=1)
    sims = feats @ q / np.where(norms * qn > 0, norms * qn, 1.0)
    id_rank = np.argsort(np.argsort(np.array(index.video_ids, dtype=object)))
    return np.lexsort((id_rank, -sims)), sims


def retrieve_topk(index: RetrievalIndex, query, ks=TOPK_COLUMNS, encoder: Optional[Encoder] = None,
                  cfg: Optional[TrainConfig] = None, query_label: Optional[int] = None,
                  rcfg: Optional[RetrievalConfig] = None) -> RetrievalResult:
    """Rank the index for one query (a RawVideo featurised like the index, or a feature vector)."""
    if len(index) == 0:
        raise InputError("retrieval index is empty")
    ks = tuple(int(k) for k in ks)
    if max(ks) > len(index):
        raise InputError(f"k={max(ks)} exceeds index size {len(index)}")
    if isinstance(query, RawVideo):
        if encoder is None or cfg is None:
            raise InputError("featurising a query video needs the encoder and run config")
        query_label = query.label if query_label is None else query_label
        query = video_descriptor(encoder, query, cfg, rcfg)
    order, sims = rank_entries(index, query)
    ranked_labels = [index.labels[i] for i in order]
    hits = {k: query_label is not None and query_label in ranked_labels[:k] for k in ks}
    return RetrievalResult([index.video_ids[i] for i in order], ranked_labels, sims[order], hits)


def topk_report(index: RetrievalIndex, queries, ks=TOPK_COLUMNS, encoder: Optional[Encoder] = None,
                cfg: Optional[TrainConfig] = None, rcfg: Optional[RetrievalConfig] = None,
                labels: Optional[Sequence[int]] = None) -> EvalReport:
    """Top-k accuracy over queries; columns ordered top1, top5, top10, top20, top50."""
    ks = tuple(sorted(int(k) for k in ks))
    usable = tuple(k for k in ks if k <= len(index))
    if not usable:
        raise InputError(f"every k in {ks} exceeds index size {len(index)}")
    counts = dict.fromkeys(usable, 0)
    n = 0
    for qi, q in enumerate(queries):
        lab = labels[qi] if labels is not None else None
        res = retrieve_topk(index, q, usable, encoder, cfg, query_label=lab, rcfg=rcfg)
        for k in usable:
            counts[k] += int(res.hits[k])
        n += 1
    if n == 0:
        raise DatasetError("no retrieval queries")
    return EvalReport(topk_accuracy={f"top{k}": counts[k] / n for k in usable},
                      metadata={"num_queries": n, "index_size": len(index),
                                "skipped_ks": [k for k in ks if k not in usable]})

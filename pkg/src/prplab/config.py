"""Run configuration files: profiles, strict loading and the resolved-config echo."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from prplab.downstream import FinetuneConfig, RetrievalConfig
from prplab.errors import ConfigError, PRPError
from prplab.training import TrainConfig
from prplab.video_data import SyntheticSpec

PROFILES = ("paper", "desk")


@dataclass
class DataConfig:
    train_dir: Optional[str] = None
    test_dir: Optional[str] = None
    synthetic: Optional[SyntheticSpec] = None
    # fraction of the synthetic corpus held out as the test split
    synthetic_test_fraction: float = 0.25


@dataclass
class RunConfig:
    profile: str = "paper"
    seed: int = 0
    output_dir: str = "runs/prp"
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self), default=_default))


def _default(obj):
    if dataclasses.is_dataclass(obj):
        return asdict(obj)
    raise TypeError(f"not serialisable: {obj!r}")


DESK_PROFILE: dict[str, Any] = {
    "profile": "desk",
    "output_dir": "runs/desk",
    "data": {
        "synthetic": {"num_videos": 64, "frame_count": 64, "height": 36, "width": 36,
                      "noise_std": 0.02, "pattern_size": 9, "seed": 0},
    },
    "train": {
        "learning_rate": 0.05,
        "epochs": 30,
        "batch_size": 16,
        "val_count": 0.25,
        "val_clips_per_interval": 2,
        "sampling": {"intervals": [1, 2, 4, 8], "clip_len": 8, "recon_rate": 2},
        "backbone": {"block_channels": [8, 16, 32, 32, 32]},
        "decoder": {"block_channels": [32, 16, 8, 3]},
        "attention": {"pool_kernel": [15, 8, 8], "pool_stride": [16, 2, 2]},
        "augment": {"resize_hw": [36, 36], "crop_hw": [32, 32], "flip": False},
    },
    "finetune": {"epochs": 20, "learning_rate": 0.01, "batch_size": 16, "num_clips": 10},
}


def profile_defaults(profile: str) -> dict:
    if profile == "paper":
        return {"profile": "paper"}
    if profile == "desk":
        return copy.deepcopy(DESK_PROFILE)
    raise ConfigError(f"unknown profile {profile!r}; choose from {PROFILES}")


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _unwrap_optional(tp):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0]
    return tp


def from_dict(cls, data: Optional[dict], path: str = ""):
    """Build dataclass ``cls`` from a mapping, rejecting keys it does not declare."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in names:
            raise ConfigError(f"unknown config key '{where}'")
        tp = _unwrap_optional(hints[key])
        if dataclasses.is_dataclass(tp) and value is not None:
            kwargs[key] = from_dict(tp, value, where)
        elif typing.get_origin(tp) is tuple and isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except PRPError as err:
        raise ConfigError(f"{path or 'config'}: {err}") from err
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{path or 'config'}: {err}") from err


def train_config_from_dict(data: dict) -> TrainConfig:
    return from_dict(TrainConfig, data, "train")


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as err:
        raise ConfigError(f"cannot parse {path}: {err}") from err
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def resolve_config(path=None, profile: Optional[str] = None, seed: Optional[int] = None,
                   overrides: Optional[dict] = None) -> RunConfig:
    """Profile defaults, then the config file, then explicit overrides (CLI flags)."""
    file_data = read_config_file(path) if path else {}
    chosen = profile or file_data.get("profile") or "paper"
    merged = deep_merge(profile_defaults(chosen), file_data)
    merged["profile"] = chosen
    if overrides:
        merged = deep_merge(merged, overrides)
    if seed is not None:
        merged["seed"] = seed
    run_seed = merged.get("seed", 0)
    for section in ("train", "finetune"):
        # non-mapping sections are left for from_dict to reject with a proper message
        if isinstance(merged.setdefault(section, {}), dict):
            merged[section].setdefault("seed", run_seed)
    return from_dict(RunConfig, merged)


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def write_resolved_config(cfg: RunConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved_config.yaml"
    # the hash rides in a comment so the file can be fed back as --config
    body = yaml.safe_dump(cfg.to_dict(), sort_keys=False)
    path.write_text(f"# config_hash: {config_hash(cfg)}\n{body}")
    return path

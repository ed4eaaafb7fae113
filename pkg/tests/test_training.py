from dataclasses import replace

import numpy as np
import pytest
import torch

from prplab.config import resolve_config
from prplab.errors import ConfigError, DatasetError, DivergenceError
from prplab.training import (
    REFERENCE_ACCURACY,
    AblationCell,
    TrainConfig,
    build_model,
    make_optimizer,
    model_from_checkpoint,
    pretrain,
    run_ablation_grid,
    split_videos,
)
from prplab.video_data import RawVideo, SyntheticSpec, generate_synthetic_corpus


@pytest.fixture(scope="module")
def desk():
    return resolve_config(profile="desk").train


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic_corpus(SyntheticSpec(num_videos=16, seed=3))


def test_mode_aliases_and_validation():
    assert TrainConfig(mode="dg-p").mode == "DGP"
    with pytest.raises(ConfigError):
        TrainConfig(mode="XP")
    with pytest.raises(ConfigError):
        TrainConfig(sampling=replace(TrainConfig().sampling, clip_len=12))


def test_sync_derives_shapes(desk):
    assert desk.backbone.input_shape == (8, 32, 32, 3)
    assert desk.decoder.recon_rate == desk.sampling.recon_rate


def test_weight_decay_shrinks_parameters(desk):
    cfg = replace(desk, momentum=0.0, weight_decay=0.01, learning_rate=0.1)
    model = build_model(cfg)
    opt = make_optimizer(model, cfg)
    before = [p.detach().clone() for p in model.parameters()]
    for p in model.parameters():
        p.grad = torch.zeros_like(p)
    opt.step()
    for b, p in zip(before, model.parameters()):
        torch.testing.assert_close(p.detach(), b * (1 - 0.1 * 0.01))


def test_split_is_stratified_and_seeded(corpus):
    train, val = split_videos(corpus, 0.25, 0)
    assert len(val) == 4 and not set(train) & set(val)
    assert len({corpus[i].label for i in val}) == 4
    assert split_videos(corpus, 0.25, 0) == (train, val)
    assert split_videos(corpus, 3, 0)[1].__len__() == 3
    with pytest.raises(DatasetError):
        split_videos([], 0.2, 0)


def test_pretrain_keeps_best_epoch(desk, corpus):
    res = pretrain(corpus, replace(desk, epochs=3))
    losses = [e["val_loss"] for e in res.log]
    assert res.checkpoint.epoch == int(np.argmin(losses)) + 1
    assert res.checkpoint.val_loss == pytest.approx(min(losses))
    assert set(res.log[0]) >= {"epoch", "train_loss", "val_loss", "dp_accuracy"}
    model, cfg = model_from_checkpoint(res.checkpoint)
    assert cfg.mode == "DGP"
    for k, v in model.state_dict().items():
        assert torch.equal(v, res.checkpoint.model_state[k])


@pytest.mark.parametrize("mode", ["DP", "GP"])
def test_single_objective_modes_run(desk, corpus, mode):
    res = pretrain(corpus, replace(desk, epochs=1, mode=mode))
    entry = res.log[0]
    if mode == "DP":
        assert entry["val_l_g"] == 0.0
    assert np.isfinite(entry["val_loss"])


def test_divergence_raises(desk, corpus):
    bad = [RawVideo(np.full_like(v.frames, np.nan), v.source_id, v.label) for v in corpus]
    with pytest.raises(DivergenceError):
        pretrain(bad, replace(desk, epochs=1))


def test_empty_dataset(desk):
    with pytest.raises(DatasetError):
        pretrain([], desk)


def test_ablation_grid_rows(desk, corpus):
    grid = [AblationCell("random"), AblationCell("DP", (1, 2)), AblationCell("GP", (1, 2, 4, 8), 1, False)]
    rows = run_ablation_grid(corpus, replace(desk, epochs=1), grid, downstream=lambda ckpt, seed: 0.5)
    assert [r["method"] for r in rows] == ["random", "DP", "GP"]
    assert rows[2]["reconstructing_rate"] == "1 (w/o MA)"
    assert rows[1]["reference_ucf101"] == REFERENCE_ACCURACY[("DP", (1, 2), None, None)]
    assert all(r["downstream_accuracy"] == 0.5 for r in rows)


def test_ablation_grid_validates_before_training(desk, corpus):
    with pytest.raises(ConfigError):
        run_ablation_grid(corpus, desk, [AblationCell("DP", (1, 2)), AblationCell("GP", (1, 3))])

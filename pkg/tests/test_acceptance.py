"""Acceptance criteria 1-10. Each test records a one-line measurement shown in the terminal summary."""
from __future__ import annotations

import math
import time
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
import torch
import torch.nn.functional as F

import oracles
from prplab.attention import AttentionParams, motion_attention, pool3d_average
from prplab.config import resolve_config
from prplab.downstream import (
    TOPK_COLUMNS,
    FinetuneConfig,
    RetrievalIndex,
    finetune,
    retrieve_topk,
    topk_report,
)
from prplab.errors import InputError
from prplab.losses import LossWeights, discriminative_loss, generative_loss, joint_loss
from prplab.models import VARIANTS, BackboneConfig, DecoderConfig, PRPNet, clips_to_tensor, decode, encode
from prplab.sampling import SamplingSpec, dilated_sample, extract_clip, make_training_sample, required_last_index
from prplab.training import (
    TrainConfig,
    build_eval_samples,
    build_model,
    compute_losses,
    prepare_batch,
    pretrain,
    split_videos,
    validate,
)
from prplab.video_data import (
    RawVideo,
    SyntheticSpec,
    generate_synthetic_corpus,
    generate_synthetic_video,
    pattern_mask,
    synthetic_layout,
)

pytestmark = pytest.mark.acceptance

INTERVALS = (1, 2, 4, 8)
RATES = (1, 2, 4)


def desk_train_config(**overrides) -> TrainConfig:
    cfg = resolve_config(profile="desk").train
    return replace(cfg, **overrides) if overrides else cfg


# --------------------------------------------------------------------------
# 1. sampling oracle
# --------------------------------------------------------------------------

def test_criterion_01_sampling_matches_index_enumeration(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    checked = 0
    for l in (4, 8):
        for T in range(1, 65):
            frames = rng.random((T, 2, 2, 3), dtype=np.float32)
            video = RawVideo(frames)
            for s in INTERVALS:
                vs_idx = oracles.dilated_indices(T, s)
                if not vs_idx:
                    with pytest.raises(InputError):
                        dilated_sample(video, s)
                    continue
                vs = dilated_sample(video, s)
                assert np.array_equal(vs.frames, frames[vs_idx])
                for start in range(len(vs_idx) - l + 1):
                    clip = extract_clip(vs, start, l)
                    assert np.array_equal(clip, frames[oracles.clip_indices(T, s, start, l)])
                    checked += 1
                with pytest.raises(InputError):
                    extract_clip(vs, max(len(vs_idx) - l + 1, 0), l)
                for r in RATES:
                    spec = SamplingSpec(intervals=(s,), clip_len=l, recon_rate=r, attention_source="raw_window")
                    starts = oracles.valid_starts(T, s, l)
                    for start in starts:
                        smp = make_training_sample(video, spec, s, start)
                        assert np.array_equal(smp.input_clip, frames[[start + s * i for i in range(l)]])
                        assert np.array_equal(smp.ground_truth, oracles.gt_frames(frames, start, s, r, l))
                        raw = [min(start + k, T - 1) for k in range(s * l)]
                        assert np.array_equal(smp.attention_source, frames[raw])
                        assert smp.rate_class == 0 and smp.interval == s
                        checked += 1
                    bad = starts[-1] + 1 if starts else 0
                    with pytest.raises(InputError):
                        make_training_sample(video, spec, s, bad)
    elapsed = time.perf_counter() - t0
    verdict(f"{checked} windows exact, {elapsed:.1f}s")
    assert elapsed < 60


# --------------------------------------------------------------------------
# 2. ground-truth alignment
# --------------------------------------------------------------------------

def test_criterion_02_ground_truth_alignment(verdict):
    rng = np.random.default_rng(2)
    frames = rng.random((64, 4, 4, 3), dtype=np.float32)
    video = RawVideo(frames)
    l = 8
    worst = 0.0
    n_interp = 0
    for s in INTERVALS:
        for r in RATES:
            spec = SamplingSpec(intervals=(s,), clip_len=l, recon_rate=r)
            for start in oracles.valid_starts(64, s, l):
                smp = make_training_sample(video, spec, s, start)
                G = smp.ground_truth
                for u in range(l):
                    if r <= s:
                        assert np.array_equal(G[u * r], smp.input_clip[u])
                if r > s:
                    for k in range(r * l):
                        pos = start + Fraction(s * k, r)
                        if pos.denominator == 1 or math.ceil(pos) > 63:
                            continue
                        lo = math.floor(pos)
                        w = float(pos - lo)
                        expect = (1 - w) * frames[lo].astype(np.float64) + w * frames[lo + 1].astype(np.float64)
                        worst = max(worst, float(np.abs(G[k] - expect).max()))
                        n_interp += 1
    verdict(f"aligned frames bit-exact; {n_interp} interpolated frames, max err {worst:.2e}")
    assert n_interp > 0
    assert worst <= 1e-6


# --------------------------------------------------------------------------
# 3. attention contract
# --------------------------------------------------------------------------

def _swept_mask(spec: SyntheticSpec, index: int, first: int, last: int) -> np.ndarray:
    lay = synthetic_layout(spec, index)
    mask = np.zeros((spec.height, spec.width), dtype=bool)
    for t in range(first, last + 1):
        mask |= pattern_mask(spec, lay["shape"], lay["origin"], t, lay["motion"].velocity)
    return mask


def test_criterion_03_attention_contract(verdict):
    paper = AttentionParams()
    # pooling size case, compared against the loop oracle
    D = np.random.default_rng(3).random((15, 112, 112))
    P = pool3d_average(D, paper.pool_kernel, paper.pool_stride).numpy()
    assert P.shape == (1, 13, 13)
    np.testing.assert_allclose(P, oracles.avg_pool3d(D, paper.pool_kernel, paper.pool_stride), rtol=0, atol=1e-12)

    # range over 1000 random clips of mixed content and size
    desk = desk_train_config().attention
    rng = np.random.default_rng(30)
    lo, hi = math.inf, -math.inf
    for i in range(1000):
        params, shape = (paper, (16, 112, 112, 3)) if i % 4 == 0 else (desk, (16, 32, 32, 3))
        kind = i % 3
        if kind == 0:
            R = rng.random(shape, dtype=np.float32)
        elif kind == 1:
            R = np.zeros(shape, dtype=np.float32)
            y, x = rng.integers(shape[1] - 6), rng.integers(shape[2] - 6)
            for t in range(shape[0]):
                R[t, y:y + 6, (x + t) % (shape[2] - 6):(x + t) % (shape[2] - 6) + 6] = 1.0
        else:
            R = (rng.random(shape) * rng.random() * 1e-3).astype(np.float32)
        M = motion_attention(R, params, shape[:3]).numpy()
        lo, hi = min(lo, float(M.min())), max(hi, float(M.max()))
    assert lo >= 0.8 - 1e-6 and hi <= 2.0 + 1e-6

    # static clips give exactly 1 everywhere
    for params, shape in ((paper, (16, 112, 112, 3)), (desk, (16, 32, 32, 3))):
        frame = rng.random(shape[1:], dtype=np.float32)
        R = np.repeat(frame[None], shape[0], axis=0)
        assert np.all(motion_attention(R, params, shape[:3]).numpy() == 1.0)

    # swept region beats background on the moving-pattern corpus
    spec = SyntheticSpec(num_videos=200, seed=33)
    sampling = desk_train_config().sampling
    wins = total = 0
    for vi in range(spec.num_videos):
        video_rng = np.random.default_rng(vi)
        video = generate_synthetic_video(spec, vi)
        s = int(video_rng.choice(sampling.intervals))
        start = int(video_rng.integers(0, 64 - required_last_index(sampling, s)))
        smp = make_training_sample(video, sampling, s, start)
        M = motion_attention(smp.attention_source, desk, smp.ground_truth.shape[:3]).numpy()
        last = math.ceil(start + Fraction(s * (sampling.recon_rate * sampling.clip_len - 1), sampling.recon_rate))
        swept = _swept_mask(spec, vi, start, last)
        inside = M[:, swept].mean()
        outside = M[:, ~swept].mean()
        wins += int(inside > outside)
        total += 1
    frac = wins / total
    verdict(f"range [{lo:.3f}, {hi:.3f}], static == 1.0, swept > background in {frac:.1%} of {total} clips")
    assert frac >= 0.95


# --------------------------------------------------------------------------
# 4. loss identities
# --------------------------------------------------------------------------

def test_criterion_04_loss_identities(verdict):
    w = LossWeights()
    assert (w.lambda_d, w.lambda_g) == (0.1, 1.0)
    gen = torch.Generator().manual_seed(4)
    worst = {"mse": 0.0, "ln4": 0.0, "joint": 0.0}
    for _ in range(50):
        Y = torch.rand(2, 3, 16, 8, 8, generator=gen)
        G = torch.rand(2, 3, 16, 8, 8, generator=gen)
        ones = torch.ones(2, 16, 8, 8)
        worst["mse"] = max(worst["mse"], abs(float(generative_loss(Y, G, ones)) - float(F.mse_loss(Y, G))))
        assert float(generative_loss(Y, Y.clone(), torch.rand(2, 16, 8, 8, generator=gen) + 0.8)) == 0.0
        B = int(torch.randint(1, 9, (1,), generator=gen))
        c = float(torch.randn(1, generator=gen)) * 50
        logits = torch.full((B, 4), c)
        labels = torch.randint(0, 4, (B,), generator=gen)
        worst["ln4"] = max(worst["ln4"], abs(float(discriminative_loss(logits, labels)) - math.log(4)))
        l_d = discriminative_loss(torch.randn(B, 4, generator=gen), labels)
        l_g = generative_loss(Y, G, torch.rand(2, 16, 8, 8, generator=gen) * 1.2 + 0.8)
        worst["joint"] = max(worst["joint"], abs(float(joint_loss(l_d, l_g, w)) - (0.1 * float(l_d) + 1.0 * float(l_g))))
    verdict("max errors " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert worst["mse"] <= 1e-7
    assert worst["ln4"] <= 1e-6
    assert worst["joint"] <= 1e-7


# --------------------------------------------------------------------------
# 5. gradient checks
# --------------------------------------------------------------------------

def _rel(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def test_criterion_05_gradient_checks(verdict):
    t0 = time.perf_counter()
    torch.manual_seed(5)
    Y = torch.rand(2, 3, 4, 5, 5, dtype=torch.float64, requires_grad=True)
    G = torch.rand(2, 3, 4, 5, 5, dtype=torch.float64)
    M = torch.rand(2, 4, 5, 5, dtype=torch.float64) * 1.2 + 0.8
    N = Y.numel()
    loss = generative_loss(Y, G, M)
    (grad,) = torch.autograd.grad(loss, Y)
    analytic = 2 * M[:, None] * (Y.detach() - G) / N
    worst_y = float(((grad - analytic).abs() / analytic.abs().clamp_min(1e-12)).max())
    eps = 1e-6
    flat = Y.detach().reshape(-1)
    for idx in torch.randperm(N)[:100].tolist():
        plus, minus = flat.clone(), flat.clone()
        plus[idx] += eps
        minus[idx] -= eps
        fd = (float(generative_loss(plus.reshape(Y.shape), G, M)) - float(generative_loss(minus.reshape(Y.shape), G, M))) / (2 * eps)
        worst_y = max(worst_y, _rel(fd, float(analytic.reshape(-1)[idx])))
    assert worst_y <= 1e-4

    # end to end on the tiny backbone in float64
    cfg = TrainConfig(
        mode="DGP",
        sampling=SamplingSpec(intervals=(1, 2), clip_len=8, recon_rate=2),
        backbone=BackboneConfig(block_channels=(2, 2, 2, 2, 2)),
        decoder=DecoderConfig(block_channels=(2, 2, 2, 3)),
        attention=AttentionParams(pool_kernel=(15, 8, 8), pool_stride=(16, 2, 2)),
        augment=replace(desk_train_config().augment, resize_hw=(16, 16), crop_hw=(16, 16)),
    )
    videos = generate_synthetic_corpus(SyntheticSpec(num_videos=4, frame_count=32, height=16, width=16,
                                                     pattern_size=5, seed=5))
    samples = [make_training_sample(videos[i], cfg.sampling, s, 3) for i, s in enumerate((1, 2, 1, 2))]
    batch = prepare_batch(samples, cfg)
    batch = replace(batch, clip=batch.clip.double(), ground_truth=batch.ground_truth.double(),
                    attention=batch.attention.double())
    model = build_model(cfg).double()
    model.train()
    obj, _, _, _ = compute_losses(model, batch, cfg)
    model.zero_grad()
    obj.backward()
    params = [(name, p) for name, p in model.named_parameters()]
    sizes = np.array([p.numel() for _, p in params])
    pick_rng = np.random.default_rng(55)
    chosen = set()
    while len(chosen) < 60:
        k = int(pick_rng.choice(len(params), p=np.sqrt(sizes) / np.sqrt(sizes).sum()))
        chosen.add((k, int(pick_rng.integers(sizes[k]))))
    worst = 0.0
    with torch.no_grad():
        for k, j in sorted(chosen):
            name, p = params[k]
            flat_p = p.view(-1)
            orig = float(flat_p[j])
            flat_p[j] = orig + eps
            up = float(compute_losses(model, batch, cfg)[0])
            flat_p[j] = orig - eps
            down = float(compute_losses(model, batch, cfg)[0])
            flat_p[j] = orig
            fd = (up - down) / (2 * eps)
            worst = max(worst, _rel(fd, float(p.grad.view(-1)[j])))
    elapsed = time.perf_counter() - t0
    verdict(f"dL_g/dY rel err {worst_y:.1e}; {len(chosen)} params rel err {worst:.1e}; {elapsed:.0f}s")
    assert worst <= 1e-3
    assert elapsed < 300


# --------------------------------------------------------------------------
# 6. shape contracts
# --------------------------------------------------------------------------

def test_criterion_06_shape_contracts(verdict):
    rng = np.random.default_rng(6)
    video = RawVideo(rng.random((128, 112, 112, 3), dtype=np.float32))
    cells = 0
    with torch.no_grad():
        for variant in VARIANTS:
            torch.manual_seed(0)
            backbone = BackboneConfig(variant=variant)
            model = PRPNet(backbone, num_rates=4, decoder=DecoderConfig(recon_rate=4), target_hw=(112, 112)).eval()
            decoders = {r: PRPNet(backbone, 4, DecoderConfig(recon_rate=r), (112, 112)).decoder.eval() for r in RATES}
            for s in INTERVALS:
                spec = SamplingSpec(intervals=INTERVALS, clip_len=16, recon_rate=1)
                x = clips_to_tensor([make_training_sample(video, spec, s, 0).input_clip])
                fmap, vec = encode(model.encoder, x)
                assert tuple(fmap.shape) == (1, 512, *backbone.conv5_shape()) == (1, 512, 2, 4, 4)
                assert tuple(vec.shape) == (1, 512)
                for r in RATES:
                    for target in ((112, 112), (96, 128)):
                        y = decode(decoders[r], fmap, target)
                        assert tuple(y.shape) == (1, 3, r * 16, *target)
                    cells += 1
    verdict(f"{len(VARIANTS)} variants x {cells // len(VARIANTS)} (s, r) cells match")


# --------------------------------------------------------------------------
# 7. desk-scale DP learning
# --------------------------------------------------------------------------

def test_criterion_07_desk_dp_learning(verdict):
    t0 = time.perf_counter()
    run = resolve_config(profile="desk", seed=0)
    cfg = replace(run.train, mode="DP", epochs=100, sampling=replace(run.train.sampling, intervals=(1, 2)))
    cfg.sync()
    videos = generate_synthetic_corpus(replace(run.data.synthetic, num_videos=64))
    assert len({v.label for v in videos}) == 8
    train_idx, val_idx = split_videos(videos, cfg.val_count, cfg.seed)
    train_samples = build_eval_samples([videos[i] for i in train_idx], cfg, seed=70)
    val_samples = build_eval_samples([videos[i] for i in val_idx], cfg, seed=71)

    torch.manual_seed(cfg.seed)
    untrained = validate(build_model(cfg), val_samples, cfg).dp_accuracy
    result = pretrain(videos, cfg)
    train_acc = validate(result.model, train_samples, cfg).dp_accuracy
    val_acc = validate(result.model, val_samples, cfg).dp_accuracy
    elapsed = time.perf_counter() - t0
    verdict(f"train {train_acc:.3f}, held-out {val_acc:.3f}, untrained {untrained:.3f}, {elapsed:.0f}s")
    assert train_acc > 0.9
    assert val_acc > 0.75
    assert abs(untrained - 0.5) <= 0.1
    assert elapsed < 20 * 60


# --------------------------------------------------------------------------
# 8. desk-scale transfer direction
# --------------------------------------------------------------------------

# protocol fixed before the five-seed run: 128-video corpus, 25% test split,
# 60 DG-P pretraining epochs, 20 finetuning epochs at lr 0.01, threshold on held-out video accuracy
TRANSFER_THRESHOLD = 0.8


def _transfer_trial(seed: int) -> tuple[float, float]:
    run = resolve_config(profile="desk", seed=seed)
    cfg = replace(run.train, epochs=60)
    videos = generate_synthetic_corpus(replace(run.data.synthetic, seed=seed, num_videos=128))
    tr, te = split_videos(videos, 0.25, seed + 100)
    train_videos = [videos[i] for i in tr]
    test_videos = [videos[i] for i in te]
    ckpt = pretrain(train_videos, cfg).checkpoint
    ft = FinetuneConfig(epochs=20, learning_rate=0.01, seed=seed)
    pre = finetune(ckpt, train_videos, cfg, ft, num_classes=8, eval_videos=test_videos)
    rand = finetune(None, train_videos, cfg, ft, num_classes=8, eval_videos=test_videos)
    return pre.epochs_to_reach(TRANSFER_THRESHOLD), rand.epochs_to_reach(TRANSFER_THRESHOLD)


def test_criterion_08_transfer_direction(verdict):
    trials = {seed: _transfer_trial(seed) for seed in range(5)}
    wins = sum(1 for pre, rand in trials.values() if math.isfinite(pre) and pre <= rand)
    detail = " ".join(f"s{k}:{p:g}/{r:g}" for k, (p, r) in trials.items())
    verdict(f"epochs to {TRANSFER_THRESHOLD:.0%} (pretrained/random) {detail}; pretrained no slower in {wins}/5")
    assert wins >= 4


# --------------------------------------------------------------------------
# 9. retrieval oracle
# --------------------------------------------------------------------------

def test_criterion_09_retrieval_oracle(verdict):
    rng = np.random.default_rng(9)
    n, dim = 1000, 64
    ids = [f"v{i:04d}" for i in rng.permutation(n)]
    feats = rng.normal(size=(n, dim))
    feats[10] = feats[20]  # exact tie resolved by id
    labels = [int(v) for v in rng.integers(0, 20, n)]
    index = RetrievalIndex(ids, labels, feats)
    ks = (1, 5, 10, 20, 50)
    for qi in range(25):
        q = rng.normal(size=dim) if qi else feats[20]
        expect = oracles.cosine_ranking(feats, ids, q)
        res = retrieve_topk(index, q, ks)
        for k in ks:
            assert res.ranked_ids[:k] == expect[:k]
    queries = [rng.normal(size=dim) for _ in range(200)]
    report = topk_report(index, queries, ks, labels=[int(v) for v in rng.integers(0, 20, 200)])
    accs = list(report.topk_accuracy.values())
    assert list(report.topk_accuracy) == ["top1", "top5", "top10", "top20", "top50"]
    assert list(TOPK_COLUMNS) == [1, 5, 10, 20, 50]
    assert all(a <= b for a, b in zip(accs, accs[1:]))
    verdict("top-k ids match brute force for k in 1..50; accuracies " + " ".join(f"{a:.2f}" for a in accs))


# --------------------------------------------------------------------------
# 10. determinism replay
# --------------------------------------------------------------------------

def test_criterion_10_determinism_replay(verdict):
    run = resolve_config(profile="desk", seed=10)
    cfg = replace(run.train, epochs=3)
    videos = generate_synthetic_corpus(replace(run.data.synthetic, num_videos=24))
    logs = [pretrain(videos, replace(cfg)).log for _ in range(2)]
    worst = 0.0
    for a, b in zip(*logs):
        for key in a:
            if key != "seconds":
                worst = max(worst, abs(a[key] - b[key]))
    verdict(f"{len(logs[0])} epochs replayed, max log difference {worst:.1e}")
    assert len(logs[0]) == 3
    assert worst <= 1e-6

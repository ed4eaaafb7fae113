import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from prplab.attention import (
    AttentionParams,
    activate,
    attention_to_uint8,
    frame_difference,
    motion_attention,
    pool3d_average,
    upsample3d,
)
from prplab.errors import ConfigError, InputError


def test_params_validation():
    with pytest.raises(ConfigError):
        AttentionParams(lambda1=1.2)
    with pytest.raises(ConfigError):
        AttentionParams(pool_kernel=(0, 2, 2))
    with pytest.raises(ConfigError):
        AttentionParams(upsample_mode="nearest")


def test_frame_difference_hand_value():
    R = np.zeros((2, 1, 1, 3), dtype=np.float32)
    R[1, 0, 0] = [1.0, 0.5, 0.0]
    assert float(frame_difference(R)[0, 0, 0]) == pytest.approx((1 + 0.25) / 3)
    with pytest.raises(InputError):
        frame_difference(R[:1])


@settings(max_examples=25, deadline=None)
@given(T=st.integers(1, 20), H=st.integers(1, 12), W=st.integers(1, 12),
       k=st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)),
       s=st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)))
def test_pool_matches_oracle(T, H, W, k, s):
    D = np.random.default_rng(T * 100 + H).random((T, H, W))
    np.testing.assert_allclose(pool3d_average(D, k, s).numpy(), oracles.avg_pool3d(D, k, s), atol=1e-12)


def test_short_axis_pads_by_replication():
    D = np.arange(3.0)[:, None, None] * np.ones((3, 2, 2))
    # kernel 6 over 3 frames: pad 1 before (0) and 2 after (2, 2) -> mean of 0,0,1,2,2,2
    assert float(pool3d_average(D, (6, 2, 2), (6, 2, 2))[0, 0, 0]) == pytest.approx(7 / 6)


def test_activation_range_and_degenerate():
    P = torch.tensor([[0.0, 1.0, 3.0]])
    assert activate(P, 0.8, 2.0)[0].tolist() == pytest.approx([0.8, 1.2, 2.0])
    batch = torch.tensor([[1.0, 1.0], [0.0, 2.0]])
    out = activate(batch, 0.8, 2.0, batch_dims=1)
    assert out[0].tolist() == [1.0, 1.0]
    assert out[1].tolist() == pytest.approx([0.8, 2.0])


@settings(max_examples=15, deadline=None)
@given(src=st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)),
       dst=st.tuples(st.integers(1, 7), st.integers(1, 7), st.integers(1, 7)))
def test_upsample_matches_oracle(src, dst):
    M = np.random.default_rng(sum(src)).random(src)
    np.testing.assert_allclose(upsample3d(M, dst).numpy(), oracles.trilinear_align_corners(M, dst), atol=1e-12)


def test_motion_attention_matches_composed_oracle():
    params = AttentionParams(pool_kernel=(5, 4, 4), pool_stride=(4, 2, 2))
    R = np.random.default_rng(4).random((9, 10, 10, 3))
    got = motion_attention(R, params, (9, 10, 10)).numpy()
    want = oracles.motion_attention(R, params.pool_kernel, params.pool_stride, (9, 10, 10))
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_batched_equals_per_sample():
    params = AttentionParams(pool_kernel=(3, 4, 4), pool_stride=(2, 2, 2))
    R = np.random.default_rng(5).random((3, 6, 8, 8, 3)).astype(np.float32)
    batched = motion_attention(R, params, (6, 8, 8))
    for b in range(3):
        torch.testing.assert_close(batched[b], motion_attention(R[b], params, (6, 8, 8)))


def test_no_autograd_graph():
    R = torch.rand(4, 6, 6, 3, requires_grad=True)
    assert not motion_attention(R, AttentionParams(pool_kernel=(2, 2, 2), pool_stride=(1, 1, 1)), (4, 6, 6)).requires_grad


def test_uint8_mapping_endpoints():
    params = AttentionParams()
    out = attention_to_uint8(torch.tensor([0.5, 0.8, 1.1, 2.0, 2.5], dtype=torch.float64), params)
    assert out.tolist() == [0, 0, 64, 255, 255]

import math

import numpy as np
import pytest
import torch

import oracles
from prplab.errors import ConfigError, InputError
from prplab.losses import LossWeights, discriminative_loss, generative_loss, rate_accuracy, softmax


def test_cross_entropy_matches_oracle():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(7, 4)) * 5
    labels = rng.integers(0, 4, 7)
    got = float(discriminative_loss(torch.tensor(logits), torch.tensor(labels)))
    assert got == pytest.approx(oracles.cross_entropy(logits, labels), rel=1e-12)


def test_extreme_logits_are_floored_not_infinite():
    logits = torch.tensor([[1000.0, -1000.0]])
    assert float(discriminative_loss(logits, [1])) == pytest.approx(-math.log(1e-12))


def test_bad_labels_rejected():
    with pytest.raises(InputError):
        discriminative_loss(torch.zeros(2, 4), [0, 4])
    with pytest.raises(InputError):
        discriminative_loss(torch.zeros(2, 4), [0])


def test_weighted_mse_matches_oracle():
    rng = np.random.default_rng(1)
    Y, G = rng.random((2, 3, 4, 5, 5)), rng.random((2, 3, 4, 5, 5))
    M = rng.random((2, 4, 5, 5)) + 0.8
    got = float(generative_loss(torch.tensor(Y), torch.tensor(G), torch.tensor(M)))
    assert got == pytest.approx(oracles.weighted_mse(Y, G, M), rel=1e-12)


def test_unbatched_inputs_accepted():
    Y = torch.rand(3, 4, 5, 5)
    assert float(generative_loss(Y, Y * 0, torch.ones(4, 5, 5))) == pytest.approx(float((Y ** 2).mean()))


def test_shape_mismatch_rejected():
    with pytest.raises(InputError):
        generative_loss(torch.zeros(1, 3, 4, 5, 5), torch.zeros(1, 3, 4, 5, 6), torch.ones(1, 4, 5, 5))
    with pytest.raises(InputError):
        generative_loss(torch.zeros(1, 3, 4, 5, 5), torch.zeros(1, 3, 4, 5, 5), torch.ones(1, 4, 5, 6))


def test_attention_receives_no_gradient():
    M = torch.ones(1, 2, 2, 2, requires_grad=True)
    Y = torch.rand(1, 3, 2, 2, 2, requires_grad=True)
    generative_loss(Y, torch.zeros_like(Y), M).backward()
    assert M.grad is None


def test_weights_validation():
    with pytest.raises(ConfigError):
        LossWeights(lambda_d=-1)
    with pytest.raises(ConfigError):
        LossWeights(0, 0)


def test_softmax_and_accuracy():
    p = softmax(torch.tensor([[0.0, math.log(3.0)]]))
    assert p.tolist()[0] == pytest.approx([0.25, 0.75])
    assert rate_accuracy(torch.tensor([[0.0, 1.0], [2.0, 1.0]]), [1, 1]) == 0.5

import math

import numpy as np
import pytest
import torch

from rsfiqa.errors import DegenerateRange, EmptyBatch, LengthMismatch, ShapeMismatch
from rsfiqa.regressor import Head, MosNormalizer, mse_loss, normalize_mos, predict

from conftest import t64
from test_numerics import naive_attention


def naive_head(head, r):
    h, w, c = r.shape
    flat = r.reshape(h * w, c)
    wq, wk, wv = (m.detach().numpy() for m in (head.qkv.wq, head.qkv.wk, head.qkv.wv))
    pooled = (naive_attention(flat @ wq, flat @ wk, flat @ wv) + flat).mean(axis=0)
    hidden = np.maximum(0.0, pooled @ head.w1.detach().numpy() + head.b1.detach().numpy())
    z = hidden @ head.w2.detach().numpy() + head.b2.detach().numpy()
    return 1.0 / (1.0 + math.exp(-z[0]))


def test_head_matches_loop_oracle(rng):
    torch.manual_seed(0)
    head = Head(dim=4, hidden=6)
    r = rng.normal(size=(3, 2, 4))
    assert abs(predict(t64(r), head).item() - naive_head(head, r)) < 1e-9


def test_head_zero_mlp_gives_sigmoid_bias(rng):
    head = Head(dim=4, hidden=5)
    with torch.no_grad():
        head.w1.zero_()
        head.w2.zero_()
        head.b2.fill_(0.8)
    assert head(t64(rng.normal(size=(2, 2, 4)))).item() == pytest.approx(1 / (1 + math.exp(-0.8)), abs=1e-15)


def test_constant_features_pool_to_the_value():
    torch.manual_seed(1)
    head = Head(dim=3)
    value = t64([0.1, -0.4, 0.7])
    r = value.expand(2, 3, 3).clone()
    v_row = value @ head.qkv.wv
    torch.testing.assert_close(head.pooled(r), v_row + value, atol=1e-14, rtol=0)
    with pytest.raises(ShapeMismatch):
        head(torch.zeros(2, 2, 5, dtype=torch.float64))


def test_mse_examples():
    assert mse_loss([0.3, 0.6], [0.3, 0.6]).item() == 0.0
    assert mse_loss([0.0], [1.0]).item() == 1.0
    assert mse_loss([0.0, 1.0], [1.0, 1.0]).item() == 0.5
    with pytest.raises(LengthMismatch):
        mse_loss([0.0, 1.0], [1.0])
    with pytest.raises(EmptyBatch):
        mse_loss([], [])


def test_mse_gradient(rng):
    p = t64(rng.uniform(size=4), grad=True)
    y = t64(rng.uniform(size=4))
    mse_loss(p, y).backward()
    np.testing.assert_allclose(p.grad.numpy(), (2 * (p - y) / 4).detach().numpy(), atol=1e-15)


def test_normalize_mos():
    assert normalize_mos([10, 20, 30]) == [0.0, 0.5, 1.0]
    assert normalize_mos([0.0, 1.0]) == [0.0, 1.0]
    with pytest.raises(DegenerateRange):
        normalize_mos([3.0, 3.0, 3.0])
    n = MosNormalizer.fit([1.0, 5.0, 2.0])
    assert n.inverse(n.transform([1.5, 4.0])) == [1.5, 4.0]

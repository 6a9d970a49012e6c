import math

import numpy as np
import pytest
import torch

from rsfiqa.backbone import Backbone, default_channels, extract_features
from rsfiqa.errors import EmptyInput, IndivisibleInput, ShapeMismatch
from rsfiqa.mhf import MHF, QKV, GatedDownsample, multihead_attention

from conftest import t64
from test_numerics import naive_attention


@pytest.mark.parametrize("size,extents", [(64, [32, 16, 8, 4]), (224, [112, 56, 28, 14])])
def test_pyramid_extents(size, extents):
    torch.manual_seed(0)
    levels = extract_features(torch.rand(size, size, 3, dtype=torch.float64), Backbone(default_channels(4)))
    assert [f.shape[0] for f in levels] == extents
    assert [f.shape[1] for f in levels] == extents
    assert [f.shape[2] for f in levels] == [8, 16, 32, 32]


def test_indivisible_input():
    with pytest.raises(IndivisibleInput):
        Backbone()(torch.rand(30, 32, 3, dtype=torch.float64))


def test_backbone_rejects_single_level():
    with pytest.raises(ValueError):
        Backbone((8,))


def zero_params(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


def test_gated_downsample_zero_weights_gives_half():
    gd = GatedDownsample(4, 6)
    zero_params(gd)
    out = gd(torch.rand(8, 8, 4, dtype=torch.float64), 2, 2)
    assert out.shape == (2, 2, 6)
    assert (out == 0.5).all()


def test_gated_downsample_open_interval(rng):
    torch.manual_seed(1)
    gd = GatedDownsample(3, 4)
    out = gd(t64(rng.normal(size=(8, 8, 3)) * 5), 4, 4)
    assert (out > 0).all() and (out < 1).all()


def test_gated_downsample_matches_composition(rng):
    torch.manual_seed(2)
    gd = GatedDownsample(3, 4)
    f = t64(rng.normal(size=(4, 4, 3)))
    # coarsest level: pooling to the same extents is the identity
    expected = torch.sigmoid(
        torch.nn.functional.conv2d(
            (torch.sigmoid(gd.bottleneck(f)) * (f @ gd.gate_w[0, 0])).permute(2, 0, 1)[None],
            gd.post_w.permute(3, 2, 0, 1), gd.post_b, padding=1,
        )[0].permute(1, 2, 0)
    )
    torch.testing.assert_close(gd(f, 4, 4), expected, atol=1e-12, rtol=0)


def test_mhf_level_shape_check():
    mhf = MHF((4, 8, 8), dim=8)
    with pytest.raises(ShapeMismatch):
        mhf.gated_downsample(torch.rand(6, 6, 4, dtype=torch.float64), 0, 2, 2)


def test_self_enhance_zero_value_projection(rng):
    mhf = MHF((4, 8), dim=6)
    with torch.no_grad():
        mhf.self_attn[0].wv.zero_()
    d = t64(rng.uniform(size=(3, 3, 6)))
    assert torch.equal(mhf.self_enhance(d, 0), d)


def test_self_enhance_single_position(rng):
    mhf = MHF((4, 8), dim=4)
    d = t64(rng.uniform(size=(1, 1, 4)))
    v_row = d.reshape(1, 4) @ mhf.self_attn[1].wv
    torch.testing.assert_close(mhf.self_enhance(d, 1).reshape(1, 4), v_row + d.reshape(1, 4), atol=1e-14, rtol=0)


def test_self_enhance_matches_oracle(rng):
    torch.manual_seed(3)
    mhf = MHF((4, 8), dim=4)
    d = rng.uniform(size=(2, 2, 4))
    qkv = mhf.self_attn[0]
    flat = d.reshape(4, 4)
    wq, wk, wv = (w.detach().numpy() for w in (qkv.wq, qkv.wk, qkv.wv))
    expected = naive_attention(flat @ wq, flat @ wk, flat @ wv) + flat
    got = mhf.self_enhance(t64(d), 0).detach().numpy().reshape(4, 4)
    np.testing.assert_allclose(got, expected, atol=1e-9)


def test_cross_fuse_base_cases(rng):
    mhf = MHF((4, 8, 8), dim=4)
    one = [t64(rng.uniform(size=(2, 2, 4)))]
    assert torch.equal(mhf.cross_fuse(one), one[0])
    for qkv in mhf.cross_attn:
        with torch.no_grad():
            qkv.wv.zero_()
    maps = [t64(rng.uniform(size=(2, 2, 4))) for _ in range(3)]
    assert torch.equal(mhf.cross_fuse(maps), maps[-1])
    with pytest.raises(EmptyInput):
        mhf.cross_fuse([])


def test_cross_fuse_unrolled_oracle(rng):
    torch.manual_seed(4)
    mhf = MHF((4, 8, 8), dim=4)
    maps = [rng.uniform(size=(2, 2, 4)) for _ in range(3)]
    fused = maps[2].reshape(4, 4)
    for i in (1, 0):
        qkv = mhf.cross_attn[i]
        wq, wk, wv = (w.detach().numpy() for w in (qkv.wq, qkv.wk, qkv.wv))
        kv = maps[i].reshape(4, 4)
        fused = naive_attention(fused @ wq, kv @ wk, kv @ wv) + fused
    got = mhf.cross_fuse([t64(m) for m in maps]).detach().numpy().reshape(4, 4)
    np.testing.assert_allclose(got, fused, atol=1e-9)


def test_mhf_forward_shapes():
    torch.manual_seed(5)
    bb, mhf = Backbone((4, 8, 8)), MHF((4, 8, 8), dim=6)
    out = mhf(bb(torch.rand(16, 16, 3, dtype=torch.float64)))
    assert [d.shape for d in out.downsampled] == [(2, 2, 6)] * 3
    assert out.fused.shape == (2, 2, 6)
    with pytest.raises(ShapeMismatch):
        mhf(bb(torch.rand(16, 16, 3, dtype=torch.float64))[:2])


def test_multihead_splits_channels(rng):
    q, k, v = (t64(rng.normal(size=(3, 4))) for _ in range(3))
    two = multihead_attention(q, k, v, heads=2).numpy()
    left = naive_attention(q[:, :2].numpy(), k[:, :2].numpy(), v[:, :2].numpy())
    right = naive_attention(q[:, 2:].numpy(), k[:, 2:].numpy(), v[:, 2:].numpy())
    np.testing.assert_allclose(two, np.hstack([left, right]), atol=1e-12)
    with pytest.raises(ValueError):
        QKV(5, heads=2)

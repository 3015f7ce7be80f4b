import math

import pytest
import torch

from dag.affordance_block import AffordanceTokens
from dag.decoder import (
    AffordanceDecoder,
    GlobalFusion,
    MaskHead,
    PerPointFusion,
    PointFusion,
    cross_attention,
    fuse_global,
    fuse_points,
    predict_mask,
)
from dag.errors import StructureError


def tokens(batch, count, width, dtype=torch.float64):
    return AffordanceTokens(torch.randn(batch, count, width, dtype=dtype), pool_size=max(int(math.sqrt(count)), 1))


def test_single_key_returns_its_value():
    value = torch.tensor([[[3.0, -1.0]]])
    out = cross_attention(torch.randn(1, 4, 2), torch.randn(1, 1, 2), value)
    assert torch.allclose(out, value.expand(1, 4, 2))


def test_identical_keys_average_values():
    key = torch.tensor([[[0.5, 0.5], [0.5, 0.5]]])
    value = torch.tensor([[[1.0, 0.0], [0.0, 1.0]]])
    assert torch.allclose(cross_attention(torch.randn(1, 1, 2), key, value), torch.tensor([[[0.5, 0.5]]]))


def test_hand_computed_attention():
    out = cross_attention(torch.tensor([[[1.0, 0.0]]]), torch.tensor([[[1.0, 0.0], [0.0, 1.0]]]),
                          torch.tensor([[[1.0, 0.0], [0.0, 1.0]]]))
    assert torch.allclose(out, torch.tensor([[[0.6698, 0.3302]]]), atol=1e-3)


def test_width_mismatch():
    with pytest.raises(StructureError):
        cross_attention(torch.randn(1, 1, 3), torch.randn(1, 2, 2), torch.randn(1, 2, 2))


def test_global_fusion_with_one_token_ignores_cls():
    fusion = GlobalFusion(cls_width=5, width=4).double()
    aff = tokens(1, 1, 4)
    first, _ = fusion.attention(fusion.cls_lift(torch.randn(1, 1, 5, dtype=torch.float64)), aff.tokens)
    second, _ = fusion.attention(fusion.cls_lift(torch.randn(1, 1, 5, dtype=torch.float64)), aff.tokens)
    assert torch.allclose(first, second)
    assert fuse_global(torch.randn(1, 5, dtype=torch.float64), aff, fusion).token.shape == (1, 1, 4)


def test_global_fusion_gradient():
    fusion = GlobalFusion(cls_width=4, width=4).double()
    aff = tokens(1, 2, 4)
    cls = torch.randn(1, 4, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda c: fuse_global(c, aff, fusion).token, (cls,),
                                    eps=1e-6, atol=1e-6, rtol=1e-4)


@pytest.mark.parametrize("count", [1, 7, 33])
def test_point_fusion_keeps_one_row_per_point(count):
    fusion = PointFusion(4).double()
    fused = fuse_global(torch.randn(1, 6, dtype=torch.float64), tokens(1, 4, 4), GlobalFusion(6, 4).double())
    out = fuse_points(torch.randn(1, count, 4, dtype=torch.float64), fused, tokens(1, 4, 4), fusion)
    assert out.feats.shape == (1, count, 4)


def test_point_fusion_with_only_the_fused_token():
    fusion = PointFusion(4).double()
    fused = fuse_global(torch.randn(1, 6, dtype=torch.float64), tokens(1, 4, 4), GlobalFusion(6, 4).double())
    empty = AffordanceTokens(torch.zeros(1, 0, 4, dtype=torch.float64), pool_size=0)
    attended, weights = fusion.attention(torch.randn(1, 5, 4, dtype=torch.float64), fused.token)
    assert torch.allclose(attended, attended[:, :1].expand_as(attended))
    assert torch.all(weights == 1)
    assert fuse_points(torch.randn(1, 5, 4, dtype=torch.float64), fused, empty, fusion).feats.shape == (1, 5, 4)


def test_point_fusion_needs_a_key():
    empty = AffordanceTokens(torch.zeros(1, 0, 4), pool_size=0)
    with pytest.raises(StructureError):
        fuse_points(torch.randn(1, 5, 4), None, empty, PointFusion(4))


def test_point_fusion_is_permutation_equivariant():
    fusion = PointFusion(4).double()
    aff = tokens(1, 4, 4)
    points = torch.randn(1, 9, 4, dtype=torch.float64)
    order = torch.randperm(9)
    out = fuse_points(points, None, aff, fusion).feats
    out_permuted = fuse_points(points[:, order], None, aff, fusion).feats
    assert torch.allclose(out[:, order], out_permuted, atol=1e-10)


def test_mask_head_starts_at_one_half():
    mask = predict_mask(PerPointFusion(torch.randn(2, 11, 4)), MaskHead(4))
    assert mask.n_points == 11
    assert torch.equal(mask.values, torch.full((2, 11), 0.5))


def test_sigmoid_reference_values():
    assert torch.allclose(torch.sigmoid(torch.tensor([-1.0, 0.0, 1.0])), torch.tensor([0.2689, 0.5, 0.7311]), atol=1e-4)


@pytest.mark.parametrize("use_cls", [True, False])
def test_decoder_emits_valid_masks(use_cls):
    decoder = AffordanceDecoder(width=8, cls_width=6, use_cls=use_cls)
    torch.nn.init.normal_(decoder.head.out.weight)
    mask, attention = decoder(torch.randn(2, 6), tokens(2, 4, 8, torch.float32), torch.randn(2, 13, 8))
    assert mask.values.shape == (2, 13)
    assert torch.all((mask.values > 0) & (mask.values < 1))
    assert ("global" in attention) == use_cls
    for weights in attention.values():
        assert torch.allclose(weights.sum(dim=-1), torch.ones_like(weights.sum(dim=-1)), atol=1e-5)
    keys = attention["points"].shape[-1]
    assert keys == (5 if use_cls else 4)


def test_decoder_gradient_wrt_point_features():
    decoder = AffordanceDecoder(width=4, cls_width=4).double()
    torch.nn.init.normal_(decoder.head.out.weight)
    cls = torch.randn(1, 4, dtype=torch.float64)
    aff = tokens(1, 2, 4)
    point_feats = torch.randn(1, 5, 4, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda p: decoder(cls, aff, p)[0].values, (point_feats,),
                                    eps=1e-6, atol=1e-6, rtol=1e-4)

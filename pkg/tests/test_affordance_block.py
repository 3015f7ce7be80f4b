import pytest
import torch
import torch.nn.functional as F

from dag.affordance_block import (
    AffordanceBlock,
    AffordanceFusion,
    ScaleModulation,
    VisualTokens,
    affordance_block,
    pool_tokens,
    scale_modulate,
)
from dag.captioner import TokenBatch
from dag.errors import PoolingConfigError


def text_batch(count=2, width=6, dtype=torch.float32):
    return TokenBatch.dense(torch.randn(1, count, width, dtype=dtype))


def test_modulation_is_identity_at_init():
    visual = VisualTokens(torch.randn(1, 4, 6), (2, 2))
    out = scale_modulate(visual, text_batch(), ScaleModulation(6))
    assert torch.equal(out.tokens, visual.tokens)
    assert out.grid == visual.grid


def test_unit_gamma_doubles_tokens():
    modulation = ScaleModulation(6)
    with torch.no_grad():
        modulation.gamma.bias.fill_(1.0)
    visual = VisualTokens(torch.randn(1, 4, 6), (2, 2))
    assert torch.allclose(scale_modulate(visual, text_batch(), modulation).tokens, 2 * visual.tokens)


def test_block_output_shape():
    block = AffordanceBlock(width=8, text_width=6)
    fused = affordance_block(VisualTokens(torch.randn(2, 12, 8), (3, 4)), TokenBatch.dense(torch.randn(2, 3, 6)), block)
    assert fused.tokens.shape == (2, 12, 8)
    assert fused.grid == (3, 4)


def test_block_ignores_text_order():
    block = AffordanceBlock(width=8, text_width=6).double()
    visual = VisualTokens(torch.randn(1, 9, 8, dtype=torch.float64), (3, 3))
    text = torch.randn(1, 4, 6, dtype=torch.float64)
    permuted = text[:, torch.tensor([2, 0, 3, 1])]
    first = affordance_block(visual, TokenBatch.dense(text), block).tokens
    second = affordance_block(visual, TokenBatch.dense(permuted), block).tokens
    assert torch.allclose(first, second, atol=1e-6)


def test_zero_residual_branches_reduce_to_norm_chain():
    block = AffordanceBlock(width=3, text_width=3, zero_init_residual=True).double()
    tokens = torch.randn(1, 2, 3, dtype=torch.float64)
    out = affordance_block(VisualTokens(tokens, (1, 2)), text_batch(2, 3, torch.float64), block).tokens

    expected = tokens
    for _ in range(3):
        expected = F.layer_norm(expected, (3,))
    assert torch.allclose(out, expected, atol=1e-6)


def test_attention_rows_sum_to_one():
    block = AffordanceBlock(width=8, text_width=6)
    text = TokenBatch(torch.randn(1, 3, 6), torch.tensor([[True, True, False]]))
    _, weights = block(VisualTokens(torch.randn(1, 4, 8), (2, 2)), text)
    for name in ("self", "cross"):
        assert torch.allclose(weights[name].sum(dim=-1), torch.ones_like(weights[name].sum(dim=-1)), atol=1e-5)
    assert torch.all(weights["cross"][..., 2] == 0)


def test_block_gradient():
    block = AffordanceBlock(width=6, text_width=6).double()
    with torch.no_grad():
        block.modulation.gamma.weight.normal_()
    text = text_batch(2, 6, torch.float64)
    tokens = torch.randn(1, 4, 6, dtype=torch.float64, requires_grad=True)

    def run(visual):
        return affordance_block(VisualTokens(visual, (2, 2)), text, block).tokens

    assert torch.autograd.gradcheck(run, (tokens,), eps=1e-6, atol=1e-6, rtol=1e-4)


def test_block_is_permutation_equivariant_over_visual_tokens():
    block = AffordanceBlock(width=8, text_width=6).double()
    text = text_batch(3, 6, torch.float64)
    tokens = torch.randn(1, 6, 8, dtype=torch.float64)
    order = torch.tensor([4, 1, 5, 0, 3, 2])
    out = affordance_block(VisualTokens(tokens, (2, 3)), text, block).tokens
    out_permuted = affordance_block(VisualTokens(tokens[:, order], (2, 3)), text, block).tokens
    assert torch.allclose(out[:, order], out_permuted, atol=1e-8)


def test_positional_encoding_breaks_spatial_symmetry():
    fusion = AffordanceFusion(width=8, text_width=6, pool_size=2).double()
    text = text_batch(2, 6, torch.float64)
    feature_map = torch.randn(1, 8, 2, 2, dtype=torch.float64)
    flipped = feature_map.flip(-1)
    out, _ = fusion(feature_map, text)
    out_flipped, _ = fusion(flipped, text)
    swapped = out_flipped.tokens.reshape(1, 2, 2, 8).flip(2).reshape(1, 4, 8)
    assert not torch.allclose(out.tokens, swapped, atol=1e-6)


def test_pool_constant_tokens():
    fused = VisualTokens(torch.full((1, 16, 5), 0.7), (4, 4))
    pooled = pool_tokens(fused, 2)
    assert pooled.count == 4
    assert torch.allclose(pooled.tokens, torch.full((1, 4, 5), 0.7))


def test_pool_full_grid_is_identity():
    fused = VisualTokens(torch.randn(1, 9, 5), (3, 3))
    assert torch.allclose(pool_tokens(fused, 3).tokens, fused.tokens)


def test_pool_to_single_token():
    fused = VisualTokens(torch.tensor([[[1.0], [2.0], [3.0], [4.0]]]), (2, 2))
    assert torch.allclose(pool_tokens(fused, 1).tokens, torch.tensor([[[2.5]]]))


@pytest.mark.parametrize("size", [0, 3])
def test_pool_size_must_fit_grid(size):
    with pytest.raises(PoolingConfigError):
        pool_tokens(VisualTokens(torch.randn(1, 4, 5), (2, 2)), size)


def test_fusion_stacks_blocks():
    fusion = AffordanceFusion(width=8, text_width=6, blocks=2, pool_size=2)
    tokens, attention = fusion(torch.randn(2, 8, 4, 4), TokenBatch.dense(torch.randn(2, 3, 6)))
    assert tokens.tokens.shape == (2, 4, 8)
    assert len(attention) == 2

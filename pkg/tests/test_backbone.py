import numpy as np
import pytest

from dplnet.backbone import (
    PRESETS, Backbone, BackboneConfig, ConfigError, FFN, PatchEmbed, SAL, Attention, backbone_preset,
    block_forward, efficient_msa, ffn, freeze_backbone, image_to_tokens, multi_head_attention,
    overlap_patch_embed, sal_forward, tokens_to_image,
)
from dplnet.tensor_core import (
    DimensionError, OptState, Tape, Tensor, backward, layer_norm, ops, optimizer_step,
)

from conftest import grad_errors


def _np_ln(x, g, b, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _dense_attention(z, params):
    """O(N^2) loop oracle, one token at a time."""
    B, N, C = z.shape
    heads = params.heads
    d = C // heads
    lin = lambda m, x: x @ m.weight.data.T + m.bias.data
    q, k, v = lin(params.wq, z), lin(params.wk, z), lin(params.wv, z)
    out = np.zeros_like(z)
    for b in range(B):
        for h in range(heads):
            sl = slice(h * d, (h + 1) * d)
            for i in range(N):
                s = np.array([q[b, i, sl] @ k[b, j, sl] for j in range(N)]) / np.sqrt(d)
                w = np.exp(s - s.max())
                w /= w.sum()
                out[b, i, sl] = sum(w[j] * v[b, j, sl] for j in range(N))
    return lin(params.wo, out)


def test_presets():
    b5 = backbone_preset("mit_b5_shape")
    assert b5.dims == (64, 128, 320, 512) and b5.depths == (3, 6, 40, 3)
    assert b5.sr_ratios == (8, 4, 2, 1) and b5.heads == (1, 2, 5, 8)
    toy = backbone_preset("toy")
    assert toy.patch_specs == [(7, 4, 3), (3, 2, 1), (3, 2, 1), (3, 2, 1)]
    with pytest.raises(ConfigError):
        backbone_preset("nope")
    with pytest.raises(ConfigError):
        BackboneConfig(dims=(10,), depths=(1,), heads=(3,), sr_ratios=(1,))


def test_patch_embed_shape_and_oracle(rng):
    pe = PatchEmbed(3, 16, 7, 4, 3, rng, np.float64)
    x = rng.standard_normal((2, 3, 64, 64))
    tokens, h, w = overlap_patch_embed(Tensor(x), pe)
    assert (h, w) == (16, 16) and tokens.shape == (2, 256, 16)
    conv = ops.conv2d(Tensor(x), pe.proj.weight, pe.proj.bias, 4, 3).data
    ref = _np_ln(conv.reshape(2, 16, 256).transpose(0, 2, 1), pe.norm.weight.data, pe.norm.bias.data)
    np.testing.assert_allclose(tokens.data, ref, atol=1e-12)


def test_patch_embed_zero_weights(rng):
    pe = PatchEmbed(3, 8, 7, 4, 3, rng, np.float64)
    pe.proj.weight.data[...] = 0
    out = pe.proj(Tensor(rng.standard_normal((1, 3, 16, 16))))
    assert not out.data.any()


def test_patch_embed_too_small(rng):
    pe = PatchEmbed(3, 8, 7, 4, 0, rng)
    with pytest.raises(DimensionError):
        overlap_patch_embed(Tensor(np.zeros((1, 3, 5, 5), np.float32)), pe)


def test_token_image_round_trip(rng):
    x = Tensor(rng.standard_normal((2, 5, 3, 4)))
    z, h, w = image_to_tokens(x)
    assert z.shape == (2, 12, 5)
    assert np.array_equal(tokens_to_image(z, h, w).data, x.data)
    with pytest.raises(DimensionError):
        tokens_to_image(z, 5, 5)


@pytest.mark.parametrize("heads", [1, 2, 4])
def test_msa_matches_dense_oracle(rng, heads):
    att = Attention(8, heads, 1, rng, np.float64)
    for lin in (att.wq, att.wk, att.wv, att.wo):
        lin.weight.data = rng.standard_normal(lin.weight.shape) * 0.5
        lin.bias.data = rng.standard_normal(lin.bias.shape) * 0.1
    z = rng.standard_normal((2, 16, 8))
    out = efficient_msa(Tensor(z), 4, 4, att)
    assert out.shape == z.shape
    assert np.abs(out.data - _dense_attention(z, att)).max() < 1e-6


def test_msa_single_token(rng):
    att = Attention(4, 1, 1, rng, np.float64)
    z = rng.standard_normal((1, 1, 4))
    out, weights = multi_head_attention(*(Tensor(rng.standard_normal((1, 1, 4))) for _ in range(3)), 1,
                                        return_weights=True)
    assert weights.data.ravel().tolist() == [1.0]
    got = efficient_msa(Tensor(z), 1, 1, att).data
    wv = z @ att.wv.weight.data.T + att.wv.bias.data
    np.testing.assert_allclose(got, wv @ att.wo.weight.data.T + att.wo.bias.data, atol=1e-15)


def test_attention_rows_sum_to_one(rng):
    q, k, v = (Tensor(rng.standard_normal((2, 9, 8))) for _ in range(3))
    _, w = multi_head_attention(q, k, v, 2, return_weights=True)
    assert np.abs(w.data.sum(-1) - 1).max() < 1e-6


def test_msa_spatial_reduction(rng):
    att = Attention(8, 2, 2, rng, np.float64)
    out = efficient_msa(Tensor(rng.standard_normal((1, 16, 8))), 4, 4, att)
    assert out.shape == (1, 16, 8)
    with pytest.raises(ConfigError):
        efficient_msa(Tensor(rng.standard_normal((1, 9, 8))), 3, 3, att)
    with pytest.raises(DimensionError):
        efficient_msa(Tensor(rng.standard_normal((1, 10, 8))), 4, 4, att)


def test_ffn_zero_and_identity(rng):
    f = FFN(4, 1, rng, np.float64, act="relu")
    z = rng.uniform(0, 1, (1, 3, 4))
    f.fc1.weight.data = np.eye(4)
    f.fc2.weight.data = np.eye(4)
    np.testing.assert_array_equal(ffn(Tensor(z), f).data, z)
    f.fc1.weight.data[...] = 0
    f.fc2.weight.data[...] = 0
    assert not ffn(Tensor(z), f).data.any()


def test_ffn_gradient(rng):
    f = FFN(4, 4, rng, np.float64)
    f.assign_names("ffn.")
    f.fc1.weight.data = rng.standard_normal(f.fc1.weight.shape)
    x = Tensor(rng.uniform(-1, 1, (2, 3, 4)), requires_grad=True)
    assert max(grad_errors(lambda t: ffn(t, f), [x])) <= 1e-5


def test_sal_matches_composition(rng):
    sal = SAL(8, 2, 2, 4, rng, np.float64)
    z = Tensor(rng.standard_normal((1, 16, 8)))
    out = sal_forward(z, 4, 4, sal)
    ln1 = layer_norm(z, sal.norm1.weight, sal.norm1.bias)
    u = z.data + efficient_msa(ln1, 4, 4, sal.msa).data
    ref = u + ffn(layer_norm(Tensor(u), sal.norm2.weight, sal.norm2.bias), sal.ffn).data
    np.testing.assert_allclose(out.data, ref, atol=1e-12)


def test_sal_adapter_hook_receives_query(rng):
    sal = SAL(8, 1, 1, 4, rng, np.float64)
    z = Tensor(rng.standard_normal((1, 4, 8)))
    seen = []
    zero = lambda q: (seen.append(q), ops.mul(q, 0.0))[1]
    np.testing.assert_array_equal(sal_forward(z, 2, 2, sal, zero).data, sal_forward(z, 2, 2, sal).data)
    _, q = efficient_msa(sal.norm1(z), 2, 2, sal.msa, return_query=True)
    np.testing.assert_array_equal(seen[0].data, q.data)
    with pytest.raises(DimensionError):
        sal_forward(z, 2, 2, sal, lambda q: Tensor(np.zeros((1, 4, 3))))


def test_toy_stage_geometry(rng):
    bb = Backbone(PRESETS["toy"], rng)
    feats = bb(Tensor(rng.standard_normal((2, 3, 64, 64)).astype(np.float32)))
    assert [z.shape[1] for z in feats.tokens] == [256, 64, 16, 4]
    assert feats.sizes == [(16, 16), (8, 8), (4, 4), (2, 2)]
    assert [z.shape[2] for z in feats.tokens] == [16, 32, 48, 64]


def test_layer_calls_match_depth(rng):
    bb = Backbone(PRESETS["toy"], rng, np.float64)
    x = Tensor(rng.standard_normal((1, 3, 64, 64)), requires_grad=True)
    with Tape() as tape:
        bb(x)
    seen = {s for s in tape.scopes() if s}
    for i, depth in enumerate(PRESETS["toy"].depths, start=1):
        assert {s for s in seen if s.startswith(f"stage{i}.")} == {f"stage{i}.sal{k}" for k in range(1, depth + 1)}


def test_block_geometry_mismatch(rng):
    bb = Backbone(PRESETS["toy"], rng)
    with pytest.raises(DimensionError):
        block_forward(2, Tensor(np.zeros((1, 64, 16), np.float32)), 4, 4, bb)


def test_backbone_deterministic(rng):
    x = Tensor(rng.standard_normal((1, 3, 32, 32)).astype(np.float32))
    a = Backbone(PRESETS["toy"], np.random.default_rng(3))(x)
    b = Backbone(PRESETS["toy"], np.random.default_rng(3))(x)
    for za, zb in zip(a.tokens, b.tokens):
        assert np.array_equal(za.data, zb.data)


def test_freeze_backbone_blocks_updates(rng):
    bb = Backbone(PRESETS["toy"], rng)
    bb.assign_names("backbone.")
    freeze_backbone(bb)
    before = {n: p.data.copy() for n, p in bb.named_parameters()}
    x = Tensor(rng.standard_normal((1, 3, 32, 32)).astype(np.float32))
    with Tape() as tape:
        loss = ops.mean(bb(x).tokens[-1])
    grads = backward(tape, loss)
    assert len(grads) == len(before)
    optimizer_step(bb.parameters(), grads, OptState(), lr=0.1)
    assert all(np.array_equal(p.data, before[n]) for n, p in bb.named_parameters())
    assert all(p.frozen for p in bb.parameters())

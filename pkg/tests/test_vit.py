import numpy as np
import pytest

from textdiae import tensor as T
from textdiae.errors import ConfigError, DimensionError, NumericError
from textdiae.imageops import TASKS, Image, to_patches
from textdiae.nn import Block, MultiHeadAttention, causal_mask, initialize
from textdiae.recognize import RecDecoder
from textdiae.tensor import Tensor
from textdiae.vit import (ENCODER_EMBEDS, ModelConfig, count_params, encoder_forward, init_weights, patch_embed,
                          recon_decoder_forward)

SMALL = dict(image_h=16, image_w=32, channels=1, patch_size=8, enc_layers=2, enc_heads=2, enc_dim=16,
             dec_layers=1, dec_heads=2, dec_dim=8, rec_layers=1, rec_heads=2, rec_dim=8, max_text_len=5,
             charset="abc")


def test_config_validation():
    with pytest.raises(ConfigError, match="divisible"):
        ModelConfig(enc_dim=30, enc_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(image_h=60)
    with pytest.raises(ConfigError):
        ModelConfig(channels=2)
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"bogus": 1})
    cfg = ModelConfig(**SMALL)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert (cfg.num_patches, cfg.patch_dim, cfg.vocab_size) == (8, 64, 6)


def test_full_scale_defaults():
    cfg = ModelConfig()
    assert (cfg.image_h, cfg.image_w, cfg.channels, cfg.patch_size) == (64, 256, 3, 8)
    assert (cfg.enc_layers, cfg.enc_heads, cfg.enc_dim) == (6, 8, 768)
    assert cfg.num_patches == 256


@pytest.mark.parametrize("overrides", [{}, {"channels": 3, "enc_dim": 24, "dec_dim": 12, "mlp_ratio": 2}])
def test_count_params_matches_modules(overrides):
    cfg = ModelConfig(**{**SMALL, **overrides})
    enc, dec = init_weights(cfg)
    assert count_params(cfg, "encoder") == enc.num_parameters()
    assert count_params(cfg, "decoder") == dec.num_parameters()
    assert count_params(cfg, "pretrain") == enc.num_parameters() + dec.num_parameters()
    assert count_params(cfg, "recognizer") == RecDecoder(cfg).num_parameters()


def test_init_is_seeded_and_well_formed():
    cfg = ModelConfig(**SMALL)
    a, _ = init_weights(cfg, seed=3)
    b, _ = init_weights(cfg, seed=3)
    c, _ = init_weights(cfg, seed=4)
    pa, pb, pc = a.named_parameters(), b.named_parameters(), c.named_parameters()
    assert all(np.array_equal(pa[k].data, pb[k].data) for k in pa)
    assert not np.array_equal(pa["pos"].data, pc["pos"].data)
    assert np.abs(pa["pos"].data).max() <= 0.04
    assert np.all(pa["blocks.0.norm1.gamma"].data == 1)
    assert set(a.embed) == set(ENCODER_EMBEDS)


def test_encoder_shapes_and_patch_embedding(rng):
    cfg = ModelConfig(**SMALL)
    enc, dec = init_weights(cfg)
    img = rng.integers(0, 256, size=(16, 32, 1)).astype(np.uint8)
    grid = to_patches(Image(img), 8)
    z0 = patch_embed(enc, grid, "mask")
    x = grid.patches.astype(np.float32) / 255
    np.testing.assert_allclose(z0.data, x @ enc.embed["mask"].weight.data + enc.embed["mask"].bias.data
                               + enc.pos.data, rtol=1e-6, atol=1e-6)
    z = encoder_forward(enc, z0)
    assert z.shape == (8, 16)
    for task in TASKS:
        assert recon_decoder_forward(dec, z, task).shape == (8, 64)
    with pytest.raises(ConfigError):
        recon_decoder_forward(dec, z, "finetune")


def test_wrong_patch_count():
    cfg = ModelConfig(**SMALL)
    enc, _ = init_weights(cfg)
    with pytest.raises(DimensionError):
        enc(np.zeros((1, 7, 64), dtype=np.float32), "mask")


def test_non_finite_activations_raise():
    cfg = ModelConfig(**SMALL)
    enc, _ = init_weights(cfg)
    enc.pos.data[0, 0] = np.nan
    with pytest.raises(NumericError):
        encoder_forward(enc, patch_embed(enc, np.zeros((8, 64), dtype=np.float32), "blur"))


def test_zeroed_residual_branches_reduce_to_final_norm(rng):
    cfg = ModelConfig(**SMALL)
    enc, _ = init_weights(cfg)
    for blk in enc.blocks:
        for lin in (blk.attn.out, blk.mlp.fc2):
            lin.weight.data[...] = 0
            lin.bias.data[...] = 0
    z0 = patch_embed(enc, rng.random((8, 64)).astype(np.float32), "noise")
    expected = T.layer_norm(z0, enc.norm.gamma, enc.norm.beta).data
    np.testing.assert_array_equal(encoder_forward(enc, z0).data, expected)


def test_attention_matches_reference(rng):
    mha = MultiHeadAttention(8, 2, dtype=np.float64)
    initialize(mha, 0)
    x = rng.standard_normal((1, 5, 8))
    out = mha(Tensor(x, dtype=np.float64)).data[0]
    q = x[0] @ mha.q.weight.data + mha.q.bias.data
    k = x[0] @ mha.k.weight.data
    v = x[0] @ mha.v.weight.data + mha.v.bias.data
    heads = []
    for h in range(2):
        s = slice(4 * h, 4 * h + 4)
        sc = q[:, s] @ k[:, s].T / 2.0
        p = np.exp(sc - sc.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        heads.append(p @ v[:, s])
    ref = np.concatenate(heads, 1) @ mha.out.weight.data + mha.out.bias.data
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_causal_mask_shape():
    m = causal_mask(3)
    assert np.isneginf(m[0, 1]) and m[1, 0] == 0 and m[2, 2] == 0


def test_block_is_pre_ln(rng):
    blk = Block(8, 2, dtype=np.float64)
    initialize(blk, 1)
    x = Tensor(rng.standard_normal((1, 3, 8)), dtype=np.float64)
    h = x + blk.attn(blk.norm1(x))
    ref = h + blk.mlp(blk.norm2(h))
    np.testing.assert_array_equal(blk(x).data, ref.data)

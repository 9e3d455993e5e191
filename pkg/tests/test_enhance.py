import numpy as np
import pytest

from conftest import random_image
from textdiae import tensor as T
from textdiae.config import FinetuneConfig
from textdiae.errors import DataError, DimensionError
from textdiae.enhance import Enhancer, binarize, enh_finetune_step, enh_loss, enhance_image, train_enhancer
from textdiae.imageops import Image
from textdiae.pretrain import make_optimizer
from textdiae.vit import ModelConfig

CFG = ModelConfig(image_h=32, image_w=64, channels=1, patch_size=8, enc_layers=1, enc_heads=2, enc_dim=16,
                  dec_layers=1, dec_heads=2, dec_dim=16, rec_layers=1, rec_heads=2, rec_dim=16, max_text_len=6)


def _gray(values):
    return Image(np.array(values, dtype=np.uint8).reshape(1, -1, 1))


def test_binarize_examples():
    assert binarize(_gray([10, 200])).pixels.ravel().tolist() == [0, 255]
    assert binarize(_gray([128, 129])).pixels.ravel().tolist() == [0, 255]
    assert np.all(binarize(_gray([0, 254, 255]), threshold=255).pixels == 0)
    assert np.all(binarize(Image(np.full((4, 4, 1), 255, np.uint8))).pixels == 255)
    with pytest.raises(DataError):
        binarize(_gray([1]), threshold=300)


def test_binarize_is_idempotent(rng):
    for _ in range(10):
        img = random_image(rng, 9, 7, 3)
        once = binarize(img, int(rng.integers(0, 256)))
        assert once.channels == 1
        assert binarize(once) == once


class Identity:
    tile = (32, 64)

    def __call__(self, batch):
        return batch


@pytest.mark.parametrize("shape", [(300, 300), (1, 1), (5, 70), (32, 64), (64, 128)])
@pytest.mark.parametrize("overlap", [0, 7])
def test_identity_model_reproduces_the_page(shape, overlap, rng):
    img = random_image(rng, *shape)
    out = enhance_image(img, Identity(), overlap=overlap)
    assert out == img


def test_model_output_shape_on_a_full_page(rng):
    model = Enhancer.create(CFG, 0)
    img = random_image(rng, 300, 300)
    out = enhance_image(img, model, overlap=8, batch_size=64)
    assert out.shape == (300, 300, 1)


def test_single_tile_equals_one_forward(rng):
    model = Enhancer.create(CFG, 1)
    img = random_image(rng, 32, 64)
    direct = Image.from_float(model(img.to_float(np.float32)[None])[0])
    assert enhance_image(img, model) == direct


def test_tiles_without_overlap_are_independent(rng):
    model = Enhancer.create(CFG, 2)
    left, right = random_image(rng, 32, 64), random_image(rng, 32, 64)
    page = Image(np.concatenate([left.pixels, right.pixels], axis=1))
    out = enhance_image(page, model)
    np.testing.assert_array_equal(out.pixels[:, :64], enhance_image(left, model).pixels)
    np.testing.assert_array_equal(out.pixels[:, 64:], enhance_image(right, model).pixels)


def test_bad_overlap_or_missing_tile(rng):
    img = random_image(rng, 8, 8)
    with pytest.raises(DimensionError):
        enhance_image(img, Identity(), overlap=32)
    with pytest.raises(DimensionError):
        enhance_image(img, lambda b: b)
    assert enhance_image(img, lambda b: b, tile=4) == img


def test_pair_size_mismatch_names_the_pair(rng):
    pairs = [(random_image(rng, 32, 64), random_image(rng, 32, 64)),
             (random_image(rng, 32, 64), random_image(rng, 32, 32))]
    with pytest.raises(DataError, match="pair 1"):
        train_enhancer(pairs, CFG, FinetuneConfig(max_steps=1))
    with pytest.raises(DataError, match="pair 0"):
        train_enhancer([(random_image(rng, 16, 16), random_image(rng, 16, 16))], CFG, FinetuneConfig(max_steps=1))


def test_loss_is_pixel_mse(rng):
    model = Enhancer.create(CFG, 0)
    pairs = [(random_image(rng, 32, 64), random_image(rng, 32, 64)) for _ in range(2)]
    loss = float(enh_loss(model, pairs).data)
    outs = model(np.stack([d.to_float(np.float32) for d, _ in pairs]))
    targets = np.stack([c.pixels / 255.0 for _, c in pairs])
    assert loss == pytest.approx(float(np.mean((outs - targets) ** 2)), rel=1e-5)


def test_step_lowers_the_loss(word_images, rng):
    model = Enhancer.create(CFG, 0)
    opt = make_optimizer(model, FinetuneConfig(lr=3e-3, weight_decay=0.0))
    pairs = [(img, img) for img in word_images[:2]]
    first = enh_finetune_step(model, opt, pairs, 3e-3)
    for _ in range(10):
        last = enh_finetune_step(model, opt, pairs, 3e-3)
    assert last < first
    with T.no_grad():
        assert float(enh_loss(model, pairs).data) < first


def test_train_enhancer_checkpoint(word_images):
    pairs = [(img, img) for img in word_images[:2]]
    model, ck = train_enhancer(pairs, CFG, FinetuneConfig(max_steps=2, batch_size=2))
    assert ck.kind == "enh" and ck.step == 2
    assert set(ck.tensors) == set(model.named_parameters())

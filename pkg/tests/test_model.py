import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ptx import autodiff as ad
from ptx.autodiff import Tensor
from ptx.config import ModelConfig, VARIANTS, variant
from ptx.model import (
    PointPrompt,
    SegModel,
    VariantMismatch,
    init_base,
    load_checkpoint,
    resample_nearest,
    save_checkpoint,
)
from ptx.textbank import bank_from_vectors
from ptx.trainer import build_model, gradcheck_model

SMALL = ModelConfig(image_size=32, patch_size=8, embed_dim=32, depth=2, heads=4, bottleneck=8, text_dim=16,
                    decoder_dim=32, mlp_ratio=4)
TEXT_SITES = {"parallel_text": "image_encoder", "text_mlp_mhsa": "image_encoder",
              "inject_prompt": "prompt_encoder", "inject_decoder": "mask_decoder"}


def build(name, cfg=SMALL, base_seed=0, seed=0):
    return SegModel.build(cfg, variant(name), init_base(cfg, base_seed), seed)


def inputs(cfg, seed, k=5):
    r = np.random.default_rng(seed)
    img = r.random((cfg.image_size, cfg.image_size, 3))
    pts = [PointPrompt(int(x), int(y)) for x, y in r.integers(0, cfg.image_size, (k, 2))]
    t = r.standard_normal(cfg.text_dim)
    return img, pts, t / np.linalg.norm(t)


def enliven(model, rng, scale=0.3):
    """Give zero-initialised tensors random values, standing in for trained weights."""
    for t in model.partition.trainable.values():
        if not t.data.any():
            t.data[...] = rng.uniform(-scale, scale, t.shape)
    return model


@pytest.mark.parametrize("name", ["parallel", "parallel_text", "text_mlp_mhsa", "inject_prompt", "inject_decoder"])
def test_identity_at_init_is_bitwise(f64, name):
    plain = build("none")
    model = build(name)
    for s in range(3):
        img, pts, t = inputs(SMALL, s)
        want = plain.predict(img, pts).data
        got = model.predict(img, pts, t if model.variant.uses_text else None).data
        if model.variant.injection_site in ("image_encoder", "none"):
            assert np.array_equal(got, want)
        else:
            # prompt/decoder sites add GELU(t W_t) directly; only the encoder is untouched
            assert np.array_equal(model.encode_image(img, t).data, plain.encode_image(img).data)


def test_encoder_with_zero_adapters_equals_backbone(f64):
    img, _, t = inputs(SMALL, 0)
    assert np.array_equal(build("parallel_text").encode_image(img, t).data, build("none").encode_image(img).data)


def test_text_changes_tokens_once_trained(f64, rng):
    m = enliven(build("parallel_text"), rng)
    img, _, t1 = inputs(SMALL, 1)
    _, _, t2 = inputs(SMALL, 2)
    assert np.linalg.norm(m.encode_image(img, t1).data - m.encode_image(img, t2).data) > 0


@pytest.mark.parametrize("name", sorted(TEXT_SITES))
def test_zeroing_site_projection_removes_text_influence(f64, rng, name):
    m = enliven(build(name), rng)
    for k, p in m.params.items():
        if k.endswith("w_t"):
            p.data[...] = 0.0
    img, pts, _ = inputs(SMALL, 0)
    outs = {m.predict(img, pts, inputs(SMALL, 100 + i)[2]).data.tobytes() for i in range(10)}
    assert len(outs) == 1


@pytest.mark.parametrize("name", sorted(TEXT_SITES))
def test_text_enters_through_exactly_one_site(f64, rng, name):
    m = enliven(build(name), rng)
    img, pts, t = inputs(SMALL, 0)
    t2 = inputs(SMALL, 1)[2]
    site = TEXT_SITES[name]
    enc_same = np.array_equal(m.encode_image(img, t).data, m.encode_image(img, t2).data)
    tok_same = np.array_equal(m.encode_prompts(pts, t).data, m.encode_prompts(pts, t2).data)
    assert enc_same == (site != "image_encoder")
    assert tok_same == (site != "prompt_encoder")
    assert not np.array_equal(m.predict(img, pts, t).data, m.predict(img, pts, t2).data)


def test_prompt_encoder_zero_text_equals_plain_tokens(f64):
    img, pts, _ = inputs(SMALL, 0)
    m, plain = build("inject_prompt"), build("none")
    assert np.array_equal(m.encode_prompts(pts, np.zeros(SMALL.text_dim)).data, plain.encode_prompts(pts).data)


def test_decoder_zero_text_equals_plain_decode(f64):
    img, pts, _ = inputs(SMALL, 0)
    m, plain = build("inject_decoder"), build("none")
    z = np.zeros(SMALL.text_dim)
    got = m.decode_mask(plain.encode_image(img), plain.encode_prompts(pts), Tensor(z)).data
    assert np.array_equal(got, plain.predict(img, pts).data)


def test_prompt_tokens_shape_and_determinism(f64):
    m = build("none")
    pts = [PointPrompt(3, 4)] * 2 + [PointPrompt(10, 1), PointPrompt(0, 31), PointPrompt(31, 0)]
    tok = m.encode_prompts(pts).data
    assert tok.shape == (5, SMALL.decoder_dim)
    assert np.array_equal(tok[0], tok[1])


def test_point_outside_image_is_rejected():
    with pytest.raises(ValueError, match="outside"):
        build("none").encode_prompts([PointPrompt(32, 0)])


def test_variant_mismatch_on_text():
    img, pts, t = inputs(SMALL, 0)
    with pytest.raises(VariantMismatch):
        build("parallel").predict(img, pts, t)
    with pytest.raises(VariantMismatch):
        build("parallel_text").predict(img, pts)


@pytest.mark.parametrize("grid", [4, 8, 16])
def test_logit_shape_sweep(grid):
    cfg = ModelConfig(image_size=grid * 4, patch_size=4, embed_dim=16, depth=1, heads=2, bottleneck=4,
                      text_dim=8, decoder_dim=16, mlp_ratio=2)
    img, pts, t = inputs(cfg, 0)
    assert build("parallel_text", cfg).predict(img, pts, t).shape == (2 * grid, 2 * grid)


def test_default_logits_are_16x16():
    cfg = ModelConfig()
    img, pts, t = inputs(cfg, 0)
    m = SegModel.build(cfg, variant("parallel_text"), init_base(cfg, 0), 0)
    assert m.predict(img, pts, t).shape == (16, 16)


def test_logits_finite_over_100_seeds():
    m = build("parallel_text")
    for s in range(100):
        img, pts, t = inputs(SMALL, s, k=1 + s % 5)
        assert np.isfinite(m.predict(img, pts, t).data).all()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.permutations(range(5)))
def test_prompt_order_does_not_matter(seed, perm):
    with ad.precision("f64"):
        m = enliven(build("parallel_text"), np.random.default_rng(seed))
        img, pts, t = inputs(SMALL, seed)
        a = m.predict(img, pts, t).data
        b = m.predict(img, [pts[i] for i in perm], t).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_loss_reference_points(f64):
    m = build("none")
    img, pts, _ = inputs(SMALL, 0)
    gt = np.zeros((16, 16))
    gt[4:9, 2:7] = 1
    _, loss = m.forward(img, pts, gt)
    assert np.isfinite(loss.item())
    assert ad.bce_loss(Tensor(np.where(gt > 0, 20.0, -20.0)), gt).item() < 1e-6
    assert abs(ad.bce_loss(Tensor(np.zeros((16, 16))), gt).item() - np.log(2)) < 1e-12


def test_full_image_mask_is_resampled_to_loss_resolution():
    mask = np.zeros((64, 64), bool)
    mask[8:24, 40:56] = True
    small = resample_nearest(mask, 16)
    assert small.shape == (16, 16)
    assert small[2:6, 10:14].all() and small.sum() == 16


@pytest.mark.parametrize("name", ["parallel_text", "inject_prompt", "inject_decoder", "text_mlp_mhsa"])
def test_model_gradients_match_finite_differences(name):
    errs = gradcheck_model(name, SMALL, coords_per_tensor=6)
    assert max(errs.values()) < 1e-4


def test_imported_512_dim_bank_resizes_projections(f64):
    r = np.random.default_rng(0)
    bank = bank_from_vectors({c: r.standard_normal(512) for c in ("disk", "ring")})
    m = build_model(SMALL, "parallel_text", bank=bank)
    assert m.cfg.text_dim == 512
    assert m.params["block0.mlp_adapter.w_t"].shape == (512, SMALL.embed_dim)
    img, pts, _ = inputs(SMALL, 0)
    assert m.predict(img, pts, bank.lookup("ring")).shape == (8, 8)


def test_checkpoint_round_trip(tmp_path, rng):
    m = enliven(build("parallel_text"), rng)
    save_checkpoint(tmp_path / "ck", m, {"adam.m.x": np.ones(3, np.float32)}, {"step": 7})
    ck = load_checkpoint(tmp_path / "ck")
    assert ck.meta["step"] == 7 and np.array_equal(ck.state["adam.m.x"], np.ones(3))
    assert ck.model.variant == m.variant
    for k, t in m.params.items():
        assert np.array_equal(ck.model.params[k].data, t.data.astype(np.float32))
    assert set(ck.model.partition.trainable) == set(m.partition.trainable)


def test_missing_checkpoint_is_reported(tmp_path):
    with pytest.raises(FileNotFoundError, match="manifest"):
        load_checkpoint(tmp_path / "nothing")


@pytest.mark.parametrize("name", sorted(VARIANTS))
def test_every_variant_runs(name):
    m = build(name)
    img, pts, t = inputs(SMALL, 0)
    assert m.predict(img, pts, t if m.variant.uses_text else None).shape == (8, 8)

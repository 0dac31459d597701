import numpy as np
import pytest

from fineformer import tensor as T
from fineformer.architectures import (BackboneStub, CrossEncoderModel, MeanPoolBaseline, ModelConfig,
                                      VisionEncoderModel, Vocabulary, build_model, spatial_avg_pool)
from fineformer.gradcheck import check_architectures, miniature_config, randomize_parameters
from fineformer.tensor import Tensor

SMALL = ModelConfig(hidden=32, heads=4, layers=2, channels=64, tokens=8, vocab_size=12, num_classes=16)


def zero_tables(model):
    model.position.data[...] = 0
    if isinstance(model, CrossEncoderModel):
        model.token_type.data[...] = 0


# -- config and vocabulary ---------------------------------------------------

def test_config_validation_and_presets():
    with pytest.raises(ValueError):
        ModelConfig(hidden=30, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(frames=15, tokens=8)
    g99, g288 = ModelConfig.gym99(), ModelConfig.gym288()
    assert (g99.hidden, g99.layers, g99.cross_layers, g99.vocab_size) == (768, 3, 2, 66)
    assert (g288.vocab_size, g288.num_classes) == (98, 288)
    assert ModelConfig.from_dict(SMALL.to_dict()) == SMALL
    with pytest.raises((KeyError, ValueError)):
        ModelConfig.from_dict({**SMALL.to_dict(), "dropout": 0.1})


def test_vocabulary_ids_are_indices():
    vocab = Vocabulary.from_class_descriptions([["split leap", "turn"], ["turn", "salto"]])
    assert len(vocab) == 3
    assert vocab.ids().tolist() == [0, 1, 2]
    for i, d in enumerate(vocab.descriptions):
        assert vocab.encode(d) == i
    with pytest.raises(KeyError):
        vocab.encode("handstand")


# -- backbone and pooling -----------------------------------------------------

def test_backbone_extents_from_stride_arithmetic():
    cfg = ModelConfig(hidden=32, heads=4, channels=64, tokens=8, feat_h=4, feat_w=4,
                      frames=16, frame_h=32, frame_w=32)
    stub = BackboneStub(cfg, seed=0)
    video = np.random.default_rng(0).standard_normal((16, 32, 32, 3))
    out = stub(video)
    assert out.shape == (64, 8, 4, 4)
    assert np.array_equal(stub(video).data, out.data)
    assert np.array_equal(stub(np.zeros((16, 32, 32, 3))).data, np.zeros((64, 8, 4, 4)))
    with pytest.raises(T.ShapeError):
        stub(np.zeros((16, 32, 30, 3)))


def test_backbone_matches_direct_computation():
    cfg = ModelConfig(hidden=8, heads=2, channels=5, tokens=2, feat_h=2, feat_w=1,
                      frames=4, frame_h=4, frame_w=2)
    stub = BackboneStub(cfg, seed=3)
    video = np.random.default_rng(1).standard_normal((4, 4, 2, 3))
    expected = np.zeros((5, 2, 2, 1))
    for t, frame in enumerate(video[::2]):
        for i in range(2):
            patch = frame[2 * i:2 * i + 2].reshape(-1, 3).mean(0)
            expected[:, t, i, 0] = patch @ stub.projection.data
    assert np.allclose(stub(video).data, expected, atol=1e-14)


def test_spatial_avg_pool_examples():
    vol = np.array([[[[1.0, 2.0], [3.0, 4.0]]], [[[5.0, -1.0], [0.0, 0.5]]]])
    assert vol.shape == (2, 1, 2, 2)
    expected = np.array([[np.mean([1, 2, 3, 4])], [np.mean([5, -1, 0, 0.5])]])
    assert np.array_equal(spatial_avg_pool(Tensor(vol)).data, expected)
    x = np.random.default_rng(2).standard_normal((3, 4, 1, 1))
    assert np.array_equal(spatial_avg_pool(Tensor(x)).data, x[..., 0, 0])
    assert np.all(spatial_avg_pool(Tensor(np.full((3, 4, 2, 5), 0.375))).data == 0.375)


# -- vision encoder ------------------------------------------------------------

def test_video_embed_shape_and_decomposition():
    model = VisionEncoderModel(SMALL, seed=0)
    rng = np.random.default_rng(3)
    pooled = Tensor(rng.standard_normal((1, 64, 8)))
    assert model.video_embed(pooled).shape == (1, 8, 32)

    model.embed.weight.data[...] = 0
    model.embed.bias.data[...] = 0
    assert np.array_equal(model.video_embed(pooled).data[0], model.position.data)

    model = VisionEncoderModel(SMALL, seed=0)
    zero_tables(model)
    perm = rng.permutation(8)
    a = model.video_embed(pooled).data[0]
    b = model.video_embed(Tensor(pooled.data[:, :, perm])).data[0]
    assert np.array_equal(b, a[perm])


def test_vision_logits_shape_and_functional_determinism():
    cfg = miniature_config(layers=3)
    model = VisionEncoderModel(cfg, seed=1)
    rng = np.random.default_rng(4)
    video = rng.standard_normal((cfg.frames, cfg.frame_h, cfg.frame_w, 3))
    assert model(video, "video").shape == (cfg.num_classes,)
    other = video.copy()
    other[1] = rng.standard_normal(other[1].shape)  # frame 1 is skipped by the stride-2 stub
    assert np.array_equal(model(video, "video").data, model(other, "video").data)
    batch = np.stack([video, other, video])
    assert model(batch, "video").shape == (3, cfg.num_classes)


def test_baseline_ignores_order():
    model = MeanPoolBaseline(SMALL, seed=0)
    x = np.random.default_rng(5).standard_normal((64, 8))
    perm = np.random.default_rng(6).permutation(8)
    assert np.allclose(model(x).data, model(x[:, perm]).data, atol=1e-15)


# -- cross encoder -------------------------------------------------------------

def test_text_embed_decomposition():
    model = CrossEncoderModel(SMALL, seed=0)
    t, n = SMALL.tokens, SMALL.vocab_size
    out = model.text_embed()
    assert out.shape == (n, 32)
    assert np.array_equal(out.data, model.text_embed().data)
    assert np.array_equal(out.data, model.text.table.data + model.position.data[t:t + n])
    model.position.data[...] = 0
    assert np.array_equal(model.text_embed().data, model.text.table.data)
    with pytest.raises(IndexError):
        model.text(np.array([n]))


def test_cross_embed_decomposition():
    model = CrossEncoderModel(SMALL, seed=0)
    rng = np.random.default_rng(7)
    t = SMALL.tokens
    visual = Tensor(rng.standard_normal((2, t, 32)))
    text = Tensor(rng.standard_normal((SMALL.vocab_size, 32)))
    out = model.cross_embed(visual, text).data
    assert out.shape == (2, t + SMALL.vocab_size, 32)
    pos, typ = model.position.data, model.token_type.data
    assert np.array_equal(out[1, t], text.data[0] + pos[t] + typ[1])
    assert np.array_equal(out[0, 0], visual.data[0, 0] + pos[0] + typ[0])
    zero_tables(model)
    plain = model.cross_embed(visual, text).data
    assert np.array_equal(plain[0], np.concatenate([visual.data[0], text.data]))


def test_position_added_once_per_token():
    model = CrossEncoderModel(SMALL, seed=2)
    rng = np.random.default_rng(8)
    pooled = Tensor(rng.standard_normal((1, 64, 8)))
    t = SMALL.tokens
    full = model.cross_embed(model.visual_tokens(pooled), model.text(model.vocabulary.ids())).data[0]
    assert np.allclose(full[:t], model.video_embed(pooled).data[0] + model.token_type.data[0], atol=1e-15)
    assert np.allclose(full[t:], model.text_embed().data + model.token_type.data[1], atol=1e-15)


def test_split_partition_and_joint_width():
    model = CrossEncoderModel(SMALL, seed=0)
    pooled = Tensor(np.random.default_rng(9).standard_normal((3, 64, 8)))
    encoded = model.encode(pooled)
    visual, text = model.split(encoded)
    assert visual.shape == (3, SMALL.tokens, SMALL.hidden)
    assert text.shape == (3, SMALL.vocab_size, SMALL.hidden)
    assert np.array_equal(np.concatenate([visual.data, text.data], axis=1), encoded.data)
    assert model.head.weight.shape == (2 * SMALL.hidden, SMALL.num_classes)
    assert model(pooled).shape == (3, SMALL.num_classes)


def test_cross_attention_diagnostic_shape_and_uniform_case():
    model = CrossEncoderModel(SMALL, seed=0)
    x = np.random.default_rng(10).standard_normal((64, 8))
    attn = model.cross_attention(x)
    assert attn.shape == (SMALL.vocab_size, SMALL.tokens)
    assert np.all(attn.sum(-1) <= 1 + 1e-12)
    for layer in model.encoder.layers:
        layer.attention.query.weight.data[...] = 0
        layer.attention.key.weight.data[...] = 0
    attn = model.cross_attention(x)
    assert np.allclose(attn, 1.0 / (SMALL.tokens + SMALL.vocab_size), rtol=0, atol=1e-15)


def test_cross_invariant_to_modality_preserving_permutation():
    model = CrossEncoderModel(SMALL, seed=3)
    randomize_parameters(model, np.random.default_rng(11))
    zero_tables(model)
    rng = np.random.default_rng(12)
    x = rng.standard_normal((64, 8))
    tperm = rng.permutation(8)
    nperm = rng.permutation(SMALL.vocab_size)
    base = model(x).data
    moved = model(x[:, tperm], text_ids=model.vocabulary.ids()[nperm]).data
    assert np.max(np.abs(moved - base)) < 1e-9


def test_frozen_backbone_not_trainable():
    for arch in ("baseline", "vision", "cross"):
        model = build_model(arch, SMALL, seed=0)
        names = [n for n, _ in model.named_parameters()]
        assert not any(n.startswith("backbone") for n in names)
        assert [n for n, _ in model.frozen_parameters()] == ["backbone.projection"]
    with pytest.raises(ValueError):
        build_model("cls_token", SMALL)


def test_same_seed_same_model():
    a, b = CrossEncoderModel(SMALL, seed=5), CrossEncoderModel(SMALL, seed=5)
    for (_, p), (_, q) in zip(a.named_parameters(include_frozen=True), b.named_parameters(include_frozen=True)):
        assert np.array_equal(p.data, q.data)


def test_end_to_end_gradients_on_miniature_configs():
    results = check_architectures(seed=2)
    bad = [r.line() for r in results if not r.passed]
    assert not bad, "\n".join(bad)
    assert any(r.name.startswith("cross_encoder:") for r in results)
    assert any("backbone receives no grad" in r.name for r in results)

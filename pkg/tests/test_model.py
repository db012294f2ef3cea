import numpy as np
import pytest

from maanet.autodiff import Graph, Tensor, backward, grad_check, precision
from maanet.autodiff import functional as F
from maanet.errors import ConfigError
from maanet.losses import attn_loss
from maanet.model import (ATTRIBUTES, HEADS, LOCALIZATION_CHANNEL, ModelConfig, build, localization_map,
                          parameter_checksum, predict_probs)
from maanet.nn import InitPolicy

TINY = dict(input_size=32, tap_stride=8, stem_channels=4, stage_channels=(4, 8), stream_width=4)


def batch(n=2, size=64, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, size=(n, 1, size, size)).astype(np.float32)


@pytest.fixture(scope="module")
def model():
    return build(ModelConfig(), InitPolicy(seed=0))


def test_desk_scale_shapes(model):
    out = model(batch())
    assert out.maps.shape == (2, 7, 4, 4)
    assert out.attr_logits.shape == (2, 7)
    assert out.attn_logits.shape == (2, 7)
    assert out.heads == HEADS
    assert set(out.stream_features) == set(ATTRIBUTES)
    assert all(v.shape == (2, 64) for v in out.stream_features.values())


def test_full_resolution_maps_are_14():
    cfg = ModelConfig(input_size=224)
    assert cfg.map_size == 14
    m = build(cfg)
    m.eval()
    out = m(batch(1, 224))
    assert out.maps.shape == (1, 7, 14, 14)


def test_input_size_must_divide_tap_stride():
    with pytest.raises(ConfigError):
        ModelConfig(input_size=72)
    with pytest.raises(ConfigError):
        ModelConfig(attr_branch=False, attn_branch=True)
    with pytest.raises(ConfigError):
        ModelConfig(malignancy_from="pixels")


def test_build_deterministic():
    a = build(ModelConfig(), InitPolicy(seed=3))
    b = build(ModelConfig(), InitPolicy(seed=3))
    assert parameter_checksum(a) == parameter_checksum(b)
    assert sum(p.data.size for p in a.parameters()) == sum(p.data.size for p in b.parameters())
    assert parameter_checksum(a) != parameter_checksum(build(ModelConfig(), InitPolicy(seed=4)))


def test_maps_strictly_inside_unit_interval(model):
    maps = model(batch()).maps.data
    assert maps.min() > 0 and maps.max() < 1


def test_all_ones_attention_equals_attention_free(model):
    model.eval()
    x = batch(3, seed=1)
    ones = model(x, attention_override=1.0)
    free = model(x, attention_override="off")
    assert np.array_equal(ones.attr_logits.data, free.attr_logits.data)
    for a in ATTRIBUTES:
        assert np.array_equal(ones.stream_inputs[a].data, free.stream_inputs[a].data)
    model.train()


def test_stream_input_is_map_times_features(model):
    out = model(batch())
    f = out.features.data
    for c, a in enumerate(ATTRIBUTES):
        expected = out.maps.data[:, c:c + 1] * f
        assert np.array_equal(out.stream_inputs[a].data, expected)


def test_malignancy_reaches_backbone_only_through_streams(model):
    out = model(batch())
    malig = out.attr_logits[:, 0]
    reach_all = Graph.trace(malig).ancestors(malig)
    assert id(out.features) in reach_all
    blocked = Graph.trace(malig).ancestors(malig, stop=list(out.stream_features.values()))
    assert id(out.features) not in blocked
    # past the stream features only head FCs remain: the malignancy FC and, via
    # the shared logit concat, the stream FCs whose columns index [:, 0] discards
    heads = {id(p) for p in model.malignancy_fc.parameters()}
    assert heads <= blocked
    heads |= {id(p) for s in model.streams.values() for p in s.fc.parameters()}
    params = {id(p) for p in model.parameters()}
    assert (blocked & params) <= heads


def test_malignancy_gradient_vanishes_with_streams_cut(model):
    model.zero_grad()
    out = model(batch())
    backward(F.sum(out.attr_logits[:, 0]))
    backbone_grad = sum(np.abs(p.grad).sum() for p in model.backbone.parameters())
    attention_grad = sum(np.abs(p.grad).sum() for p in model.attention.parameters())
    assert backbone_grad > 0 and attention_grad > 0
    # the localization map feeds no stream, so its projection row gets nothing
    assert np.abs(model.attention.proj.weight.grad[LOCALIZATION_CHANNEL]).sum() == 0
    model.zero_grad()


def test_attn_loss_gradient_stays_in_attention_path(model):
    model.zero_grad()
    out = model(batch())
    backward(attn_loss(out.attn_logits, np.ones((2, 7))))
    for stream in model.streams.values():
        assert all(np.abs(p.grad).sum() == 0 for p in stream.parameters())
    assert np.abs(model.malignancy_fc.weight.grad).sum() == 0
    assert np.abs(model.attention.proj.weight.grad).sum() > 0
    model.zero_grad()


def test_zeroed_heads_give_half_probabilities():
    m = build(ModelConfig(), InitPolicy(seed=1))
    for fc in [m.malignancy_fc] + [s.fc for s in m.streams.values()]:
        fc.weight.data[...] = 0
        fc.bias.data[...] = 0
    out = m(batch())
    assert np.array_equal(out.attr_logits.data, np.zeros((2, 7), dtype=np.float32))
    assert np.array_equal(predict_probs(out.attr_logits), np.full((2, 7), 0.5))


def test_predict_probs_examples():
    p = predict_probs(np.array([0.0, -2.0, 1e6, -1e6, 88.0]))
    assert p[0] == 0.5
    assert p[1] == pytest.approx(0.1192, abs=1e-4)
    assert p[2] == 1.0 and p[3] >= 0.0
    assert np.isfinite(p).all()


def test_localization_map_constant_and_monotone(model):
    out = model(batch())
    out.maps.data[...] = 0.7
    heat = localization_map(out, 64)
    assert heat.shape == (2, 64, 64)
    np.testing.assert_allclose(heat, 0.7, atol=1e-6)
    out.maps.data[:, LOCALIZATION_CHANNEL] = 0.0
    out.maps.data[:, LOCALIZATION_CHANNEL, :, 2:] = 1.0
    heat = localization_map(out, 8)
    assert (np.diff(heat, axis=-1) >= 0).all()
    with pytest.raises(ConfigError):
        localization_map(out, 2)


def test_localization_map_two_by_two_rows_monotone():
    from maanet.imageops import bilinear_resize
    up = bilinear_resize(np.array([[0.0, 1.0], [0.0, 1.0]]), 4, 4)
    assert (np.diff(up, axis=1) >= 0).all()
    assert up.min() >= 0 and up.max() <= 1


def test_ablation_layouts():
    base = build(ModelConfig(attr_branch=False, attn_branch=False))
    out = base(batch())
    assert out.heads == ("malig",) and out.attr_logits.shape == (2, 1) and out.maps is None
    assert not any(n.startswith("attention") for n, _ in base.named_parameters())
    attr = build(ModelConfig(attn_branch=False))
    # the plain classifier's last stage is a stream without its attribute fc
    size = lambda ps: sum(p.data.size for p in ps)
    stream = attr.streams["calc"]
    assert size(base.head_stage.parameters()) == size(stream.parameters()) - size(stream.fc.parameters())
    out = attr(batch())
    assert out.attr_logits.shape == (2, 7) and out.maps is None
    single = build(ModelConfig(attn_branch=False, attributes=("calc",)))
    assert single(batch()).heads == ("malig", "calc")
    logits_head = build(ModelConfig(malignancy_from="logits"))
    assert logits_head.malignancy_fc.weight.shape == (1, 6)


def _tiny_loss(m, x, y, w):
    def loss(*params):
        out = m(x)
        return F.add(F.sum(F.mul(out.attr_logits, w)), attn_loss(out.attn_logits, y))
    return loss


def _tiny_inputs(dtype):
    x = Tensor(batch(2, 32, seed=5), dtype=dtype)
    y = np.random.default_rng(0).integers(0, 2, size=(2, 7))
    w = np.random.default_rng(1).normal(size=(2, 7)).astype(dtype)
    return x, y, w


def test_tiny_end_to_end_gradient_check():
    with precision(np.float64):
        m = build(ModelConfig(**TINY), InitPolicy(seed=2)).astype(np.float64)
        rep = grad_check(_tiny_loss(m, *_tiny_inputs(np.float64)), m.parameters(), step=1e-5,
                         tolerance=1e-3, max_elements=5, seed=1)
    assert rep.passed, (rep.max_rel_error, rep.per_input)


def test_tiny_end_to_end_float32_tracks_float64():
    # deep float32 accumulation leaves ~1e-7 absolute noise, so elements far
    # below a tensor's largest gradient are compared against that scale
    m = build(ModelConfig(**TINY), InitPolicy(seed=2))
    backward(_tiny_loss(m, *_tiny_inputs(np.float32))())
    g32 = [p.grad.astype(np.float64) for p in m.parameters()]
    m.zero_grad()
    with precision(np.float64):
        m.astype(np.float64)
        backward(_tiny_loss(m, *_tiny_inputs(np.float64))())
    for (name, p), a in zip(m.named_parameters(), g32):
        scale = max(np.abs(p.grad).max(), 1e-8)
        assert np.abs(a - p.grad).max() / scale < 1e-3, name

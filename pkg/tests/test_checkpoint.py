import numpy as np
import pytest

from conftest import TINY
from maanet import checkpoint as ckpt_io
from maanet.autodiff import SgdState, no_grad
from maanet.errors import ConfigError, DataError
from maanet.model import ModelConfig, build
from maanet.nn import InitPolicy


def trained_ish(cfg=ModelConfig(**TINY)):
    m = build(cfg, InitPolicy(seed=4))
    # perturb BN running stats so buffers are exercised too
    for name, buf in m.named_buffers():
        buf[...] = np.random.default_rng(len(name)).uniform(0.5, 1.5, size=buf.shape)
    return m


def test_save_load_save_is_byte_identical(tmp_path):
    m = trained_ish()
    sgd = SgdState(learning_rate=0.01, momentum=0.9, weight_decay=1e-4)
    sgd.velocity = [np.full(p.data.shape, 0.25, np.float32) for p in m.parameters()]
    rng = np.random.default_rng(3)
    rng.random(5)
    ck = ckpt_io.capture(m, epoch=7, sgd=sgd, rng=rng, extra={"note": "x"})
    ckpt_io.save(tmp_path / "a.maan", ck)
    again = ckpt_io.load(tmp_path / "a.maan")
    ckpt_io.save(tmp_path / "b.maan", again)
    assert (tmp_path / "a.maan").read_bytes() == (tmp_path / "b.maan").read_bytes()
    assert again.epoch == 7 and again.extra == {"note": "x"}
    restored_rng = np.random.default_rng()
    restored_rng.bit_generator.state = again.rng_state
    assert restored_rng.random() == rng.random()


def test_magic_and_layout(tmp_path):
    ck = ckpt_io.capture(trained_ish())
    blob = ckpt_io.to_bytes(ck)
    assert blob[:4] == b"MAAN"
    assert blob[8:72].decode() == ModelConfig(**TINY).digest()


def test_restore_gives_bitwise_identical_forward(tmp_path):
    m = trained_ish()
    ckpt_io.save(tmp_path / "m.maan", ckpt_io.capture(m))
    r, _ = ckpt_io.restore(ckpt_io.load(tmp_path / "m.maan"))
    x = np.random.default_rng(0).random((3, 1, 32, 32)).astype(np.float32)
    m.eval()
    r.eval()
    with no_grad():
        a, b = m(x), r(x)
    assert a.attr_logits.data.tobytes() == b.attr_logits.data.tobytes()
    assert a.maps.data.tobytes() == b.maps.data.tobytes()


def test_restore_optimizer_state():
    m = trained_ish()
    sgd = SgdState(learning_rate=0.001, momentum=0.9, weight_decay=1e-4)
    sgd.velocity = [np.random.default_rng(i).random(p.data.shape).astype(np.float32)
                    for i, p in enumerate(m.parameters())]
    _, back = ckpt_io.restore(ckpt_io.from_bytes(ckpt_io.to_bytes(ckpt_io.capture(m, sgd=sgd))))
    assert back.learning_rate == 0.001 and back.momentum == 0.9
    assert all(np.array_equal(a, b) for a, b in zip(sgd.velocity, back.velocity))


def test_config_digest_mismatch_is_config_error(tmp_path):
    ckpt_io.save(tmp_path / "m.maan", ckpt_io.capture(trained_ish()))
    other = ModelConfig(**{**TINY, "stream_width": 8})
    with pytest.raises(ConfigError):
        ckpt_io.load(tmp_path / "m.maan", expected_config=other)
    assert ckpt_io.load(tmp_path / "m.maan", expected_config=ModelConfig(**TINY)).epoch == 0


def test_corrupt_files_are_data_errors(tmp_path):
    blob = ckpt_io.to_bytes(ckpt_io.capture(trained_ish()))
    (tmp_path / "bad.maan").write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(DataError, match="magic"):
        ckpt_io.load(tmp_path / "bad.maan")
    (tmp_path / "long.maan").write_bytes(blob + b"\0")
    with pytest.raises(DataError):
        ckpt_io.load(tmp_path / "long.maan")
    with pytest.raises(DataError):
        ckpt_io.load(tmp_path / "absent.maan")


def test_baseline_checkpoint_has_no_attention_tensors():
    base = build(ModelConfig(**TINY, attr_branch=False, attn_branch=False))
    ck = ckpt_io.capture(base)
    assert ck.tensors and not any(k.startswith("attention") for k in ck.tensors)
    assert not any(k.startswith("streams") for k in ck.tensors)
    m, _ = ckpt_io.restore(ckpt_io.from_bytes(ckpt_io.to_bytes(ck)))
    assert not m.cfg.attn_branch

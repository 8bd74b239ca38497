import math

import numpy as np
import pytest

from keystroke_asca.errors import ConfigError, IoError, LabelError, ShapeError, StaleTapeError
from keystroke_asca.nn import functional as F
from keystroke_asca.nn.model import (
    Classifier, ModelConfig, attention_weights, conv_stage, predict_topk, relative_attention_stage, softmax_np,
    topk_from_logits,
)
from keystroke_asca.nn.tensor import Tensor

DEFAULT_PARAMETER_COUNT = 132332  # frozen regression value for ModelConfig()


# -- tape ---------------------------------------------------------------------------

def test_sum_and_square_grads():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [1, 1, 1])
    y = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    (y * y).sum().backward()
    np.testing.assert_array_equal(y.grad, [2, 4, 6])


def test_backward_twice_is_stale():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = (x * 3.0).sum()
    loss.backward()
    with pytest.raises(StaleTapeError):
        loss.backward()
    with pytest.raises(StaleTapeError):
        Tensor([1.0]).sum().backward()


def test_untouched_parameters_have_zero_grad():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    (a * 2.0).sum().backward()
    np.testing.assert_array_equal(b.grad, np.zeros(3))


def test_shared_node_accumulates():
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    (y + y).sum().backward()
    np.testing.assert_allclose(x.grad, [8.0])


def test_default_dtype_is_float32():
    t = Tensor([1, 2, 3])
    assert t.dtype == np.float32 and t.shape == (3,)


# -- layers ---------------------------------------------------------------------------

def test_conv_hand_example():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = F.conv2d(x, w, stride=1, padding=1).data[0, 0]
    np.testing.assert_array_equal(out, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_conv_stage_identity_kernels():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    dw = np.zeros((3, 3, 3), np.float32)
    dw[:, 1, 1] = 1.0
    params = {"dw.weight": Tensor(dw), "pw.weight": Tensor(np.eye(3, dtype=np.float32)),
              "norm.gamma": Tensor(np.ones(3)), "norm.beta": Tensor(np.zeros(3))}
    out = conv_stage(x, params, stride=1, norm=False, activation=False)
    np.testing.assert_allclose(out.data, x.data, atol=1e-7)
    assert conv_stage(x, params).shape == (2, 3, 2, 2)
    with pytest.raises(ShapeError):
        conv_stage(Tensor(np.zeros((1, 4, 4, 4))), params)


def _attn_params(c, heads, seed=0, zero_qk=False, zero_out=False, side=15):
    rng = np.random.default_rng(seed)
    qkv = rng.standard_normal((3 * c, c)).astype(np.float32) * 0.3
    if zero_qk:
        qkv[: 2 * c] = 0.0
    out = np.zeros((c, c), np.float32) if zero_out else rng.standard_normal((c, c)).astype(np.float32) * 0.3
    return {"qkv.weight": Tensor(qkv), "qkv.bias": Tensor(np.zeros(3 * c)), "rel_bias": Tensor(np.zeros((heads, side, side))),
            "out.weight": Tensor(out), "out.bias": Tensor(np.zeros(c)),
            "norm.gamma": Tensor(np.ones(c)), "norm.beta": Tensor(np.zeros(c))}


def _tokens(x):
    B, C, H, W = x.shape
    return x.reshape(B, C, H * W).transpose(0, 2, 1)


def test_attention_rows_sum_to_one():
    x = Tensor(np.random.default_rng(1).standard_normal((2, 8, 4, 4)))
    attn, _, _ = attention_weights(x, _attn_params(8, 4, 1), heads=4)
    assert attn.shape == (2, 4, 16, 16)
    np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-6)


def test_attention_singleton_grid():
    x = Tensor(np.random.default_rng(2).standard_normal((3, 8, 1, 1)).astype(np.float32))
    p = _attn_params(8, 4, 2)
    attn, v, tokens = attention_weights(x, p, heads=4)
    assert np.all(attn.data == 1.0)
    out = relative_attention_stage(x, p, heads=4).data
    vals = tokens.data @ p["qkv.weight"].data[16:].T
    expected = F.layer_norm(Tensor(tokens.data + vals @ p["out.weight"].data.T), axis=-1).data
    np.testing.assert_allclose(out.reshape(3, 8), expected.reshape(3, 8), atol=1e-5)


def test_attention_uniform_when_scores_equal():
    x = Tensor(np.random.default_rng(3).standard_normal((1, 8, 3, 3)).astype(np.float32))
    p = _attn_params(8, 2, 3, zero_qk=True)
    attn, v, _ = attention_weights(x, p, heads=2)
    np.testing.assert_allclose(attn.data, 1.0 / 9.0, atol=1e-7)
    ctx = (attn.data @ v.data)
    np.testing.assert_allclose(ctx, np.broadcast_to(v.data.mean(axis=2, keepdims=True), ctx.shape), atol=1e-6)


def test_attention_residual_identity():
    x = Tensor(np.random.default_rng(4).standard_normal((2, 8, 4, 4)).astype(np.float32))
    out = relative_attention_stage(x, _attn_params(8, 4, 4, zero_out=True), heads=4).data
    ref = F.layer_norm(Tensor(_tokens(x.data)), axis=-1).data.transpose(0, 2, 1).reshape(x.shape)
    np.testing.assert_allclose(out, ref, atol=1e-6)


def test_attention_head_divisibility():
    x = Tensor(np.zeros((1, 6, 2, 2)))
    with pytest.raises(ConfigError):
        relative_attention_stage(x, _attn_params(6, 4), heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(stage_channels=(32, 64, 90, 128))


# -- loss and probabilities -------------------------------------------------------------

def test_cross_entropy_anchors():
    loss = F.cross_entropy(Tensor(np.zeros((5, 36))), np.arange(5))
    assert abs(float(loss.data) - math.log(36)) <= 1e-5
    logits = np.zeros((1, 36), np.float32)
    logits[0, 9] = 20.0
    assert float(F.cross_entropy(Tensor(logits), [9]).data) < 1e-3
    with pytest.raises(LabelError):
        F.cross_entropy(Tensor(np.zeros((2, 36))), [0, 36])
    with pytest.raises(ShapeError):
        F.cross_entropy(Tensor(np.zeros((2, 36))), [0])


def test_cross_entropy_matches_float64_reference():
    rng = np.random.default_rng(5)
    logits = (rng.standard_normal((4, 36)) * 3).astype(np.float32)
    labels = rng.integers(0, 36, 4)
    got = float(F.cross_entropy(Tensor(logits), labels).data)
    ref = 0.0
    for row, y in zip(logits.astype(np.float64), labels):
        m = max(row)
        ref -= row[y] - m - math.log(math.fsum(math.exp(v - m) for v in row))
    assert abs(got - ref / 4) <= 1e-6


def test_softmax_rows_and_translation_invariance():
    logits = np.random.default_rng(6).standard_normal((10, 36)) * 5
    p = softmax_np(logits)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(softmax_np(logits + 123.0), p, atol=1e-9)
    np.testing.assert_array_equal(topk_from_logits(logits + 7.0, 5), topk_from_logits(logits, 5))


def test_topk_examples():
    logits = np.zeros((1, 36))
    logits[0, 7], logits[0, 2] = 5.0, 3.0
    assert topk_from_logits(logits, 2).tolist() == [[7, 2]]
    rnd = np.random.default_rng(7).standard_normal((4, 36))
    np.testing.assert_array_equal(topk_from_logits(rnd, 1)[:, 0], rnd.argmax(axis=1))
    assert sorted(topk_from_logits(rnd, 36)[0].tolist()) == list(range(36))
    tie = np.zeros((1, 36))
    assert topk_from_logits(tie, 3).tolist() == [[0, 1, 2]]
    for k in (0, 37):
        with pytest.raises(ConfigError):
            topk_from_logits(rnd, k)


# -- classifier ----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def model():
    return Classifier(seed=0).eval()


def test_parameter_count_frozen(model):
    assert model.parameter_count() == DEFAULT_PARAMETER_COUNT
    assert Classifier(seed=5).parameter_count() == DEFAULT_PARAMETER_COUNT


def test_forward_shapes_and_independence(model):
    x = np.random.default_rng(8).standard_normal((16, 1, 64, 64)).astype(np.float32)
    out = model(x)
    assert out.shape == (16, 36)
    dup = np.concatenate([x[:3], x[:1]])
    logits = model.logits(dup)
    np.testing.assert_allclose(logits[3], logits[0], atol=1e-5)
    np.testing.assert_allclose(model.logits(x[:4]), out.data[:4], atol=1e-5)
    with pytest.raises(ShapeError):
        model(np.zeros((1, 1, 32, 32), np.float32))


def test_eval_forward_bit_identical(model):
    x = np.random.default_rng(9).standard_normal((4, 1, 64, 64)).astype(np.float32)
    assert model.logits(x).tobytes() == model.logits(x).tobytes()


def test_zero_head_gives_uniform_softmax():
    m = Classifier(seed=1)
    m.params["head.weight"].data[:] = 0
    x = np.random.default_rng(10).standard_normal((2, 1, 64, 64)).astype(np.float32)
    logits = m.logits(x)
    assert np.all(logits == 0)
    np.testing.assert_allclose(softmax_np(logits), 1 / 36, atol=1e-9)


def test_init_distribution():
    m = Classifier(seed=2)
    for name, p in m.params.items():
        if name.endswith("bias") or name.endswith("beta") or "rel_bias" in name:
            assert np.all(p.data == 0), name
        elif name.endswith("gamma"):
            assert np.all(p.data == 1), name
    w = m.params["head.weight"].data
    assert np.max(np.abs(w)) <= 1 / math.sqrt(w.shape[1])


def test_checkpoint_roundtrip(tmp_path, model):
    path = tmp_path / "m.ckpt"
    model.save(path)
    back = Classifier.load(path)
    assert back.config == model.config
    for name, p in model.params.items():
        assert back.params[name].data.tobytes() == p.data.tobytes()
    x = np.random.default_rng(11).standard_normal((2, 1, 64, 64)).astype(np.float32)
    assert back.logits(x).tobytes() == model.logits(x).tobytes()
    raw = path.read_bytes()
    (tmp_path / "short.ckpt").write_bytes(raw[:-8])
    with pytest.raises(ShapeError):
        Classifier.load(tmp_path / "short.ckpt")
    with pytest.raises(IoError):
        Classifier.load(tmp_path / "missing.ckpt")


def test_load_state_dict_validates_shapes(model):
    state = model.state_dict()
    state["head.bias"] = np.zeros(5)
    with pytest.raises(ShapeError):
        Classifier(seed=0).load_state_dict(state)


def test_predict_topk(model):
    x = np.random.default_rng(12).standard_normal((3, 1, 64, 64)).astype(np.float32)
    top = predict_topk(model, x, 5)
    assert top.shape == (3, 5)
    np.testing.assert_array_equal(top[:, 0], model.logits(x).argmax(axis=1))

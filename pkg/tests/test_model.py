import numpy as np
import pytest

from ascnet import autograd as ag
from ascnet.autograd import Tensor
from ascnet.errors import ConfigMismatch, InvalidConfig, ResolutionMismatch, ShapeMismatch
from ascnet.model import (
    ASCNet,
    ModelConfig,
    attention_block,
    channel_attention,
    glorot_uniform,
    improved_relu,
    init_params,
    param_shapes,
    reconstruction_loss,
    skip_connect,
    spatial_attention,
)
from ascnet.signals import mse
from gradcheck import check_op, max_rel_err, numeric_grad

MICRO = dict(n_blocks=2, channels=[4, 4], kernels=[16, 16], segment_length=32)


def _t(a):
    return Tensor(np.asarray(a, dtype=float))


def _zeros_fc(c):
    return _t(np.zeros((c, 2 * c))), _t(np.zeros(c))


# ---------------------------------------------------------------- improved ReLU

def test_improved_relu_alpha_zero_is_relu(rng):
    x = rng.standard_normal((2, 3, 10))
    y = improved_relu(_t(x), *_zeros_fc(3), alpha_override=0.0)
    np.testing.assert_array_equal(y.data, np.maximum(x, 0))


def test_improved_relu_alpha_one_is_identity(rng):
    x = rng.standard_normal((2, 3, 10))
    y = improved_relu(_t(x), *_zeros_fc(3), alpha_override=1.0)
    np.testing.assert_array_equal(y.data, x)


def test_improved_relu_hand_case():
    x = _t([[[1, -1, 2, -2]]])
    pos, neg = ag.split_posneg(x)
    assert ag.pool_spatial(pos, "avg").data.item() == 0.75
    assert ag.pool_spatial(neg, "avg").data.item() == -0.75
    y = improved_relu(x, *_zeros_fc(1), alpha_override=0.5)
    np.testing.assert_array_equal(y.data, [[[1, -0.5, 2, -1]]])
    # zero FC parameters give alpha = sigmoid(0) = 0.5 too
    np.testing.assert_array_equal(improved_relu(x, *_zeros_fc(1)).data, [[[1, -0.5, 2, -1]]])


def test_improved_relu_alpha_is_per_channel():
    x = _t([[[1.0, -2.0], [3.0, -4.0]]])
    w = np.zeros((2, 4))
    b = np.array([100.0, -100.0])  # alpha -> 1 for channel 0, -> 0 for channel 1
    y = improved_relu(x, _t(w), _t(b)).data
    np.testing.assert_allclose(y, [[[1.0, -2.0], [3.0, 0.0]]], atol=1e-40)


def test_improved_relu_grad(rng):
    arrays = [rng.standard_normal((2, 3, 6)), rng.standard_normal((3, 6)), rng.standard_normal(3)]
    assert check_op(improved_relu, arrays) < 1e-4


def test_improved_relu_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        improved_relu(_t(np.ones((1, 3, 4))), *_zeros_fc(2))


# ---------------------------------------------------------------- skip connection

def test_skip_channel_average_identity_on_equal_channels(rng):
    c = rng.standard_normal(7)
    a = np.tile(c, (1, 5, 1))
    avg = ag.pool_channel(_t(a), "avg").data
    np.testing.assert_allclose(avg[0, 0], c, rtol=0, atol=1e-15)


def test_skip_hand_case():
    a = _t([[[1, 3], [3, 5]]])
    out = skip_connect(a, _t([[[1.0]]]), _t([0.0]))
    np.testing.assert_array_equal(out.data, [[[2, 4]]])


def test_skip_output_channels(rng):
    out = skip_connect(_t(rng.standard_normal((2, 6, 8))), _t(rng.standard_normal((4, 1, 3))), _t(np.zeros(4)))
    assert out.shape == (2, 4, 8)


def test_skip_resolution_mismatch():
    with pytest.raises(ResolutionMismatch):
        skip_connect(_t(np.ones((1, 2, 8))), _t(np.ones((2, 1, 3))), _t(np.zeros(2)), length=16)


def test_zero_skip_weights_leave_decoder_unchanged(rng, monkeypatch):
    cfg = ModelConfig(**MICRO)
    zeroed = init_params(cfg, 3)
    for k in zeroed.weights:
        if ".skip." in k:
            zeroed.weights[k][:] = 0
    x = rng.standard_normal((2, 1, 32))
    out_zero = ASCNet(cfg, zeroed.copy()).forward(x).data

    import ascnet.model as m

    # same network with the skip branch replaced by exact zeros
    monkeypatch.setattr(m, "skip_connect", lambda src, w, b, length=None:
                        Tensor(np.zeros((src.shape[0], w.shape[0], src.shape[2]))))
    out_removed = ASCNet(cfg, zeroed.copy()).forward(x).data
    np.testing.assert_array_equal(out_zero, out_removed)


# ---------------------------------------------------------------- attention

def _attn_params(c, h, zero=True, rng=None):
    mk = (lambda *s: np.zeros(s)) if zero else (lambda *s: rng.standard_normal(s))
    return {
        "a.ca.fc1.w": _t(mk(h, c)), "a.ca.fc1.b": _t(mk(h)),
        "a.ca.fc2.w": _t(mk(c, h)), "a.ca.fc2.b": _t(mk(c)),
        "a.sa.w": _t(mk(1, 2, 7)), "a.sa.b": _t(mk(1)),
    }


def test_channel_attention_zero_weights_is_half(rng):
    p = _attn_params(8, 2)
    w = channel_attention(_t(rng.standard_normal((3, 8, 5))), p, "a.ca")
    assert w.shape == (3, 8, 1)
    assert np.all(w.data == 0.5)


def test_attention_weights_in_open_interval():
    # Glorot-scale parameters as produced by init_params; 1000 random draws
    r = np.random.default_rng(99)
    c, h = 8, 2
    for _ in range(1000):
        p = {
            "a.ca.fc1.w": _t(glorot_uniform(r, (h, c), c, h)), "a.ca.fc1.b": _t(0.1 * r.standard_normal(h)),
            "a.ca.fc2.w": _t(glorot_uniform(r, (c, h), h, c)), "a.ca.fc2.b": _t(0.1 * r.standard_normal(c)),
            "a.sa.w": _t(glorot_uniform(r, (1, 2, 7), 14, 7)), "a.sa.b": _t(0.1 * r.standard_normal(1)),
        }
        x = _t(r.standard_normal((2, c, 16)))
        for w in (channel_attention(x, p, "a.ca"), spatial_attention(x, p["a.sa.w"], p["a.sa.b"])):
            assert np.all(w.data > 0) and np.all(w.data < 1)


def test_spatial_attention_zero_weights_and_shape(rng):
    p = _attn_params(5, 1)
    for c in (1, 3, 5):
        w = spatial_attention(_t(rng.standard_normal((2, c, 9))), p["a.sa.w"], p["a.sa.b"])
        assert w.shape == (2, 1, 9)
        assert np.all(w.data == 0.5)


def test_attention_block_overrides(rng):
    x = rng.standard_normal((2, 4, 6))
    p = _attn_params(4, 1, zero=False, rng=rng)
    y = attention_block(_t(x), p, "a", channel_override=1.0, spatial_override=1.0)
    np.testing.assert_array_equal(y.data, x)
    y = attention_block(_t(x), p, "a", channel_override=0.5, spatial_override=0.5)
    np.testing.assert_array_equal(y.data, 0.25 * x)


def test_attention_block_zero_params_scales_by_quarter(rng):
    x = rng.standard_normal((3, 8, 10))
    y = attention_block(_t(x), _attn_params(8, 2), "a")
    np.testing.assert_array_equal(y.data, 0.25 * x)


def test_attention_grads(rng):
    names = list(_attn_params(4, 1))
    arrays = [rng.standard_normal((2, 4, 9))] + [rng.standard_normal(_attn_params(4, 1)[n].shape) for n in names]

    def block(x, *ps):
        return attention_block(x, dict(zip(names, ps)), "a")

    def chan(x, *ps):
        return channel_attention(x, dict(zip(names, ps)), "a.ca")

    assert check_op(block, arrays) < 1e-4
    assert check_op(chan, [a.copy() for a in arrays]) < 1e-4
    assert check_op(spatial_attention, [arrays[0].copy(), arrays[5].copy(), arrays[6].copy()]) < 1e-4


# ---------------------------------------------------------------- config / init

def test_config_constraints():
    with pytest.raises(InvalidConfig):
        ModelConfig(kernels=[8, 16, 8, 8])
    with pytest.raises(InvalidConfig):
        ModelConfig(final_kernel=8)
    with pytest.raises(InvalidConfig):
        ModelConfig(segment_length=1000)
    with pytest.raises(InvalidConfig):
        ModelConfig(channels=[2, 32, 64, 64])
    with pytest.raises(InvalidConfig):
        ModelConfig(n_blocks=3)


def test_init_deterministic_and_shapes():
    cfg = ModelConfig()
    a, b = init_params(cfg, 7), init_params(cfg, 7)
    for k, shape in param_shapes(cfg).items():
        assert a.weights[k].shape == shape
        assert a.weights[k].tobytes() == b.weights[k].tobytes()
    c = init_params(cfg, 8)
    assert any(a.weights[k].tobytes() != c.weights[k].tobytes() for k in a.weights)
    assert all(np.all(a.weights[k] == 0) for k in a.weights if k.endswith(".b") or k.endswith(".beta"))
    assert all(np.all(a.weights[k] == 1) for k in a.weights if k.endswith(".gamma"))


def test_glorot_statistics():
    r = np.random.default_rng(0)
    fan_in, fan_out = 256, 512
    s = np.sqrt(6 / (fan_in + fan_out))
    w = glorot_uniform(r, (100_000,), fan_in, fan_out)
    assert w.min() >= -s and w.max() <= s
    assert w.min() < -0.99 * s and w.max() > 0.99 * s
    # uniform(-s, s): mean 0, variance s^2 / 3; standard errors ~ s/550 and s^2/750
    assert abs(w.mean()) < 5 * s / np.sqrt(3 * 100_000)
    assert abs(w.var() - s * s / 3) < 0.01 * s * s


def test_params_validated_against_config():
    cfg = ModelConfig(**MICRO)
    p = init_params(cfg)
    p.weights["final.w"] = np.zeros((1, 3, 16))
    with pytest.raises(ConfigMismatch):
        ASCNet(cfg, p)


# ---------------------------------------------------------------- network

@pytest.mark.parametrize("b", [1, 4])
def test_forward_shape_default_config(b, rng):
    net = ASCNet(ModelConfig(), seed=0)
    x = rng.standard_normal((b, 1, 1024))
    assert net.forward(x).shape == (b, 1, 1024)


def test_forward_rejects_wrong_length():
    net = ASCNet(ModelConfig(**MICRO))
    with pytest.raises(ShapeMismatch):
        net.forward(np.zeros((1, 1, 16)))


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_zero_input_zero_output(mode):
    net = ASCNet(ModelConfig(), seed=1)
    out = net.forward(np.zeros((2, 1, 1024)), mode).data
    assert np.all(out == 0)


def test_eval_forward_deterministic_and_pure(rng):
    net = ASCNet(ModelConfig(**MICRO), seed=2)
    x = rng.standard_normal((3, 1, 32))
    before = {k: v.copy() for k, v in net.params.buffers.items()}
    a = net.forward(x, "eval").data
    b = net.forward(x, "eval").data
    assert a.tobytes() == b.tobytes()
    for k in before:
        assert before[k].tobytes() == net.params.buffers[k].tobytes()


def test_train_mode_updates_running_stats(rng):
    net = ASCNet(ModelConfig(**MICRO), seed=2)
    net.forward(rng.standard_normal((3, 1, 32)), "train")
    assert np.any(net.params.buffers["enc0.bn.running_mean"] != 0)


def test_bn_after_activation_switch(rng):
    cfg = ModelConfig(**MICRO, bn_before_activation=False)
    assert ASCNet(cfg).forward(rng.standard_normal((2, 1, 32))).shape == (2, 1, 32)


def test_attention_can_be_disabled(rng):
    cfg = ModelConfig(**MICRO, attention=False)
    net = ASCNet(cfg)
    assert not any(".ca." in k or ".sa." in k for k in net.params.weights)
    assert net.forward(rng.standard_normal((2, 1, 32))).shape == (2, 1, 32)


def test_loss_cases(rng):
    x = rng.standard_normal((2, 1, 32))
    assert reconstruction_loss(_t(x), x).item() == 0.0
    assert np.isclose(reconstruction_loss(_t(x + 0.3), x).item(), 0.09)
    y = rng.standard_normal((2, 1, 32))
    assert np.isclose(reconstruction_loss(_t(y), x).item(), mse(x.ravel(), y.ravel()), rtol=1e-14)
    with pytest.raises(ShapeMismatch):
        reconstruction_loss(_t(y), x[:1])


def full_network_grad_error(seed: int = 0) -> float:
    """Worst relative error of every parameter gradient of the micro network."""
    r = np.random.default_rng(seed)
    cfg = ModelConfig(**MICRO)
    net = ASCNet(cfg, seed=seed)
    for k, v in net.params.weights.items():
        # nonzero biases and BN shifts so every path is exercised
        v[...] = v + 0.1 * r.standard_normal(v.shape)
    x = r.standard_normal((2, 1, 32))
    y = r.standard_normal((2, 1, 32))
    _, grads = net.loss_and_grads(x, y, "train")

    def f():
        return reconstruction_loss(net.forward(x, "train"), y).item()

    worst = 0.0
    for name, w in net.params.weights.items():
        worst = max(worst, max_rel_err(grads[name], numeric_grad(f, w)))
    return worst


def test_full_network_gradient_check():
    assert full_network_grad_error(0) < 1e-3


def test_single_step_decreases_loss():
    cfg = ModelConfig(**MICRO)
    failures = 0
    for seed in range(50):
        r = np.random.default_rng(seed)
        net = ASCNet(cfg, seed=seed)
        x = r.standard_normal((1, 1, 32))
        y = r.standard_normal((1, 1, 32))
        before, grads = net.loss_and_grads(x, y, "train")
        for k, w in net.params.weights.items():
            w -= 1e-4 * grads[k]
        after = reconstruction_loss(net.forward(x, "train"), y).item()
        failures += after >= before
    assert failures <= 2

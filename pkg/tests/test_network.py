import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from liploss import autodiff as ad
from liploss import gradcheck as gc
from liploss.errors import ConfigError, ShapeError
from liploss.losses import LossWeights, total_loss
from liploss.network import UNetConfig, forward, init_params, params_from_entries, params_to_entries
from liploss.pipeline import AdamState, adam_step
from liploss.projector import make_angle_set


def test_config_validation():
    with pytest.raises(ConfigError):
        UNetConfig(kernel_extent=4)
    with pytest.raises(ConfigError):
        UNetConfig(dropout_rate=1.0)
    with pytest.raises(ConfigError):
        UNetConfig(spatial_rank=1)


def test_init_deterministic_and_seeded():
    cfg = UNetConfig(levels=2, base_channels=4)
    a, b, c = init_params(cfg, 3), init_params(cfg, 3), init_params(cfg, 4)
    for k in a.tensors:
        np.testing.assert_array_equal(a.tensors[k].data, b.tensors[k].data)
    assert any(not np.array_equal(a.tensors[k].data, c.tensors[k].data) for k in a.tensors)
    assert a.count() == c.count()


def test_init_he_variance():
    p = init_params(UNetConfig(base_channels=16), 0)
    checked = 0
    for name, t in p.tensors.items():
        if name.endswith(".w"):
            fan_in = int(np.prod(t.shape[1:]))
            if fan_in >= 64:
                assert abs(t.data.var() / (2 / fan_in) - 1) <= 0.2, name
                checked += 1
        elif name.endswith("bn.scale"):
            assert np.all(t.data == 1)
        elif name.endswith("bn.shift"):
            assert np.all(t.data == 0)
    assert checked >= 5


def test_forward_shape_and_eval_determinism():
    p = init_params(UNetConfig(levels=3, base_channels=4), 1)
    x = np.random.default_rng(0).standard_normal((2, 64, 64))
    y1 = forward(p, x, "eval")
    y2 = forward(p, x, "eval")
    assert y1.shape == (1, 64, 64)
    np.testing.assert_array_equal(y1.data, y2.data)


def test_forward_errors():
    p = init_params(UNetConfig(levels=3, base_channels=2), 0)
    with pytest.raises(ShapeError):
        forward(p, np.zeros((1, 2, 30, 32)))
    with pytest.raises(ShapeError):
        forward(p, np.zeros((1, 3, 32, 32)))


def test_dropout_only_in_train():
    cfg = UNetConfig(levels=2, base_channels=4, dropout_rate=0.5)
    p = init_params(cfg, 0)
    x = np.random.default_rng(1).standard_normal((2, 2, 16, 16))
    a = forward(p.copy(), x, "train", 1).data
    b = forward(p.copy(), x, "train", 2).data
    c = forward(p.copy(), x, "train", 1).data
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, c)


@settings(max_examples=12, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 3]), st.integers(0, 1000))
def test_shape_preservation_property(levels, mh, mw, k, seed):
    cfg = UNetConfig(levels=levels, base_channels=2, kernel_extent=k)
    d = cfg.divisor
    h, w = d * mh * 2, d * mw * 2
    p = init_params(cfg, seed)
    y = forward(p, np.random.default_rng(seed).standard_normal((1, 2, h, w)), "train", seed)
    assert y.shape == (1, 1, h, w)


def test_3d_forward_shape():
    p = init_params(UNetConfig(spatial_rank=3, levels=2, base_channels=2), 0)
    assert forward(p, np.zeros((2, 8, 8, 8))).shape == (1, 8, 8, 8)


def test_network_gradcheck_sampled_params():
    res = gc.network_check(np.random.default_rng(21), rtol=1e-4)
    assert res.passed, res


def test_no_nonfinite_over_random_passes():
    cfg = UNetConfig(levels=2, base_channels=4)
    p = init_params(cfg, 5)
    rng = np.random.default_rng(5)
    tensors = p.parameters()
    with ad.detect_nonfinite():
        for i in range(100):
            x = rng.standard_normal((2, 2, 16, 16)) * rng.uniform(0.1, 10)
            y = rng.standard_normal((2, 1, 16, 16))
            loss = total_loss(forward(p, x, "train", i), y, LossWeights(), make_angle_set(4))
            for g in ad.backward(loss, tensors):
                assert np.all(np.isfinite(g))


def test_overfit_loss_strictly_decreases():
    cfg = UNetConfig(levels=2, base_channels=4, dropout_rate=0.0)
    p = init_params(cfg, 0)
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((4, 2, 16, 16)), rng.standard_normal((4, 1, 16, 16))
    state = AdamState.zeros_like([t.data for t in p.parameters()])
    losses = []
    for _ in range(50):
        loss = total_loss(forward(p, x, "train"), y, LossWeights(), make_angle_set(4))
        losses.append(loss.item())
        grads = ad.backward(loss, p.parameters())
        adam_step([t.data for t in p.parameters()], grads, state, 1e-3)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_checkpoint_entries_roundtrip():
    cfg = UNetConfig(levels=2, base_channels=3, dropout_rate=0.2)
    p = init_params(cfg, 7)
    p.buffers["enc0.conv0.bn.mean"][:] = 0.5
    q, meta = params_from_entries(params_to_entries(p, {"epoch": 3.0}))
    assert q.config == cfg and q.seed == 7 and meta == {"epoch": 3.0}
    for k in p.tensors:
        np.testing.assert_array_equal(p.tensors[k].data, q.tensors[k].data)
    for k in p.buffers:
        np.testing.assert_array_equal(p.buffers[k], q.buffers[k])

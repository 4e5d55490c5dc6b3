import numpy as np
import pytest

from pvmc import autodiff as ad
from pvmc import gradcheck as gc
from pvmc import patchstats as ps
from pvmc.autodiff import Tensor
from pvmc.denoiser import NetConfig, UNet, forward, init_params, load_checkpoint, save_checkpoint
from pvmc.exceptions import ConfigurationError


def test_zero_initialized_head_outputs_zero():
    net = UNet(NetConfig(), seed=0)
    x = np.random.default_rng(0).uniform(0, 5, (2, 1, 32, 32)).astype(np.float32)
    assert np.all(net(Tensor(x)).data == 0)


@pytest.mark.parametrize("side", [32, 64])
def test_shape_preserved_at_depth_3(side):
    net = UNet(NetConfig(depth=3), seed=1)
    net.params["head.w"].data[...] = 0.1
    out = net(Tensor(np.ones((3, 1, side, side), dtype=np.float32)))
    assert out.shape == (3, 1, side, side)


def test_indivisible_input_rejected():
    with pytest.raises(ConfigurationError):
        UNet(NetConfig(depth=3))(np.ones((1, 1, 30, 32), dtype=np.float32))


def test_channel_schedules():
    assert NetConfig().channel_schedule == (8, 16, 32)
    assert NetConfig.full_scale().channel_schedule == (64, 128, 256, 512)
    with pytest.raises(ConfigurationError):
        NetConfig(depth=2, channel_schedule=(4, 8, 16))
    with pytest.raises(ConfigurationError):
        NetConfig(in_channels=3)


def test_full_scale_config_is_constructible():
    params = init_params(NetConfig.full_scale(), seed=0)
    assert params["enc3.conv2.w"].shape == (3, 3, 512, 512)
    assert params["head.w"].shape == (1, 1, 64, 1)


def test_init_deterministic_per_seed():
    a, b, c = (init_params(NetConfig(), s) for s in (3, 3, 4))
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert not np.array_equal(a["enc0.conv1.w"].data, c["enc0.conv1.w"].data)


def test_he_init_variance():
    params = init_params(NetConfig(), seed=0)
    w = params["enc2.conv2.w"].data  # 3*3*32*32 = 9216 weights
    w2 = params["dec0.conv1.w"].data
    fan_in = 3 * 3 * 32
    assert w.var() == pytest.approx(2 / fan_in, rel=0.1)
    assert w2.var() == pytest.approx(2 / (3 * 3 * 16), rel=0.15)
    assert np.all(params["enc0.conv1.b"].data == 0)


def test_initial_l1_equals_mean_abs_target():
    net = UNet(NetConfig(), seed=0)
    y = np.random.default_rng(1).uniform(-1, 4, (2, 1, 16, 16))
    l1 = ad.abs(net(Tensor(np.ones_like(y, dtype=np.float32))) - Tensor(y.astype(np.float32))).mean()
    assert float(l1.data) == pytest.approx(np.abs(y).mean(), rel=1e-6)


def test_forward_bit_identical():
    net = UNet(NetConfig(depth=2, base_channels=4), seed=2)
    net.params["head.w"].data[...] = 0.3
    x = np.random.default_rng(3).standard_normal((2, 1, 16, 16)).astype(np.float32)
    assert net(x).data.tobytes() == net(x).data.tobytes()


def _toy_f64(seed=0):
    prev = ad.default_dtype()
    ad.set_default_dtype(np.float64)
    cfg = NetConfig(depth=2, base_channels=4)
    params = init_params(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    # non-zero head so every layer receives gradient
    params["head.w"].data = rng.standard_normal(params["head.w"].shape) * 0.5
    return prev, cfg, params


def _fd_check(params, loss_of, names, n_entries=6, seed=0):
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.grad = None
    loss_of().backward()
    worst = 0.0
    for name in names:
        p = params[name]
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(n_entries, flat.size), replace=False)
        num = []
        for i in picks:
            orig = flat[i]
            flat[i] = orig + 1e-5
            fp = float(loss_of().data)
            flat[i] = orig - 1e-5
            fm = float(loss_of().data)
            flat[i] = orig
            num.append((fp - fm) / 2e-5)
        worst = max(worst, gc.relative_error(p.grad.reshape(-1)[picks], np.array(num)))
    return worst


def test_network_output_sum_gradient_matches_finite_differences():
    prev, cfg, params = _toy_f64()
    try:
        x = np.random.default_rng(1).uniform(0, 3, (1, 1, 16, 16))
        worst = _fd_check(params, lambda: forward(params, Tensor(x), cfg).sum(), list(params))
    finally:
        ad.set_default_dtype(prev)
    assert worst < 1e-5


def test_composite_objective_gradient_matches_finite_differences():
    prev, cfg, params = _toy_f64(seed=4)
    try:
        rng = np.random.default_rng(2)
        y = rng.uniform(1, 5, (2, 1, 16, 16))
        x = y + rng.standard_normal(y.shape) * np.sqrt(0.5 * y)
        state = ps.PvmcState.from_k(0.7, dtype=np.float64)
        starts = ps.sample_patches((16, 16), ps.PatchSpec((4, 4), 12, seed=1), n_images=2)
        params_k = {**params, "kappa": state.kappa}

        def loss():
            y_hat = forward(params, Tensor(x), cfg)
            l1 = ad.abs(y_hat - Tensor(y)).mean()
            return l1 + ps.pvmc_loss(x, y_hat, starts, (4, 4), state) * 0.05

        worst = _fd_check(params_k, loss, ["enc0.conv1.w", "up0.w", "dec0.conv2.b", "head.w", "kappa"])
    finally:
        ad.set_default_dtype(prev)
    assert worst < 1e-5


def test_predict_matches_call_and_builds_no_graph():
    net = UNet(NetConfig(depth=2, base_channels=4), seed=0)
    net.params["head.w"].data[...] = 0.2
    x = np.random.default_rng(0).standard_normal((5, 16, 16)).astype(np.float32)
    pred = net.predict(x, batch_size=2)
    assert pred.shape == (5, 16, 16)
    np.testing.assert_array_equal(pred, net(x[:, None]).data[:, 0])
    assert net.predict(x[0]).shape == (16, 16)


def test_checkpoint_roundtrip(tmp_path):
    net = UNet(NetConfig(depth=2, base_channels=4), seed=5)
    save_checkpoint(net.state_dict(), tmp_path / "ck", extra={"k": 0.5})
    arrays, extra = load_checkpoint(tmp_path / "ck")
    assert extra["k"] == 0.5
    other = UNet(NetConfig(depth=2, base_channels=4), seed=9)
    other.load_state_dict(arrays)
    assert all(np.array_equal(other.params[k].data, net.params[k].data) for k in arrays)


def test_checkpoint_shape_mismatch_detected(tmp_path):
    save_checkpoint({"a": np.zeros((2, 3))}, tmp_path)
    np.save(tmp_path / "a.npy", np.zeros(4))
    with pytest.raises(ConfigurationError):
        load_checkpoint(tmp_path)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridfuse.autodiff import bce, mse
from gridfuse.autodiff.gradcheck import check_gradients
from gridfuse.errors import ConfigError, ShapeError
from gridfuse.models import (
    ModelConfig,
    build_cnn_transformer,
    build_lstm_temporal,
    build_model,
    build_transformer_temporal,
    build_transunet,
    build_unet,
    crop,
    pad_to_multiple,
)

# desk-scale configurations used by the gradient sweeps
SMALL = {
    "unet": dict(arch="unet", in_channels=2, base_channels=3, depth=2),
    "transunet": dict(arch="transunet", in_channels=2, base_channels=2, depth=2, transformer_layers=1,
                      heads=2, ff_width=16),
    "transformer": dict(arch="transformer", in_channels=3, d_model=8, heads=2, ff_width=16, dense_width=16,
                        transformer_layers=2, timesteps=3),
    "lstm": dict(arch="lstm", in_channels=3, lstm_hidden=4, dense_width=8, timesteps=3),
    "cnn_transformer": dict(arch="cnn_transformer", in_channels=2, cnn_channels=(2, 2, 4, 4), cnn_pools=2,
                            transformer_layers=2, heads=2, ff_width=8, height=8, width=8),
}


def small_cfg(arch, **kw):
    return ModelConfig(**{**SMALL[arch], "dtype": "float64", **kw})


def sample_input(cfg, rng, n=2):
    if cfg.spatial:
        return rng.normal(size=(n, cfg.height or 8, cfg.width or 8, cfg.in_channels))
    return rng.normal(size=(n, cfg.timesteps, cfg.in_channels))


def full_sweep(model, x, rng):
    out_shape = model.forward(x).shape
    if model.classifier:
        y = (rng.random(out_shape) > 0.5).astype(float)
        f = lambda: bce(model.forward(x), y)  # noqa: E731
    else:
        y = rng.normal(size=out_shape)
        f = lambda: mse(model.forward(x), y)  # noqa: E731
    return check_gradients(f, model.parameters())


@pytest.mark.parametrize("arch", list(SMALL))
@pytest.mark.parametrize("mode", ["regressor", "classifier"])
def test_full_parameter_gradient_sweep(arch, mode):
    rng = np.random.default_rng(7)
    model = build_model(small_cfg(arch, head_mode=mode, seed=3))
    assert model.n_params <= 5000
    assert full_sweep(model, sample_input(model.cfg, rng), rng) < 1e-3


def test_unet_gradient_at_example_scale():
    rng = np.random.default_rng(8)
    model = build_unet(ModelConfig(arch="unet", in_channels=1, base_channels=4, depth=2, dtype="float64"))
    assert full_sweep(model, rng.normal(size=(1, 8, 8, 1)), rng) < 1e-3


def test_unet_shape_preserved():
    m = build_unet(ModelConfig(arch="unet", in_channels=1, base_channels=2, depth=4))
    assert m.forward(np.zeros((3, 16, 16, 1))).shape == (3, 16, 16, 1)


def test_unet_full_size_channel_ladder():
    m = build_unet(ModelConfig(arch="unet", in_channels=10))
    assert m.stage_widths == [64, 128, 256, 512, 1024]
    assert m.params["enc3.conv2.w"].shape == (3, 3, 512, 512)
    assert m.params["mid.conv2.w"].shape == (3, 3, 1024, 1024)
    assert m.params["out.w"].shape == (1, 1, 64, 1)


@pytest.mark.parametrize("shape", [(13, 7), (9, 16), (143 // 8, 247 // 8)])
def test_spatial_models_restore_original_extents(shape):
    rng = np.random.default_rng(0)
    for arch in ("unet", "transunet"):
        m = build_model(small_cfg(arch))
        assert m.forward(rng.normal(size=(1, *shape, 2))).shape == (1, *shape, 1)
    m = build_model(small_cfg("cnn_transformer", height=shape[0], width=shape[1]))
    assert m.forward(rng.normal(size=(1, *shape, 2))).shape == (1, *shape, 1)


def test_transunet_zero_layers_reduces_to_unet():
    rng = np.random.default_rng(1)
    kw = dict(in_channels=2, base_channels=3, depth=2, transformer_layers=0, dtype="float64", seed=5)
    u = build_unet(ModelConfig(arch="unet", **kw))
    t = build_transunet(ModelConfig(arch="transunet", **kw))
    t.load_state_dict(u.state_dict())
    x = rng.normal(size=(2, 8, 12, 2))
    assert np.array_equal(u.forward(x).data, t.forward(x).data)


def test_transunet_token_count():
    m = build_transunet(ModelConfig(arch="transunet", in_channels=1, base_channels=1, depth=4, heads=1,
                                    ff_width=4))
    assert m.token_count(16, 16) == 1
    assert m.forward(np.zeros((1, 16, 16, 1))).shape == (1, 16, 16, 1)


def test_transunet_attention_changes_output():
    rng = np.random.default_rng(2)
    kw = dict(in_channels=2, base_channels=2, depth=2, heads=2, ff_width=8, dtype="float64")
    u = build_unet(ModelConfig(arch="unet", **kw))
    t = build_transunet(ModelConfig(arch="transunet", transformer_layers=1, **kw))
    x = rng.normal(size=(1, 8, 8, 2))
    assert not np.allclose(u.forward(x).data, t.forward(x).data)


@pytest.mark.parametrize("builder,arch", [(build_transformer_temporal, "transformer"), (build_lstm_temporal, "lstm")])
@pytest.mark.parametrize("n", [1, 4, 9])
def test_temporal_output_shape(builder, arch, n):
    cfg = small_cfg(arch)
    assert builder(cfg).forward(np.zeros((n, cfg.timesteps, cfg.in_channels))).shape == (n, 1)


def test_temporal_paper_window():
    assert ModelConfig(arch="transformer").timesteps == 5
    assert ModelConfig(arch="lstm").timesteps == 5


def test_temporal_window_mismatch():
    m = build_lstm_temporal(small_cfg("lstm"))
    with pytest.raises(ShapeError):
        m.forward(np.zeros((2, 5, 3)))


def test_cnn_transformer_kernel_ladder():
    cfg = ModelConfig(arch="cnn_transformer", in_channels=10 * 5, height=16, width=16)
    m = build_cnn_transformer(cfg)
    assert cfg.cnn_channels == (16, 32, 64, 64)
    assert [m.params[f"cnn{s}.w"].shape[-1] for s in range(4)] == [16, 32, 64, 64]
    assert m.forward(np.zeros((2, 16, 16, 50))).shape == (2, 16, 16, 1)


def test_classifier_outputs_in_open_interval():
    rng = np.random.default_rng(3)
    for arch in SMALL:
        m = build_model(small_cfg(arch, head_mode="classifier"))
        x = sample_input(m.cfg, rng, n=3) * 1e3
        p = m.predict(x)
        assert np.all(np.isfinite(p)) and np.all(p > 0) and np.all(p < 1)


@pytest.mark.parametrize("arch", list(SMALL))
def test_forward_finite_and_seed_deterministic(arch):
    rng = np.random.default_rng(4)
    a = build_model(small_cfg(arch, seed=11))
    b = build_model(small_cfg(arch, seed=11))
    c = build_model(small_cfg(arch, seed=12))
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()
    assert any(a.params[k].data.tobytes() != c.params[k].data.tobytes() for k in a.params)
    x = sample_input(a.cfg, rng)
    assert np.all(np.isfinite(a.forward(x).data))


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(arch="resnet")
    with pytest.raises(ConfigError):
        ModelConfig(arch="transunet", base_channels=3, depth=1, heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(head_mode="softmax")


# ---------------------------------------------------------------- padding


def test_pad_noop_when_already_multiple():
    x = np.arange(32.0).reshape(1, 4, 8, 1)
    xp, rec = pad_to_multiple(x, 4)
    assert xp is x and np.array_equal(crop(xp, rec), x)


def test_pad_paper_grid():
    x = np.zeros((1, 143, 247, 1))
    xp, rec = pad_to_multiple(x, 16)
    assert xp.shape == (1, 144, 256, 1)
    assert crop(xp, rec).shape == (1, 143, 247, 1)


def test_pad_is_reflective():
    x = np.arange(6.0).reshape(1, 1, 6, 1).repeat(3, axis=1)
    xp, _ = pad_to_multiple(x, 8)
    assert xp[0, 0, :, 0].tolist() == [0, 1, 2, 3, 4, 5, 4, 3]


@given(st.integers(1, 20), st.integers(1, 20), st.integers(1, 16))
@settings(max_examples=60, deadline=None)
def test_crop_inverts_pad(h, w, m):
    x = np.random.default_rng(h * 100 + w).normal(size=(2, h, w, 3))
    xp, rec = pad_to_multiple(x, m)
    assert xp.shape[1] % m == 0 and xp.shape[2] % m == 0
    assert np.array_equal(crop(xp, rec), x)

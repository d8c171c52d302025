import numpy as np
import pytest

from trep import encoder as enc
from trep import losses as loss_mod
from trep import tensor as T
from trep import time_embedding as te_mod
from trep.errors import ConfigError, ShapeError


def small_cfg(**kw):
    base = dict(in_channels=3, repr_dim=6, te_dim=4, depth=2, kernel=3, width=6, mask_prob=0.5)
    base.update(kw)
    return enc.EncoderConfig(**base)


@pytest.fixture
def setup(rng):
    cfg = small_cfg()
    ep = enc.init_encoder(cfg, rng)
    tep = te_mod.init_time_embedding("time2vec", cfg.te_dim, rng)
    return cfg, ep, tep


def test_project_zero_weights_gives_bias(setup, rng):
    cfg, ep, _ = setup
    ep.tensors["proj.w"].data[:] = 0.0
    ep.tensors["proj.b"].data[:] = np.arange(6.0)
    u = enc.project(ep, T.Tensor(rng.standard_normal((2, 5, 3))))
    assert np.allclose(u.data, np.arange(6.0))


def test_project_identity_weights(rng):
    cfg = small_cfg(in_channels=6)
    ep = enc.init_encoder(cfg, rng)
    ep.tensors["proj.w"].data = np.eye(6)
    ep.tensors["proj.b"].data[:] = 0.0
    x = rng.standard_normal((2, 4, 6))
    assert np.array_equal(enc.project(ep, T.Tensor(x)).data, x)


def test_project_shape_contract(setup, rng):
    cfg, ep, _ = setup
    u = enc.project(ep, T.Tensor(rng.standard_normal((2, 7, 3))))
    assert u.shape == (2, 7, 6)
    with pytest.raises(ShapeError):
        enc.project(ep, T.Tensor(rng.standard_normal((2, 7, 4))))


def test_mask_prob_zero_is_identity(setup, rng):
    _, ep, _ = setup
    u = T.Tensor(rng.standard_normal((2, 5, 6)))
    assert enc.mask_timestamps(u, 0.0, rng) is u


def test_mask_reproducible_under_seed(rng):
    u = T.Tensor(rng.standard_normal((3, 20, 4)))
    out1 = enc.mask_timestamps(u, 0.9, np.random.default_rng(5)).data
    out2 = enc.mask_timestamps(u, 0.9, np.random.default_rng(5)).data
    assert np.array_equal(out1, out2)
    mask = enc.draw_timestamp_mask((3, 20), 0.9, np.random.default_rng(5))
    zeroed = np.all(out1 == 0.0, axis=2)
    assert np.array_equal(zeroed, mask)


def test_mask_fraction_monte_carlo():
    rng = np.random.default_rng(0)
    draws = enc.draw_timestamp_mask((100, 100), 0.3, rng)
    assert abs(draws.mean() - 0.3) < 0.02


def test_mask_zeroes_full_feature_rows(rng):
    u = T.Tensor(rng.standard_normal((2, 6, 5)) + 3.0)
    mask = np.zeros((2, 6), dtype=bool)
    mask[0, 2] = mask[1, 5] = True
    out = enc.apply_timestamp_mask(u, mask).data
    assert np.all(out[0, 2] == 0.0) and np.all(out[1, 5] == 0.0)
    assert np.all(out[~mask] != 0.0)


def test_encode_shape_and_eval_determinism(setup, rng):
    cfg, ep, tep = setup
    x = rng.standard_normal((2, 11, 3))
    z1 = enc.encode(ep, tep, x, training=False)
    z2 = enc.encode(ep, tep, x, training=False)
    assert z1.shape == (2, 11, 6)
    assert np.array_equal(z1.data, z2.data)


def test_train_mode_needs_rng(setup, rng):
    cfg, ep, tep = setup
    with pytest.raises(ConfigError):
        enc.encode(ep, tep, rng.standard_normal((1, 8, 3)), training=True)


def test_train_mode_seed_reproducible(setup, rng):
    cfg, ep, tep = setup
    x = rng.standard_normal((2, 9, 3))
    a = enc.encode(ep, tep, x, training=True, rng=np.random.default_rng(7)).data
    b = enc.encode(ep, tep, x, training=True, rng=np.random.default_rng(7)).data
    assert np.array_equal(a, b)


def test_two_views_differ_under_training_masks(setup, rng):
    # Same input, independent masks: representations should differ on
    # the shared window in train mode for most seeds.
    cfg, ep, tep = setup
    x = rng.standard_normal((2, 16, 3))
    gen = np.random.default_rng(0)
    differing = sum(
        not np.array_equal(enc.encode(ep, tep, x, training=True, rng=gen).data,
                           enc.encode(ep, tep, x, training=True, rng=gen).data)
        for _ in range(10))
    assert differing >= 9


def test_receptive_field_probe(rng):
    cfg = small_cfg(in_channels=1, depth=2, kernel=3)
    ep = enc.init_encoder(cfg, rng)
    tep = te_mod.init_time_embedding("time2vec", cfg.te_dim, rng)
    radius = (cfg.kernel - 1) * sum(2 ** i for i in range(cfg.depth))
    assert enc.receptive_field(cfg) == 1 + 2 * radius

    t_len = 4 * radius + 1
    x = rng.standard_normal((1, t_len, 1))
    base = enc.encode(ep, tep, x, training=False).data
    probe = t_len // 2
    x2 = x.copy()
    x2[0, probe, 0] += 1.0
    bumped = enc.encode(ep, tep, x2, training=False).data
    changed = np.flatnonzero(np.any(base != bumped, axis=2)[0])
    expected = np.arange(probe - radius, probe + radius + 1)
    assert np.array_equal(changed, expected)  # symmetric around the probe


def test_every_parameter_gets_gradient(setup, rng):
    cfg, ep, tep = setup
    heads = loss_mod.init_task_heads(cfg.repr_dim, cfg.te_dim, rng)
    x = rng.standard_normal((2, 12, 3))
    gen = np.random.default_rng(1)
    z1 = enc.encode(ep, tep, x, training=True, rng=gen, t_total=12)
    z2 = enc.encode(ep, tep, x, training=True, rng=gen, t_total=12)
    tau = te_mod.embed_timesteps(tep, np.arange(12), 12)
    report = loss_mod.hierarchical_loss(z1, z2, tau, heads, loss_mod.TaskConfig(), gen)
    T.backward(report.combined)
    params = {}
    params.update(ep.parameters())
    params.update(tep.parameters())
    params.update(heads.parameters())
    for name, tensor in params.items():
        assert tensor.grad is not None, f"{name} missing gradient"
        assert np.any(tensor.grad != 0.0), f"{name} gradient all zero"


def test_crop_offset_changes_time_embedding(setup, rng):
    cfg, ep, tep = setup
    x = rng.standard_normal((1, 6, 3))
    z0 = enc.encode(ep, tep, x, training=False, t_offset=0, t_total=32).data
    z5 = enc.encode(ep, tep, x, training=False, t_offset=5, t_total=32).data
    assert not np.array_equal(z0, z5)


def test_config_validation():
    with pytest.raises(ConfigError):
        small_cfg(kernel=2).validate()
    with pytest.raises(ConfigError):
        small_cfg(depth=0).validate()
    with pytest.raises(ConfigError):
        small_cfg(mask_prob=1.0).validate()
    with pytest.raises(ConfigError):
        small_cfg(te_dim=1).validate()

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trep import tensor as T
from trep import time_embedding as te
from trep.errors import ConfigError, ContractError

from conftest import check_gradients


def test_time2vec_zero_params_gives_zero_vector():
    p = te.init_time_embedding("time2vec", 4, np.random.default_rng(0))
    p.tensors["omega"].data[:] = 0.0
    p.tensors["phi"].data[:] = 0.0
    assert np.array_equal(te.raw_embed(p, 0.37).data, np.zeros(4))


def test_time2vec_periodic_components_repeat_each_integer_step():
    p = te.init_time_embedding("time2vec", 3, np.random.default_rng(0))
    p.tensors["omega"].data[:] = 2.0 * math.pi
    p.tensors["phi"].data[:] = 0.0
    a = te.raw_embed(p, 3.0).data
    b = te.raw_embed(p, 4.0).data
    assert np.allclose(a[1:], b[1:], atol=1e-9)  # sinusoid components only


def test_rbf_center_hits_one_before_normalization():
    p = te.init_time_embedding("rbf", 4, np.random.default_rng(0))
    center = float(p.tensors["centers"].data[2])
    raw = te.raw_embed(p, center).data
    assert abs(raw[2] - 1.0) < 1e-12


def test_mlp_shapes_and_determinism():
    p = te.init_time_embedding("mlp", 5, np.random.default_rng(3), hidden=7)
    a = te.embed_raw(p, np.linspace(0, 1, 9)).data
    b = te.embed_raw(p, np.linspace(0, 1, 9)).data
    assert a.shape == (9, 5)
    assert np.array_equal(a, b)


def test_init_validation():
    with pytest.raises(ConfigError):
        te.init_time_embedding("fourier", 4, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        te.init_time_embedding("time2vec", 1, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# simplex normalization


def test_normalize_symmetric_points():
    out = te.normalize_simplex(T.Tensor([0.0, 0.0])).data
    assert np.allclose(out, [0.5, 0.5], atol=1e-15)
    out = te.normalize_simplex(T.Tensor([2.3, 2.3, 2.3])).data
    assert np.allclose(out, [1 / 3] * 3, atol=1e-12)


def test_normalize_matches_scalar_oracle():
    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    out = te.normalize_simplex(T.Tensor([1.0, -1.0])).data
    expected = np.array([sig(1.0), sig(-1.0)])
    expected /= expected.sum()
    assert np.allclose(out, expected, atol=1e-15)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
@settings(max_examples=200, deadline=None)
def test_normalize_always_on_simplex(vals):
    out = te.normalize_simplex(T.Tensor(np.array(vals))).data
    assert abs(out.sum() - 1.0) <= 1e-12
    assert np.all(out > 0.0) and np.all(out < 1.0)


# ---------------------------------------------------------------------------
# Jensen-Shannon divergence


def test_jsd_zero_at_equal_distributions(rng):
    for _ in range(10):
        p = rng.random(5)
        p /= p.sum()
        assert te.jsd(p, p) == 0.0


def test_jsd_disjoint_supports_hits_ln2():
    assert abs(te.jsd([1.0, 0.0], [0.0, 1.0]) - math.log(2.0)) < 1e-9


def test_jsd_matches_brute_force_oracle():
    p, q = [0.5, 0.5], [0.9, 0.1]
    m = [(a + b) / 2 for a, b in zip(p, q)]

    def kl(a, b):
        return sum(x * (math.log(max(x, 1e-12)) - math.log(max(y, 1e-12)))
                   for x, y in zip(a, b))

    expected = 0.5 * kl(p, m) + 0.5 * kl(q, m)
    assert abs(te.jsd(p, q) - expected) < 1e-12


@given(st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_jsd_symmetry_and_range(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 7))
    p = rng.random(k)
    p /= p.sum()
    q = rng.random(k)
    q /= q.sum()
    assert abs(te.jsd(p, q) - te.jsd(q, p)) <= 1e-12
    assert -1e-12 <= te.jsd(p, q) <= math.log(2.0) + 1e-9


def test_jsd_rejects_negative_components():
    with pytest.raises(ContractError):
        te.jsd([1.2, -0.2], [0.5, 0.5])


def test_jsd_rejects_off_simplex():
    with pytest.raises(ContractError):
        te.jsd([0.9, 0.3], [0.5, 0.5])


# ---------------------------------------------------------------------------
# gradients through the whole chain


@pytest.mark.parametrize("kind", te.TE_KINDS)
def test_gradients_of_divergence_through_embedding(kind, rng):
    params = te.init_time_embedding(kind, 4, rng, hidden=6)
    idx_a = np.array([0, 3, 5])
    idx_b = np.array([7, 2, 1])

    def build():
        emb = te.embed_timesteps(params, np.arange(8), 8)
        return T.tsum(te.jsd_pairs(T.gather_rows(emb, idx_a), T.gather_rows(emb, idx_b)))

    check_gradients(build, params.parameters())

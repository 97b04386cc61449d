import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from proxlearn.signals import (
    DifferenceOperator,
    LevyModel,
    SignalBatch,
    add_awgn,
    apply_L,
    apply_Lt,
    generate,
    make_batch,
)

from conftest import dense_L

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_compound_poisson_zero_fraction():
    model = LevyModel.compound_poisson(0.6)
    x = generate(model, 100, 1000, seed=3)
    u = apply_L(x).ravel()
    p = math.exp(-0.6)
    se = math.sqrt(p * (1 - p) / u.size)
    assert abs(np.mean(u == 0) - p) < 3 * se


def test_brownian_increment_variance():
    x = generate(LevyModel.brownian(), 100, 10_000, seed=4)
    assert 0.97 <= np.var(apply_L(x)) <= 1.03


def test_generate_is_deterministic():
    m = LevyModel.compound_poisson(0.6)
    assert np.array_equal(generate(m, 50, 7, 11), generate(m, 50, 7, 11))
    assert not np.array_equal(generate(m, 50, 7, 11), generate(m, 50, 7, 12))


def test_generate_prefix_independent_of_count():
    # per-signal sub-seeds: signal j does not depend on how many are drawn
    m = LevyModel.brownian()
    assert np.array_equal(generate(m, 30, 3, 5), generate(m, 30, 8, 5)[:, :3])


@pytest.mark.parametrize("rate", [0.0, -1.0])
def test_invalid_rate(rate):
    with pytest.raises(ValueError):
        LevyModel.compound_poisson(rate)


def test_invalid_sizes():
    with pytest.raises(ValueError):
        generate(LevyModel.brownian(), 0, 1, 0)
    with pytest.raises(ValueError):
        generate(LevyModel.brownian(), 5, 0, 0)


def test_awgn_vanishing_noise():
    clean = generate(LevyModel.brownian(), 100, 3, 0)
    b = add_awgn(clean, 1e-18, seed=1)
    assert np.max(np.abs(b.noisy - b.clean)) < 1e-8


def test_awgn_variance():
    # the band is about 2.2 standard errors wide; the seed is fixed, not tuned per run
    b = add_awgn(np.zeros(100_000), 1.0, seed=0)
    assert 0.99 <= np.var(b.noisy - b.clean) <= 1.01


def test_awgn_variance_unbiased_over_seeds():
    v = [np.var(add_awgn(np.zeros((1000, 100)), 1.0, seed=s).noisy) for s in range(40)]
    assert abs(np.mean(v) - 1.0) < 4 * np.sqrt(2 / 4e6)


def test_awgn_seeds_differ():
    clean = np.zeros((20, 2))
    assert not np.array_equal(add_awgn(clean, 1.0, 1).noisy, add_awgn(clean, 1.0, 2).noisy)


@pytest.mark.parametrize("s2", [0.0, -1.0])
def test_awgn_rejects_nonpositive_variance(s2):
    with pytest.raises(ValueError):
        add_awgn(np.zeros(5), s2, 0)


def test_apply_L_constant():
    assert np.array_equal(apply_L(np.array([1.0, 1.0, 1.0])), [1.0, 0.0, 0.0])


@given(arrays(np.float64, st.integers(1, 60), elements=finite))
def test_L_inverts_cumsum(u):
    assert np.allclose(apply_L(np.cumsum(u)), u, rtol=0, atol=1e-9 * max(1.0, np.abs(u).sum()))


def test_adjoint_identity(rng):
    for _ in range(100):
        n = int(rng.integers(1, 200))
        x, u = rng.standard_normal(n), rng.standard_normal(n)
        lhs, rhs = apply_L(x) @ u, x @ apply_Lt(u)
        assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), np.linalg.norm(x) * np.linalg.norm(u))


def test_operators_match_dense(rng):
    n = 9
    x = rng.standard_normal((n, 3))
    assert np.allclose(apply_L(x), dense_L(n) @ x, atol=1e-14)
    assert np.allclose(apply_Lt(x), dense_L(n).T @ x, atol=1e-14)
    D = DifferenceOperator(n)
    assert np.array_equal(D.dense(), dense_L(n))
    assert np.allclose(D.T @ x, dense_L(n).T @ x)
    assert np.allclose(D.inverse(D @ x), x)


def test_batch_json_round_trip(tmp_path):
    b = make_batch(LevyModel.compound_poisson(0.6), 12, 4, 0.5, seed=9)
    p = tmp_path / "b.json"
    b.save(p)
    d = json.loads(p.read_text())
    assert d["model"] == "compound-poisson" and d["lambda"] == 0.6
    assert d["n"] == 12 and d["sigma2"] == 0.5 and d["seed"] == 9
    assert len(d["clean"]) == 4 and len(d["clean"][0]) == 12
    b2 = SignalBatch.load(p)
    assert np.array_equal(b2.clean, b.clean) and np.array_equal(b2.noisy, b.noisy)
    assert b2.model == b.model


def test_brownian_json_has_no_rate():
    d = make_batch(LevyModel.brownian(), 5, 1, 1.0, 0).to_dict()
    assert d["model"] == "brownian" and "lambda" not in d


def test_batch_shape_mismatch():
    with pytest.raises(ValueError):
        SignalBatch(np.zeros((5, 2)), np.zeros((5, 3)), 1.0)


def test_make_batch_reproducible():
    a = make_batch(LevyModel.brownian(), 20, 3, 1.0, 5)
    b = make_batch(LevyModel.brownian(), 20, 3, 1.0, 5)
    assert np.array_equal(a.noisy, b.noisy)


@settings(max_examples=25)
@given(st.integers(1, 40), st.integers(0, 2**31))
def test_round_trip_any_length(n, seed):
    x = generate(LevyModel.brownian(), n, 1, seed)
    assert np.allclose(np.cumsum(apply_L(x), axis=0), x, atol=1e-10)

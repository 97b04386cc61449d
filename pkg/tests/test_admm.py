import json

import numpy as np
import pytest

from proxlearn.admm import AdmmConfig, admm_run, cost_eval, factorize, system_matrix
from proxlearn.learning import ConstraintSet, project_to_S
from proxlearn.signals import LevyModel, apply_L, make_batch
from proxlearn.splines import ANTISYMMETRIC, Identity, ShrinkageSpline, SoftThreshold, recover_penalty

from conftest import dense_L, tv_reference_certified


def test_system_matrix_structure():
    A = system_matrix(5, 2.0)
    L = dense_L(5)
    assert np.allclose(A, np.eye(5) + 2.0 * L.T @ L)
    assert A[-1, -1] == 3.0 and A[0, 0] == 5.0 and A[0, 1] == -2.0


def test_solve_small_dense():
    b = np.array([1.0, -2.0, 0.5])
    x = factorize(3, 2.0).solve(b)
    ref = np.linalg.solve(system_matrix(3, 2.0), b)
    assert np.linalg.norm(x - ref) / np.linalg.norm(ref) < 1e-12


def test_solve_near_identity(rng):
    b = rng.standard_normal(50)
    assert np.max(np.abs(factorize(50, 1e-15).solve(b) - b)) < 1e-12


@pytest.mark.parametrize("mu", [0.1, 2.0, 50.0])
def test_solve_residual(mu, rng):
    b = rng.standard_normal((100, 3))
    x = factorize(100, mu).solve(b)
    assert np.max(np.abs(system_matrix(100, mu) @ x - b)) < 1e-10 * np.max(np.abs(b))


def test_solve_length_mismatch():
    with pytest.raises(ValueError):
        factorize(5, 2.0).solve(np.zeros(6))


def test_config_validation():
    with pytest.raises(ValueError):
        AdmmConfig(mu=0.0)
    with pytest.raises(ValueError):
        AdmmConfig(iterations=0)


def admm_dense(y, shrink, mu, K):
    """Straight transcription of the three updates with dense linear algebra."""
    n = y.size
    L = dense_L(n)
    Minv = np.linalg.inv(np.eye(n) + mu * L.T @ L)
    u = np.zeros(n)
    a = np.zeros(n)
    for _ in range(K):
        x = Minv @ (y + L.T @ (mu * u + a))
        a = a - mu * (L @ x - u)
        u = shrink(L @ x - a / mu)
    return x


def test_matches_dense_transcription(rng):
    y = rng.standard_normal(30).cumsum()
    s = SoftThreshold(0.4)
    got = admm_run(y, s, AdmmConfig(2.0, 25)).x_final
    assert np.allclose(got, admm_dense(y, s, 2.0, 25), atol=1e-12)


def test_identity_shrink_converges_to_y(rng):
    y = rng.standard_normal(100).cumsum()
    x = admm_run(y, Identity(), AdmmConfig(2.0, 500)).x_final
    assert np.max(np.abs(x - y)) < 1e-6


def test_tv_matches_reference():
    b = make_batch(LevyModel.compound_poisson(), 100, 3, 1.0, 21)
    lam, mu = 1.0, 2.0
    X = admm_run(b.noisy, SoftThreshold(lam / mu), AdmmConfig(mu, 2000)).x_final
    ref, kkt = tv_reference_certified(b.noisy, lam)
    assert kkt < 1e-9
    assert np.max(np.linalg.norm(X - ref, axis=0) / np.linalg.norm(ref, axis=0)) < 1e-6


def test_single_iteration_trace(rng):
    y = rng.standard_normal(10)
    tr = admm_run(y, Identity(), AdmmConfig(2.0, 1, record_trace=True))
    assert len(tr.v_per_iter) == 1 and len(tr.x_per_iter) == 1


def test_trace_lengths(rng):
    y = rng.standard_normal(10)
    tr = admm_run(y, SoftThreshold(0.2), AdmmConfig(2.0, 7, record_trace=True), penalty=lambda u: 0 * u)
    assert len(tr.v_per_iter) == 7 and len(tr.cost_per_iter) == 7
    assert np.array_equal(tr.x_per_iter[-1], tr.x_final)


def test_batch_equals_columns(rng):
    Y = rng.standard_normal((40, 4)).cumsum(axis=0)
    s = SoftThreshold(0.3)
    X = admm_run(Y, s, AdmmConfig(2.0, 10)).x_final
    for j in range(4):
        assert np.array_equal(X[:, j], admm_run(Y[:, j], s, AdmmConfig(2.0, 10)).x_final)


def test_deterministic(rng):
    y = rng.standard_normal(50)
    a = admm_run(y, SoftThreshold(0.2), AdmmConfig(2.0, 30)).x_final
    b = admm_run(y, SoftThreshold(0.2), AdmmConfig(2.0, 30)).x_final
    assert np.array_equal(a, b)


def test_factorization_mismatch():
    with pytest.raises(ValueError):
        admm_run(np.zeros(10), Identity(), AdmmConfig(2.0, 3), factorize(11, 2.0))
    with pytest.raises(ValueError):
        admm_run(np.zeros(10), Identity(), AdmmConfig(2.0, 3), factorize(10, 1.0))


def test_cost_trivial(rng):
    y = rng.standard_normal(20)
    zero = lambda u: np.zeros_like(u)
    assert cost_eval(y, y, zero) == 0.0
    assert cost_eval(np.zeros(20), y, zero) == pytest.approx(0.5 * y @ y)


def test_cost_abs_penalty(rng):
    p = recover_penalty(SoftThreshold(1.0), np.linspace(-30, 30, 60001))
    for _ in range(5):
        x, y = rng.standard_normal((2, 40)).cumsum(axis=1)
        direct = 0.5 * np.sum((y - x) ** 2) + np.sum(np.abs(apply_L(x)))
        assert abs(cost_eval(x, y, p) - direct) / direct < 1e-8


def test_trace_json(rng):
    tr = admm_run(rng.standard_normal(5), Identity(), AdmmConfig(2.0, 2), penalty=lambda u: 0 * u)
    d = json.loads(json.dumps(tr.to_dict()))
    assert len(d["x_final"]) == 5 and len(d["cost_per_iter"]) == 2


def test_convergence_with_fne_spline(rng):
    S = ConstraintSet(0.25, 40, ANTISYMMETRIC)
    c = project_to_S(np.cumsum(rng.uniform(0, 0.3, 40)) - 1.0, S)
    s = ShrinkageSpline(0.25, 40, c, ANTISYMMETRIC)
    pen = recover_penalty(s, np.linspace(-s.x_max, s.x_max, 40001))
    y = make_batch(LevyModel.compound_poisson(), 100, 1, 1.0, 5).noisy[:, 0]
    tr = admm_run(y, s, AdmmConfig(2.0, 2000, record_trace=True), penalty=pen)
    cost = np.asarray(tr.cost_per_iter)
    assert np.all(np.diff(cost[20:]) <= 1e-8)
    assert np.linalg.norm(tr.x_per_iter[-1] - tr.x_per_iter[-2]) < 1e-8

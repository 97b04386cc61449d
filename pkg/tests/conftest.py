"""Independent reference computations shared across the test modules."""

import numpy as np
import pytest
from scipy.optimize import minimize


def dense_L(n):
    return np.eye(n) - np.eye(n, k=-1)


def tv_reference_certified(Y, lam, iters=20_000, kkt_tol=1e-9):
    """Exact TV minimizers for the columns of ``Y``, with a KKT certificate.

    Works on the increments ``u = Lx``: ``min_u 1/2 ||y - S u||^2 + lam ||u||_1``.
    Batched FISTA identifies the support and signs; the solution is then
    solved exactly on that support and the optimality conditions
    ``|S^T (y - S u)|_i <= lam`` (equality with sign on the support) are
    checked. Returns ``(X, worst KKT violation)``.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float).T).T
    n, b = Y.shape
    S = np.tril(np.ones((n, n)))
    step = 2.0 - 2.0 * np.cos(np.pi / (2 * n + 1))
    U = np.zeros_like(Y)
    Z = U.copy()
    t = 1.0
    for _ in range(iters):
        G = np.cumsum((np.cumsum(Z, axis=0) - Y)[::-1], axis=0)[::-1]
        W = Z - step * G
        U_new = np.sign(W) * np.maximum(np.abs(W) - step * lam, 0.0)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        Z = U_new + (t - 1.0) / t_new * (U_new - U)
        U, t = U_new, t_new
    X = np.empty_like(Y)
    worst = 0.0
    for j in range(b):
        y = Y[:, j]
        A = np.abs(U[:, j]) > 1e-9
        sgn = np.sign(U[A, j])
        SA = S[:, A]
        u = np.zeros(n)
        u[A] = np.linalg.solve(SA.T @ SA, SA.T @ y - lam * sgn)
        g = S.T @ (y - S @ u)
        viol = max(
            float(np.max(np.abs(g[~A])) - lam) if (~A).any() else 0.0,
            float(np.max(np.abs(g[A] - lam * sgn))) if A.any() else 0.0,
            float(np.max(-sgn * u[A])) if A.any() else 0.0,
        )
        worst = max(worst, viol / lam)
        X[:, j] = S @ u
    return X, worst


def slab_projection_oracle(z, delta, anchored):
    """Projection onto ``0 <= c_m - c_{m-1} <= delta`` by a generic QP solver."""
    z = np.asarray(z, dtype=float)
    n = z.size
    D = dense_L(n) if anchored else (np.eye(n) - np.eye(n, k=-1))[1:]
    cons = [
        {"type": "ineq", "fun": lambda c: D @ c, "jac": lambda c: D},
        {"type": "ineq", "fun": lambda c: delta - D @ c, "jac": lambda c: -D},
    ]
    res = minimize(lambda c: 0.5 * np.sum((c - z) ** 2), np.zeros(n), jac=lambda c: c - z,
                   constraints=cons, method="SLSQP", options={"ftol": 1e-14, "maxiter": 1000})
    return res.x


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

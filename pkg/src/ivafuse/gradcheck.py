"""Central finite-difference checks of the analytic IVA and network derivatives."""

from __future__ import annotations

import numpy as np

from . import iva, nn

FD_STEP = 1e-6


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.ravel(a)
    b = np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def random_iva_instance(rng: np.random.Generator, max_n: int = 5, max_k: int = 3, T: int = 200):
    N = int(rng.integers(2, max_n + 1))
    K = int(rng.integers(1, max_k + 1))
    X = rng.standard_normal((K, N, T))
    # correlate the datasets a little so Psi is not diagonal
    X[1:] += 0.5 * X[:1]
    W = iva.init_demixing(N, K, rng)
    return W, X


def iva_gradient_error(W: np.ndarray, X: np.ndarray, n: int, step: float = FD_STEP) -> float:
    K, N, _ = W.shape
    Y = iva.demix(W, X)
    analytic = iva.gradient_wn(n, W, X, Y, iva.scv_covariances(Y))
    fd = np.empty(K * N)
    for i in range(K * N):
        k, j = divmod(i, N)
        Wp, Wm = W.copy(), W.copy()
        Wp[k, n, j] += step
        Wm[k, n, j] -= step
        fd[i] = (iva.cost_iva(Wp, X) - iva.cost_iva(Wm, X)) / (2 * step)
    return rel_error(analytic, fd)


def iva_hessian_error(W: np.ndarray, X: np.ndarray, n: int, step: float = FD_STEP) -> float:
    """Hessian against a finite difference of the gradient with ``Psi_n`` frozen."""
    K, N, _ = W.shape
    stats = iva.scv_covariances(iva.demix(W, X), X)
    analytic = iva.hessian_blocks(n, W, X, stats)

    def grad(Wx):
        return iva.gradient_wn(n, Wx, X, iva.demix(Wx, X), iva.ScvStats(stats.psi))

    fd = np.empty((K * N, K * N))
    for i in range(K * N):
        k, j = divmod(i, N)
        Wp, Wm = W.copy(), W.copy()
        Wp[k, n, j] += step
        Wm[k, n, j] -= step
        fd[:, i] = (grad(Wp) - grad(Wm)) / (2 * step)
    return rel_error(analytic, fd)


def check_iva(n_instances: int = 20, seed: int = 0) -> tuple[float, float]:
    """Worst gradient and Hessian relative errors over random instances."""
    rng = np.random.default_rng(seed)
    g_worst = h_worst = 0.0
    for _ in range(n_instances):
        W, X = random_iva_instance(rng)
        n = int(rng.integers(W.shape[1]))
        g_worst = max(g_worst, iva_gradient_error(W, X, n))
        h_worst = max(h_worst, iva_hessian_error(W, X, n))
    return g_worst, h_worst


def tiny_pcnn_i(n_classes: int = 2) -> nn.NetworkSpec:
    """Smallest PCNN-I that still exercises every layer type."""
    return nn.pcnn_i(n_classes, n1=3, n2=3, n3=3, dilation=2, n_features=8, n_frames=6,
                     c1=4, c2=4, c3=4, f1=8, f2=8)


def check_network(spec: nn.NetworkSpec | None = None, batch: int = 4, seed: int = 0,
                  step: float = FD_STEP) -> dict[str, float]:
    """Per-parameter relative error of backprop against finite differences.

    Runs in float64 with batch norm in training mode but running statistics
    frozen, so repeated evaluations see the same function.
    """
    spec = spec or tiny_pcnn_i()
    rng = np.random.default_rng(seed)
    state = nn.init_state(spec, seed=seed)
    for name in state.params:
        state.params[name] = state.params[name] + 0.3 * rng.standard_normal(state.params[name].shape)
    x = rng.standard_normal((batch, spec.n_inputs, spec.n_features, spec.n_frames))
    y = np.arange(batch) % spec.n_classes

    def loss():
        return nn.loss_and_backward(state, x, y, update_stats=False)[0]

    _, grads = nn.loss_and_backward(state, x, y, update_stats=False)
    errors = {}
    for name, p in state.params.items():
        fd = np.empty_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + step
            lp = loss()
            p[idx] = old - step
            lm = loss()
            p[idx] = old
            fd[idx] = (lp - lm) / (2 * step)
        errors[name] = rel_error(grads[name], fd)
    return errors

"""Independent vector analysis with a multivariate Gaussian source prior.

Array conventions used throughout this module:

* observations ``X`` and estimates ``Y``: ``(K, N, T)``
* demixing tensor ``W``: ``(K, N, N)``; ``W[k, n]`` is the n-th demixing
  row of dataset ``k``
* the n-th source component vector (SCV) is ``Y[:, n, :]``, a ``(K, T)`` block

The cost being minimised is the mutual information between SCVs, which under
the Gaussian prior reduces (up to a data-only constant) to

    J(W) = sum_n 1/2 log det Psi_n - sum_k log |det W[k]|,

with ``Psi_n = Y[:, n] Y[:, n]^T / T`` the ML estimate of the SCV covariance.
``J`` is invariant to rescaling any single demixing row, which is what makes
the unit-norm row constraint free.

Demixing rows are updated one SCV at a time with a Newton step whose Hessian
treats ``Psi_n`` as fixed for the duration of the step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .features import FeatureTensor, ShapeMismatch

logger = logging.getLogger(__name__)

RIDGE = 1e-8
DET_EPS = 1e-12
COST_DET_EPS = 1e-300


class IvaError(ArithmeticError):
    def __init__(self, msg: str, iteration: int | None = None):
        if iteration is not None:
            msg = f"{msg} (iteration {iteration})"
        super().__init__(msg)
        self.iteration = iteration


class SingularDemixing(IvaError):
    pass


class DegenerateNullspace(IvaError):
    pass


class SingularCovariance(IvaError):
    pass


@dataclass(frozen=True)
class IvaConfig:
    eta0: float = 1.0
    eta_decay: float = 0.9
    eta_min: float = 1e-6
    max_iters: int = 500
    cost_tol: float = 1e-9
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.eta_decay < 1.0:
            raise ValueError("eta_decay must lie in (0, 1)")
        if not self.eta_min < self.eta0:
            raise ValueError("eta_min must be below eta0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class ScvStats:
    """SCV covariances ``psi`` (N, K, K) and, optionally, the data
    cross-covariances ``rx`` (K, K, N, N) with ``rx[k1, k2] = E{x^[k1] x^[k2]^T}``."""

    psi: np.ndarray
    rx: np.ndarray | None = None
    _inv: dict = field(default_factory=dict, repr=False, compare=False)

    def psi_inv(self, n: int) -> np.ndarray:
        if n not in self._inv:
            self._inv[n] = _inv_spd(self.psi[n])
        return self._inv[n]


@dataclass
class IvaResult:
    W: np.ndarray
    Y: np.ndarray
    trace: list[tuple[int, float, float]] = field(default_factory=list)
    n_rejected: int = 0
    stop_reason: str = ""

    @property
    def n_iters(self) -> int:
        return len(self.trace) - 1

    @property
    def final_cost(self) -> float:
        return self.trace[-1][2]


def _as_array(X) -> np.ndarray:
    if isinstance(X, FeatureTensor):
        return X.data
    return np.asarray(X, dtype=np.float64)


def _inv_spd(a: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.inv(a)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.inv(a + RIDGE * np.eye(a.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance("SCV covariance is singular even after ridge") from exc


def init_demixing(N: int, K: int, seed=None) -> np.ndarray:
    """Random ``(K, N, N)`` demixing tensor with unit-norm rows.

    Entries are standard normal; each matrix is redrawn until its
    determinant is safely away from zero.
    """
    if N < 1 or K < 1:
        raise ValueError("N and K must be positive")
    rng = np.random.default_rng(seed)
    W = np.empty((K, N, N))
    for k in range(K):
        while True:
            w = rng.standard_normal((N, N))
            if abs(np.linalg.det(w)) > DET_EPS:
                break
        W[k] = w / np.linalg.norm(w, axis=1, keepdims=True)
    return W


def demix(W: np.ndarray, X) -> np.ndarray:
    """``Y[k] = W[k] @ X[k]`` for every dataset ``k``."""
    X = _as_array(X)
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 3 or X.ndim != 3 or W.shape[0] != X.shape[0] or W.shape[2] != X.shape[1]:
        raise ShapeMismatch(f"cannot demix {X.shape} with {W.shape}")
    return W @ X


def cross_covariances(X) -> np.ndarray:
    """All ``E{x^[k1] x^[k2]^T}`` blocks, shape ``(K, K, N, N)``."""
    X = _as_array(X)
    return np.einsum("ant,bmt->abnm", X, X) / X.shape[2]


def scv_covariances(Y: np.ndarray, X=None) -> ScvStats:
    """ML covariance estimates of every SCV (uncentered, 1/T)."""
    Y = np.asarray(Y)
    T = Y.shape[2]
    psi = np.einsum("ant,bnt->nab", Y, Y) / T
    rx = cross_covariances(X) if X is not None else None
    return ScvStats(psi, rx)


def score_phi(Y: np.ndarray, stats: ScvStats) -> np.ndarray:
    """Gaussian score ``phi[k, n, t] = {Psi_n^-1 y_n(t)}_k``."""
    Y = np.asarray(Y)
    N = Y.shape[1]
    inv = np.stack([stats.psi_inv(n) for n in range(N)])  # (N, K, K)
    return np.einsum("nab,bnt->ant", inv, Y)


def nullspace_vectors(W: np.ndarray, n: int) -> np.ndarray:
    """Unit vectors ``h[k]`` orthogonal to every row of ``W[k]`` except row ``n``.

    Computed from a complete QR factorisation of the transposed
    ``(N-1, N)`` submatrix; the last column of Q spans its null space.
    """
    K, N, _ = W.shape
    H = np.empty((K, N))
    for k in range(K):
        if N == 1:
            H[k] = 1.0
            continue
        rest = np.delete(W[k], n, axis=0)
        q, r = np.linalg.qr(rest.T, mode="complete")
        diag = np.abs(np.diag(r))
        if diag.min() <= DET_EPS * max(1.0, diag.max()):
            raise DegenerateNullspace(f"rows of W[{k}] other than {n} are linearly dependent")
        H[k] = q[:, -1]
    return H


def scaled_nullspace(W: np.ndarray, n: int) -> np.ndarray:
    """``h_n^[k] / (h_n^[k]^T w_n^[k])`` for every k, shape ``(K, N)``.

    The vector is orthogonal to all rows but ``n`` and has unit inner product
    with row ``n``, so it equals column ``n`` of ``W[k]^-1``. This is the
    quantity the gradient and Hessian need; it avoids the QR factorisation.
    """
    try:
        return np.linalg.inv(W)[:, :, n]
    except np.linalg.LinAlgError as exc:
        raise SingularDemixing("demixing matrix is singular") from exc


def _row_terms(W: np.ndarray, n: int) -> np.ndarray:
    H = nullspace_vectors(W, n)
    hw = np.einsum("kn,kn->k", H, W[:, n, :])
    if np.any(np.abs(hw) < COST_DET_EPS):
        raise DegenerateNullspace(f"h^T w vanishes for row {n}")
    return H / hw[:, None]


def gradient_wn(n: int, W: np.ndarray, X, Y: np.ndarray, stats: ScvStats,
                c: np.ndarray | None = None) -> np.ndarray:
    """Gradient of the cost with respect to the stacked row ``w_n`` (length K*N).

    ``E{phi^[k](y_n) x^[k]} - h_n^[k] / (h_n^[k]^T w_n^[k])`` for each k,
    expectation replaced by the sample mean. ``c`` optionally supplies the
    precomputed ``h / (h^T w)`` terms.
    """
    X = _as_array(X)
    K, N, T = X.shape
    inv = stats.psi_inv(n)
    phi = inv @ Y[:, n, :]  # (K, T)
    c = _row_terms(W, n) if c is None else c
    grad = np.einsum("kt,knt->kn", phi, X) / T - c
    return grad.reshape(K * N)


def hessian_blocks(n: int, W: np.ndarray, X, stats: ScvStats, c: np.ndarray | None = None) -> np.ndarray:
    """``(K*N, K*N)`` Newton Hessian for row ``n`` with ``Psi_n`` held fixed.

    Block ``(k1, k2)`` is ``{Psi_n^-1}_{k1,k2} R_x^[k1,k2]``; diagonal blocks
    additionally carry ``h h^T / (h^T w)^2``.
    """
    rx = stats.rx if stats.rx is not None else cross_covariances(X)
    K, _, N, _ = rx.shape
    inv = stats.psi_inv(n)
    c = _row_terms(W, n) if c is None else c
    hess = (inv[:, :, None, None] * rx).transpose(0, 2, 1, 3).reshape(K * N, K * N)
    for k in range(K):
        sl = slice(k * N, (k + 1) * N)
        hess[sl, sl] += np.outer(c[k], c[k])
    return hess


def cost_terms(W: np.ndarray, stats: ScvStats) -> tuple[float, float]:
    """Return ``(sum_n 1/2 log det Psi_n, sum_k log|det W[k]|)``."""
    sign, logdet_w = np.linalg.slogdet(W)
    if np.any(sign == 0) or np.any(logdet_w < np.log(COST_DET_EPS)):
        raise SingularDemixing("demixing matrix is singular")
    sign_p, logdet_p = np.linalg.slogdet(stats.psi)
    if np.any(sign_p <= 0):
        ridge = stats.psi + RIDGE * np.eye(stats.psi.shape[1])
        sign_p, logdet_p = np.linalg.slogdet(ridge)
        if np.any(sign_p <= 0):
            raise SingularCovariance("SCV covariance is not positive definite")
    return 0.5 * float(logdet_p.sum()), float(logdet_w.sum())


def cost_iva(W: np.ndarray, X=None, Y: np.ndarray | None = None, stats: ScvStats | None = None) -> float:
    """Gaussian IVA cost with the data-entropy constant dropped.

    ``Y`` and ``stats`` are recomputed from ``W`` and ``X`` when not supplied.
    """
    if Y is None:
        Y = demix(W, X)
    if stats is None:
        stats = scv_covariances(Y)
    scv_term, det_term = cost_terms(W, stats)
    return scv_term - det_term


def _newton_direction(hess: np.ndarray, grad: np.ndarray) -> np.ndarray:
    try:
        return scipy.linalg.solve(hess, grad, assume_a="sym", check_finite=False)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning):
        ridged = hess + RIDGE * np.eye(hess.shape[0])
        return scipy.linalg.solve(ridged, grad, assume_a="sym")


def newton_sweep(W: np.ndarray, X: np.ndarray, rx: np.ndarray, eta: float) -> np.ndarray:
    """One pass of Newton updates over all SCVs; returns a new tensor.

    SCV ``n`` depends only on row ``n``, so the statistics computed before the
    sweep stay valid for each row at the moment it is updated.
    """
    K, N, _ = W.shape
    W = W.copy()
    Y = demix(W, X)
    stats = scv_covariances(Y)
    stats.rx = rx
    for n in range(N):
        c = scaled_nullspace(W, n)
        grad = gradient_wn(n, W, X, Y, stats, c)
        hess = hessian_blocks(n, W, X, stats, c)
        step = _newton_direction(hess, grad).reshape(K, N)
        W[:, n, :] -= eta * step
        W[:, n, :] /= np.linalg.norm(W[:, n, :], axis=1, keepdims=True)
    return W


def order_components(W: np.ndarray, X) -> np.ndarray:
    """Canonical permutation and sign of the demixing rows.

    SCVs are sorted by ascending ``log det Psi_n`` (most strongly dependent
    across datasets first, ties broken by descending trace), and each row is
    signed so its largest-magnitude coefficient is positive.
    """
    Y = demix(W, X)
    psi = scv_covariances(Y).psi
    _, logdet = np.linalg.slogdet(psi)
    trace = np.trace(psi, axis1=1, axis2=2)
    order = np.lexsort((-trace, logdet))
    W = W[:, order, :].copy()
    peak = np.take_along_axis(W, np.abs(W).argmax(axis=2)[:, :, None], axis=2)
    return W * np.where(peak < 0, -1.0, 1.0)


def run_iva(X, cfg: IvaConfig = IvaConfig(), W0: np.ndarray | None = None,
            reorder: bool = True) -> IvaResult:
    """Estimate the demixing tensor by Newton iterations with step-size backoff.

    ``X`` is expected to be centred and whitened per dataset (not enforced).
    Each iteration updates every demixing row once. A sweep that increases the
    cost is discarded and the learning rate multiplied by ``cfg.eta_decay``;
    iteration stops once the rate falls below ``cfg.eta_min``, the accepted cost
    changes by less than ``cfg.cost_tol``, or ``cfg.max_iters`` is reached.
    """
    X = _as_array(X)
    K, N, T = X.shape
    W = init_demixing(N, K, cfg.seed) if W0 is None else np.array(W0, dtype=np.float64)
    if W.shape != (K, N, N):
        raise ShapeMismatch(f"W0 has shape {W.shape}, expected {(K, N, N)}")
    rx = cross_covariances(X)
    cost = cost_iva(W, X)
    eta = cfg.eta0
    trace = [(0, eta, cost)]
    rejected = 0
    reason = "max_iters"
    for it in range(1, cfg.max_iters + 1):
        try:
            W_new = newton_sweep(W, X, rx, eta)
            new_cost = cost_iva(W_new, X)
        except IvaError as exc:
            raise type(exc)(str(exc), it) from exc
        if not np.isfinite(new_cost) or new_cost > cost:
            rejected += 1
            eta *= cfg.eta_decay
            if eta < cfg.eta_min:
                reason = "eta_min"
                break
            continue
        improvement = cost - new_cost
        W, cost = W_new, new_cost
        trace.append((it, eta, cost))
        if improvement < cfg.cost_tol:
            reason = "cost_tol"
            break
    logger.debug("IVA stopped after %d iterations (%s), cost %.6g", it, reason, cost)
    if reorder:
        W = order_components(W, X)
    return IvaResult(W=W, Y=demix(W, X), trace=trace, n_rejected=rejected, stop_reason=reason)

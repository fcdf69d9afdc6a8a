"""LPC and MFCC feature matrices, feature tensors and per-slab whitening.

Feature matrices are ``(N, T)`` arrays (feature dimension by frames). A
feature tensor stacks ``K`` of them; its array form is ``(K, N, T)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.fft import dct

from .audio_io import FrameMatrix

LOG_FLOOR = 1e-10
EIG_FLOOR = 1e-10
DELTA_WIDTH = 2


class ShapeMismatch(ValueError):
    pass


class RankDeficient(ValueError):
    pass


class FeatureKind(enum.Enum):
    LPC = "lpc"
    MFCC = "mfcc"
    OTHER = "other"


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray
    kind: FeatureKind = FeatureKind.OTHER

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError("feature matrix must be 2-D (N, T)")
        if not np.all(np.isfinite(values)):
            raise ValueError("feature matrix has non-finite entries")
        object.__setattr__(self, "values", values)

    @property
    def n_features(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class FeatureTensor:
    slabs: tuple[FeatureMatrix, ...]

    @property
    def data(self) -> np.ndarray:
        """Array view with axes ``(K, N, T)``."""
        return np.stack([s.values for s in self.slabs])

    @property
    def shape(self) -> tuple[int, int, int]:
        """``(N, T, K)``, the conventional way of quoting tensor sizes."""
        n, t = self.slabs[0].values.shape
        return n, t, len(self.slabs)

    @classmethod
    def from_array(cls, data: np.ndarray, kinds: Sequence[FeatureKind] | None = None) -> "FeatureTensor":
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 3:
            raise ShapeMismatch("expected a (K, N, T) array")
        kinds = kinds or [FeatureKind.OTHER] * data.shape[0]
        return cls(tuple(FeatureMatrix(d, k) for d, k in zip(data, kinds)))


@dataclass(frozen=True)
class WhiteningTransform:
    matrices: np.ndarray  # (K, N, N)
    means: np.ndarray  # (K, N)
    n_floored: tuple[int, ...] = ()

    def apply(self, data: np.ndarray) -> np.ndarray:
        """Whiten a ``(K, N, T)`` array with the fitted transform."""
        return self.matrices @ (data - self.means[:, :, None])


# --- LPC -------------------------------------------------------------------


def autocorrelation(frame: np.ndarray, max_lag: int) -> np.ndarray:
    n = frame.shape[0]
    return np.array([np.dot(frame[:n - k], frame[k:]) for k in range(max_lag + 1)])


def levinson_durbin(r: np.ndarray, order: int) -> tuple[np.ndarray, float]:
    """Solve the autocorrelation normal equations for predictor coefficients.

    Returns ``(a, err)`` with ``a[0..order-1]`` such that
    ``x(u) ~ sum_r a[r-1] x(u-r)`` and ``err`` the final prediction error power.
    """
    a = np.zeros(order)
    err = float(r[0])
    for i in range(order):
        if err <= 0.0:
            break
        k = (r[i + 1] - np.dot(a[:i], r[i:0:-1])) / err
        a_prev = a[:i].copy()
        a[:i] = a_prev - k * a_prev[::-1]
        a[i] = k
        err *= 1.0 - k * k
    return a, err


def lpc_coefficients(frames: np.ndarray, order: int) -> np.ndarray:
    """Per-column LPCs of a ``(U, T)`` frame matrix, shape ``(order, T)``.

    Frames with zero energy yield zero coefficients.
    """
    u, t = frames.shape
    if order >= u:
        raise ValueError(f"LPC order {order} must be below the frame length {u}")
    out = np.zeros((order, t))
    for j in range(t):
        r = autocorrelation(frames[:, j], order)
        if r[0] <= 0.0:
            continue
        out[:, j], _ = levinson_durbin(r, order)
    return out


def delta(features: np.ndarray, width: int = DELTA_WIDTH) -> np.ndarray:
    """Regression deltas along the frame axis, replicating edge frames.

    d(t) = sum_i i (f(t+i) - f(t-i)) / (2 sum_i i^2), i = 1..width
    """
    f = np.asarray(features, dtype=np.float64)
    t = f.shape[1]
    padded = np.pad(f, ((0, 0), (width, width)), mode="edge")
    num = np.zeros_like(f)
    for i in range(1, width + 1):
        num += i * (padded[:, width + i:width + i + t] - padded[:, width - i:width - i + t])
    return num / (2.0 * sum(i * i for i in range(1, width + 1)))


def with_deltas(base: np.ndarray, width: int = DELTA_WIDTH) -> np.ndarray:
    """Stack base features with their first and second deltas, ``(3 * n, T)``."""
    d1 = delta(base, width)
    d2 = delta(d1, width)
    return np.vstack([base, d1, d2])


def lpc_features(frames: FrameMatrix, order: int = 13, delta_width: int = DELTA_WIDTH) -> FeatureMatrix:
    """LPCs with first and second deltas, ``(3 * order, T)``."""
    return FeatureMatrix(with_deltas(lpc_coefficients(frames.frames, order), delta_width), FeatureKind.LPC)


# --- MFCC ------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular filters on the mel scale, shape ``(n_mels, n_fft // 2 + 1)``.

    Filter peaks are unity; edges are equally spaced in mel between ``fmin``
    and ``fmax`` (Nyquist by default).
    """
    fmax = sample_rate / 2.0 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None, :] - lower) / (center - lower)
    falling = (upper - bins[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def power_spectrum(frames: np.ndarray, n_fft: int) -> np.ndarray:
    """|DFT|^2 of each column, zero-padded to ``n_fft``; shape ``(n_fft // 2 + 1, T)``."""
    spec = np.fft.rfft(frames, n=n_fft, axis=0)
    return spec.real ** 2 + spec.imag ** 2


def mfcc_coefficients(frames: np.ndarray, sample_rate: int = 16000, n_mels: int = 39,
                      n_ceps: int = 13, n_fft: int = 512) -> np.ndarray:
    if n_ceps > n_mels:
        raise ValueError("n_ceps must not exceed n_mels")
    if n_fft < frames.shape[0]:
        raise ValueError("n_fft shorter than the frame")
    fbank = mel_filterbank(n_mels, n_fft, sample_rate)
    energies = fbank @ power_spectrum(frames, n_fft)
    log_mel = np.log(np.maximum(energies, LOG_FLOOR))
    return dct(log_mel, type=2, norm="ortho", axis=0)[:n_ceps]


def mfcc_features(frames: FrameMatrix, n_mels: int = 39, n_ceps: int = 13, *,
                  sample_rate: int = 16000, n_fft: int = 512,
                  delta_width: int = DELTA_WIDTH) -> FeatureMatrix:
    """MFCCs with first and second deltas, ``(3 * n_ceps, T)``."""
    base = mfcc_coefficients(frames.frames, sample_rate, n_mels, n_ceps, n_fft)
    return FeatureMatrix(with_deltas(base, delta_width), FeatureKind.MFCC)


# --- tensors ---------------------------------------------------------------


def build_tensor(slabs: Sequence[FeatureMatrix]) -> FeatureTensor:
    """Stack feature matrices (LPC first, then MFCC by convention)."""
    if not slabs:
        raise ShapeMismatch("need at least one feature matrix")
    shape = slabs[0].values.shape
    for s in slabs[1:]:
        if s.values.shape != shape:
            raise ShapeMismatch(f"slab shape {s.values.shape} differs from {shape}")
    return FeatureTensor(tuple(slabs))


def whiten(tensor: FeatureTensor) -> tuple[FeatureTensor, WhiteningTransform]:
    """Center and decorrelate each slab with a symmetric (ZCA) whitening matrix.

    Eigenvalues of the sample covariance are floored at ``EIG_FLOOR``; if more
    than half of them hit the floor the slab is considered rank deficient.
    """
    data = tensor.data
    k, n, t = data.shape
    if t <= n:
        raise ValueError(f"whitening needs more frames ({t}) than features ({n})")
    means = data.mean(axis=2)
    mats = np.empty((k, n, n))
    floored = []
    for i in range(k):
        xc = data[i] - means[i][:, None]
        evals, evecs = np.linalg.eigh(xc @ xc.T / t)
        low = evals < EIG_FLOOR
        if low.sum() > n / 2:
            raise RankDeficient(f"slab {i}: {int(low.sum())} of {n} eigenvalues below {EIG_FLOOR}")
        floored.append(int(low.sum()))
        evals = np.maximum(evals, EIG_FLOOR)
        mats[i] = (evecs / np.sqrt(evals)) @ evecs.T
    transform = WhiteningTransform(mats, means, tuple(floored))
    kinds = [s.kind for s in tensor.slabs]
    return FeatureTensor.from_array(transform.apply(data), kinds), transform

"""Synthetic data: Gaussian SCV mixtures, the joint ISI metric and toy speakers."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .audio_io import AudioSignal, FrameConfig, write_wav
from .features import FeatureTensor, whiten
from .iva import IvaConfig, run_iva

SAMPLE_RATE = 16000
MIN_SCV_CORRELATION = 0.5
MAX_SCV_CORRELATION = 0.99
MAX_CONDITION = 10.0


@dataclass(frozen=True)
class SynthMixture:
    S: np.ndarray  # (K, N, T)
    A: np.ndarray  # (K, N, N)
    X: np.ndarray  # (K, N, T)
    psi: np.ndarray  # generating SCV covariances, (N, K, K)
    seed: int


@dataclass(frozen=True)
class IsiReport:
    joint_isi: float
    per_dataset: tuple[float, ...]


def random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def random_mixing(n: int, rng: np.random.Generator, max_cond: float = MAX_CONDITION) -> np.ndarray:
    """Random matrix with singular values in [1, max_cond]."""
    s = rng.uniform(1.0, max_cond, size=n)
    s[0], s[-1] = 1.0, max_cond if n > 1 else 1.0
    return random_orthogonal(n, rng) @ np.diag(s) @ random_orthogonal(n, rng)


def scv_covariance(K: int, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Covariance with unit diagonal and off-diagonal entries near ``rho``.

    For K > 2 the off-diagonals are jittered by at most 0.02 and the matrix is
    re-drawn until positive definite.
    """
    if K == 1:
        return np.ones((1, 1))
    while True:
        off = rho + rng.uniform(-0.02, 0.02, size=(K, K)) * (K > 2)
        off = np.minimum(np.triu(off, 1), 0.995)
        c = np.eye(K) + off + off.T
        if np.linalg.eigvalsh(c).min() > 1e-3:
            return c


def gen_scv_mixture(N: int, K: int, T: int, seed: int) -> SynthMixture:
    """Gaussian SCVs with distinct within-SCV correlations, randomly mixed per dataset.

    Each SCV has its own correlation level. Levels are stratified evenly in
    the within-SCV mutual information -1/2 log(1 - rho^2) over
    rho in [0.5, 0.99], with each draw kept near the middle of its stratum, so
    no two SCVs share a covariance structure; that diversity is what makes
    Gaussian IVA identifiable. Sources have unit variance; any scaling belongs
    to the mixing matrices.
    """
    if T < 10 * N * K:
        raise ValueError("need T >= 10 N K samples")
    rng = np.random.default_rng(seed)
    info = -0.5 * np.log1p(-np.array([MIN_SCV_CORRELATION, MAX_SCV_CORRELATION]) ** 2)
    edges = np.linspace(info[0], info[1], N + 1)
    levels = edges[:-1] + (edges[1] - edges[0]) * rng.uniform(0.4, 0.6, size=N)
    rhos = np.sqrt(-np.expm1(-2.0 * levels))
    rng.shuffle(rhos)

    S = np.empty((K, N, T))
    psi = np.empty((N, K, K))
    for n in range(N):
        psi[n] = scv_covariance(K, rhos[n], rng)
        S[:, n, :] = np.linalg.cholesky(psi[n]) @ rng.standard_normal((K, T))
    A = np.stack([random_mixing(N, rng) for _ in range(K)])
    return SynthMixture(S=S, A=A, X=A @ S, psi=psi, seed=seed)


def isi_index(G: np.ndarray) -> float:
    """Amari-style index of a non-negative square matrix, normalised to [0, 1]."""
    G = np.abs(np.asarray(G, dtype=np.float64))
    n = G.shape[0]
    if n == 1:
        return 0.0
    rows = (G / G.max(axis=1, keepdims=True)).sum(axis=1) - 1.0
    cols = (G / G.max(axis=0, keepdims=True)).sum(axis=0) - 1.0
    return float((rows.sum() + cols.sum()) / (2.0 * n * (n - 1)))


def joint_isi(W: np.ndarray, A: np.ndarray) -> IsiReport:
    """Joint inter-symbol interference of the global systems ``W[k] @ A[k]``.

    Each ``|W[k] A[k]|`` is scaled so every row peaks at one, the K results
    are averaged, and the Amari index of the average is returned. It is zero
    exactly when all global systems are scaled versions of one common
    permutation.
    """
    G = np.abs(np.asarray(W) @ np.asarray(A))
    G = G / G.max(axis=2, keepdims=True)
    return IsiReport(isi_index(G.mean(axis=0)), tuple(isi_index(g) for g in G))


def separation_trial(seed: int, N: int, K: int = 2, T: int = 2000,
                     cfg: IvaConfig | None = None) -> dict:
    """Generate a mixture, whiten, run IVA and score it."""
    mix = gen_scv_mixture(N, K, T, seed)
    Xw, transform = whiten(FeatureTensor.from_array(mix.X))
    cfg = cfg or IvaConfig(seed=seed)
    res = run_iva(Xw.data, cfg)
    isi = joint_isi(res.W @ transform.matrices, mix.A)
    return {
        "seed": seed,
        "N": N,
        "iters": res.n_iters,
        "final_cost": res.final_cost,
        "joint_isi": isi.joint_isi,
        "trace": res.trace,
    }


def write_isi_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["seed", "iters", "final_cost", "joint_isi"])
        for r in rows:
            writer.writerow([r["seed"], r["iters"], repr(float(r["final_cost"])), repr(float(r["joint_isi"]))])


# --- synthetic speakers -----------------------------------------------------


@dataclass(frozen=True)
class SpeakerProfile:
    poles: tuple[tuple[float, float], ...]  # (radius, angle) of each conjugate pair
    pitch_hz: float


def random_profile(rng: np.random.Generator) -> SpeakerProfile:
    """Two resonances (an AR(4) vocal-tract stand-in) and a pitch."""
    f1 = rng.uniform(300.0, 1000.0)
    f2 = rng.uniform(1200.0, 3500.0)
    poles = tuple((float(rng.uniform(0.85, 0.97)), 2.0 * np.pi * f / SAMPLE_RATE) for f in (f1, f2))
    return SpeakerProfile(poles=poles, pitch_hz=float(rng.uniform(90.0, 260.0)))


def ar_coefficients(poles) -> np.ndarray:
    """Denominator polynomial of an all-pole filter from conjugate pole pairs."""
    a = np.array([1.0])
    for r, theta in poles:
        a = np.convolve(a, [1.0, -2.0 * r * np.cos(theta), r * r])
    return a


def synth_sentence(profile: SpeakerProfile, n_samples: int, rng: np.random.Generator,
                   jitter: float = 0.04, noise: float = 0.02) -> np.ndarray:
    """Pulse-train excitation through the speaker's AR filter, lightly perturbed.

    Pitch, resonance frequencies and bandwidths vary by a few percent per
    sentence; the pitch also drifts within the sentence. White noise is mixed
    into the excitation so that every frame has full-rank statistics.
    """
    poles = [
        (min(0.99, r * (1.0 + rng.uniform(-0.01, 0.01))), th * (1.0 + rng.uniform(-jitter, jitter)))
        for r, th in profile.poles
    ]
    f0 = profile.pitch_hz * (1.0 + rng.uniform(-jitter, jitter))
    drift = 1.0 + 0.1 * np.sin(2.0 * np.pi * rng.uniform(0.2, 0.8) * np.arange(n_samples) / SAMPLE_RATE
                               + rng.uniform(0, 2 * np.pi))
    phase = np.cumsum(f0 * drift / SAMPLE_RATE)
    excitation = (np.diff(np.floor(phase), prepend=0.0) > 0).astype(np.float64)
    excitation += noise * rng.standard_normal(n_samples)
    y = lfilter([1.0], ar_coefficients(poles), excitation)
    # slow amplitude envelope, so the VAD and energy features have something to track
    env = 0.6 + 0.4 * np.sin(2.0 * np.pi * rng.uniform(1.0, 4.0) * np.arange(n_samples) / SAMPLE_RATE) ** 2
    y *= env
    return 0.5 * y / np.max(np.abs(y))


def gen_synth_speakers(out_dir, n_speakers: int, n_sentences: int, seed: int = 0,
                       n_test: int = 0, cfg: FrameConfig = FrameConfig()) -> Path:
    """Write ``n_speakers * n_sentences`` WAVs plus ``manifest.csv`` into ``out_dir``.

    The last ``n_test`` sentences of each speaker are marked ``test``.
    Returns the manifest path.
    """
    if n_speakers < 2:
        raise ValueError("need at least two speakers")
    if not 0 <= n_test < n_sentences:
        raise ValueError("n_test must be smaller than n_sentences")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    profiles = [random_profile(rng) for _ in range(n_speakers)]
    rows = []
    for s, profile in enumerate(profiles):
        for j in range(n_sentences):
            x = synth_sentence(profile, cfg.fixed_length, rng)
            name = f"spk{s:03d}_{j:03d}.wav"
            write_wav(out / name, AudioSignal(x, SAMPLE_RATE))
            rows.append((name, f"spk{s:03d}", "test" if j >= n_sentences - n_test else "train"))
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "speaker_id", "split"])
        writer.writerows(rows)
    return manifest

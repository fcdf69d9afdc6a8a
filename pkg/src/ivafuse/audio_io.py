"""WAV ingestion, silence removal, duration fixing and framing."""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PCM16_SCALE = 32768.0


class AudioError(Exception):
    """Base class for audio ingestion errors."""


class NotWav(AudioError):
    pass


class UnsupportedEncoding(AudioError):
    pass


class TruncatedFile(AudioError):
    pass


class TooShort(AudioError):
    pass


@dataclass(frozen=True)
class AudioSignal:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        samples = np.asarray(self.samples, dtype=np.float64)
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class FrameConfig:
    """Framing parameters, in samples.

    The defaults correspond to 25 ms frames with a 10 ms shift at 16 kHz and
    300 frames per sentence, i.e. a fixed sentence length of 3.015 s.
    """

    frame_len: int = 400
    frame_shift: int = 160
    preemphasis: float = 0.97
    target_frames: int = 300
    vad_energy_ratio: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.frame_shift <= self.frame_len:
            raise ValueError("need 0 < frame_shift <= frame_len")
        if not 0.0 <= self.preemphasis < 1.0:
            raise ValueError("preemphasis must lie in [0, 1)")
        if self.target_frames < 1:
            raise ValueError("target_frames must be >= 1")
        if self.vad_energy_ratio < 0:
            raise ValueError("vad_energy_ratio must be non-negative")

    @property
    def fixed_length(self) -> int:
        """Number of samples spanned by ``target_frames`` frames."""
        return (self.target_frames - 1) * self.frame_shift + self.frame_len


@dataclass(frozen=True)
class FrameMatrix:
    frames: np.ndarray  # (frame_len, target_frames)
    config: FrameConfig = field(default_factory=FrameConfig)

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2:
            raise ValueError("frames must be a 2-D (U, T) array")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)


def load_wav(path) -> AudioSignal:
    """Read a 16-bit PCM mono WAV file, scaling samples to [-1, 1)."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(12)
    if len(head) < 12 or head[:4] != b"RIFF" or head[8:12] != b"WAVE":
        raise NotWav(f"{path}: missing RIFF/WAVE header")

    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            n_frames = wf.getnframes()
            raw = wf.readframes(n_frames)
    except wave.Error as exc:
        # the stdlib reader only accepts WAVE_FORMAT_PCM
        raise UnsupportedEncoding(f"{path}: {exc}") from exc
    except EOFError as exc:
        raise TruncatedFile(f"{path}: {exc}") from exc

    if n_channels != 1:
        raise UnsupportedEncoding(f"{path}: {n_channels} channels, expected mono")
    if width != 2:
        raise UnsupportedEncoding(f"{path}: {8 * width}-bit samples, expected 16-bit")
    if len(raw) != 2 * n_frames:
        raise TruncatedFile(f"{path}: header declares {n_frames} frames, found {len(raw) // 2}")

    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / PCM16_SCALE
    if samples.size == 0:
        raise TruncatedFile(f"{path}: no audio data")
    return AudioSignal(samples, rate)


def write_wav(path, signal: AudioSignal) -> None:
    """Write ``signal`` as 16-bit PCM mono, clipping to the representable range."""
    pcm = np.clip(np.round(np.asarray(signal.samples) * PCM16_SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(signal.sample_rate)
        wf.writeframes(pcm.tobytes())


def frame_energies(samples: np.ndarray, frame_len: int) -> np.ndarray:
    """Mean-square energy of consecutive non-overlapping blocks (last may be partial)."""
    n_blocks = -(-samples.shape[0] // frame_len)
    return np.array([
        np.mean(samples[i * frame_len:(i + 1) * frame_len] ** 2) for i in range(n_blocks)
    ])


def apply_vad(signal: AudioSignal, cfg: FrameConfig) -> AudioSignal:
    """Energy-based silence removal.

    The signal is cut into non-overlapping blocks of ``cfg.frame_len`` samples.
    Blocks whose mean-square energy is below ``cfg.vad_energy_ratio`` times the
    mean block energy are dropped and the survivors concatenated. If nothing
    survives, the input is returned unchanged.
    """
    x = signal.samples
    if x.size == 0:
        raise ValueError("empty signal")
    energies = frame_energies(x, cfg.frame_len)
    keep = energies >= cfg.vad_energy_ratio * energies.mean()
    if not keep.any():
        return signal
    if keep.all():
        return signal
    u = cfg.frame_len
    kept = np.concatenate([x[i * u:(i + 1) * u] for i in np.flatnonzero(keep)])
    return AudioSignal(kept, signal.sample_rate)


def fix_duration(signal: AudioSignal, cfg: FrameConfig, seed: int | None = None) -> AudioSignal:
    """Return exactly ``cfg.fixed_length`` samples.

    Longer signals are cropped at a random offset drawn from
    ``np.random.default_rng(seed)`` (``cfg.seed`` when ``seed`` is None);
    shorter ones are repeated cyclically and truncated.
    """
    x = signal.samples
    if x.size == 0:
        raise ValueError("empty signal")
    target = cfg.fixed_length
    if x.size == target:
        return signal
    if x.size < target:
        return AudioSignal(np.resize(x, target), signal.sample_rate)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    start = int(rng.integers(0, x.size - target + 1))
    return AudioSignal(x[start:start + target], signal.sample_rate)


def hamming(length: int) -> np.ndarray:
    """Symmetric Hamming window, 0.54 - 0.46 cos(2 pi u / (U - 1))."""
    if length == 1:
        return np.ones(1)
    u = np.arange(length)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * u / (length - 1))


def preemphasize(x: np.ndarray, alpha: float) -> np.ndarray:
    """y(u) = x(u) - alpha * x(u - 1), with x(-1) = 0."""
    x = np.asarray(x, dtype=np.float64)
    y = x.copy()
    y[1:] -= alpha * x[:-1]
    return y


def frame_and_window(signal: AudioSignal, cfg: FrameConfig) -> FrameMatrix:
    """Pre-emphasize, slice into ``cfg.target_frames`` overlapping frames and window.

    Returns a ``(frame_len, target_frames)`` matrix; only the first
    ``cfg.fixed_length`` samples are used.
    """
    need = cfg.fixed_length
    if len(signal) < need:
        raise TooShort(f"need {need} samples for {cfg.target_frames} frames, got {len(signal)}")
    y = preemphasize(signal.samples[:need], cfg.preemphasis)
    starts = np.arange(cfg.target_frames) * cfg.frame_shift
    idx = starts[None, :] + np.arange(cfg.frame_len)[:, None]
    frames = y[idx] * hamming(cfg.frame_len)[:, None]
    return FrameMatrix(frames, cfg)

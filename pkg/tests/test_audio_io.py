import struct
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivafuse.audio_io import (
    AudioSignal,
    FrameConfig,
    NotWav,
    TooShort,
    TruncatedFile,
    UnsupportedEncoding,
    apply_vad,
    fix_duration,
    frame_and_window,
    frame_energies,
    hamming,
    load_wav,
    preemphasize,
    write_wav,
)


def _raw_wav(path, data: bytes, channels=1, width=2, rate=16000):
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(channels)
        wf.setsampwidth(width)
        wf.setframerate(rate)
        wf.writeframes(data)


def test_fixed_length_is_3015_ms():
    cfg = FrameConfig()
    assert cfg.fixed_length == 48240
    assert cfg.fixed_length / 16000 == pytest.approx(3.015)


def test_wav_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    x = np.round(rng.uniform(-0.9, 0.9, 1000) * 32768) / 32768
    write_wav(tmp_path / "a.wav", AudioSignal(x, 16000))
    sig = load_wav(tmp_path / "a.wav")
    assert sig.sample_rate == 16000
    np.testing.assert_array_equal(sig.samples, x)


def test_pcm_scaling(tmp_path):
    _raw_wav(tmp_path / "a.wav", struct.pack("<3h", -32768, 0, 16384))
    np.testing.assert_array_equal(load_wav(tmp_path / "a.wav").samples, [-1.0, 0.0, 0.5])


def test_not_wav(tmp_path):
    (tmp_path / "a.wav").write_bytes(b"OggS" + bytes(40))
    with pytest.raises(NotWav):
        load_wav(tmp_path / "a.wav")


@pytest.mark.parametrize("channels,width", [(2, 2), (1, 1), (1, 4)])
def test_unsupported_encoding(tmp_path, channels, width):
    _raw_wav(tmp_path / "a.wav", bytes(channels * width * 10), channels=channels, width=width)
    with pytest.raises(UnsupportedEncoding):
        load_wav(tmp_path / "a.wav")


def test_float_wav_rejected(tmp_path):
    # IEEE float format tag (3) instead of PCM (1)
    data = np.zeros(8, "<f4").tobytes()
    fmt = struct.pack("<HHIIHH", 3, 1, 16000, 64000, 4, 32)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(data)) + data
    (tmp_path / "f.wav").write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
    with pytest.raises(UnsupportedEncoding):
        load_wav(tmp_path / "f.wav")


def test_truncated(tmp_path):
    _raw_wav(tmp_path / "a.wav", bytes(2000))
    raw = (tmp_path / "a.wav").read_bytes()
    (tmp_path / "b.wav").write_bytes(raw[:-501])
    with pytest.raises(TruncatedFile):
        load_wav(tmp_path / "b.wav")


def test_hamming_matches_definition():
    u = 400
    w = hamming(u)
    expected = [0.54 - 0.46 * np.cos(2 * np.pi * i / (u - 1)) for i in range(u)]
    np.testing.assert_allclose(w, expected, rtol=0, atol=1e-15)
    np.testing.assert_allclose(w, np.hamming(u), atol=1e-15)


def test_preemphasis_first_sample_and_recursion():
    x = np.array([1.0, 2.0, 3.0])
    np.testing.assert_allclose(preemphasize(x, 0.97), [1.0, 2.0 - 0.97, 3.0 - 1.94])


def test_frame_and_window_shape_and_content():
    cfg = FrameConfig()
    x = np.random.default_rng(1).standard_normal(cfg.fixed_length)
    fm = frame_and_window(AudioSignal(x, 16000), cfg)
    assert fm.frames.shape == (400, 300)
    y = preemphasize(x, 0.97)
    for t in (0, 1, 150, 299):
        np.testing.assert_allclose(fm.frames[:, t], y[t * 160:t * 160 + 400] * hamming(400))


def test_frame_too_short():
    with pytest.raises(TooShort):
        frame_and_window(AudioSignal(np.zeros(1000), 16000), FrameConfig())


def test_fix_duration_repeats_cyclically():
    cfg = FrameConfig(target_frames=3, frame_len=4, frame_shift=2)  # fixed_length 8
    out = fix_duration(AudioSignal([1.0, 2.0, 3.0], 16000), cfg)
    np.testing.assert_array_equal(out.samples, [1, 2, 3, 1, 2, 3, 1, 2])


def test_fix_duration_crops_deterministically():
    cfg = FrameConfig(target_frames=3, frame_len=4, frame_shift=2)
    sig = AudioSignal(np.arange(100.0), 16000)
    a = fix_duration(sig, cfg, seed=5).samples
    b = fix_duration(sig, cfg, seed=5).samples
    np.testing.assert_array_equal(a, b)
    assert len(a) == 8
    np.testing.assert_array_equal(np.diff(a), 1.0)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 3000), seed=st.integers(0, 2**16))
def test_fix_duration_always_exact_length(n, seed):
    cfg = FrameConfig(target_frames=10, frame_len=100, frame_shift=50)
    x = np.random.default_rng(seed).standard_normal(n)
    out = fix_duration(AudioSignal(x, 8000), cfg, seed=seed)
    assert len(out) == cfg.fixed_length
    # every output sample comes from the input
    assert np.isin(out.samples, x).all()


def test_vad_drops_silent_blocks():
    cfg = FrameConfig()
    rng = np.random.default_rng(2)
    speech = rng.standard_normal(4000)
    x = np.concatenate([np.zeros(800), speech, 1e-4 * rng.standard_normal(1200)])
    out = apply_vad(AudioSignal(x, 16000), cfg)
    np.testing.assert_array_equal(out.samples, speech)


def test_vad_all_silent_returns_input():
    sig = AudioSignal(np.zeros(2000), 16000)
    assert apply_vad(sig, FrameConfig()) is sig


def test_frame_energies_partial_block():
    e = frame_energies(np.array([1.0, 1.0, 2.0]), 2)
    np.testing.assert_allclose(e, [1.0, 4.0])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16), n=st.integers(400, 5000))
def test_vad_output_is_subsequence_of_blocks(seed, n):
    x = np.random.default_rng(seed).standard_normal(n) * np.repeat(
        np.random.default_rng(seed + 1).uniform(0, 1, -(-n // 400)), 400)[:n]
    out = apply_vad(AudioSignal(x, 16000), FrameConfig()).samples
    assert 0 < len(out) <= n
    energies = frame_energies(x, 400)
    keep = energies >= 0.05 * energies.mean()
    expected = np.concatenate([x[i * 400:(i + 1) * 400] for i in np.flatnonzero(keep)]) if keep.any() else x
    np.testing.assert_array_equal(out, expected)


def test_signal_is_read_only():
    sig = AudioSignal(np.zeros(4), 16000)
    with pytest.raises(ValueError):
        sig.samples[0] = 1.0

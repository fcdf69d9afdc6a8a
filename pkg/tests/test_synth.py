import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivafuse import synth
from ivafuse.audio_io import load_wav
from ivafuse.trainer import read_manifest


def amari_by_definition(G):
    """Amari-style index written out element by element."""
    n = len(G)
    total = 0.0
    for i in range(n):
        row_max = max(abs(G[i][j]) for j in range(n))
        total += sum(abs(G[i][j]) / row_max for j in range(n)) - 1
    for j in range(n):
        col_max = max(abs(G[i][j]) for i in range(n))
        total += sum(abs(G[i][j]) / col_max for i in range(n)) - 1
    return total / (2 * n * (n - 1))


def test_isi_matches_definition_oracle():
    rng = np.random.default_rng(0)
    for _ in range(10):
        G = rng.standard_normal((4, 4))
        assert synth.isi_index(G) == pytest.approx(amari_by_definition(G.tolist()), rel=1e-12)


def test_joint_isi_zero_for_exact_inverse():
    rng = np.random.default_rng(1)
    A = rng.standard_normal((2, 4, 4)) + 3 * np.eye(4)
    assert synth.joint_isi(np.linalg.inv(A), A).joint_isi == pytest.approx(0.0, abs=1e-12)


def test_joint_isi_zero_for_common_permutation_and_scaling():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((2, 4, 4)) + 3 * np.eye(4)
    P = np.eye(4)[[2, 0, 3, 1]]
    D = np.diag([2.0, -0.5, 1.5, 3.0])
    W = np.stack([D @ P @ np.linalg.inv(a) for a in A])
    report = synth.joint_isi(W, A)
    assert report.joint_isi == pytest.approx(0.0, abs=1e-12)
    assert all(v == pytest.approx(0.0, abs=1e-12) for v in report.per_dataset)


def test_joint_isi_penalises_different_permutations():
    A = np.stack([np.eye(3)] * 2)
    W = np.stack([np.eye(3), np.eye(3)[[1, 0, 2]]])
    report = synth.joint_isi(W, A)
    assert report.per_dataset == (0.0, 0.0)
    assert report.joint_isi > 0.1


def test_random_demixing_has_large_isi():
    rng = np.random.default_rng(3)
    values = [synth.joint_isi(rng.standard_normal((2, 4, 4)), rng.standard_normal((2, 4, 4))).joint_isi
              for _ in range(20)]
    assert np.median(values) > 0.3
    assert all(0.0 <= v <= 1.0 for v in values)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16), row=st.integers(0, 3), scale=st.floats(0.01, 100))
def test_joint_isi_invariant_to_common_row_scaling(seed, row, scale):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((2, 4, 4))
    A = rng.standard_normal((2, 4, 4))
    W2 = W.copy()
    W2[:, row] *= -scale
    assert synth.joint_isi(W2, A).joint_isi == pytest.approx(synth.joint_isi(W, A).joint_isi, rel=1e-9)


def test_mixture_construction():
    mix = synth.gen_scv_mixture(4, 2, 2000, seed=4)
    np.testing.assert_allclose(mix.X, mix.A @ mix.S, atol=1e-12)
    for a in mix.A:
        assert np.linalg.cond(a) <= synth.MAX_CONDITION * (1 + 1e-9)
    offdiag = mix.psi[:, 0, 1]
    assert np.all(offdiag >= 0.5)


def test_mixture_sample_correlations():
    mix = synth.gen_scv_mixture(5, 2, 2000, seed=5)
    S = mix.S
    for n in range(5):
        assert np.corrcoef(S[0, n], S[1, n])[0, 1] >= 0.4
    for k in range(2):
        for i, j in itertools.combinations(range(5), 2):
            assert abs(np.corrcoef(S[k, i], S[k, j])[0, 1]) <= 0.1


def test_mixture_needs_enough_samples():
    with pytest.raises(ValueError):
        synth.gen_scv_mixture(5, 2, 99, seed=0)


def test_mixture_three_datasets_positive_definite():
    mix = synth.gen_scv_mixture(3, 3, 900, seed=6)
    assert np.all(np.linalg.eigvalsh(mix.psi) > 0)


def test_separation_trial_succeeds():
    row = synth.separation_trial(7, N=4)
    assert row["joint_isi"] < 0.05
    assert row["iters"] == len(row["trace"]) - 1


def test_isi_csv(tmp_path):
    rows = [{"seed": 1, "iters": 3, "final_cost": -1.25, "joint_isi": 0.01}]
    synth.write_isi_csv(tmp_path / "isi.csv", rows)
    assert (tmp_path / "isi.csv").read_text() == "seed,iters,final_cost,joint_isi\n1,3,-1.25,0.01\n"


def test_speakers_roundtrip_and_determinism(tmp_path):
    m1 = synth.gen_synth_speakers(tmp_path / "a", 2, 3, seed=1, n_test=1)
    m2 = synth.gen_synth_speakers(tmp_path / "b", 2, 3, seed=1, n_test=1)
    manifest = read_manifest(m1)
    assert len(manifest.records) == 6
    assert [r.split for r in manifest.records].count("test") == 2
    for r in manifest.records:
        sig = load_wav(r.path)
        assert sig.sample_rate == 16000
        assert len(sig) == 48240
        assert (tmp_path / "b" / r.path.name).read_bytes() == r.path.read_bytes()
    assert m1.read_text() == m2.read_text()


def test_speakers_have_different_spectra(tmp_path):
    m = synth.gen_synth_speakers(tmp_path, 2, 2, seed=2)
    recs = read_manifest(m).records
    spectra = {}
    for r in recs:
        x = load_wav(r.path).samples
        spectra.setdefault(r.speaker_id, []).append(np.abs(np.fft.rfft(x[:32768])) ** 2)
    a, b = (np.log(np.mean(v, axis=0) + 1e-12) for v in spectra.values())
    assert np.linalg.norm(a - b) > 0


def test_ar_coefficients_of_single_pair():
    a = synth.ar_coefficients([(0.9, np.pi / 2)])
    np.testing.assert_allclose(a, [1.0, 0.0, 0.81], atol=1e-15)


def test_speakers_need_two():
    with pytest.raises(ValueError):
        synth.gen_synth_speakers("/nonexistent", 1, 3)

import csv
import filecmp

import numpy as np
import pytest

from ivafuse import formats, nn, synth, trainer
from ivafuse.iva import IvaConfig
from ivafuse.trainer import FeatureMode, RunConfig

TINY_PCNN = dict(n2=3, n3=3, c1=4, c2=4, c3=4, f1=16, f2=16)


@pytest.fixture(scope="module")
def small_store(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    manifest = synth.gen_synth_speakers(root / "wav", 2, 3, seed=0, n_test=1)
    cfg = RunConfig(iva=IvaConfig(max_iters=10))
    store = trainer.prepare_dataset(trainer.read_manifest(manifest), cfg, root / "cache", workers=1)
    return root, manifest, cfg, store


def test_cache_layout(small_store):
    root, _, _, store = small_store
    cache = root / "cache"
    assert len(store.ids) == 6
    for sid in store.ids:
        for ext in ("x", "y", "w"):
            assert (cache / f"{sid}.{ext}.bin").exists()
    assert store.X.shape == (6, 2, 39, 300)
    assert store.W.shape == (6, 2, 39, 39)
    assert list(store.splits).count("test") == 2


def test_cached_y_is_w_times_x(small_store):
    _, _, _, store = small_store
    for X, W, Y in zip(store.X, store.W, store.Y):
        np.testing.assert_allclose(W @ X, Y, rtol=1e-5, atol=1e-5 * np.abs(Y).max())


def test_demixing_rows_unit_norm(small_store):
    _, _, _, store = small_store
    np.testing.assert_allclose(np.linalg.norm(store.W, axis=3), 1.0, atol=1e-5)


def test_prepare_is_deterministic(small_store, tmp_path):
    root, manifest, cfg, store = small_store
    trainer.prepare_dataset(trainer.read_manifest(manifest), cfg, tmp_path / "again", workers=1)
    names = sorted(p.name for p in (root / "cache").iterdir())
    match, mismatch, errors = filecmp.cmpfiles(root / "cache", tmp_path / "again", names, shallow=False)
    assert not mismatch and not errors


def test_prepare_worker_count_does_not_change_results(small_store, tmp_path):
    root, manifest, cfg, store = small_store
    trainer.prepare_dataset(trainer.read_manifest(manifest), cfg, tmp_path / "par", workers=2)
    for sid in store.ids:
        assert (root / "cache" / f"{sid}.y.bin").read_bytes() == (tmp_path / "par" / f"{sid}.y.bin").read_bytes()


def test_too_many_failures_abort(small_store, tmp_path):
    root, manifest, cfg, _ = small_store
    rows = list(csv.DictReader(open(manifest)))
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"not audio")
    rows[0]["path"] = str(bad)
    path = tmp_path / "m.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, ["path", "speaker_id", "split"])
        w.writeheader()
        for r in rows:
            r["path"] = r["path"] if r["path"].startswith("/") else str(root / "wav" / r["path"])
            w.writerow(r)
    with pytest.raises(trainer.DatasetError):
        trainer.prepare_dataset(trainer.read_manifest(path), cfg, tmp_path / "c", workers=1)


def _write_manifest(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "speaker_id", "split"])
        w.writerows(rows)
    return path


def test_manifest_rejects_overlap(tmp_path):
    path = _write_manifest(tmp_path / "m.csv", [("a.wav", "s1", "train"), ("a.wav", "s1", "test")])
    with pytest.raises(trainer.ManifestError):
        trainer.read_manifest(path)


def test_manifest_rejects_unknown_test_speaker(tmp_path):
    path = _write_manifest(tmp_path / "m.csv", [("a.wav", "s1", "train"), ("b.wav", "s2", "test")])
    with pytest.raises(trainer.ManifestError):
        trainer.read_manifest(path)


def test_manifest_labels_contiguous(tmp_path):
    path = _write_manifest(tmp_path / "m.csv", [("a.wav", "zed", "train"), ("b.wav", "amy", "train"),
                                                ("c.wav", "zed", "test")])
    m = trainer.read_manifest(path)
    assert m.speakers == ["amy", "zed"]
    assert [m.label(r.speaker_id) for r in m.records] == [1, 0, 1]


def test_manifest_without_split_column(tmp_path):
    (tmp_path / "m.csv").write_text("path,speaker_id\na.wav,s1\n")
    assert trainer.read_manifest(tmp_path / "m.csv").records[0].split == "train"


@pytest.mark.parametrize("mode,variant,ok", [
    ("Y_pair", "pcnn-i", True), ("Y_pair", "pcnn-c", True), ("Y_pair", "ncnn", False),
    ("X_tensor", "ncnn", True), ("Y_tensor", "ncnn", True), ("X1", "ncnn", True),
    ("X_tensor", "pcnn-i", False), ("X2", "pcnn-c", False),
])
def test_mode_variant_compatibility(mode, variant, ok):
    if ok:
        RunConfig(variant=variant, feature_mode=mode)
    else:
        with pytest.raises(ValueError):
            RunConfig(variant=variant, feature_mode=mode)


def test_config_flat_roundtrip():
    cfg = RunConfig(variant="ncnn", feature_mode="X1", net={"c1": 8}, epochs=3)
    flat = {k: str(v) for k, v in cfg.flat().items()}
    assert RunConfig.from_flat(flat) == cfg


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown"):
        RunConfig.from_flat({"iva.bogus": "1"})


def test_config_file(tmp_path):
    (tmp_path / "c.cfg").write_text("# comment\nepochs = 4\niva.max_iters=7\nshared_demixing=true\n")
    cfg = RunConfig.from_flat(trainer.read_config_file(tmp_path / "c.cfg"))
    assert cfg.epochs == 4 and cfg.iva.max_iters == 7 and cfg.shared_demixing is True


def test_acc_formula():
    assert trainer.acc_percent([1] * 18 + [0] * 2, [1] * 20) == 90.0
    assert trainer.acc_percent([2, 0, 1], [2, 0, 1]) == 100.0


def test_acc_matches_hand_tally():
    pred = [0, 1, 2, 2, 1, 0, 0, 2, 1, 1]
    true = [0, 1, 2, 1, 1, 0, 2, 2, 0, 1]
    confusion = np.zeros((3, 3), int)
    for p, t in zip(pred, true):
        confusion[t, p] += 1
    assert trainer.acc_percent(pred, true) == 100.0 * np.trace(confusion) / 10


def test_epoch_batches_cover_each_index_once():
    rng = np.random.default_rng(0)
    for n, b in [(10, 3), (9, 4), (7, 7), (13, 4)]:
        batches = trainer.epoch_batches(n, b, rng)
        flat = np.concatenate(batches)
        assert sorted(flat) == list(range(n))
        assert all(len(x) >= 2 for x in batches)


def test_train_deterministic_and_initial_loss(small_store, tmp_path):
    _, _, _, store = small_store
    cfg = RunConfig(net=TINY_PCNN, epochs=2, batch_size=2, seed=3)
    a = trainer.train(store, cfg, metrics_path=tmp_path / "a.csv")
    b = trainer.train(store, cfg, metrics_path=tmp_path / "b.csv")
    assert a.step_losses == b.step_losses
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert abs(a.step_losses[0] - np.log(2)) < 0.2 * np.log(2)
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == "epoch,step,loss,train_acc,eval_acc"


def test_non_finite_loss_aborts(small_store):
    _, _, _, store = small_store
    broken = trainer.FeatureStore(**{**store.__dict__, "Y": store.Y.copy()})
    broken.Y[0, 0, 0, 0] = np.nan
    with pytest.raises(trainer.NonFiniteLoss):
        trainer.train(broken, RunConfig(net=TINY_PCNN, epochs=1, batch_size=4))


def test_checkpoint_roundtrip(small_store, tmp_path):
    _, _, _, store = small_store
    cfg = RunConfig(variant="ncnn", feature_mode="X_tensor", net={"c1": 4, "f1": 8, "f2": 8}, epochs=1,
                    batch_size=4)
    result = trainer.train(store, cfg)
    trainer.save_checkpoint(tmp_path / "m.bin", result.state, cfg)
    state, meta = trainer.load_checkpoint(tmp_path / "m.bin")
    assert meta["feature_mode"] == "X_tensor"
    assert trainer.evaluate_acc(state, store, FeatureMode.X_TENSOR) == \
        trainer.evaluate_acc(result.state, store, FeatureMode.X_TENSOR)


def test_train_reaches_full_train_accuracy(tmp_path):
    manifest = synth.gen_synth_speakers(tmp_path / "wav", 4, 6, seed=11)
    cfg = RunConfig(iva=IvaConfig(max_iters=5), variant="ncnn", feature_mode="X_tensor",
                    net={"c1": 16, "f1": 32, "f2": 32}, epochs=20, batch_size=4)
    store = trainer.prepare_dataset(trainer.read_manifest(manifest), cfg, tmp_path / "cache", workers=1)
    result = trainer.train(store, cfg)
    assert max(r["train_acc"] for r in result.metrics) == 100.0


def test_shared_demixing_uses_one_tensor_per_speaker(tmp_path):
    manifest = synth.gen_synth_speakers(tmp_path / "wav", 2, 2, seed=5)
    cfg = RunConfig(iva=IvaConfig(max_iters=3), shared_demixing=True)
    store = trainer.prepare_dataset(trainer.read_manifest(manifest), cfg, tmp_path / "cache", workers=1)
    for label in range(2):
        W = store.W[store.labels == label]
        np.testing.assert_array_equal(W[0], W[1])


def test_input_normaliser_uses_training_split(small_store):
    _, _, _, store = small_store
    spec = nn.pcnn_i(2, **TINY_PCNN)
    state = nn.init_state(spec)
    x, _ = store.inputs(FeatureMode.Y_PAIR, "train")
    trainer.fit_normaliser(state, x)
    np.testing.assert_allclose(state.buffers["input.mean"], x.mean(axis=(0, 3)))


def test_index_csv(small_store):
    root, _, _, store = small_store
    rows = list(csv.DictReader(open(root / "cache" / "index.csv")))
    assert [r["sentence_id"] for r in rows] == store.ids
    assert {r["speaker_id"] for r in rows} == {"spk000", "spk001"}
    assert formats.read_tensor(root / "cache" / f"{store.ids[0]}.x.bin").shape == (2, 39, 300)

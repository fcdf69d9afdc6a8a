"""Manifest-driven pipeline: feature extraction, per-sentence IVA, training and ACC."""

from __future__ import annotations

import csv
import enum
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import formats, nn
from .audio_io import FrameConfig, apply_vad, fix_duration, frame_and_window, load_wav
from .features import FeatureKind, FeatureTensor, build_tensor, lpc_features, mfcc_features, whiten
from .iva import IvaConfig, run_iva

logger = logging.getLogger(__name__)

MAX_FAILURE_RATE = 0.01
INDEX_NAME = "index.csv"


class ManifestError(ValueError):
    pass


class DatasetError(RuntimeError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


class FeatureMode(str, enum.Enum):
    Y_PAIR = "Y_pair"
    Y_TENSOR = "Y_tensor"
    X_TENSOR = "X_tensor"
    X1 = "X1"
    X2 = "X2"


# --- manifest ---------------------------------------------------------------


@dataclass(frozen=True)
class Record:
    path: Path
    speaker_id: str
    split: str = "train"


@dataclass
class Manifest:
    records: list[Record]

    def __post_init__(self):
        train_spk = {r.speaker_id for r in self.records if r.split == "train"}
        bad = sorted({r.speaker_id for r in self.records if r.split == "test"} - train_spk)
        if bad:
            raise ManifestError(f"test speakers missing from the training split: {bad}")
        seen: dict[Path, str] = {}
        for r in self.records:
            if r.split not in ("train", "test"):
                raise ManifestError(f"{r.path}: unknown split {r.split!r}")
            other = seen.setdefault(r.path.resolve(), r.split)
            if other != r.split:
                raise ManifestError(f"{r.path} appears in both train and test")

    @property
    def speakers(self) -> list[str]:
        """Sorted training speakers; the position is the class index."""
        return sorted({r.speaker_id for r in self.records if r.split == "train"})

    def label(self, speaker_id: str) -> int:
        return self.speakers.index(speaker_id)


def read_manifest(path) -> Manifest:
    """CSV with header ``path,speaker_id[,split]``; relative paths resolve
    against the manifest's directory and a missing split means ``train``."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"path", "speaker_id"} <= set(reader.fieldnames):
            raise ManifestError(f"{path}: header must contain path,speaker_id")
        records = []
        for row in reader:
            p = Path(row["path"])
            if not p.is_absolute():
                p = path.parent / p
            records.append(Record(p, row["speaker_id"], (row.get("split") or "train").strip()))
    if not records:
        raise ManifestError(f"{path}: no records")
    return Manifest(records)


# --- configuration ------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    frame: FrameConfig = field(default_factory=FrameConfig)
    iva: IvaConfig = field(default_factory=IvaConfig)
    variant: str = "pcnn-i"
    feature_mode: FeatureMode = FeatureMode.Y_PAIR
    net: dict = field(default_factory=dict)
    lpc_order: int = 13
    n_mels: int = 39
    n_ceps: int = 13
    batch_size: int = 32
    epochs: int = 20
    lr: float = 1e-3
    seed: int = 0
    shared_demixing: bool = False

    def __post_init__(self):
        object.__setattr__(self, "feature_mode", FeatureMode(self.feature_mode))
        object.__setattr__(self, "variant", nn.Variant(self.variant).value)
        check_mode(self.variant, self.feature_mode)
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def flat(self) -> dict[str, object]:
        """Flat ``key -> value`` view, the format of config files."""
        out: dict[str, object] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in ("frame", "iva"):
                out.update({f"{f.name}.{k}": v for k, v in asdict(value).items()})
            elif f.name == "net":
                out.update({f"net.{k}": v for k, v in sorted(value.items())})
            elif isinstance(value, enum.Enum):
                out[f.name] = value.value
            else:
                out[f.name] = value
        return out

    @classmethod
    def from_flat(cls, values: dict[str, str], base: "RunConfig | None" = None) -> "RunConfig":
        """Build a config from string ``key -> value`` pairs (see :meth:`flat`).

        Keys not present in the defaults are rejected, except ``net.<field>``
        for the integer network hyperparameters.
        """
        base = base or cls()
        known = base.flat()
        net_keys = {f"net.{k}" for k in NET_KEYS}
        unknown = sorted(set(values) - set(known) - net_keys)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        sections: dict[str, dict] = {"frame": asdict(base.frame), "iva": asdict(base.iva), "net": dict(base.net)}
        top: dict[str, object] = {}
        for key, raw in values.items():
            default = known.get(key, 0)
            value = _parse_value(key, raw, default)
            head, _, tail = key.partition(".")
            if tail:
                sections[head][tail] = value
            else:
                top[key] = value
        return replace(base, frame=FrameConfig(**sections["frame"]), iva=IvaConfig(**sections["iva"]),
                       net=sections["net"], **top)


NET_KEYS = ("n1", "n2", "n3", "c1", "c2", "c3", "dilation", "f1", "f2")


def _parse_value(key: str, raw, default):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ValueError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def read_config_file(path) -> dict[str, str]:
    """Flat ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"{path}:{lineno}: expected key=value")
        values[key.strip()] = value.strip()
    return values


def check_mode(variant: str, mode: FeatureMode) -> None:
    variant = nn.Variant(variant)
    mode = FeatureMode(mode)
    pcnn = variant in (nn.Variant.PCNN_I, nn.Variant.PCNN_C)
    if (mode is FeatureMode.Y_PAIR) != pcnn:
        raise ValueError(f"feature mode {mode.value} is incompatible with {variant.value}")


def mode_inputs(mode: FeatureMode) -> tuple[str, slice]:
    """Which cached tensor feeds the network, and which slabs of it."""
    return {
        FeatureMode.Y_PAIR: ("Y", slice(0, 2)),
        FeatureMode.Y_TENSOR: ("Y", slice(0, 2)),
        FeatureMode.X_TENSOR: ("X", slice(0, 2)),
        FeatureMode.X1: ("X", slice(0, 1)),
        FeatureMode.X2: ("X", slice(1, 2)),
    }[FeatureMode(mode)]


def build_spec(cfg: RunConfig, n_classes: int, n_features: int, n_frames: int) -> nn.NetworkSpec:
    _, slabs = mode_inputs(cfg.feature_mode)
    n_inputs = slabs.stop - slabs.start
    variant = nn.Variant(cfg.variant)
    kw = dict(cfg.net)
    kw.update(n_features=n_features, n_frames=n_frames, n_inputs=n_inputs)
    if variant is nn.Variant.NCNN:
        n = kw.pop("n1", 3)
        return nn.ncnn(n_classes, n=n, **kw)
    return nn.NetworkSpec(variant, n_classes, **kw)


# --- per-sentence processing -------------------------------------------------


def sentence_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence([base, index]).generate_state(1)[0])


def extract_features(path, cfg: RunConfig, seed: int) -> np.ndarray:
    """Audio file -> raw ``(2, N, T)`` LPC/MFCC feature tensor."""
    signal = load_wav(path)
    signal = apply_vad(signal, cfg.frame)
    signal = fix_duration(signal, cfg.frame, seed=seed)
    frames = frame_and_window(signal, cfg.frame)
    lpc = lpc_features(frames, cfg.lpc_order)
    mfcc = mfcc_features(frames, cfg.n_mels, cfg.n_ceps, sample_rate=signal.sample_rate)
    return build_tensor([lpc, mfcc]).data


def fit_demixing(X: np.ndarray, iva_cfg: IvaConfig, seed: int) -> np.ndarray:
    """Whiten, run IVA, and fold the whitening into the demixing tensor.

    The returned tensor acts on raw (uncentred) features, so the cached IFCs
    are exactly ``W[k] @ X[k]`` and keep the sentence's mean offsets. Its rows
    are rescaled to unit length in the raw feature space; the cost does not
    depend on row scale, and without this every IFC would have unit variance
    and the sentence's second-order statistics would be lost.
    """
    white, transform = whiten(FeatureTensor.from_array(X, [FeatureKind.LPC, FeatureKind.MFCC][:len(X)]))
    res = run_iva(white.data, replace(iva_cfg, seed=seed))
    W = res.W @ transform.matrices
    return W / np.linalg.norm(W, axis=2, keepdims=True)


def demix_stored(W: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Apply the f32-rounded demixing tensor to f32-rounded features in f64."""
    W32 = W.astype(np.float32).astype(np.float64)
    X32 = X.astype(np.float32).astype(np.float64)
    return W32 @ X32


def _process(args):
    path, cfg, seed, with_iva = args
    try:
        X = extract_features(path, cfg, seed)
        W = fit_demixing(X, cfg.iva, seed) if with_iva else None
        return X, W, None
    except Exception as exc:  # collected and reported per file
        return None, None, f"{type(exc).__name__}: {exc}"


def worker_count() -> int:
    env = os.environ.get("IVAFUSE_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(cap, os.cpu_count() or 1))


def prepare_dataset(manifest: Manifest, cfg: RunConfig, cache_dir, workers: int | None = None) -> "FeatureStore":
    """Extract features and per-sentence demixing tensors for every record.

    Writes ``<id>.x.bin`` / ``<id>.y.bin`` (IVFT) and ``<id>.w.bin`` (IVFW)
    for each sentence plus ``index.csv``. Results depend only on the manifest
    and ``cfg``, not on the worker count.
    """
    cache = Path(cache_dir)
    cache.mkdir(parents=True, exist_ok=True)
    workers = worker_count() if workers is None else workers
    jobs = [(r.path, cfg, sentence_seed(cfg.seed, i), not cfg.shared_demixing)
            for i, r in enumerate(manifest.records)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_process, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_process(j) for j in jobs]

    failures = [(r.path, err) for r, (_, _, err) in zip(manifest.records, results) if err]
    for p, err in failures:
        logger.warning("failed to process %s: %s", p, err)
    if len(failures) > MAX_FAILURE_RATE * len(jobs):
        raise DatasetError(f"{len(failures)} of {len(jobs)} files failed; first: {failures[0][0]}: {failures[0][1]}")

    if cfg.shared_demixing:
        results = _shared_demixing(manifest, results, cfg)

    rows = []
    for i, (rec, (X, W, err)) in enumerate(zip(manifest.records, results)):
        if err:
            continue
        sid = f"{i:06d}_{rec.path.stem}"
        formats.write_tensor(cache / f"{sid}.x.bin", X)
        formats.write_demixing(cache / f"{sid}.w.bin", W)
        formats.write_tensor(cache / f"{sid}.y.bin", demix_stored(W, X))
        rows.append((sid, rec.speaker_id, manifest.label(rec.speaker_id), rec.split, str(rec.path)))
    with open(cache / INDEX_NAME, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sentence_id", "speaker_id", "label", "split", "path"])
        writer.writerows(rows)
    return FeatureStore.load(cache)


def _shared_demixing(manifest: Manifest, results, cfg: RunConfig):
    """One demixing tensor per speaker, fitted on that speaker's training
    sentences and applied to all of the speaker's sentences.

    Experimental: applying it to test sentences uses their speaker label.
    """
    logger.warning("shared demixing uses test-sentence speaker labels; results are not a fair ACC")
    by_speaker: dict[str, list[int]] = {}
    for i, r in enumerate(manifest.records):
        if results[i][2] is None and r.split == "train":
            by_speaker.setdefault(r.speaker_id, []).append(i)
    shared = {}
    for s, spk in enumerate(sorted(by_speaker)):
        X = np.concatenate([results[i][0] for i in by_speaker[spk]], axis=2)
        shared[spk] = fit_demixing(X, cfg.iva, sentence_seed(cfg.seed, 1_000_000 + s))
    return [(X, shared[r.speaker_id], err) if err is None else (X, W, err)
            for r, (X, W, err) in zip(manifest.records, results)]


@dataclass
class FeatureStore:
    ids: list[str]
    speakers: list[str]
    labels: np.ndarray
    splits: np.ndarray
    X: np.ndarray  # (S, K, N, T)
    Y: np.ndarray
    W: np.ndarray  # (S, K, N, N)

    @classmethod
    def load(cls, cache_dir) -> "FeatureStore":
        cache = Path(cache_dir)
        with open(cache / INDEX_NAME, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise DatasetError(f"{cache}: empty index")
        ids = [r["sentence_id"] for r in rows]
        labels = np.array([int(r["label"]) for r in rows])
        speakers = [""] * (labels.max() + 1)
        for r in rows:
            speakers[int(r["label"])] = r["speaker_id"]
        return cls(
            ids=ids,
            speakers=speakers,
            labels=labels,
            splits=np.array([r["split"] for r in rows]),
            X=np.stack([formats.read_tensor(cache / f"{i}.x.bin") for i in ids]),
            Y=np.stack([formats.read_tensor(cache / f"{i}.y.bin") for i in ids]),
            W=np.stack([formats.read_demixing(cache / f"{i}.w.bin") for i in ids]),
        )

    @property
    def n_classes(self) -> int:
        return len(self.speakers)

    def inputs(self, mode: FeatureMode, split: str | None = None) -> tuple[np.ndarray, np.ndarray]:
        source, slabs = mode_inputs(mode)
        data = (self.Y if source == "Y" else self.X)[:, slabs]
        mask = np.ones(len(self.ids), bool) if split is None else self.splits == split
        return data[mask], self.labels[mask]


# --- training -----------------------------------------------------------------


@dataclass
class TrainResult:
    state: nn.NetworkState
    metrics: list[dict]
    step_losses: list[float]


def acc_percent(predicted, labels) -> float:
    """Correctly classified samples over all samples, in percent."""
    predicted = np.asarray(predicted)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("no samples to score")
    return 100.0 * float(np.sum(predicted == labels)) / labels.size


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled mini-batches covering every index exactly once.

    A trailing singleton is merged into the previous batch (batch norm needs
    at least two samples).
    """
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def fit_normaliser(state: nn.NetworkState, inputs: np.ndarray) -> None:
    """Per (feature type, dimension) standardisation fitted on training inputs."""
    mean = inputs.mean(axis=(0, 3))
    std = inputs.std(axis=(0, 3))
    state.buffers["input.mean"] = mean.astype(state.buffers["input.mean"].dtype)
    state.buffers["input.std"] = np.maximum(std, 1e-8).astype(state.buffers["input.std"].dtype)


def train(store: FeatureStore, cfg: RunConfig, metrics_path=None, dtype=np.float32) -> TrainResult:
    """Mini-batch Adam on the cross-entropy loss.

    One metrics row per epoch: mean batch loss, train ACC and (when the store
    has a test split) test ACC, both in eval mode. The returned state is the
    epoch with the best train ACC, ties going to the lower loss.
    """
    x_train, y_train = store.inputs(cfg.feature_mode, "train")
    x_test, y_test = store.inputs(cfg.feature_mode, "test")
    if store.n_classes < 2:
        raise DatasetError("need at least two speakers")
    _, _, n_features, n_frames = x_train.shape
    spec = build_spec(cfg, store.n_classes, n_features, n_frames)
    state = nn.init_state(spec, seed=cfg.seed, dtype=dtype)
    fit_normaliser(state, x_train)
    x_train = x_train.astype(dtype)
    x_test = x_test.astype(dtype)

    rng = np.random.default_rng(cfg.seed)
    metrics, step_losses = [], []
    best, best_key = None, None
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for idx in epoch_batches(len(y_train), cfg.batch_size, rng):
            loss, grads = nn.loss_and_backward(state, x_train[idx], y_train[idx])
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"loss {loss} at epoch {epoch}, step {step}; batch {idx.tolist()}")
            nn.adam_step(state, grads, cfg.lr)
            losses.append(loss)
            step += 1
        step_losses.extend(losses)
        row = {
            "epoch": epoch,
            "step": step,
            "loss": float(np.mean(losses)),
            "train_acc": acc_percent(nn.predict(state, x_train), y_train),
            "eval_acc": acc_percent(nn.predict(state, x_test), y_test) if len(y_test) else None,
        }
        metrics.append(row)
        logger.info("epoch %d loss %.4f train %.2f%% eval %s", epoch, row["loss"], row["train_acc"], row["eval_acc"])
        key = (row["train_acc"], -row["loss"])
        if best_key is None or key > best_key:
            best, best_key = state.copy(), key
    if metrics_path is not None:
        write_metrics(metrics_path, metrics)
    return TrainResult(best, metrics, step_losses)


def write_metrics(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "step", "loss", "train_acc", "eval_acc"])
        for r in rows:
            writer.writerow([r["epoch"], r["step"], repr(r["loss"]), repr(r["train_acc"]),
                             "" if r["eval_acc"] is None else repr(r["eval_acc"])])


def evaluate_acc(state: nn.NetworkState, store: FeatureStore, mode: FeatureMode, split: str = "test") -> float:
    x, y = store.inputs(mode, split)
    return acc_percent(nn.predict(state, x.astype(state.params["out.w"].dtype)), y)


def save_checkpoint(path, state: nn.NetworkState, cfg: RunConfig | None = None) -> None:
    meta = {"spec": state.spec.to_dict()}
    if cfg is not None:
        meta["feature_mode"] = cfg.feature_mode.value
    formats.write_network(path, meta, nn.state_tensors(state))


def load_checkpoint(path, dtype=np.float32) -> tuple[nn.NetworkState, dict]:
    meta, tensors = formats.read_network(path)
    spec = nn.NetworkSpec.from_dict(meta["spec"])
    return nn.state_from_tensors(spec, tensors, dtype=dtype), meta


# --- feature-mode comparison ----------------------------------------------------

ORDERING_MODES = (
    (FeatureMode.Y_PAIR, "pcnn-i"),
    (FeatureMode.X_TENSOR, "ncnn"),
    (FeatureMode.X1, "ncnn"),
    (FeatureMode.X2, "ncnn"),
)


def compare_feature_modes(store: FeatureStore, base: RunConfig, seeds, nets: dict[str, dict],
                          out_dir=None, modes=ORDERING_MODES) -> dict[str, list[float]]:
    """Train one model per (feature mode, seed) and collect test ACCs.

    ``nets`` maps a variant name to its hyperparameter overrides. With
    ``out_dir`` set, per-run metrics go to ``<mode>_seed<s>.csv`` and the
    test ACCs to ``summary.csv``.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    accs: dict[str, list[float]] = {}
    rows = []
    for mode, variant in modes:
        for seed in seeds:
            cfg = replace(base, variant=variant, feature_mode=mode, net=dict(nets.get(variant, {})), seed=seed)
            metrics = out / f"{FeatureMode(mode).value}_seed{seed}.csv" if out is not None else None
            result = train(store, cfg, metrics_path=metrics)
            acc = evaluate_acc(result.state, store, cfg.feature_mode)
            accs.setdefault(cfg.feature_mode.value, []).append(acc)
            rows.append((cfg.feature_mode.value, variant, seed, repr(acc)))
    if out is not None:
        with open(out / "summary.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["feature_mode", "variant", "seed", "test_acc"])
            writer.writerows(rows)
    return accs

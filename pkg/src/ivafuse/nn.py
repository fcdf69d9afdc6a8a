"""NumPy CNN toolkit with hand-written backpropagation.

Feature maps are ``(B, H, T, C)``: batch, feature height, frames, channels.
All kernels are one frame wide, so convolution runs along the feature axis
only and the frame axis is never reduced until statistics pooling.

Three architectures are provided:

* ``pcnn-i``: two conv layers per input branch, channel-wise integration of the
  branches, a dilated third conv layer, statistics pooling, two FC layers.
* ``pcnn-c``: two conv layers per branch, per-branch statistics pooling,
  concatenation of the pooled vectors, two FC layers.
* ``ncnn``: a single conv layer over all K inputs stacked as channels,
  statistics pooling over height and frames, two FC layers.

Every conv and FC layer is followed by SELU and then batch normalisation.
"""

from __future__ import annotations

import copy
import enum
from dataclasses import asdict, dataclass, field

import numpy as np

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
OUTPUT_INIT_SCALE = 0.1


class KernelTooLarge(ValueError):
    pass


class ShapeError(ValueError):
    pass


class Variant(str, enum.Enum):
    PCNN_I = "pcnn-i"
    PCNN_C = "pcnn-c"
    NCNN = "ncnn"


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture hyper-parameters.

    For ``ncnn`` only ``n1`` (kernel height), ``c1`` (channels), ``f1`` and
    ``f2`` are used; ``n_inputs`` is the number of stacked feature types K.
    """

    variant: Variant
    n_classes: int
    n_features: int = 39
    n_frames: int = 300
    n_inputs: int = 2
    n1: int = 3
    n2: int = 5
    n3: int = 7
    c1: int = 32
    c2: int = 32
    c3: int = 64
    dilation: int = 3
    f1: int = 512
    f2: int = 512

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        self.validate()

    def validate(self) -> None:
        if self.n_classes < 1:
            raise ShapeError("n_classes must be >= 1")
        for name in ("n_features", "n_frames", "n_inputs", "n1", "n2", "n3", "c1", "c2", "c3",
                     "dilation", "f1", "f2"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be >= 1")
        N = self.n_features
        if self.variant is Variant.NCNN:
            checks = [("conv output height N - n + 1", N - self.n1 + 1)]
        else:
            checks = [
                ("conv1 output height N - n1 + 1", N - self.n1 + 1),
                ("conv2 output height N - n1 - n2 + 2", N - self.n1 - self.n2 + 2),
            ]
            if self.variant is Variant.PCNN_I:
                checks.append(("conv3 output height N - n1 - n2 - n3 + 3",
                               N - self.n1 - self.n2 - self.n3 + 3))
        for label, value in checks:
            if value < 1:
                raise ShapeError(f"{self.variant.value}: {label} = {value} < 1 "
                                 f"for N={N}, n1={self.n1}, n2={self.n2}, n3={self.n3}")

    @property
    def conv3_padding(self) -> tuple[int, int]:
        """Zero padding that keeps the dilated conv3 at the undilated output height."""
        total = (self.dilation - 1) * (self.n3 - 1)
        return total // 2, total - total // 2

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        """Per-sample output shape of every layer, keyed by layer name."""
        N, T, K = self.n_features, self.n_frames, self.n_inputs
        if self.variant is Variant.NCNN:
            h = N - self.n1 + 1
            return {
                "input": (N, T, K),
                "conv": (h, T, self.c1),
                "pooling": (2 * self.c1,),
                "fc1": (self.f1,),
                "fc2": (self.f2,),
                "softmax": (self.n_classes,),
            }
        h1 = N - self.n1 + 1
        h2 = h1 - self.n2 + 1
        shapes = {
            "input": (N, T, 1),
            "conv1": (h1, T, self.c1),
            "conv2": (h2, T, self.c2),
        }
        if self.variant is Variant.PCNN_I:
            h3 = h2 - self.n3 + 1
            shapes["integration"] = (h2, T, K * self.c2)
            shapes["conv3"] = (h3, T, self.c3)
            shapes["pooling"] = (2 * self.c3 * h3,)
        else:
            shapes["pooling_branch"] = (2 * self.c2 * h2,)
            shapes["concatenation"] = (K * 2 * self.c2 * h2,)
        shapes["fc1"] = (self.f1,)
        shapes["fc2"] = (self.f2,)
        shapes["softmax"] = (self.n_classes,)
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


def pcnn_i(n_classes: int, n1: int = 3, **kw) -> NetworkSpec:
    return NetworkSpec(Variant.PCNN_I, n_classes, n1=n1, **kw)


def pcnn_c(n_classes: int, n: int = 3, **kw) -> NetworkSpec:
    return NetworkSpec(Variant.PCNN_C, n_classes, n1=n, **kw)


def ncnn(n_classes: int, n: int = 3, n_inputs: int = 2, **kw) -> NetworkSpec:
    kw.setdefault("c1", 64)
    kw.setdefault("f1", 64)
    kw.setdefault("f2", 64)
    return NetworkSpec(Variant.NCNN, n_classes, n1=n, n_inputs=n_inputs, **kw)


# --- parameters and state ---------------------------------------------------


def _conv_layers(spec: NetworkSpec) -> list[tuple[str, int, int, int]]:
    """(name, kernel height, in channels, out channels) of each conv layer."""
    if spec.variant is Variant.NCNN:
        return [("conv", spec.n1, spec.n_inputs, spec.c1)]
    layers = []
    for k in range(spec.n_inputs):
        layers.append((f"conv1_{k}", spec.n1, 1, spec.c1))
        layers.append((f"conv2_{k}", spec.n2, spec.c1, spec.c2))
    if spec.variant is Variant.PCNN_I:
        layers.append(("conv3", spec.n3, spec.n_inputs * spec.c2, spec.c3))
    return layers


def _fc_layers(spec: NetworkSpec) -> list[tuple[str, int, int]]:
    pooled = spec.layer_shapes()
    fan_in = pooled["concatenation" if spec.variant is Variant.PCNN_C else "pooling"][0]
    return [("fc1", fan_in, spec.f1), ("fc2", spec.f1, spec.f2)]


def parameter_shapes(spec: NetworkSpec) -> dict[str, tuple[int, ...]]:
    """Learnable tensors in declaration order."""
    shapes: dict[str, tuple[int, ...]] = {}
    for name, n, cin, cout in _conv_layers(spec):
        shapes[f"{name}.w"] = (n, cin, cout)
        shapes[f"{name}.b"] = (cout,)
        shapes[f"{name}.bn.gamma"] = (cout,)
        shapes[f"{name}.bn.beta"] = (cout,)
    for name, fin, fout in _fc_layers(spec):
        shapes[f"{name}.w"] = (fin, fout)
        shapes[f"{name}.b"] = (fout,)
        shapes[f"{name}.bn.gamma"] = (fout,)
        shapes[f"{name}.bn.beta"] = (fout,)
    shapes["out.w"] = (spec.f2, spec.n_classes)
    shapes["out.b"] = (spec.n_classes,)
    return shapes


def buffer_shapes(spec: NetworkSpec) -> dict[str, tuple[int, ...]]:
    """Non-learnable tensors (BN running statistics, input normaliser)."""
    shapes: dict[str, tuple[int, ...]] = {}
    for name, _, _, cout in _conv_layers(spec):
        shapes[f"{name}.bn.mean"] = (cout,)
        shapes[f"{name}.bn.var"] = (cout,)
    for name, _, fout in _fc_layers(spec):
        shapes[f"{name}.bn.mean"] = (fout,)
        shapes[f"{name}.bn.var"] = (fout,)
    shapes["input.mean"] = (spec.n_inputs, spec.n_features)
    shapes["input.std"] = (spec.n_inputs, spec.n_features)
    return shapes


@dataclass
class NetworkState:
    spec: NetworkSpec
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def copy(self) -> "NetworkState":
        return copy.deepcopy(self)


def init_state(spec: NetworkSpec, seed=0, dtype=np.float64) -> NetworkState:
    """Kernels and weights ~ N(0, 1/fan_in); biases 0; BN scale 1, shift 0.

    The softmax layer is drawn ``OUTPUT_INIT_SCALE`` times smaller so the
    initial predictions are close to uniform.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(spec).items():
        if name.endswith(".bn.gamma"):
            params[name] = np.ones(shape, dtype)
        elif name.endswith(".w"):
            fan_in = int(np.prod(shape[:-1]))
            std = 1.0 / np.sqrt(fan_in)
            if name == "out.w":
                std *= OUTPUT_INIT_SCALE
            params[name] = (rng.standard_normal(shape) * std).astype(dtype)
        else:
            params[name] = np.zeros(shape, dtype)
    buffers = {}
    for name, shape in buffer_shapes(spec).items():
        fill = 1.0 if name.endswith((".var", ".std")) else 0.0
        buffers[name] = np.full(shape, fill, dtype)
    return NetworkState(
        spec=spec,
        params=params,
        buffers=buffers,
        adam_m={k: np.zeros_like(v) for k, v in params.items()},
        adam_v={k: np.zeros_like(v) for k, v in params.items()},
    )


# --- layers -----------------------------------------------------------------


def conv_valid(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None,
               dilation: int = 1, pad: tuple[int, int] = (0, 0)) -> np.ndarray:
    """Correlate ``(B, H, T, Cin)`` maps with ``(n, Cin, Cout)`` kernels along H."""
    return _conv_forward(x, w, b, dilation, pad)[0]


def _conv_forward(x, w, b, dilation, pad):
    if pad != (0, 0):
        x = np.pad(x, ((0, 0), pad, (0, 0), (0, 0)))
    n = w.shape[0]
    h_out = x.shape[1] - (n - 1) * dilation
    if h_out < 1:
        raise KernelTooLarge(f"kernel extent {(n - 1) * dilation + 1} exceeds input height {x.shape[1]}")
    out = x[:, 0:h_out] @ w[0]
    for i in range(1, n):
        s = i * dilation
        out += x[:, s:s + h_out] @ w[i]
    if b is not None:
        out += b
    return out, (x, w, dilation, pad, h_out)


def _conv_backward(dout, cache):
    x, w, dilation, pad, h_out = cache
    n, cin, cout = w.shape
    dw = np.empty_like(w)
    dx = np.zeros_like(x)
    d2 = dout.reshape(-1, cout)
    for i in range(n):
        s = i * dilation
        xs = x[:, s:s + h_out]
        dw[i] = xs.reshape(-1, cin).T @ d2
        dx[:, s:s + h_out] += dout @ w[i].T
    db = d2.sum(axis=0)
    if pad != (0, 0):
        dx = dx[:, pad[0]:dx.shape[1] - pad[1]]
    return dx, dw, db


def selu(x: np.ndarray) -> np.ndarray:
    return SELU_LAMBDA * np.where(x > 0, x, SELU_ALPHA * np.expm1(np.minimum(x, 0.0)))


def selu_grad(x: np.ndarray) -> np.ndarray:
    return SELU_LAMBDA * np.where(x > 0, 1.0, SELU_ALPHA * np.exp(np.minimum(x, 0.0)))


def batch_norm(x: np.ndarray, gamma, beta, running_mean, running_var, mode: str = "train",
               update: bool = True):
    """Normalise over every axis but the last (channels/features).

    In train mode batch statistics are used and, if ``update``, the running
    estimates are moved toward them in place. Returns ``(y, cache)``.
    """
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batch norm in train mode needs a batch of at least 2")
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        if update:
            m = x.size // x.shape[-1]
            running_mean *= 1.0 - BN_MOMENTUM
            running_mean += BN_MOMENTUM * mu
            running_var *= 1.0 - BN_MOMENTUM
            running_var += BN_MOMENTUM * var * m / max(m - 1, 1)
    elif mode == "eval":
        mu, var = running_mean, running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, gamma, axes, mode)


def batch_norm_backward(dy, cache):
    xhat, inv_std, gamma, axes, mode = cache
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma
    if mode == "eval":
        return dxhat * inv_std, dgamma, dbeta
    m = dy.size // dy.shape[-1]
    dx = inv_std / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


def stats_pool(x: np.ndarray, axes: tuple[int, ...] = (2,)):
    """Concatenate the mean and (population) variance over ``axes``.

    The default pools frames of a ``(B, H, T, C)`` map, giving a
    ``(B, 2 * H * C)`` embedding: all means (H-major, C-minor) then all
    variances. Returns ``(embedding, cache)``.
    """
    mean = x.mean(axis=axes, keepdims=True)
    centred = x - mean
    var = (centred ** 2).mean(axis=axes, keepdims=True)
    b = x.shape[0]
    out = np.concatenate([mean.reshape(b, -1), var.reshape(b, -1)], axis=1)
    return out, (centred, axes, mean.shape)


def stats_pool_backward(dout, cache):
    centred, axes, kept_shape = cache
    m = int(np.prod([centred.shape[a] for a in axes]))
    half = dout.shape[1] // 2
    dmean = dout[:, :half].reshape(kept_shape)
    dvar = dout[:, half:].reshape(kept_shape)
    return dmean / m + dvar * 2.0 * centred / m


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(probs: np.ndarray, onehot: np.ndarray) -> float:
    return float(-np.mean(np.sum(onehot * np.log(np.maximum(probs, 1e-300)), axis=1)))


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


# --- network ----------------------------------------------------------------


class _Tape:
    """Forward pass bookkeeping for one batch."""

    def __init__(self, state: NetworkState, mode: str, update_stats: bool):
        self.state = state
        self.mode = mode
        self.update_stats = update_stats
        self.caches: dict[str, tuple] = {}
        self.shapes: dict[str, tuple[int, ...]] = {}

    def record(self, name, x):
        self.shapes[name] = tuple(x.shape[1:])
        return x

    def _bn(self, name, z):
        p, buf = self.state.params, self.state.buffers
        return batch_norm(z, p[f"{name}.bn.gamma"], p[f"{name}.bn.beta"],
                          buf[f"{name}.bn.mean"], buf[f"{name}.bn.var"], self.mode, self.update_stats)

    def conv_block(self, name, x, dilation=1, pad=(0, 0)):
        p = self.state.params
        z, conv_cache = _conv_forward(x, p[f"{name}.w"], p[f"{name}.b"], dilation, pad)
        y, bn_cache = self._bn(name, selu(z))
        self.caches[name] = (conv_cache, z, bn_cache)
        return self.record(name, y)

    def fc_block(self, name, x):
        p = self.state.params
        z = x @ p[f"{name}.w"] + p[f"{name}.b"]
        y, bn_cache = self._bn(name, selu(z))
        self.caches[name] = (x, z, bn_cache)
        return self.record(name, y)

    @staticmethod
    def _post_backward(dy, z, bn_cache):
        dsel, dgamma, dbeta = batch_norm_backward(dy, bn_cache)
        return dsel * selu_grad(z), dgamma, dbeta

    def conv_block_backward(self, name, dy, grads):
        conv_cache, z, bn_cache = self.caches[name]
        dz, grads[f"{name}.bn.gamma"], grads[f"{name}.bn.beta"] = self._post_backward(dy, z, bn_cache)
        dx, grads[f"{name}.w"], grads[f"{name}.b"] = _conv_backward(dz, conv_cache)
        return dx

    def fc_block_backward(self, name, dy, grads):
        x, z, bn_cache = self.caches[name]
        dz, grads[f"{name}.bn.gamma"], grads[f"{name}.bn.beta"] = self._post_backward(dy, z, bn_cache)
        grads[f"{name}.w"] = x.T @ dz
        grads[f"{name}.b"] = dz.sum(axis=0)
        return dz @ self.state.params[f"{name}.w"].T


def _prepare_input(state: NetworkState, inputs: np.ndarray) -> np.ndarray:
    """``(B, K, N, T)`` -> normalised ``(B, N, T, K)``."""
    spec = state.spec
    x = np.asarray(inputs)
    if x.ndim == 3:
        x = x[:, None]
    expected = (spec.n_inputs, spec.n_features)
    if x.ndim != 4 or x.shape[1:3] != expected:
        raise ShapeError(f"input shape {x.shape} does not match (B, {expected[0]}, {expected[1]}, T)")
    dtype = state.params["out.w"].dtype
    mean = state.buffers["input.mean"][None, :, :, None]
    std = state.buffers["input.std"][None, :, :, None]
    return ((x - mean) / std).transpose(0, 2, 3, 1).astype(dtype, copy=False)


def _forward(state: NetworkState, inputs, mode: str, update_stats: bool):
    spec = state.spec
    tape = _Tape(state, mode, update_stats)
    x = _prepare_input(state, inputs)
    if spec.variant is Variant.NCNN:
        h = tape.conv_block("conv", tape.record("input", x))
        e, tape.caches["pool"] = stats_pool(h, axes=(1, 2))
        tape.record("pooling", e)
    else:
        branches = []
        for k in range(spec.n_inputs):
            h = tape.conv_block(f"conv1_{k}", tape.record("input", x[..., k:k + 1]))
            branches.append(tape.conv_block(f"conv2_{k}", h))
        if spec.variant is Variant.PCNN_I:
            fused = tape.record("integration", np.concatenate(branches, axis=-1))
            b = tape.conv_block("conv3", fused, spec.dilation, spec.conv3_padding)
            e, tape.caches["pool"] = stats_pool(b, axes=(2,))
            tape.record("pooling", e)
        else:
            pooled = []
            for k, h in enumerate(branches):
                pk, tape.caches[f"pool_{k}"] = stats_pool(h, axes=(2,))
                pooled.append(tape.record(f"pooling_{k}", pk))
            e = tape.record("concatenation", np.concatenate(pooled, axis=1))
    m = tape.fc_block("fc1", e)
    n = tape.fc_block("fc2", m)
    tape.caches["out"] = n
    logits = tape.record("softmax", n @ state.params["out.w"] + state.params["out.b"])
    return logits, tape


def forward(state: NetworkState, inputs, mode: str = "eval", update_stats: bool = True):
    """Return ``(logits, probabilities)`` for a ``(B, K, N, T)`` batch."""
    logits, _ = _forward(state, inputs, mode, update_stats)
    return logits, softmax(logits)


def trace_shapes(state: NetworkState, inputs) -> dict[str, tuple[int, ...]]:
    """Per-sample output shape of every layer observed in an eval-mode pass."""
    _, tape = _forward(state, inputs, "eval", False)
    return tape.shapes


def loss_and_backward(state: NetworkState, inputs, labels, mode: str = "train",
                      update_stats: bool = True):
    """Cross-entropy loss and gradients for every learnable tensor.

    ``labels`` are class indices or a one-hot ``(B, C)`` matrix.
    """
    spec = state.spec
    logits, tape = _forward(state, inputs, mode, update_stats)
    probs = softmax(logits)
    onehot = np.asarray(labels, dtype=np.float64)
    if onehot.ndim == 1:
        onehot = one_hot(labels, spec.n_classes)
    if not np.all((onehot == 0) | (onehot == 1)) or not np.all(onehot.sum(axis=1) == 1):
        raise ValueError("labels must be one-hot")
    loss = cross_entropy(probs, onehot)
    batch = logits.shape[0]
    grads: dict[str, np.ndarray] = {}

    dlogits = (probs - onehot) / batch
    n = tape.caches["out"]
    grads["out.w"] = n.T @ dlogits
    grads["out.b"] = dlogits.sum(axis=0)
    dn = dlogits @ state.params["out.w"].T
    dm = tape.fc_block_backward("fc2", dn, grads)
    de = tape.fc_block_backward("fc1", dm, grads)

    if spec.variant is Variant.NCNN:
        dh = stats_pool_backward(de, tape.caches["pool"])
        tape.conv_block_backward("conv", dh, grads)
    else:
        if spec.variant is Variant.PCNN_I:
            db = stats_pool_backward(de, tape.caches["pool"])
            dfused = tape.conv_block_backward("conv3", db, grads)
            dbranches = np.split(dfused, spec.n_inputs, axis=-1)
        else:
            dbranches = [stats_pool_backward(d, tape.caches[f"pool_{k}"])
                         for k, d in enumerate(np.split(de, spec.n_inputs, axis=1))]
        for k, dh in enumerate(dbranches):
            dh = tape.conv_block_backward(f"conv2_{k}", dh, grads)
            tape.conv_block_backward(f"conv1_{k}", dh, grads)
    ordered = {name: grads[name] for name in state.params}
    return loss, ordered


def adam_step(state: NetworkState, grads: dict[str, np.ndarray], lr: float = 1e-3) -> NetworkState:
    """In-place Adam update with bias correction; returns ``state``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name, g in grads.items():
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        state.params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return state


def predict(state: NetworkState, inputs, batch_size: int = 64) -> np.ndarray:
    """Arg-max class per sentence in eval mode (ties go to the lowest index)."""
    out = []
    for i in range(0, len(inputs), batch_size):
        _, probs = forward(state, inputs[i:i + batch_size], mode="eval")
        out.append(np.argmax(probs, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def state_tensors(state: NetworkState) -> list[np.ndarray]:
    """Parameters then buffers, each in declaration order."""
    return [state.params[k] for k in parameter_shapes(state.spec)] + \
           [state.buffers[k] for k in buffer_shapes(state.spec)]


def state_from_tensors(spec: NetworkSpec, tensors: list[np.ndarray], dtype=np.float64) -> NetworkState:
    pshapes = parameter_shapes(spec)
    bshapes = buffer_shapes(spec)
    if len(tensors) != len(pshapes) + len(bshapes):
        raise ShapeError(f"expected {len(pshapes) + len(bshapes)} tensors, got {len(tensors)}")
    state = init_state(spec, dtype=dtype)
    for (name, shape), t in zip(list(pshapes.items()) + list(bshapes.items()), tensors):
        if tuple(t.shape) != tuple(shape):
            raise ShapeError(f"{name}: stored shape {t.shape}, expected {shape}")
        target = state.params if name in pshapes else state.buffers
        target[name] = np.asarray(t, dtype=dtype)
    return state

"""From-scratch CNN detector: forward, backprop, BCE loss, Adam, training loop.

The architecture is fixed: two width-preserving 1x9 convolutions along the
time axis (256 then 80 kernels), two dense layers (256 then 2 units, ReLU
everywhere) and a single logistic output unit.  Dropout (rate 0.5, inverted)
follows each convolution and the first dense layer.  Activations are kept
channels-last (batch, 2, N, channels) so convolutions reduce to one GEMM over
an im2col matrix.  Parameters are float32 by default; a float64 build is used
for finite-difference gradient checks.
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import DimensionError, DivergedTrainingError, FormatError, ShapeError
from .signals import Dataset, _atomic_write

PROB_EPS = 1e-7

_W_MAGIC = b"DSNW"
_W_VERSION = 1
_W_HEADER = struct.Struct("<4sIII")

PARAM_ORDER = (
    "conv1.w",
    "conv1.b",
    "conv2.w",
    "conv2.b",
    "dense1.w",
    "dense1.b",
    "dense2.w",
    "dense2.b",
    "head.w",
    "head.b",
)


@dataclass(frozen=True)
class NetworkSpec:
    """Layer dimensions; defaults reproduce the reference architecture at any N."""

    n_samples: int
    conv1_kernels: int = 256
    conv2_kernels: int = 80
    dense1_units: int = 256
    dense2_units: int = 2
    kernel_width: int = 9
    pad: int = 4
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.n_samples < 2:
            raise DimensionError(f"n_samples must be >= 2, got {self.n_samples}")
        if self.kernel_width % 2 == 0 or self.pad != (self.kernel_width - 1) // 2:
            # convolutions must preserve the interval width
            raise DimensionError(
                f"kernel width {self.kernel_width} with pad {self.pad} does not preserve width"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise DimensionError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def flat_features(self) -> int:
        return self.conv2_kernels * 2 * self.n_samples

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "conv1.w": (self.conv1_kernels, 1, self.kernel_width),
            "conv1.b": (self.conv1_kernels,),
            "conv2.w": (self.conv2_kernels, self.conv1_kernels, self.kernel_width),
            "conv2.b": (self.conv2_kernels,),
            "dense1.w": (self.flat_features, self.dense1_units),
            "dense1.b": (self.dense1_units,),
            "dense2.w": (self.dense1_units, self.dense2_units),
            "dense2.b": (self.dense2_units,),
            "head.w": (self.dense2_units, 1),
            "head.b": (1,),
        }


# shrunken build used by finite-difference gradient checks
def shrunken_spec(n_samples: int = 8) -> NetworkSpec:
    return NetworkSpec(n_samples=n_samples, conv1_kernels=4, conv2_kernels=3, dense1_units=8)


class NetworkWeights:
    """All learnable parameters, keyed by layer name in a fixed order."""

    def __init__(self, spec: NetworkSpec, arrays: dict[str, np.ndarray]):
        shapes = spec.param_shapes()
        if set(arrays) != set(shapes):
            missing = sorted(set(shapes) ^ set(arrays))
            raise ShapeError(f"parameter set mismatch: {missing}")
        for name, want in shapes.items():
            got = arrays[name].shape
            if got != want:
                raise ShapeError(f"{name}: expected shape {want}, got {got}")
            if not np.all(np.isfinite(arrays[name])):
                raise ShapeError(f"{name}: non-finite parameter values")
        self.spec = spec
        self.arrays = {name: arrays[name] for name in PARAM_ORDER}

    @property
    def dtype(self):
        return self.arrays["conv1.w"].dtype

    def copy(self) -> "NetworkWeights":
        return NetworkWeights(self.spec, {k: v.copy() for k, v in self.arrays.items()})


def init_weights(spec: NetworkSpec, seed=0, dtype=np.float32) -> NetworkWeights:
    """He-uniform kernels/weights, zero biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".b"):
            arrays[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
        limit = np.sqrt(6.0 / fan_in)
        arrays[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return NetworkWeights(spec, arrays)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    init_scheme: str = "he_uniform"
    freeze_conv: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0 or self.adam_eps <= 0:
            raise DimensionError("rates must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise DimensionError("batch_size must be >= 1 and epochs >= 0")
        if self.init_scheme != "he_uniform":
            raise DimensionError(f"unknown init scheme {self.init_scheme!r}")


class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self, m: dict, v: dict, step: int = 0):
        self.m = m
        self.v = v
        self.step = step

    @classmethod
    def zeros_like(cls, weights: NetworkWeights) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in weights.arrays.items()},
            v={k: np.zeros_like(a) for k, a in weights.arrays.items()},
        )


# examples per im2col+GEMM chunk; keeps the patch matrix L3-resident
_CONV_CHUNK = 16


def _im2col(x: np.ndarray, kw: int, pad: int) -> np.ndarray:
    """(B, 2, N, C) -> (B*2*N, kw*C) patch matrix for a width-kw convolution.

    Feature order is tap-major (k, c): with channels innermost, every output
    row is one contiguous slab of the padded input, so the materialization is
    a single strided copy of large rows.
    """
    b, rows, n, c = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (0, 0)))
    win = sliding_window_view(xp.reshape(b, rows, -1), kw * c, axis=2)[:, :, ::c, :]
    return np.ascontiguousarray(win).reshape(b * rows * n, kw * c)


def _conv_forward(x: np.ndarray, w2d: np.ndarray, bias: np.ndarray, kw: int, pad: int) -> np.ndarray:
    """Width-preserving convolution via chunked im2col GEMMs."""
    b, rows, n, _ = x.shape
    k_out = w2d.shape[1]
    out = np.empty((b, rows, n, k_out), dtype=x.dtype)
    for s in range(0, b, _CONV_CHUNK):
        xs = x[s : s + _CONV_CHUNK]
        cols = _im2col(xs, kw, pad)
        pre = cols @ w2d
        pre += bias
        out[s : s + _CONV_CHUNK] = pre.reshape(xs.shape[0], rows, n, k_out)
    return out


def _conv_backward(x: np.ndarray, dpre: np.ndarray, w: np.ndarray, kw: int, pad: int, need_dx: bool):
    """(dW, db, dX) of the chunked convolution; dX is None unless requested."""
    b, rows, n, c = x.shape
    k_out = w.shape[0]
    dw2d = np.zeros((kw * c, k_out), dtype=x.dtype)
    dx = np.empty_like(x) if need_dx else None
    wflip = _conv_weight_flipped(w) if need_dx else None
    for s in range(0, b, _CONV_CHUNK):
        xs = x[s : s + _CONV_CHUNK]
        ds = dpre[s : s + _CONV_CHUNK]
        ds2d = ds.reshape(-1, k_out)
        cols = _im2col(xs, kw, pad)
        dw2d += cols.T @ ds2d
        if need_dx:
            # input gradient = same-pad correlation with tap-flipped kernels,
            # keeping the GEMM contraction wide (kw*K instead of K)
            dcols = _im2col(ds, kw, pad)
            dx[s : s + _CONV_CHUNK] = (dcols @ wflip).reshape(xs.shape)
    dw = np.ascontiguousarray(dw2d.reshape(kw, c, k_out).transpose(2, 1, 0))
    db = dpre.reshape(-1, k_out).sum(axis=0)
    return dw, db, dx


def _conv_weight_2d(w: np.ndarray) -> np.ndarray:
    """(K, C, kw) kernels -> (kw*C, K) GEMM operand matching _im2col order."""
    return np.ascontiguousarray(w.transpose(2, 1, 0).reshape(-1, w.shape[0]))


def _conv_weight_flipped(w: np.ndarray) -> np.ndarray:
    """(K, C, kw) kernels -> (kw*K, C) operand for the input-gradient pass.

    The gradient w.r.t. the conv input is itself a same-pad correlation of the
    output gradient with the kernels flipped along the tap axis, which keeps
    the GEMM contraction dimension wide (kw*K) instead of K.
    """
    return np.ascontiguousarray(w[:, :, ::-1].transpose(2, 0, 1).reshape(-1, w.shape[1]))


def _dropout_mask(rng, shape, keep: float, dtype) -> np.ndarray:
    # inverted dropout: scaling applied at train time, eval needs none
    draw = rng.random(size=shape, dtype=np.float32 if dtype == np.float32 else np.float64)
    return (draw < keep).astype(dtype) / dtype.type(keep)


def _forward_batch(x, weights: NetworkWeights, mode: str, rng=None, masks=None):
    """Forward pass over a (B, 2, N) batch.

    Returns (probs float64 (B,), cache).  In train mode dropout masks are
    sampled from rng unless a fixed mask triple is supplied (used by the
    finite-difference oracle).
    """
    if mode not in ("train", "eval"):
        raise DimensionError(f"mode must be 'train' or 'eval', got {mode!r}")
    spec = weights.spec
    a = weights.arrays
    dtype = np.dtype(weights.dtype)
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[1] != 2 or x.shape[2] != spec.n_samples:
        raise DimensionError(f"expected input (B, 2, {spec.n_samples}), got {x.shape}")
    bsz = x.shape[0]
    n = spec.n_samples
    kw, pad = spec.kernel_width, spec.pad
    train = mode == "train"
    keep = 1.0 - spec.dropout_rate
    if train and spec.dropout_rate > 0 and masks is None and rng is None:
        raise DimensionError("train-mode forward needs an rng or fixed masks")

    h0 = x.reshape(bsz, 2, n, 1).astype(dtype, copy=False)

    def activate(pre, mask_idx):
        """ReLU + inverted dropout, fused into one float mask m = drop * (pre > 0)."""
        if not train:
            return np.maximum(pre, 0), None, None
        if spec.dropout_rate > 0:
            drop = masks[mask_idx] if masks is not None else _dropout_mask(rng, pre.shape, keep, dtype)
            m = drop * (pre > 0)
        else:
            drop = None
            m = (pre > 0).astype(dtype)
        return pre * m, m, drop

    pre1 = _conv_forward(h0, _conv_weight_2d(a["conv1.w"]), a["conv1.b"], kw, pad)
    h1, m1, drop1 = activate(pre1, 0)

    pre2 = _conv_forward(h1, _conv_weight_2d(a["conv2.w"]), a["conv2.b"], kw, pad)
    h2, m2, drop2 = activate(pre2, 1)

    flat = h2.reshape(bsz, -1)
    pre3 = flat @ a["dense1.w"]
    pre3 += a["dense1.b"]
    h3, m3, drop3 = activate(pre3, 2)

    # dense2 produces the 2-unit logit pair (no ReLU: rectifying logits
    # collapses the whole net to a constant output); the head combines them
    # into one logistic unit
    h4 = h3 @ a["dense2.w"] + a["dense2.b"]

    z = (h4 @ a["head.w"]).ravel() + a["head.b"][0]
    probs = np.clip(expit(z.astype(np.float64)), PROB_EPS, 1.0 - PROB_EPS)

    cache = {
        "weights": weights,
        "bsz": bsz,
        "train": train,
        "h0": h0,
        "m1": m1,
        "h1": h1,
        "m2": m2,
        "flat": flat,
        "m3": m3,
        "h3": h3,
        "h4": h4,
        "probs": probs,
        "masks": (drop1, drop2, drop3),
        "shapes": (h1.shape, h2.shape, h3.shape, h4.shape),
    }
    return probs, cache


def forward(x, weights: NetworkWeights, mode: str = "eval", rng=None, masks=None):
    """Single-interval forward; returns (probability of PU present, cache)."""
    iq = np.asarray(getattr(x, "iq", x))
    probs, cache = _forward_batch(iq[None, :, :], weights, mode, rng, masks)
    return float(probs[0]), cache


def bce_loss(prob: float, y: int) -> float:
    """Binary cross-entropy with the probability clamped to [eps, 1-eps]."""
    p = min(max(float(prob), PROB_EPS), 1.0 - PROB_EPS)
    return -(y * np.log(p) + (1 - y) * np.log(1.0 - p))


def _bce_vec(probs: np.ndarray, y: np.ndarray) -> np.ndarray:
    p = np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    return -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))


def _backward_batch(cache, y, freeze_conv: bool = False) -> dict[str, np.ndarray]:
    """Gradient of the mean BCE over the batch w.r.t. every parameter.

    Exact for the dropout masks sampled in the cached forward.
    """
    if not cache["train"]:
        raise DimensionError("backward requires a cache from a train-mode forward")
    weights: NetworkWeights = cache["weights"]
    spec = weights.spec
    a = weights.arrays
    dtype = np.dtype(weights.dtype)
    bsz = cache["bsz"]
    n, kw, pad = spec.n_samples, spec.kernel_width, spec.pad
    y = np.asarray(y, dtype=np.float64)

    grads = {}
    # logistic + BCE combine to p - y at the logit
    dz = ((cache["probs"] - y) / bsz).astype(dtype)

    grads["head.w"] = cache["h4"].T @ dz[:, None]
    grads["head.b"] = np.array([dz.sum()], dtype=dtype)
    dh4 = np.outer(dz, a["head.w"].ravel())

    grads["dense2.w"] = cache["h3"].T @ dh4
    grads["dense2.b"] = dh4.sum(axis=0)
    dh3 = dh4 @ a["dense2.w"].T

    dpre3 = dh3 * cache["m3"]
    grads["dense1.w"] = cache["flat"].T @ dpre3
    grads["dense1.b"] = dpre3.sum(axis=0)

    if freeze_conv:
        for name in ("conv1.w", "conv1.b", "conv2.w", "conv2.b"):
            grads[name] = np.zeros_like(a[name])
        return grads

    dflat = dpre3 @ a["dense1.w"].T
    dh2 = dflat.reshape(bsz, 2, n, spec.conv2_kernels)
    dpre2 = dh2 * cache["m2"]
    grads["conv2.w"], grads["conv2.b"], dh1 = _conv_backward(
        cache["h1"], dpre2, a["conv2.w"], kw, pad, need_dx=True
    )
    dpre1 = dh1 * cache["m1"]
    grads["conv1.w"], grads["conv1.b"], _ = _conv_backward(
        cache["h0"], dpre1, a["conv1.w"], kw, pad, need_dx=False
    )
    return grads


def backward(cache, y, freeze_conv: bool = False) -> dict[str, np.ndarray]:
    """Gradients for a single-example cache (wrapper over the batch path)."""
    return _backward_batch(cache, np.atleast_1d(y), freeze_conv=freeze_conv)


def adam_step(weights: NetworkWeights, grads: dict, state: AdamState, cfg: TrainConfig):
    """Standard bias-corrected Adam update, in place."""
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, w in weights.arrays.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {w.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        w -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
    return weights, state


@dataclass
class TrainResult:
    weights: NetworkWeights
    epoch_losses: list[float] = field(default_factory=list)
    eval_losses: list[float] | None = None


def dataset_loss(dataset: Dataset, weights: NetworkWeights, batch_size: int = 128) -> float:
    """Mean eval-mode BCE over the dataset (dropout off)."""
    total = 0.0
    y = dataset.labels.astype(np.float64)
    for start in range(0, len(dataset), batch_size):
        probs, _ = _forward_batch(dataset.iq[start : start + batch_size], weights, "eval")
        total += float(np.sum(_bce_vec(probs, y[start : start + batch_size])))
    return total / len(dataset)


def train(
    dataset: Dataset,
    cfg: TrainConfig,
    init: NetworkWeights | None = None,
    eval_each_epoch: bool = False,
) -> TrainResult:
    """Shuffled mini-batch Adam training, deterministic given cfg.seed.

    init=None starts from fresh He-uniform weights; passing weights continues
    training from a copy of them (the caller's weights are not mutated).
    """
    if len(dataset) == 0:
        raise DimensionError("training dataset is empty")
    spec = init.spec if init is not None else NetworkSpec(n_samples=dataset.n_samples)
    if spec.n_samples != dataset.n_samples:
        raise ShapeError(f"network expects N={spec.n_samples}, dataset has N={dataset.n_samples}")
    init_ss, shuffle_ss, drop_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    weights = init.copy() if init is not None else init_weights(spec, init_ss)
    state = AdamState.zeros_like(weights)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    # SFC64: fastest generator for the bulk dropout-mask draws
    drop_rng = np.random.Generator(np.random.SFC64(drop_ss))

    count = len(dataset)
    y_all = dataset.labels.astype(np.float64)
    result = TrainResult(weights=weights, eval_losses=[] if eval_each_epoch else None)
    for epoch in range(cfg.epochs):
        perm = shuffle_rng.permutation(count)
        running = 0.0
        for bi, start in enumerate(range(0, count, cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size]
            probs, cache = _forward_batch(dataset.iq[idx], weights, "train", drop_rng)
            batch_loss = float(np.mean(_bce_vec(probs, y_all[idx])))
            if not np.isfinite(batch_loss):
                raise DivergedTrainingError(f"non-finite training loss at epoch {epoch}, batch {bi}")
            grads = _backward_batch(cache, y_all[idx], freeze_conv=cfg.freeze_conv)
            adam_step(weights, grads, state, cfg)
            running += batch_loss * len(idx)
        result.epoch_losses.append(running / count)
        if eval_each_epoch:
            result.eval_losses.append(dataset_loss(dataset, weights))
    return result


def predict_scores(dataset: Dataset, weights: NetworkWeights, batch_size: int = 128):
    """Eval-mode probabilities over the dataset, order-preserving."""
    out = []
    for start in range(0, len(dataset), batch_size):
        probs, _ = _forward_batch(dataset.iq[start : start + batch_size], weights, "eval")
        labels = dataset.labels[start : start + batch_size]
        out.extend((float(p), int(lab)) for p, lab in zip(probs, labels))
    return out


def save_weights(weights: NetworkWeights, path) -> None:
    """Write the DSNW checkpoint format (float32 payload, Adam state excluded)."""
    parts = [_W_HEADER.pack(_W_MAGIC, _W_VERSION, weights.spec.n_samples, len(PARAM_ORDER))]
    for name in PARAM_ORDER:
        arr = np.ascontiguousarray(weights.arrays[name], dtype="<f4")
        nm = name.encode("ascii")
        parts.append(struct.pack("<H", len(nm)))
        parts.append(nm)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    _atomic_write(Path(path), b"".join(parts))


def _spec_from_arrays(n: int, arrays: dict[str, np.ndarray]) -> NetworkSpec:
    shape = arrays["conv1.w"].shape
    if len(shape) != 3 or shape[1] != 1:
        raise ShapeError(f"conv1.w: unexpected shape {shape}")
    kw = shape[2]
    spec = NetworkSpec(
        n_samples=n,
        conv1_kernels=shape[0],
        conv2_kernels=arrays["conv2.w"].shape[0],
        dense1_units=arrays["dense1.w"].shape[-1],
        dense2_units=arrays["dense2.w"].shape[-1],
        kernel_width=kw,
        pad=(kw - 1) // 2,
    )
    return spec


def load_weights(path, expected_spec: NetworkSpec | None = None) -> NetworkWeights:
    """Read a DSNW checkpoint.

    Malformed bytes raise FormatError; a well-formed file whose shapes do not
    assemble into a valid spec (or do not match expected_spec) raises
    ShapeError naming the offending layer.
    """
    data = Path(path).read_bytes()
    if len(data) < _W_HEADER.size:
        raise FormatError("checkpoint truncated inside header", offset=len(data))
    magic, version, n, layer_count = _W_HEADER.unpack_from(data, 0)
    if magic != _W_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {_W_MAGIC!r}", offset=0)
    if version != _W_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    if layer_count != len(PARAM_ORDER):
        raise FormatError(f"expected {len(PARAM_ORDER)} parameter arrays, header says {layer_count}", offset=12)
    offset = _W_HEADER.size
    arrays: dict[str, np.ndarray] = {}
    for i in range(layer_count):
        if offset + 2 > len(data):
            raise FormatError("truncated before layer name length", offset=offset)
        (name_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        if offset + name_len > len(data):
            raise FormatError("truncated inside layer name", offset=offset)
        raw_name = data[offset : offset + name_len]
        if not raw_name.isascii():
            raise FormatError("layer name is not ASCII", offset=offset)
        name = raw_name.decode("ascii")
        offset += name_len
        if name != PARAM_ORDER[i]:
            raise FormatError(f"unexpected layer name {name!r} at position {i}", offset=offset - name_len)
        if offset + 1 > len(data):
            raise FormatError("truncated before rank", offset=offset)
        rank = data[offset]
        offset += 1
        if not 1 <= rank <= 4:
            raise FormatError(f"implausible rank {rank} for {name}", offset=offset - 1)
        if offset + 4 * rank > len(data):
            raise FormatError("truncated inside dims", offset=offset)
        dims = struct.unpack_from(f"<{rank}I", data, offset)
        offset += 4 * rank
        n_elem = 1
        for d in dims:
            n_elem *= int(d)
        if n_elem <= 0 or n_elem > 2**28:
            raise FormatError(f"implausible element count {n_elem} for {name}", offset=offset)
        nbytes = 4 * n_elem
        if offset + nbytes > len(data):
            raise FormatError(f"truncated inside payload of {name}", offset=offset)
        arr = np.frombuffer(data, dtype="<f4", count=n_elem, offset=offset).reshape(dims)
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"non-finite values in {name}", offset=offset)
        arrays[name] = arr.astype(np.float32)
        offset += nbytes
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes after last layer", offset=offset)
    try:
        spec = _spec_from_arrays(n, arrays)
        weights = NetworkWeights(spec, arrays)
    except DimensionError as exc:
        raise ShapeError(str(exc)) from exc
    if expected_spec is not None and spec != expected_spec:
        for name, want in expected_spec.param_shapes().items():
            if arrays[name].shape != want:
                raise ShapeError(f"{name}: checkpoint shape {arrays[name].shape} != expected {want}")
        raise ShapeError(f"checkpoint spec {spec} != expected {expected_spec}")
    return weights

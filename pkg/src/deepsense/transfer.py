"""Transfer between signal domains.

Two regimes: unsupervised adaptation via a kernel projection that minimizes
the maximum mean discrepancy between source and target samples (with a
logistic classifier in the latent space), and supervised fine-tuning of a
pre-trained CNN on a small labeled target set, including the example-count
sweep protocol used for reporting.
"""

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import DimensionError, FormatError, StateError
from .metrics import pd_at_pfa
from .network import NetworkWeights, NetworkSpec, TrainConfig, init_weights, load_weights, predict_scores, train
from .numerics import leading_eigenvectors_of_pencil
from .detectors import roc_from_scores
from .signals import Dataset, ScenarioConfig, _atomic_write, build_dataset, derive_seed

_TCA_MAGIC = b"DSTC"
_TCA_VERSION = 1


@dataclass(frozen=True)
class RbfKernel:
    gamma: float

    def __post_init__(self):
        if self.gamma <= 0:
            raise DimensionError(f"gamma must be > 0, got {self.gamma}")

    def gram(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        d2 = np.sum(x * x, axis=1)[:, None] + np.sum(y * y, axis=1)[None, :] - 2.0 * (x @ y.T)
        np.maximum(d2, 0.0, out=d2)
        return np.exp(-self.gamma * d2)


@dataclass(frozen=True)
class LinearKernel:
    def gram(self, x, y) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ np.asarray(y, dtype=np.float64).T


def median_heuristic_gamma(x, max_points: int = 500, seed: int = 0) -> float:
    """gamma = 1 / (2 median^2) of pairwise distances on a subsample."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) > max_points:
        idx = np.random.default_rng(seed).choice(len(x), size=max_points, replace=False)
        x = x[idx]
    d2 = np.sum(x * x, axis=1)[:, None] + np.sum(x * x, axis=1)[None, :] - 2.0 * (x @ x.T)
    d2 = d2[np.triu_indices(len(x), k=1)]
    med = np.sqrt(np.median(np.maximum(d2, 0.0)))
    if med <= 0:
        raise DimensionError("median pairwise distance is zero; cannot pick a kernel width")
    return 1.0 / (2.0 * med * med)


def mmd_distance(x_src, x_tar, kernel) -> float:
    """Squared RKHS distance between the two empirical kernel means (biased form)."""
    x = np.atleast_2d(np.asarray(x_src, dtype=np.float64))
    y = np.atleast_2d(np.asarray(x_tar, dtype=np.float64))
    if x.size == 0 or y.size == 0:
        raise DimensionError("both sample sets must be nonempty")
    return float(kernel.gram(x, x).mean() + kernel.gram(y, y).mean() - 2.0 * kernel.gram(x, y).mean())


def mmd_coefficient_matrix(n1: int, n2: int) -> np.ndarray:
    """The rank-one matrix L with entries 1/n1^2, 1/n2^2, -1/(n1 n2).

    Tr(K L) equals the squared MMD; kept for direct two-formula comparison.
    """
    e = np.concatenate([np.full(n1, 1.0 / n1), np.full(n2, -1.0 / n2)])
    return np.outer(e, e)


@dataclass
class LatentClassifier:
    """Logistic head on standardized latent features."""

    w: np.ndarray
    b: float
    mean: np.ndarray
    scale: np.ndarray

    def predict_prob(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        p = expit(((z - self.mean) / self.scale) @ self.w + self.b)
        return np.clip(p, 1e-7, 1.0 - 1e-7)


def fit_logistic(features, labels, ridge: float = 1e-3, tol: float = 1e-8, max_iter: int = 200_000) -> LatentClassifier:
    """Full-batch gradient descent on ridge-regularized logistic loss.

    Features are standardized internally, which also makes the fitted scores
    invariant to any positive rescaling of the latent space.
    """
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.asarray(labels, dtype=np.float64).ravel()
    if len(x) != len(y):
        raise DimensionError(f"{len(x)} feature rows vs {len(y)} labels")
    if not np.all((y == 0) | (y == 1)):
        raise DimensionError("labels must be binary")
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    xs = (x - mean) / scale
    n, d = xs.shape
    # Lipschitz bound of the logistic gradient: 0.25 * sigma_max^2 / n + ridge
    sig2 = np.linalg.eigvalsh(xs.T @ xs)[-1] if d > 1 else float(np.sum(xs * xs))
    step = 1.0 / (0.25 * sig2 / n + 0.25 + ridge)
    w = np.zeros(d)
    b = 0.0
    for _ in range(max_iter):
        p = expit(xs @ w + b)
        err = (p - y) / n
        gw = xs.T @ err + ridge * w
        gb = float(np.sum(err))
        if max(np.max(np.abs(gw)), abs(gb)) < tol:
            break
        w -= step * gw
        b -= step * gb
    else:
        raise StateError(f"logistic regression did not reach tolerance {tol} in {max_iter} iterations")
    return LatentClassifier(w=w, b=b, mean=mean, scale=scale)


@dataclass
class TcaModel:
    """Kernel landmarks, the MMD-minimizing projection, and an optional classifier."""

    landmarks: np.ndarray  # (n1+n2, d)
    kernel: RbfKernel | LinearKernel
    projection: np.ndarray  # (n1+n2, m)
    mu: float
    m: int
    latent_classifier: LatentClassifier | None = None


def tca_fit(x_src, x_tar, kernel=None, m: int = 8, mu: float = 1.0, cap: int = 4000) -> TcaModel:
    """Kernel projection minimizing the source/target MMD.

    Builds the joint kernel matrix over source and target samples, and takes
    the leading eigenvectors of (KLK + mu I)^-1 KHK, normalized so that
    W^T K H K W = I.  Inputs are flattened vectors, one row per interval.
    """
    xs = np.atleast_2d(np.asarray(x_src, dtype=np.float64))
    xt = np.atleast_2d(np.asarray(x_tar, dtype=np.float64))
    if xs.shape[1] != xt.shape[1]:
        raise DimensionError(f"source dim {xs.shape[1]} != target dim {xt.shape[1]}")
    n1, n2 = len(xs), len(xt)
    if n1 == 0 or n2 == 0:
        raise DimensionError("both domains must be nonempty")
    n = n1 + n2
    if n > cap:
        raise DimensionError(f"{n} combined samples exceed the dense-solve cap {cap}; subsample first")
    if not 1 <= m <= n:
        raise DimensionError(f"m must be in [1, {n}], got {m}")
    if mu <= 0:
        raise DimensionError(f"mu must be > 0, got {mu}")
    x = np.vstack([xs, xt])
    if kernel is None:
        kernel = RbfKernel(median_heuristic_gamma(x))
    k = kernel.gram(x, x)
    if float(np.max(np.abs(k))) < 1e-12:
        raise StateError("kernel matrix is numerically zero; cannot fit")
    e = np.concatenate([np.full(n1, 1.0 / n1), np.full(n2, -1.0 / n2)])
    u = k @ e
    klk = np.outer(u, u)
    kh = k - k.mean(axis=1, keepdims=True)  # K (I - 11^T/n)
    khk = kh @ k
    khk = 0.5 * (khk + khk.T)
    pairs = leading_eigenvectors_of_pencil(khk, klk + mu * np.eye(n), m)
    w = pairs.vectors.copy()
    for j in range(m):
        s = float(w[:, j] @ khk @ w[:, j])
        if s <= 1e-14:
            raise StateError(f"direction {j} carries no centered kernel variance; reduce m")
        w[:, j] /= np.sqrt(s)
    return TcaModel(landmarks=x, kernel=kernel, projection=w, mu=mu, m=m)


def tca_transform(model: TcaModel, x) -> np.ndarray:
    """Project new points through the empirical kernel map: W^T k(landmarks, .)"""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] != model.landmarks.shape[1]:
        raise DimensionError(f"input dim {arr.shape[1]} != landmark dim {model.landmarks.shape[1]}")
    z = model.kernel.gram(arr, model.landmarks) @ model.projection
    return z[0] if single else z


def fit_latent_classifier(model: TcaModel, features, labels, ridge: float = 1e-3, tol: float = 1e-8) -> TcaModel:
    """Train the latent-space logistic classifier on projected labeled data."""
    model.latent_classifier = fit_logistic(features, labels, ridge=ridge, tol=tol)
    return model


def tca_sense(model: TcaModel, x) -> float:
    """Probability of PU presence for one interval (flattened or 2 x N)."""
    if model.latent_classifier is None:
        raise StateError("latent classifier not trained; call fit_latent_classifier first")
    iq = np.asarray(getattr(x, "iq", x), dtype=np.float64)
    z = tca_transform(model, iq.reshape(-1))
    return float(model.latent_classifier.predict_prob(z)[0])


def tca_sense_batch(model: TcaModel, iq_batch) -> np.ndarray:
    if model.latent_classifier is None:
        raise StateError("latent classifier not trained; call fit_latent_classifier first")
    flat = np.asarray(iq_batch, dtype=np.float64).reshape(len(iq_batch), -1)
    return model.latent_classifier.predict_prob(tca_transform(model, flat))


_KERNEL_TAGS = {LinearKernel: 0, RbfKernel: 1}


def save_tca(model: TcaModel, path) -> None:
    """Write the DSTC model format (float32 payload)."""
    n, d = model.landmarks.shape
    parts = [struct.pack("<4sI", _TCA_MAGIC, _TCA_VERSION)]
    tag = _KERNEL_TAGS[type(model.kernel)]
    parts.append(struct.pack("<B", tag))
    if tag == 1:
        parts.append(struct.pack("<d", model.kernel.gamma))
    parts.append(struct.pack("<III", model.m, n, d))
    parts.append(model.landmarks.astype("<f4").tobytes())
    parts.append(model.projection.astype("<f4").tobytes())
    clf = model.latent_classifier
    if clf is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<B", 1))
        parts.append(clf.w.astype("<f4").tobytes())
        parts.append(struct.pack("<f", clf.b))
        parts.append(clf.mean.astype("<f4").tobytes())
        parts.append(clf.scale.astype("<f4").tobytes())
    _atomic_write(Path(path), b"".join(parts))


def load_tca(path) -> TcaModel:
    data = Path(path).read_bytes()
    off = 0

    def need(nbytes, what):
        nonlocal off
        if off + nbytes > len(data):
            raise FormatError(f"truncated inside {what}", offset=off)
        out = data[off : off + nbytes]
        off += nbytes
        return out

    magic, version = struct.unpack("<4sI", need(8, "header"))
    if magic != _TCA_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {_TCA_MAGIC!r}", offset=0)
    if version != _TCA_VERSION:
        raise FormatError(f"unsupported model version {version}", offset=4)
    (tag,) = struct.unpack("<B", need(1, "kernel tag"))
    if tag == 1:
        (gamma,) = struct.unpack("<d", need(8, "kernel gamma"))
        if not np.isfinite(gamma) or gamma <= 0:
            raise FormatError(f"invalid kernel gamma {gamma}", offset=off - 8)
        kernel = RbfKernel(gamma)
    elif tag == 0:
        kernel = LinearKernel()
    else:
        raise FormatError(f"unknown kernel tag {tag}", offset=off - 1)
    m, n, d = struct.unpack("<III", need(12, "dims"))
    if m < 1 or m > n or n < 1 or n > 10**7 or d < 1 or d > 10**7 or n * d > 2**28:
        raise FormatError(f"implausible dims m={m} n={n} d={d}", offset=off - 12)
    landmarks = np.frombuffer(need(4 * n * d, "landmarks"), "<f4").reshape(n, d).astype(np.float64)
    projection = np.frombuffer(need(4 * n * m, "projection"), "<f4").reshape(n, m).astype(np.float64)
    if not (np.all(np.isfinite(landmarks)) and np.all(np.isfinite(projection))):
        raise FormatError("non-finite model data", offset=off)
    (has_clf,) = struct.unpack("<B", need(1, "classifier flag"))
    clf = None
    if has_clf == 1:
        w = np.frombuffer(need(4 * m, "classifier weights"), "<f4").astype(np.float64)
        (b,) = struct.unpack("<f", need(4, "classifier bias"))
        mean = np.frombuffer(need(4 * m, "classifier mean"), "<f4").astype(np.float64)
        scale = np.frombuffer(need(4 * m, "classifier scale"), "<f4").astype(np.float64)
        ok = np.all(np.isfinite(w)) and np.isfinite(b) and np.all(np.isfinite(mean))
        if not ok or not np.all(np.isfinite(scale)) or np.any(scale == 0):
            raise FormatError("invalid classifier block", offset=off)
        clf = LatentClassifier(w=w, b=float(b), mean=mean, scale=scale)
    elif has_clf != 0:
        raise FormatError(f"invalid classifier flag {has_clf}", offset=off - 1)
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes", offset=off)
    return TcaModel(landmarks=landmarks, kernel=kernel, projection=projection, mu=np.nan, m=m, latent_classifier=clf)


def fine_tune(base: NetworkWeights, target_labeled: Dataset | None, cfg: TrainConfig) -> NetworkWeights:
    """Continue training from pre-trained weights with a fresh optimizer.

    An empty target set (or zero epochs) returns the base weights unchanged.
    """
    if target_labeled is None or len(target_labeled) == 0 or cfg.epochs == 0:
        return base.copy()
    return train(target_labeled, cfg, init=base).weights


@dataclass(frozen=True)
class FinetunePlan:
    """Example-count sweep: fine-tune vs train-from-scratch, repeated and averaged."""

    schedule: tuple[int, ...] = (0, 25, 50, 100, 200, 300, 500, 1000)
    repetitions: int = 3
    finetune_cfg: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=1e-4, epochs=20))
    scratch_cfg: TrainConfig | None = None
    base_checkpoint: str | None = None
    seed: int = 0
    pfa_star: float = 0.1

    def __post_init__(self):
        if any(b < a for a, b in zip(self.schedule, self.schedule[1:])):
            raise DimensionError(f"schedule must be nondecreasing, got {self.schedule}")
        if self.repetitions < 1:
            raise DimensionError("repetitions must be >= 1")
        if not 0.0 < self.pfa_star < 1.0:
            raise DimensionError(f"pfa_star must be in (0, 1), got {self.pfa_star}")


@dataclass(frozen=True)
class SweepCell:
    n_examples: int
    arm: str
    rep: int
    pd: float
    seed: int


@dataclass
class SweepResult:
    cells: list[SweepCell]
    pfa_star: float
    schedule: tuple[int, ...]
    repetitions: int
    test_set: Dataset

    def curve(self, arm: str) -> list[tuple[int, float]]:
        """(n_examples, mean pd) per schedule point for one arm."""
        out = []
        for n in self.schedule:
            pds = [c.pd for c in self.cells if c.arm == arm and c.n_examples == n]
            out.append((n, float(np.mean(pds))))
        return out

    def summary(self) -> list[tuple[int, str, float, float]]:
        out = []
        for n in self.schedule:
            for arm in ("fine_tune", "scratch"):
                pds = [c.pd for c in self.cells if c.arm == arm and c.n_examples == n]
                out.append((n, arm, float(np.mean(pds)), float(np.std(pds))))
        return out


def _pd_of_weights(weights: NetworkWeights, test_set: Dataset, pfa_star: float) -> float:
    scores = predict_scores(test_set, weights)
    s = np.array([p for p, _ in scores])
    y = np.array([lab for _, lab in scores])
    roc = roc_from_scores(s[y == 0], s[y == 1])
    return pd_at_pfa(roc, pfa_star)


def run_finetune_sweep(
    plan: FinetunePlan,
    src_cfg: ScenarioConfig | None,
    tar_cfg: ScenarioConfig,
    *,
    pretrain_size: int = 5000,
    test_size: int = 5000,
    pretrain_cfg: TrainConfig | None = None,
    base: NetworkWeights | None = None,
    threads: int = 1,
) -> SweepResult:
    """Fine-tune and train-from-scratch arms over the example schedule.

    Every (point, repetition) cell draws a fresh labeled target subset from
    its own derived seed, so results are independent of execution order and
    thread count.  Both arms are evaluated at plan.pfa_star on one held-out
    target test set.
    """
    if base is None and plan.base_checkpoint is not None:
        base = load_weights(plan.base_checkpoint)
    if base is None:
        if src_cfg is None:
            raise DimensionError("need src_cfg, base weights, or a base checkpoint to start from")
        cfg = pretrain_cfg or TrainConfig()
        src_train = build_dataset(src_cfg.with_seed(derive_seed(plan.seed, 101)), pretrain_size)
        base = train(src_train, replace(cfg, seed=derive_seed(plan.seed, 102))).weights
    test_set = build_dataset(tar_cfg.with_seed(derive_seed(plan.seed, 103)), test_size)
    if base.spec.n_samples != tar_cfg.n_samples:
        raise DimensionError(f"base network N={base.spec.n_samples} != target N={tar_cfg.n_samples}")

    scratch_cfg = plan.scratch_cfg or replace(plan.finetune_cfg, learning_rate=1e-3)

    def run_cell(pi: int, rep: int):
        n = plan.schedule[pi]
        cell_seed = derive_seed(plan.seed, 1, pi, rep)
        cell_ds = build_dataset(tar_cfg.with_seed(cell_seed), n) if n > 0 else None
        ft = fine_tune(base, cell_ds, replace(plan.finetune_cfg, seed=derive_seed(plan.seed, 2, pi, rep)))
        sc_seed = derive_seed(plan.seed, 3, pi, rep)
        if cell_ds is None:
            sc = init_weights(NetworkSpec(n_samples=tar_cfg.n_samples), seed=sc_seed)
        else:
            sc = train(cell_ds, replace(scratch_cfg, seed=sc_seed)).weights
        return (
            SweepCell(n, "fine_tune", rep, _pd_of_weights(ft, test_set, plan.pfa_star), cell_seed),
            SweepCell(n, "scratch", rep, _pd_of_weights(sc, test_set, plan.pfa_star), cell_seed),
        )

    jobs = [(pi, rep) for pi in range(len(plan.schedule)) for rep in range(plan.repetitions)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda args: run_cell(*args), jobs))
    else:
        results = [run_cell(*args) for args in jobs]
    cells = [c for pair in results for c in pair]
    return SweepResult(
        cells=cells,
        pfa_star=plan.pfa_star,
        schedule=tuple(plan.schedule),
        repetitions=plan.repetitions,
        test_set=test_set,
    )

"""Labeled sensing-interval generation for every PU scenario.

Covers the narrowband Gaussian PU in AWGN (sinc-correlated samples after the
ideal receive filter) and linearly modulated PUs (BPSK/QPSK/16QAM) with SRRC
pulse shaping, per-example path-loss SNR draws and optional multi-tap
Rayleigh fading.  Noise is white complex Gaussian at the post-filter sampling
rate.  Generation is a pure function of (config, example index): every
example gets its own counter-derived RNG stream, so content never depends on
generation order or thread count.
"""

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.signal import upfirdn

from .detectors import CovariancePair
from .errors import DimensionError, FormatError, GenerationError, UnsupportedScenarioError
from .numerics import complex_to_real_composite

SIGNAL_KINDS = ("gaussian_nb", "bpsk", "qpsk", "qam16")
LINEAR_KINDS = ("bpsk", "qpsk", "qam16")

_DATASET_MAGIC = b"DSDS"
_DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")

# spawn-key domains for deriving independent substreams from one seed
_DOMAIN_EXAMPLE = 0
_DOMAIN_LABELS = 1


@dataclass(frozen=True)
class FadingSpec:
    """Sample-spaced Rayleigh taps with exponentially decaying power profile."""

    n_taps: int = 3
    decay_db_per_tap: float = 3.0

    def __post_init__(self):
        if self.n_taps < 1:
            raise DimensionError(f"n_taps must be >= 1, got {self.n_taps}")

    def tap_powers(self) -> np.ndarray:
        p = 10.0 ** (-self.decay_db_per_tap * np.arange(self.n_taps) / 10.0)
        return p / p.sum()


@dataclass(frozen=True)
class ScenarioConfig:
    """Full generative description of one signal domain."""

    signal_kind: str
    n_samples: int = 32
    snr_db: float | tuple[float, float] = -4.0
    bandwidth_fraction: float = 0.25
    sps: int = 4
    srrc_rolloff: float = 0.5
    srrc_span_symbols: int = 8
    fading: FadingSpec | None = None
    noise_variance: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.signal_kind not in SIGNAL_KINDS:
            raise UnsupportedScenarioError(f"unknown signal_kind {self.signal_kind!r}")
        if self.n_samples < 2:
            raise DimensionError(f"n_samples must be >= 2, got {self.n_samples}")
        lo, hi = self.snr_bounds
        if lo > hi:
            raise DimensionError(f"snr range must satisfy lo <= hi, got {self.snr_db}")
        if not 0.0 < self.bandwidth_fraction <= 1.0:
            raise DimensionError(f"bandwidth_fraction must be in (0, 1], got {self.bandwidth_fraction}")
        if self.sps < 1 or self.srrc_span_symbols < 1:
            raise DimensionError("sps and srrc_span_symbols must be >= 1")
        if self.noise_variance <= 0:
            raise DimensionError(f"noise_variance must be > 0, got {self.noise_variance}")

    @property
    def snr_bounds(self) -> tuple[float, float]:
        if isinstance(self.snr_db, tuple):
            return float(self.snr_db[0]), float(self.snr_db[1])
        return float(self.snr_db), float(self.snr_db)

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return replace(self, seed=int(seed))


@dataclass(frozen=True)
class SensingExample:
    """One sensing interval: 2 x N real IQ matrix plus occupancy label."""

    iq: np.ndarray
    label: int

    def __post_init__(self):
        if self.iq.ndim != 2 or self.iq.shape[0] != 2:
            raise DimensionError(f"iq must be 2 x N, got shape {self.iq.shape}")
        if self.label not in (0, 1):
            raise DimensionError(f"label must be 0 or 1, got {self.label}")


@dataclass
class Dataset:
    """A stack of sensing intervals sharing one interval length N.

    Stored struct-of-arrays: iq is (count, 2, N) float32, labels (count,) uint8.
    """

    n_samples: int
    iq: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.iq.shape != (len(self.labels), 2, self.n_samples):
            raise DimensionError(
                f"iq shape {self.iq.shape} does not match {len(self.labels)} examples of N={self.n_samples}"
            )

    def __len__(self) -> int:
        return len(self.labels)

    def example(self, i: int) -> SensingExample:
        return SensingExample(iq=self.iq[i], label=int(self.labels[i]))

    @property
    def n_positive(self) -> int:
        return int(np.sum(self.labels))

    def flat(self) -> np.ndarray:
        """(count, 2N) view, each row I-samples then Q-samples."""
        return self.iq.reshape(len(self), -1)

    def take(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.intp)
        return Dataset(self.n_samples, self.iq[idx].copy(), self.labels[idx].copy())

    @classmethod
    def empty(cls, n_samples: int) -> "Dataset":
        return cls(n_samples, np.empty((0, 2, n_samples), np.float32), np.empty(0, np.uint8))


def example_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-derived RNG stream for one example; stable across numpy versions."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(_DOMAIN_EXAMPLE, index)))


def derive_seed(seed: int, *tags: int) -> int:
    """A child 64-bit seed for an independent purpose (labels, splits, cells)."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(t) for t in tags))
    return int(ss.generate_state(1, np.uint64)[0])


def _noise_iq(cfg: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    """White circularly-symmetric noise: I and Q i.i.d. N(0, sigma_n^2 / 2).

    This is always the first draw from an example stream, so noise-only
    examples are identical across signal kinds for a fixed seed.
    """
    return np.sqrt(cfg.noise_variance / 2.0) * rng.standard_normal((2, cfg.n_samples))


def _draw_snr_db(cfg: ScenarioConfig, rng: np.random.Generator) -> float:
    lo, hi = cfg.snr_bounds
    if lo == hi:
        return lo
    return float(rng.uniform(lo, hi))


def expected_signal_power(cfg: ScenarioConfig) -> float:
    """Mean received signal power implied by the configured SNR (or dB range)."""
    lo, hi = cfg.snr_bounds
    if lo == hi:
        return cfg.noise_variance * 10.0 ** (lo / 10.0)
    # E[10^(U/10)] for U uniform on [lo, hi]
    c = np.log(10.0) / 10.0
    return cfg.noise_variance * (10.0 ** (hi / 10.0) - 10.0 ** (lo / 10.0)) / (c * (hi - lo))


def sinc_covariance(n: int, bandwidth_fraction: float) -> np.ndarray:
    """Unit-power complex covariance of an ideally bandlimited Gaussian PU.

    C[i, j] = sinc(b * (i - j)) with the normalized sinc; b = 1 gives white
    samples, b < 1 correlates neighbouring samples.
    """
    lags = np.arange(n)[:, None] - np.arange(n)[None, :]
    return np.sinc(bandwidth_fraction * lags).astype(np.complex128)


_chol_cache: dict[tuple[int, float], np.ndarray] = {}


def _unit_signal_cholesky(n: int, fraction: float) -> np.ndarray:
    key = (n, fraction)
    cached = _chol_cache.get(key)
    if cached is not None:
        return cached
    c = sinc_covariance(n, fraction).real
    try:
        ell = np.linalg.cholesky(c + 1e-9 * np.eye(n))
    except np.linalg.LinAlgError as exc:
        raise GenerationError(f"signal covariance not PSD after jitter (N={n}, b={fraction})") from exc
    _chol_cache[key] = ell
    return ell


def gen_gaussian_nb_interval(cfg: ScenarioConfig, occupied: bool, rng: np.random.Generator) -> SensingExample:
    """One interval of the narrowband Gaussian PU scenario.

    Noise is white CN(0, sigma_n^2); when occupied a zero-mean Gaussian signal
    with complex covariance sigma_S^2 * sinc(b * (i - j)) is added, drawn via
    the Cholesky factor of the unit-power covariance.
    """
    if cfg.signal_kind != "gaussian_nb":
        raise UnsupportedScenarioError(f"gaussian generator called with kind {cfg.signal_kind!r}")
    z = _noise_iq(cfg, rng)
    if not occupied:
        return SensingExample(iq=z.astype(np.float32), label=0)
    sigma_s2 = cfg.noise_variance * 10.0 ** (_draw_snr_db(cfg, rng) / 10.0)
    w2 = np.sqrt(0.5) * rng.standard_normal((2, cfg.n_samples))
    w = w2[0] + 1j * w2[1]
    s = np.sqrt(sigma_s2) * (_unit_signal_cholesky(cfg.n_samples, cfg.bandwidth_fraction) @ w)
    x = (z[0] + 1j * z[1]) + s
    return SensingExample(iq=np.stack([x.real, x.imag]).astype(np.float32), label=1)


def unit_energy_constellation(kind: str) -> np.ndarray:
    if kind == "bpsk":
        return np.array([1.0, -1.0], dtype=np.complex128)
    if kind == "qpsk":
        return np.array([1 + 1j, -1 + 1j, -1 - 1j, 1 - 1j], dtype=np.complex128) / np.sqrt(2.0)
    if kind == "qam16":
        re, im = np.meshgrid([-3.0, -1.0, 1.0, 3.0], [-3.0, -1.0, 1.0, 3.0])
        return (re + 1j * im).ravel() / np.sqrt(10.0)
    raise UnsupportedScenarioError(f"no constellation for kind {kind!r}")


_srrc_cache: dict[tuple[float, int, int], np.ndarray] = {}


def srrc_taps(rolloff: float, sps: int, span_symbols: int) -> np.ndarray:
    """Unit-energy square-root raised cosine filter spanning span_symbols."""
    key = (rolloff, sps, span_symbols)
    cached = _srrc_cache.get(key)
    if cached is not None:
        return cached
    n_taps = span_symbols * sps + 1
    t = (np.arange(n_taps) - (n_taps - 1) / 2.0) / sps  # in symbol periods
    h = np.empty(n_taps)
    zero = np.abs(t) < 1e-12
    h[zero] = 1.0 - rolloff + 4.0 * rolloff / np.pi
    if rolloff > 0:
        special = np.isclose(np.abs(t), 1.0 / (4.0 * rolloff), atol=1e-12)
        h[special] = (rolloff / np.sqrt(2.0)) * (
            (1.0 + 2.0 / np.pi) * np.sin(np.pi / (4.0 * rolloff))
            + (1.0 - 2.0 / np.pi) * np.cos(np.pi / (4.0 * rolloff))
        )
    else:
        special = np.zeros_like(zero)
    rest = ~(zero | special)
    tr = t[rest]
    h[rest] = (np.sin(np.pi * tr * (1.0 - rolloff)) + 4.0 * rolloff * tr * np.cos(np.pi * tr * (1.0 + rolloff))) / (
        np.pi * tr * (1.0 - (4.0 * rolloff * tr) ** 2)
    )
    h = h / np.sqrt(np.sum(h * h))
    _srrc_cache[key] = h
    return h


def rayleigh_taps(n_taps: int, decay_db_per_tap: float, rng: np.random.Generator) -> np.ndarray:
    """Random channel realization: h_k ~ CN(0, p_k), sum p_k = 1."""
    powers = FadingSpec(n_taps, decay_db_per_tap).tap_powers()
    g = rng.standard_normal((2, n_taps))
    return np.sqrt(powers / 2.0) * (g[0] + 1j * g[1])


def apply_rayleigh_fading(signal, n_taps: int, decay_db_per_tap: float, rng: np.random.Generator) -> np.ndarray:
    """Convolve with a fresh Rayleigh channel; output truncated to input length."""
    x = np.asarray(signal, dtype=np.complex128)
    h = rayleigh_taps(n_taps, decay_db_per_tap, rng)
    return np.convolve(x, h)[: x.size]


def _window_jitter(sps: int) -> int:
    return 4 * sps


def gen_linear_mod_interval(cfg: ScenarioConfig, occupied: bool, rng: np.random.Generator) -> SensingExample:
    """One interval of a linearly modulated PU with SRRC pulse shaping.

    Occupied path: unit-energy symbols, upsample by sps, SRRC shaping, scale
    to the per-example SNR draw (path loss), optional Rayleigh fading, then a
    random-phase window of N samples from the steady-state region plus noise.
    """
    if cfg.signal_kind not in LINEAR_KINDS:
        raise UnsupportedScenarioError(f"linear-mod generator called with kind {cfg.signal_kind!r}")
    z = _noise_iq(cfg, rng)
    if not occupied:
        return SensingExample(iq=z.astype(np.float32), label=0)

    n = cfg.n_samples
    sps = cfg.sps
    span = cfg.srrc_span_symbols
    n_taps = cfg.fading.n_taps if cfg.fading else 1
    jitter = _window_jitter(sps)
    filt = srrc_taps(cfg.srrc_rolloff, sps, span)
    n_sym = span + 6 + -(-(n + n_taps + jitter) // sps)  # ceil division

    snr_db = _draw_snr_db(cfg, rng)
    constellation = unit_energy_constellation(cfg.signal_kind)
    symbols = constellation[rng.integers(0, constellation.size, size=n_sym)]
    shaped = upfirdn(filt, symbols, up=sps)
    # unit-energy symbols through a unit-energy filter average 1/sps power per
    # sample; scale so the mean received SNR matches the path-loss draw
    p_sig = cfg.noise_variance * 10.0 ** (snr_db / 10.0)
    shaped = shaped * np.sqrt(p_sig * sps)
    if cfg.fading is not None:
        shaped = apply_rayleigh_fading(shaped, cfg.fading.n_taps, cfg.fading.decay_db_per_tap, rng)

    steady_start = span * sps + (n_taps - 1)
    start = steady_start + int(rng.integers(0, jitter))
    if start + n > shaped.size:
        raise GenerationError(
            f"window [{start}, {start + n}) exceeds generated length {shaped.size}; generator must oversize"
        )
    s = shaped[start : start + n]
    x = (z[0] + 1j * z[1]) + s
    return SensingExample(iq=np.stack([x.real, x.imag]).astype(np.float32), label=1)


def gen_interval(cfg: ScenarioConfig, occupied: bool, rng: np.random.Generator) -> SensingExample:
    if cfg.signal_kind == "gaussian_nb":
        return gen_gaussian_nb_interval(cfg, occupied, rng)
    return gen_linear_mod_interval(cfg, occupied, rng)


def build_dataset(cfg: ScenarioConfig, n: int, occupancy_ratio: float = 0.5) -> Dataset:
    """n labeled intervals, round(n * occupancy_ratio) of them occupied.

    Label placement is a deterministic shuffle of cfg.seed; each example is
    generated from its own (seed, index) stream.
    """
    if n < 1:
        raise DimensionError(f"n must be >= 1, got {n}")
    if not 0.0 <= occupancy_ratio <= 1.0:
        raise DimensionError(f"occupancy_ratio must be in [0, 1], got {occupancy_ratio}")
    k = round(n * occupancy_ratio)
    labels = np.zeros(n, dtype=np.uint8)
    labels[:k] = 1
    label_rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(_DOMAIN_LABELS,)))
    labels = labels[label_rng.permutation(n)]
    iq = np.empty((n, 2, cfg.n_samples), dtype=np.float32)
    for i in range(n):
        iq[i] = gen_interval(cfg, bool(labels[i]), example_rng(cfg.seed, i)).iq
    return Dataset(n_samples=cfg.n_samples, iq=iq, labels=labels)


def analytic_covariances(cfg: ScenarioConfig) -> CovariancePair:
    """Closed-form composite covariances for the Gaussian scenario.

    C_z maps sigma_n^2 I, C_x maps sigma_n^2 I + sigma_S^2 sinc(b (i-j)),
    both through the complex-to-real composite.  Only the Gaussian PU has a
    closed form; other kinds raise.
    """
    if cfg.signal_kind != "gaussian_nb":
        raise UnsupportedScenarioError(f"no analytic covariances for kind {cfg.signal_kind!r}")
    lo, hi = cfg.snr_bounds
    if lo != hi:
        raise UnsupportedScenarioError("analytic covariances require a point SNR, not a range")
    n = cfg.n_samples
    sigma_s2 = cfg.noise_variance * 10.0 ** (lo / 10.0)
    c_noise = cfg.noise_variance * np.eye(n, dtype=np.complex128)
    c_sig = sigma_s2 * sinc_covariance(n, cfg.bandwidth_fraction)
    return CovariancePair(
        c_x=complex_to_real_composite(c_noise + c_sig),
        c_z=complex_to_real_composite(c_noise),
    )


def save_dataset(dataset: Dataset, path) -> None:
    """Write the DSDS binary format (little-endian, no padding)."""
    rec = np.dtype([("label", "u1"), ("iq", "<f4", (2, dataset.n_samples))])
    arr = np.empty(len(dataset), dtype=rec)
    arr["label"] = dataset.labels
    arr["iq"] = dataset.iq
    header = _HEADER.pack(_DATASET_MAGIC, _DATASET_VERSION, dataset.n_samples, len(dataset))
    _atomic_write(Path(path), header + arr.tobytes())


def load_dataset(path) -> Dataset:
    """Read a DSDS file; malformed input raises FormatError, never crashes."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError("dataset file truncated inside header", offset=len(data))
    magic, version, n, count = _HEADER.unpack_from(data, 0)
    if magic != _DATASET_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {_DATASET_MAGIC!r}", offset=0)
    if version != _DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}", offset=4)
    if n < 2:
        raise FormatError(f"invalid interval length N={n}", offset=8)
    item = 1 + 8 * n
    expected = count * item
    payload = data[_HEADER.size :]
    if len(payload) != expected:
        raise FormatError(
            f"payload holds {len(payload)} bytes but header promises {count} examples of {item} bytes",
            offset=_HEADER.size + min(len(payload), expected),
        )
    rec = np.dtype([("label", "u1"), ("iq", "<f4", (2, n))])
    arr = np.frombuffer(payload, dtype=rec)
    labels = arr["label"]
    bad = np.nonzero((labels != 0) & (labels != 1))[0]
    if bad.size:
        raise FormatError(f"label not in {{0,1}} in example {bad[0]}", offset=_HEADER.size + int(bad[0]) * item)
    iq = arr["iq"]
    if not np.all(np.isfinite(iq)):
        first = int(np.nonzero(~np.isfinite(iq).reshape(len(arr), -1).all(axis=1))[0][0])
        raise FormatError(f"non-finite sample data in example {first}", offset=_HEADER.size + first * item)
    return Dataset(n_samples=n, iq=iq.astype(np.float32, copy=True), labels=labels.astype(np.uint8, copy=True))


def _atomic_write(path: Path, blob: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)

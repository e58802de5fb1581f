"""Line-oriented experiment config files: `key = value` under [section] headers.

Unknown sections or keys are hard errors so experiment definitions cannot
silently drift.  The resolved config canonicalizes to a stable line list
whose SHA-256 is embedded in every output file.
"""

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .network import TrainConfig
from .signals import FadingSpec, ScenarioConfig

EXPERIMENT_KINDS = ("roc_compare", "transfer_unsup", "finetune_sweep")

FULL_SCALE_TRAIN = 20_000
FULL_SCALE_TEST = 20_000
FULL_SCALE_REPS = 10


@dataclass(frozen=True)
class TcaSettings:
    subsample: int = 1000
    kernel: str = "rbf"
    gamma: float | None = None  # None = median heuristic
    mu: float = 1.0
    m: int = 8
    ridge: float = 1e-3
    cap: int = 4000


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    source: ScenarioConfig
    target: ScenarioConfig | None = None
    train_size: int = 5000
    test_size: int = 5000
    seed: int = 0
    pfa_star: float = 0.1
    auc_range: tuple[float, float] = (0.0, 1000.0)
    out_dir: str | None = None
    figures: bool = True
    llr_estimated: bool = False
    train_cfg: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=15))
    finetune_cfg: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=1e-4, epochs=20))
    scratch_cfg: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=20))
    schedule: tuple[int, ...] = (0, 25, 50, 100, 200, 300, 500, 1000)
    repetitions: int = 3
    tca: TcaSettings = field(default_factory=TcaSettings)

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        if self.kind in ("transfer_unsup", "finetune_sweep") and self.target is None:
            raise ConfigError(f"experiment kind {self.kind!r} requires a [target] section")
        if self.train_size < 1 or self.test_size < 1:
            raise ConfigError("train_size and test_size must be >= 1")
        if not 0.0 < self.pfa_star < 1.0:
            raise ConfigError(f"pfa_star must be in (0, 1), got {self.pfa_star}")
        if self.auc_range[1] <= self.auc_range[0]:
            raise ConfigError(f"invalid auc_range {self.auc_range}")

    def full_scale(self) -> "ExperimentConfig":
        return replace(self, train_size=FULL_SCALE_TRAIN, test_size=FULL_SCALE_TEST, repetitions=FULL_SCALE_REPS)


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_snr(s: str):
    parts = [p.strip() for p in s.split(",")]
    if len(parts) == 1:
        return float(parts[0])
    if len(parts) == 2:
        return (float(parts[0]), float(parts[1]))
    raise ValueError(f"snr_db must be one value or 'lo,hi', got {s!r}")


def _parse_fading(s: str):
    low = s.strip().lower()
    if low == "none":
        return None
    parts = [p.strip() for p in low.split(",")]
    if parts[0] != "rayleigh" or len(parts) > 3:
        raise ValueError(f"fading must be 'none' or 'rayleigh[,taps[,decay_db]]', got {s!r}")
    n_taps = int(parts[1]) if len(parts) > 1 else 3
    decay = float(parts[2]) if len(parts) > 2 else 3.0
    return FadingSpec(n_taps=n_taps, decay_db_per_tap=decay)


def _parse_schedule(s: str) -> tuple[int, ...]:
    return tuple(int(p.strip()) for p in s.split(","))


def _parse_range(s: str) -> tuple[float, float]:
    parts = [p.strip() for p in s.split(",")]
    if len(parts) != 2:
        raise ValueError(f"expected 'lo,hi', got {s!r}")
    return (float(parts[0]), float(parts[1]))


def _parse_gamma(s: str):
    if s.strip().lower() == "median":
        return None
    return float(s)


_SCENARIO_KEYS = {
    "signal": str,
    "n_samples": int,
    "snr_db": _parse_snr,
    "bandwidth_fraction": float,
    "sps": int,
    "srrc_rolloff": float,
    "srrc_span_symbols": int,
    "fading": _parse_fading,
    "noise_variance": float,
}

_TRAIN_KEYS = {
    "learning_rate": float,
    "adam_beta1": float,
    "adam_beta2": float,
    "adam_eps": float,
    "batch_size": int,
    "epochs": int,
    "freeze_conv": _parse_bool,
}

_SCHEMA: dict[str, dict] = {
    "experiment": {
        "kind": str,
        "train_size": int,
        "test_size": int,
        "seed": int,
        "pfa_star": float,
        "auc_range": _parse_range,
        "out_dir": str,
        "figures": _parse_bool,
        "llr_estimated": _parse_bool,
        "schedule": _parse_schedule,
        "repetitions": int,
    },
    "source": _SCENARIO_KEYS,
    "target": _SCENARIO_KEYS,
    "train": _TRAIN_KEYS,
    "finetune": _TRAIN_KEYS,
    "scratch": _TRAIN_KEYS,
    "tca": {
        "subsample": int,
        "kernel": str,
        "gamma": _parse_gamma,
        "mu": float,
        "m": int,
        "ridge": float,
        "cap": int,
    },
}


def parse_config_text(text: str) -> dict[str, dict]:
    """Raw section/key/value extraction with schema validation."""
    sections: dict[str, dict] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip().lower()
            if name not in _SCHEMA:
                raise ConfigError(f"line {lineno}: unknown section [{name}]")
            if name in sections:
                raise ConfigError(f"line {lineno}: duplicate section [{name}]")
            sections[name] = {}
            current = name
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        if current is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, value = (p.strip() for p in line.split("=", 1))
        key = key.lower()
        if key not in _SCHEMA[current]:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in section [{current}]")
        if key in sections[current]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} in section [{current}]")
        try:
            sections[current][key] = _SCHEMA[current][key](value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    return sections


def _scenario_from(section: dict, name: str) -> ScenarioConfig:
    if "signal" not in section:
        raise ConfigError(f"[{name}] section needs a 'signal' key")
    kw = dict(section)
    kw["signal_kind"] = kw.pop("signal")
    try:
        return ScenarioConfig(**kw)
    except Exception as exc:
        raise ConfigError(f"invalid [{name}] scenario: {exc}") from exc


def _train_from(section: dict, defaults: TrainConfig) -> TrainConfig:
    try:
        return replace(defaults, **section)
    except Exception as exc:
        raise ConfigError(f"invalid training settings: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    return config_from_text(Path(path).read_text())


def config_from_text(text: str) -> ExperimentConfig:
    sections = parse_config_text(text)
    exp = sections.get("experiment", {})
    if "kind" not in exp:
        raise ConfigError("[experiment] section with a 'kind' key is required")
    if "source" not in sections:
        raise ConfigError("a [source] section is required")
    defaults = ExperimentConfig.__dataclass_fields__
    target = _scenario_from(sections["target"], "target") if "target" in sections else None
    try:
        cfg = ExperimentConfig(
            kind=exp["kind"],
            source=_scenario_from(sections["source"], "source"),
            target=target,
            train_cfg=_train_from(sections.get("train", {}), defaults["train_cfg"].default_factory()),
            finetune_cfg=_train_from(sections.get("finetune", {}), defaults["finetune_cfg"].default_factory()),
            scratch_cfg=_train_from(sections.get("scratch", {}), defaults["scratch_cfg"].default_factory()),
            tca=TcaSettings(**sections.get("tca", {})),
            **{k: v for k, v in exp.items() if k != "kind"},
        )
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _scenario_lines(prefix: str, s: ScenarioConfig | None) -> list[str]:
    if s is None:
        return [f"{prefix}=none"]
    return [
        f"{prefix}.signal={s.signal_kind}",
        f"{prefix}.n_samples={s.n_samples}",
        f"{prefix}.snr_db={s.snr_db!r}",
        f"{prefix}.bandwidth_fraction={s.bandwidth_fraction!r}",
        f"{prefix}.sps={s.sps}",
        f"{prefix}.srrc_rolloff={s.srrc_rolloff!r}",
        f"{prefix}.srrc_span_symbols={s.srrc_span_symbols}",
        f"{prefix}.fading={s.fading!r}",
        f"{prefix}.noise_variance={s.noise_variance!r}",
    ]


def _train_lines(prefix: str, t: TrainConfig) -> list[str]:
    return [
        f"{prefix}.{f.name}={getattr(t, f.name)!r}"
        for f in fields(TrainConfig)
        if f.name != "seed"  # training seeds are derived from the experiment seed
    ]


def canonical_lines(cfg: ExperimentConfig) -> list[str]:
    lines = [
        f"kind={cfg.kind}",
        f"train_size={cfg.train_size}",
        f"test_size={cfg.test_size}",
        f"seed={cfg.seed}",
        f"pfa_star={cfg.pfa_star!r}",
        f"auc_range={cfg.auc_range!r}",
        f"figures={cfg.figures}",
        f"llr_estimated={cfg.llr_estimated}",
        f"schedule={cfg.schedule!r}",
        f"repetitions={cfg.repetitions}",
        f"tca={cfg.tca!r}",
    ]
    lines += _scenario_lines("source", cfg.source)
    lines += _scenario_lines("target", cfg.target)
    lines += _train_lines("train", cfg.train_cfg)
    lines += _train_lines("finetune", cfg.finetune_cfg)
    lines += _train_lines("scratch", cfg.scratch_cfg)
    return sorted(lines)


def config_hash(cfg: ExperimentConfig) -> str:
    blob = "\n".join(canonical_lines(cfg)).encode()
    return hashlib.sha256(blob).hexdigest()

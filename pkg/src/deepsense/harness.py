"""Experiment drivers: dataset builds, detector training/evaluation, report files.

Each driver writes one CSV per curve arm plus a metrics table and a manifest
into the output directory, all stamped with the config hash and seed so a
rerun with the same config is byte-identical.  Figures are rendered next to
the CSVs unless disabled.
"""

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, TcaSettings, config_hash
from .detectors import RocCurve, energy_scores, estimated_covariance_pair, llr_scores, roc_auc, roc_from_scores
from .errors import DimensionError, UnsupportedScenarioError
from .metrics import auc_over_examples, covers_span, pd_at_pfa
from .network import TrainConfig, predict_scores, save_weights, train
from .signals import Dataset, ScenarioConfig, _atomic_write, analytic_covariances, build_dataset, derive_seed
from .transfer import (
    FinetunePlan,
    LinearKernel,
    RbfKernel,
    fit_latent_classifier,
    median_heuristic_gamma,
    run_finetune_sweep as _sweep,
    tca_fit,
    tca_sense_batch,
    tca_transform,
)

# seed-derivation tags, one per derived stream; dataset and training tags are
# combined with a scenario fingerprint so identical domains get identical data
# and identically seeded training regardless of their source/target role
_TAG_TRAIN_DATA = 1
_TAG_TEST_DATA = 2
_TAG_NN_TRAIN = 5
_TAG_TCA = 7
_TAG_SWEEP = 8


def _scenario_tag(s: ScenarioConfig) -> int:
    from .config import _scenario_lines

    blob = "\n".join(_scenario_lines("s", s)).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little") >> 1


@dataclass
class MetricReport:
    kind: str
    curves: dict[str, RocCurve] = field(default_factory=dict)
    metrics: dict[str, dict[str, float]] = field(default_factory=dict)
    sweep_rows: list[tuple] = field(default_factory=list)
    metadata: dict[str, str] = field(default_factory=dict)
    files: list[Path] = field(default_factory=list)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header: str, rows, meta: dict[str, str]) -> None:
    lines = [f"# {k}={v}" for k, v in meta.items()]
    lines.append(header)
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def _write_roc_csv(path: Path, roc: RocCurve, arm: str, meta: dict[str, str]) -> None:
    rows = zip(roc.thresholds, roc.pfa, roc.pd)
    _write_csv(path, "threshold,pfa,pd", rows, {**meta, "arm": arm})


def _dataset_checksum(ds: Dataset) -> str:
    h = hashlib.sha256()
    h.update(ds.labels.tobytes())
    h.update(ds.iq.tobytes())
    return h.hexdigest()


def _write_manifest(out_dir: Path, report: MetricReport) -> Path:
    lines = [
        f"tool=deepsense {__version__}",
        f"kind={report.kind}",
    ]
    lines += [f"{k}={v}" for k, v in report.metadata.items()]
    for f in sorted(report.files):
        digest = hashlib.sha256(f.read_bytes()).hexdigest()
        lines.append(f"file {f.name} sha256={digest}")
    path = out_dir / "manifest.txt"
    _atomic_write(path, ("\n".join(lines) + "\n").encode())
    return path


def _roc_of_weights(weights, test_set: Dataset) -> RocCurve:
    scores = predict_scores(test_set, weights)
    s = np.array([p for p, _ in scores])
    y = np.array([lab for _, lab in scores])
    return roc_from_scores(s[y == 0], s[y == 1])


def _roc_of_scores(scores: np.ndarray, labels: np.ndarray) -> RocCurve:
    return roc_from_scores(scores[labels == 0], scores[labels == 1])


def _arm_metrics(roc: RocCurve, pfa_star: float) -> dict[str, float]:
    return {"auc": roc_auc(roc), "pd_at_pfa": pd_at_pfa(roc, pfa_star)}


def _base_meta(cfg: ExperimentConfig) -> dict[str, str]:
    return {"config_hash": config_hash(cfg), "seed": str(cfg.seed), "tool_version": __version__}


def _emit(cfg: ExperimentConfig, report: MetricReport, out_dir: Path, meta: dict[str, str]) -> None:
    rows = [
        (arm, m["auc"], m["pd_at_pfa"], cfg.pfa_star)
        for arm, m in sorted(report.metrics.items())
    ]
    path = out_dir / "metrics.csv"
    _write_csv(path, "arm,auc,pd_at_pfa,pfa_star", rows, meta)
    report.files.append(path)


def run_roc_compare(cfg: ExperimentConfig, out_dir, threads: int = 1) -> MetricReport:
    """Reference comparison on one domain: CNN vs energy vs optimal LLR."""
    if cfg.source.signal_kind != "gaussian_nb":
        raise UnsupportedScenarioError("roc_compare needs the Gaussian scenario for its LLR arm")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    src_tag = _scenario_tag(cfg.source)
    train_ds = build_dataset(cfg.source.with_seed(derive_seed(cfg.seed, _TAG_TRAIN_DATA, src_tag)), cfg.train_size)
    test_ds = build_dataset(cfg.source.with_seed(derive_seed(cfg.seed, _TAG_TEST_DATA, src_tag)), cfg.test_size)

    weights = train(train_ds, replace(cfg.train_cfg, seed=derive_seed(cfg.seed, _TAG_NN_TRAIN, src_tag))).weights
    pair = analytic_covariances(cfg.source)
    report = MetricReport(kind=cfg.kind)
    report.curves["cnn"] = _roc_of_weights(weights, test_ds)
    report.curves["ed"] = _roc_of_scores(energy_scores(test_ds.iq), test_ds.labels)
    report.curves["llr"] = _roc_of_scores(llr_scores(test_ds.iq, pair), test_ds.labels)
    if cfg.llr_estimated:
        flat = train_ds.flat().astype(np.float64)
        est = estimated_covariance_pair(flat[train_ds.labels == 1], flat[train_ds.labels == 0])
        report.curves["llr_est"] = _roc_of_scores(llr_scores(test_ds.iq, est), test_ds.labels)

    meta = _base_meta(cfg)
    meta["test_examples"] = str(len(test_ds))
    meta["test_checksum"] = _dataset_checksum(test_ds)
    for arm, roc in report.curves.items():
        report.metrics[arm] = _arm_metrics(roc, cfg.pfa_star)
        path = out_dir / f"roc_{arm}.csv"
        _write_roc_csv(path, roc, arm, meta)
        report.files.append(path)
    _emit(cfg, report, out_dir, meta)
    report.metadata = meta
    if cfg.figures:
        from .plots import save_roc_figure

        fig = out_dir / "roc_compare.png"
        save_roc_figure(report.curves, fig, f"{cfg.source.signal_kind}: detector comparison")
        report.files.append(fig)
    _write_manifest(out_dir, report)
    return report


def _fit_tca_arm(cfg: ExperimentConfig, src_train: Dataset, tar_train: Dataset, tca: TcaSettings, seed: int):
    rng = np.random.default_rng(seed)
    n_src = min(tca.subsample, len(src_train))
    n_tar = min(tca.subsample, len(tar_train))
    src_idx = rng.choice(len(src_train), size=n_src, replace=False)
    tar_idx = rng.choice(len(tar_train), size=n_tar, replace=False)
    src_flat = src_train.flat()[src_idx].astype(np.float64)
    tar_flat = tar_train.flat()[tar_idx].astype(np.float64)
    if tca.kernel == "linear":
        kernel = LinearKernel()
    elif tca.kernel == "rbf":
        gamma = tca.gamma if tca.gamma is not None else median_heuristic_gamma(np.vstack([src_flat, tar_flat]))
        kernel = RbfKernel(gamma)
    else:
        raise DimensionError(f"unknown tca kernel {tca.kernel!r}")
    model = tca_fit(src_flat, tar_flat, kernel=kernel, m=tca.m, mu=tca.mu, cap=tca.cap)
    latent_src = tca_transform(model, src_flat)
    fit_latent_classifier(model, latent_src, src_train.labels[src_idx], ridge=tca.ridge)
    return model


def run_transfer_unsup(cfg: ExperimentConfig, out_dir, threads: int = 1) -> MetricReport:
    """Unsupervised transfer figure: same-domain, cross-domain, projection, ED."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    src_tag = _scenario_tag(cfg.source)
    tar_tag = _scenario_tag(cfg.target)
    src_train = build_dataset(cfg.source.with_seed(derive_seed(cfg.seed, _TAG_TRAIN_DATA, src_tag)), cfg.train_size)
    tar_train = build_dataset(cfg.target.with_seed(derive_seed(cfg.seed, _TAG_TRAIN_DATA, tar_tag)), cfg.train_size)
    tar_test = build_dataset(cfg.target.with_seed(derive_seed(cfg.seed, _TAG_TEST_DATA, tar_tag)), cfg.test_size)

    cross_w = train(src_train, replace(cfg.train_cfg, seed=derive_seed(cfg.seed, _TAG_NN_TRAIN, src_tag))).weights
    same_w = train(tar_train, replace(cfg.train_cfg, seed=derive_seed(cfg.seed, _TAG_NN_TRAIN, tar_tag))).weights
    model = _fit_tca_arm(cfg, src_train, tar_train, cfg.tca, derive_seed(cfg.seed, _TAG_TCA))

    report = MetricReport(kind=cfg.kind)
    report.curves["same"] = _roc_of_weights(same_w, tar_test)
    report.curves["cross"] = _roc_of_weights(cross_w, tar_test)
    report.curves["tca"] = _roc_of_scores(tca_sense_batch(model, tar_test.iq), tar_test.labels)
    report.curves["ed"] = _roc_of_scores(energy_scores(tar_test.iq), tar_test.labels)

    meta = _base_meta(cfg)
    meta["test_examples"] = str(len(tar_test))
    meta["test_checksum"] = _dataset_checksum(tar_test)
    for arm, roc in report.curves.items():
        report.metrics[arm] = _arm_metrics(roc, cfg.pfa_star)
        path = out_dir / f"roc_{arm}.csv"
        _write_roc_csv(path, roc, arm, meta)
        report.files.append(path)
    _emit(cfg, report, out_dir, meta)
    report.metadata = meta
    if cfg.figures:
        from .plots import save_roc_figure

        fig = out_dir / "transfer_unsup.png"
        save_roc_figure(
            report.curves, fig, f"{cfg.source.signal_kind} → {cfg.target.signal_kind}: no labeled target data"
        )
        report.files.append(fig)
    _write_manifest(out_dir, report)
    return report


def run_finetune_sweep(cfg: ExperimentConfig, out_dir, threads: int = 1) -> MetricReport:
    """Pd-vs-example-count sweep: fine-tune and scratch arms plus the ED line."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    src_tag = _scenario_tag(cfg.source)
    src_train = build_dataset(cfg.source.with_seed(derive_seed(cfg.seed, _TAG_TRAIN_DATA, src_tag)), cfg.train_size)
    base = train(src_train, replace(cfg.train_cfg, seed=derive_seed(cfg.seed, _TAG_NN_TRAIN, src_tag))).weights
    base_path = out_dir / "base.dsnw"
    save_weights(base, base_path)

    plan = FinetunePlan(
        schedule=cfg.schedule,
        repetitions=cfg.repetitions,
        finetune_cfg=cfg.finetune_cfg,
        scratch_cfg=cfg.scratch_cfg,
        seed=derive_seed(cfg.seed, _TAG_SWEEP),
        pfa_star=cfg.pfa_star,
    )
    result = _sweep(plan, None, cfg.target, base=base, test_size=cfg.test_size, threads=threads)
    ed_roc = _roc_of_scores(energy_scores(result.test_set.iq), result.test_set.labels)
    ed_pd = pd_at_pfa(ed_roc, cfg.pfa_star)

    report = MetricReport(kind=cfg.kind)
    meta = _base_meta(cfg)
    meta["test_examples"] = str(len(result.test_set))
    meta["test_checksum"] = _dataset_checksum(result.test_set)
    meta["ed_pd_at_pfa"] = _fmt(ed_pd)

    rows = [(c.n_examples, c.arm, c.rep, c.pd, cfg.pfa_star, c.seed) for c in result.cells]
    rows += [(n, "ed", 0, ed_pd, cfg.pfa_star, cfg.seed) for n in cfg.schedule]
    path = out_dir / "sweep.csv"
    _write_csv(path, "n_examples,arm,rep,pd,pfa,seed", rows, meta)
    report.files.append(path)
    report.sweep_rows = rows

    summary = result.summary()
    path = out_dir / "sweep_summary.csv"
    _write_csv(path, "n_examples,arm,mean_pd,std_pd", summary, meta)
    report.files.append(path)

    auc_rows = []
    for arm in ("fine_tune", "scratch"):
        curve = result.curve(arm)
        auc = auc_over_examples(curve, cfg.auc_range)
        clamped = not covers_span(curve, cfg.auc_range)
        auc_rows.append((arm, auc, cfg.auc_range[0], cfg.auc_range[1], clamped))
        report.metrics[arm] = {"auc_over_examples": auc, "pd_at_pfa": curve[-1][1]}
    ed_curve = [(cfg.auc_range[0], ed_pd), (cfg.auc_range[1], ed_pd)]
    auc_rows.append(("ed", auc_over_examples(ed_curve, cfg.auc_range), cfg.auc_range[0], cfg.auc_range[1], False))
    report.metrics["ed"] = {"auc_over_examples": auc_rows[-1][1], "pd_at_pfa": ed_pd}
    path = out_dir / "auc_summary.csv"
    _write_csv(path, "arm,auc_over_examples,lo,hi,clamped", auc_rows, meta)
    report.files.append(path)
    report.files.append(base_path)
    report.metadata = meta

    if cfg.figures:
        from .plots import save_sweep_figure

        fig = out_dir / "finetune_sweep.png"
        save_sweep_figure(
            summary,
            ed_pd,
            cfg.pfa_star,
            fig,
            f"{cfg.source.signal_kind} → {cfg.target.signal_kind}: fine-tuning",
        )
        report.files.append(fig)
    _write_manifest(out_dir, report)
    return report


_RUNNERS = {
    "roc_compare": run_roc_compare,
    "transfer_unsup": run_transfer_unsup,
    "finetune_sweep": run_finetune_sweep,
}


def run_experiment(cfg: ExperimentConfig, out_dir=None, threads: int = 1) -> MetricReport:
    if out_dir is None:
        out_dir = cfg.out_dir
    if out_dir is None:
        raise DimensionError("no output directory: set [experiment] out_dir or pass --out")
    return _RUNNERS[cfg.kind](cfg, out_dir, threads=threads)

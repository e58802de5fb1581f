"""Acceptance gate: every criterion at its stated tolerance, one line each.

Heavy criteria drive the real experiment harness at desk scale (train/test
5000, 3 seeds or repetitions).  Lines print through the capture so a plain
`pytest` run shows the verdicts.
"""

import time
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from deepsense.config import ExperimentConfig, TcaSettings
from deepsense.detectors import energy_scores, llr_score, llr_scores, roc_auc, roc_from_scores
from deepsense.harness import run_finetune_sweep, run_roc_compare
from deepsense.metrics import pd_at_pfa
from deepsense.network import NetworkSpec, TrainConfig, init_weights, load_weights, predict_scores, save_weights, train
from deepsense.signals import (
    FadingSpec,
    ScenarioConfig,
    analytic_covariances,
    build_dataset,
    load_dataset,
    save_dataset,
)
from deepsense.transfer import (
    RbfKernel,
    load_tca,
    median_heuristic_gamma,
    mmd_coefficient_matrix,
    mmd_distance,
    save_tca,
    tca_fit,
    tca_transform,
)

from test_network import fd_gradient_check
from test_serialization import fuzz, mutate

pytestmark = pytest.mark.acceptance

GAUSS32 = ScenarioConfig(signal_kind="gaussian_nb", n_samples=32, snr_db=-4.0, bandwidth_fraction=0.25)
QPSK_PLR = ScenarioConfig(signal_kind="qpsk", n_samples=32, snr_db=(-4.0, -2.0), fading=FadingSpec(3, 3.0))
QPSK_PL = ScenarioConfig(signal_kind="qpsk", n_samples=32, snr_db=(-4.0, -2.0))
BPSK_PL = ScenarioConfig(signal_kind="bpsk", n_samples=32, snr_db=(-4.0, -2.0))
BPSK_PLR = ScenarioConfig(signal_kind="bpsk", n_samples=32, snr_db=(-4.0, -2.0), fading=FadingSpec(3, 3.0))
QAM16_PL = ScenarioConfig(signal_kind="qam16", n_samples=32, snr_db=(-4.0, -2.0))
QAM16_PLR = ScenarioConfig(signal_kind="qam16", n_samples=32, snr_db=(-4.0, -2.0), fading=FadingSpec(3, 3.0))


@pytest.fixture
def announce(capsys):
    def _print(line):
        with capsys.disabled():
            print(line, flush=True)

    return _print


@contextmanager
def criterion(announce, number, summary):
    start = time.time()
    try:
        yield
    except BaseException:
        announce(f"criterion {number:2d} FAIL ({time.time() - start:6.1f}s): {summary}")
        raise
    announce(f"criterion {number:2d} PASS ({time.time() - start:6.1f}s): {summary}")


def desk_cfg(kind, source, target=None, seed=0, **kw):
    return ExperimentConfig(kind=kind, source=source, target=target, seed=seed, figures=False, **kw)


def test_criterion_1_gradient_oracle(announce):
    with criterion(announce, 1, "backprop vs central differences, rel err < 1e-4 over 5 seeds"):
        worst = 0.0
        for seed in (11, 22, 33, 44, 55):
            max_rel, skip_frac = fd_gradient_check(seed)
            worst = max(worst, max_rel)
            assert skip_frac < 0.05
            assert max_rel < 1e-4
        announce(f"    worst relative error {worst:.2e}")


def test_criterion_2_llr_density_oracle(announce):
    with criterion(announce, 2, "LLR equals Gaussian log-density ratio up to a constant (var < 1e-16)"):
        for n in (2, 4):
            cfg = replace(GAUSS32, n_samples=n)
            pair = analytic_covariances(cfg)
            h1 = multivariate_normal(mean=np.zeros(2 * n), cov=pair.c_x)
            h0 = multivariate_normal(mean=np.zeros(2 * n), cov=pair.c_z)
            xs = np.random.default_rng(100 + n).standard_normal((100, 2 * n))
            diffs = np.array([llr_score(x, pair) - (h1.logpdf(x) - h0.logpdf(x)) for x in xs])
            assert np.var(diffs) < 1e-16


@pytest.mark.slow
def test_criterion_3_reference_roc_ordering(announce, tmp_path):
    with criterion(announce, 3, "desk-scale ROC: AUC(LLR) >= AUC(CNN) >= AUC(ED), CNN within 0.08 of LLR at pfa 0.1"):
        metrics = {"cnn": [], "ed": [], "llr": []}
        for seed in (1, 2, 3):
            report = run_roc_compare(desk_cfg("roc_compare", GAUSS32, seed=seed), tmp_path / f"s{seed}")
            for arm in metrics:
                metrics[arm].append(report.metrics[arm])
        auc = {arm: np.mean([m["auc"] for m in ms]) for arm, ms in metrics.items()}
        pd = {arm: np.mean([m["pd_at_pfa"] for m in ms]) for arm, ms in metrics.items()}
        announce(
            f"    mean AUC llr={auc['llr']:.4f} cnn={auc['cnn']:.4f} ed={auc['ed']:.4f}; "
            f"pd@0.1 llr={pd['llr']:.3f} cnn={pd['cnn']:.3f} ed={pd['ed']:.3f}"
        )
        assert auc["llr"] >= auc["cnn"] >= auc["ed"]
        assert pd["llr"] - pd["cnn"] <= 0.08


def test_criterion_4_white_signal_degeneracy(announce):
    with criterion(announce, 4, "bandwidth_fraction 1: |AUC(LLR) - AUC(ED)| < 0.01"):
        cfg = replace(GAUSS32, bandwidth_fraction=1.0, seed=400)
        ds = build_dataset(cfg, 8000)
        pair = analytic_covariances(cfg)
        pos = ds.labels == 1
        auc_llr = roc_auc(roc_from_scores(llr_scores(ds.iq[~pos], pair), llr_scores(ds.iq[pos], pair)))
        auc_ed = roc_auc(roc_from_scores(energy_scores(ds.iq[~pos]), energy_scores(ds.iq[pos])))
        announce(f"    AUC gap {abs(auc_llr - auc_ed):.2e}")
        assert abs(auc_llr - auc_ed) < 0.01


@pytest.mark.slow
def test_criterion_5_mmd_tca_suite(announce):
    with criterion(announce, 5, "MMD two-formula 1e-10; constraint 1e-6; latent MMD checks"):
        rng = np.random.default_rng(5)
        for _ in range(5):
            n1, n2 = rng.integers(5, 40, size=2)
            x = rng.standard_normal((n1, 8))
            y = rng.standard_normal((n2, 8)) + 0.5
            kernel = RbfKernel(0.2)
            k = kernel.gram(np.vstack([x, y]), np.vstack([x, y]))
            trace_form = float(np.trace(k @ mmd_coefficient_matrix(n1, n2)))
            assert abs(mmd_distance(x, y, kernel) - trace_form) <= 1e-10

        # identical domains: latent MMD vanishes
        src = rng.standard_normal((50, 10))
        model = tca_fit(src, src.copy(), m=4)
        assert abs(mmd_distance(tca_transform(model, src), tca_transform(model, src.copy()), model.kernel)) < 1e-8

        # desk-scale 1000+1000 QPSK vs Gaussian subsample
        gauss = build_dataset(GAUSS32.with_seed(501), 1000).flat().astype(np.float64)
        qpsk = build_dataset(QPSK_PLR.with_seed(502), 1000).flat().astype(np.float64)
        kernel = RbfKernel(median_heuristic_gamma(np.vstack([gauss, qpsk])))
        model = tca_fit(qpsk, gauss, kernel=kernel, m=8)
        x = model.landmarks
        k = kernel.gram(x, x)
        n = len(x)
        h = np.eye(n) - np.ones((n, n)) / n
        constraint_gap = np.linalg.norm(model.projection.T @ k @ h @ k @ model.projection - np.eye(8), "fro")
        before = mmd_distance(qpsk, gauss, kernel)
        after = mmd_distance(tca_transform(model, qpsk), tca_transform(model, gauss), kernel)
        announce(f"    constraint gap {constraint_gap:.2e}; MMD {before:.4f} -> {after:.2e}")
        assert constraint_gap <= 1e-6
        assert after <= before


@pytest.mark.slow
def test_criterion_6_zero_shot_anchors(announce):
    with criterion(announce, 6, "QPSK->Gaussian zero shot: pretrained pd > 0.45, random init pd < 0.2"):
        test = build_dataset(GAUSS32.with_seed(600), 5000)
        pre_pds, rand_pds = [], []
        for seed in (1, 2, 3):
            src = build_dataset(QPSK_PLR.with_seed(610 + seed), 5000)
            base = train(src, TrainConfig(epochs=15, seed=seed)).weights

            def pd_of(w):
                sc = predict_scores(test, w)
                s = np.array([p for p, _ in sc])
                y = np.array([lab for _, lab in sc])
                return pd_at_pfa(roc_from_scores(s[y == 0], s[y == 1]), 0.1)

            pre_pds.append(pd_of(base))
            rand_pds.append(pd_of(init_weights(NetworkSpec(32), seed=seed)))
        announce(f"    pretrained mean pd {np.mean(pre_pds):.3f}; random-init mean pd {np.mean(rand_pds):.3f}")
        assert np.mean(pre_pds) > 0.45
        assert np.mean(rand_pds) < 0.2


TABLE_ROWS = [
    ("bpsk_pl->qpsk_plr", BPSK_PL, QPSK_PLR),
    ("qpsk_plr->bpsk_pl", QPSK_PLR, BPSK_PL),
    ("qpsk_pl->qam16_plr", QPSK_PL, QAM16_PLR),
    ("qam16_pl->bpsk_plr", QAM16_PL, BPSK_PLR),
]


@pytest.mark.slow
@pytest.mark.parametrize("name,source,target", TABLE_ROWS, ids=[r[0] for r in TABLE_ROWS])
def test_criterion_7_finetune_beats_scratch(announce, tmp_path, name, source, target):
    with criterion(announce, 7, f"AUC over [0,1000]: fine-tune > scratch for {name}"):
        cfg = desk_cfg("finetune_sweep", source, target, seed=7)
        report = run_finetune_sweep(cfg, tmp_path)
        ft = report.metrics["fine_tune"]["auc_over_examples"]
        sc = report.metrics["scratch"]["auc_over_examples"]
        announce(f"    {name}: fine-tune {ft:.1f} vs scratch {sc:.1f}")
        assert ft > sc


@pytest.mark.slow
def test_criterion_8_ed_crossover(announce, tmp_path):
    with criterion(announce, 8, "QPSK->Gaussian scratch arm first beats ED between points 100 and 500"):
        cfg = desk_cfg("finetune_sweep", QPSK_PLR, GAUSS32, seed=8)
        report = run_finetune_sweep(cfg, tmp_path)
        ed_pd = report.metrics["ed"]["pd_at_pfa"]
        curve = dict()
        for n, arm, rep, pd, _, _ in report.sweep_rows:
            if arm == "scratch":
                curve.setdefault(n, []).append(pd)
        means = {n: float(np.mean(v)) for n, v in curve.items()}
        crossing = next((n for n in sorted(means) if means[n] > ed_pd), None)
        announce(f"    ED pd {ed_pd:.3f}; scratch means {[f'{n}:{means[n]:.2f}' for n in sorted(means)]}")
        announce(f"    first crossing at n={crossing}")
        assert crossing is not None
        assert 100 < crossing <= 500


@pytest.mark.slow
def test_criterion_9_cli_determinism(announce, tmp_path):
    from deepsense.cli import main

    with criterion(announce, 9, "CLI reruns byte-identical, including --threads 4"):
        cfg_text = (
            "[experiment]\nkind = finetune_sweep\ntrain_size = 200\ntest_size = 200\nseed = 9\n"
            "schedule = 0,16,32\nrepetitions = 2\nfigures = false\n"
            "[source]\nsignal = qpsk\nn_samples = 8\nsnr_db = -4,-2\nfading = rayleigh,3,3\n"
            "[target]\nsignal = gaussian_nb\nn_samples = 8\nsnr_db = -4\n"
            "[train]\nepochs = 1\nbatch_size = 32\n[finetune]\nepochs = 1\nbatch_size = 32\n"
            "[scratch]\nepochs = 1\nbatch_size = 32\n"
        )
        cfg_file = tmp_path / "exp.cfg"
        cfg_file.write_text(cfg_text)
        outs = []
        for run, threads in (("r1", "1"), ("r2", "1"), ("r4", "4")):
            out = tmp_path / run
            assert main(["finetune-sweep", "--config", str(cfg_file), "--out", str(out), "--threads", threads]) == 0
            outs.append(out)
        for name in ("sweep.csv", "sweep_summary.csv", "auc_summary.csv", "manifest.txt", "base.dsnw"):
            blobs = {o.name: (o / name).read_bytes() for o in outs}
            assert blobs["r1"] == blobs["r2"] == blobs["r4"], name

        roc_cfg = tmp_path / "roc.cfg"
        roc_cfg.write_text(
            "[experiment]\nkind = roc_compare\ntrain_size = 200\ntest_size = 200\nseed = 9\nfigures = false\n"
            "[source]\nsignal = gaussian_nb\nn_samples = 8\nsnr_db = -4\n[train]\nepochs = 1\nbatch_size = 32\n"
        )
        a, b = tmp_path / "ra", tmp_path / "rb"
        assert main(["roc-compare", "--config", str(roc_cfg), "--out", str(a)]) == 0
        assert main(["roc-compare", "--config", str(roc_cfg), "--out", str(b), "--threads", "4"]) == 0
        for name in ("roc_cnn.csv", "roc_ed.csv", "roc_llr.csv", "metrics.csv", "manifest.txt"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_criterion_10_serialization(announce, tmp_path):
    with criterion(announce, 10, "bitwise round trips; 1000 mutated files never crash"):
        ds = build_dataset(replace(GAUSS32, n_samples=8).with_seed(10), 24)
        p1, p2 = tmp_path / "a.dsds", tmp_path / "b.dsds"
        save_dataset(ds, p1)
        save_dataset(load_dataset(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

        w = init_weights(NetworkSpec(n_samples=8, conv1_kernels=4, conv2_kernels=3, dense1_units=8), seed=1)
        w1, w2 = tmp_path / "a.dsnw", tmp_path / "b.dsnw"
        save_weights(w, w1)
        save_weights(load_weights(w1), w2)
        assert w1.read_bytes() == w2.read_bytes()

        rng = np.random.default_rng(2)
        model = tca_fit(rng.standard_normal((20, 6)), rng.standard_normal((20, 6)), m=3)
        t1, t2 = tmp_path / "a.dstc", tmp_path / "b.dstc"
        save_tca(model, t1)
        save_tca(load_tca(t1), t2)
        assert t1.read_bytes() == t2.read_bytes()

        total = 0
        for blob, loader, path, count in (
            (p1.read_bytes(), load_dataset, tmp_path / "f.dsds", 400),
            (w1.read_bytes(), load_weights, tmp_path / "f.dsnw", 400),
            (t1.read_bytes(), load_tca, tmp_path / "f.dstc", 200),
        ):
            parsed, rejected = fuzz(blob, loader, path, count, seed=1000 + count)
            total += parsed + rejected
        assert total == 1000

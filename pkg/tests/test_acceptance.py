"""Acceptance criteria, each checked at its stated tolerance.

The directional criteria (4-6) share one set of seeded runs: for seeds 0-9 the
default image-dependent preset is generated and the naive, latent and
unconditioned models are trained with the experiment schedule; the constant
preset is run with the latent and unconditioned models.
"""

import time

import numpy as np
import pytest

from acceptance_log import record
from oracles import brute_ap, simulate_human_recall
from reportbias import metrics as Mx
from reportbias import model as M
from reportbias import synthgen as S
from reportbias.cli import main, random_instance, sweep_modes
from reportbias.evaluation import compare_models
from reportbias.trainer import TrainConfig, gradient_check, train

pytestmark = pytest.mark.acceptance

SUITE_START = time.perf_counter()
SEEDS = range(10)
# frozen regression bound for criterion 4: half the mean gap of the pilot run
# (pilot over seeds 0-9: min 0.019, mean 0.024, max 0.026)
DECOUPLING_MARGIN = 0.012


@pytest.fixture(scope="module")
def runs():
    image_dependent, constant, seconds = [], [], []
    for seed in SEEDS:
        t0 = time.perf_counter()
        image_dependent.append(compare_models(seed, kinds=("naive", "latent", "unconditioned")))
        seconds.append(time.perf_counter() - t0)
        constant.append(compare_models(seed, S.preset("constant"),
                                       kinds=("latent", "unconditioned")))
    return image_dependent, constant, seconds


def test_criterion_01_gradient_check():
    t0 = time.perf_counter()
    modes = sweep_modes(24)
    errors = []
    for i, (bag, cond, warm) in enumerate(modes):
        params, x, y = random_instance(100 + i, regions=3, bag=bag, conditioned=cond,
                                       warmup=warm)
        errors.append(gradient_check(params, x, y, weight_decay=1e-3))
    cli_code = main(["gradcheck", "--instances", "24"])
    elapsed = time.perf_counter() - t0
    ok = max(errors) < 1e-5 and cli_code == 0 and elapsed < 30 and len(set(modes)) == 8
    assert record(1, "gradient correctness", ok,
                  f"{len(errors)} instances over 8 modes, max rel err {max(errors):.2e}, "
                  f"{elapsed:.1f}s")


def test_criterion_02_marginalization():
    rng = np.random.default_rng(2)
    params = M.init_params(1, 6, (5,), seed=2)
    for a in params.named_arrays().values():
        a[...] = rng.normal(0, 1.5, a.shape)
    pred = M.model_forward(params, rng.normal(size=(10_000, 1, 6)))
    mismatches = 0
    for v1, r, h1 in zip(pred.v1[:, 0], pred.r[:, 0], pred.h1[:, 0]):
        brute = 0.0
        for z, pz in ((0, 1.0 - v1), (1, v1)):
            brute += r[1, z] * pz
        mismatches += brute != h1
    assert record(2, "marginalization oracle", mismatches == 0,
                  f"{mismatches} of 10000 differ from enumeration")


def test_criterion_03_identity_collapse():
    rng = np.random.default_rng(3)
    worst = 0.0
    for bag in (False, True):
        params = M.init_params(4, 6, (5,), seed=3, bag_mode=bag, identity_relevance=True)
        for a in params.named_arrays().values():
            a[...] = rng.normal(0, 1.0, a.shape)
        v, h = M.predict(params, rng.normal(size=(500, 3 if bag else 1, 6)))
        worst = max(worst, float(np.max(np.abs(h - v))))
    corpus, _ = S.sample_corpus(S.GeneratorConfig(n_concepts=6, dim=8, n_train=800,
                                                   n_test=0, seed=3))
    common = dict(epochs=3, warmup_epochs=3, seed=3, hidden_sizes=(6,))
    _, latent = train(corpus.features, corpus.y, TrainConfig(kind="latent", **common))
    _, naive = train(corpus.features, corpus.y, TrainConfig(kind="naive", **common))
    diff = float(np.max(np.abs(np.subtract(latent.step_loss, naive.step_loss))))
    ok = worst <= 1e-12 and diff <= 1e-12 and len(latent.step_loss) == len(naive.step_loss)
    assert record(3, "identity collapse", ok,
                  f"max |h - v| {worst:.1e}, max step-loss diff {diff:.1e} "
                  f"over {len(latent.step_loss)} steps")


def test_criterion_04_decoupling_recovery(runs):
    image_dependent, _, seconds = runs
    gaps = np.array([c.maps["latent"]["v_vs_z"] - c.maps["naive"]["h_vs_z"]
                     for c in image_dependent])
    positive = int(np.sum(gaps > 0))
    ok = gaps.mean() >= DECOUPLING_MARGIN and positive >= 9 and max(seconds) < 180
    assert record(4, "decoupling recovery", ok,
                  f"mean gap {gaps.mean():.4f} vs bound {DECOUPLING_MARGIN}, "
                  f"min {gaps.min():.4f}, positive {positive}/10, "
                  f"slowest seed {max(seconds):.1f}s for three models")


def test_criterion_05_conditioning_ablation(runs):
    image_dependent, constant, _ = runs
    wins = sum(c.maps["latent"]["h_vs_y"] > c.maps["unconditioned"]["h_vs_y"]
               for c in image_dependent)
    diffs = np.array([c.maps["latent"]["h_vs_y"] - c.maps["unconditioned"]["h_vs_y"]
                      for c in constant])
    spread = float(np.std(diffs, ddof=1))
    ok = wins >= 9 and abs(diffs.mean()) <= spread
    assert record(5, "conditioning ablation", ok,
                  f"image-dependent wins {wins}/10; constant mean diff {diffs.mean():+.4f}, "
                  f"across-seed std {spread:.4f}")


def test_criterion_06_specialization(runs):
    image_dependent, _, _ = runs
    hy = [c.maps["latent"]["h_vs_y"] - c.maps["latent"]["v_vs_y"] for c in image_dependent]
    vz = [c.maps["latent"]["v_vs_z"] - c.maps["latent"]["h_vs_z"] for c in image_dependent]
    ok = min(hy) >= 0 and min(vz) >= 0
    assert record(6, "h-vs-v specialization", ok,
                  f"min mAP(h,y)-mAP(v,y) {min(hy):+.4f}, min mAP(v,z)-mAP(h,z) {min(vz):+.4f}")


def test_criterion_07_reporting_bias_estimator():
    # high presence priors so that every concept has enough present instances
    q = np.linspace(0.3, 0.95, 20)
    cfg = S.GeneratorConfig(n_train=10_000, n_test=0, k=1, omission="constant",
                            mention_probs=q.tolist(), presence_range=(0.8, 0.9), seed=7)
    corpus, _ = S.sample_corpus(cfg)
    report = Mx.reporting_bias(corpus.y, corpus.z)
    err = np.abs(report.estimate - (1 - q))
    assert record(7, "reporting-bias estimator", bool(np.all(err <= 0.02)),
                  f"max |r01 - (1 - q)| {err.max():.4f} over 20 concepts, "
                  f"min support {report.support.min()}")


def test_criterion_08_metric_oracles():
    worked = Mx.average_precision([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 1])
    ok_worked = worked == pytest.approx((1 + 2 / 3 + 3 / 4) / 3, abs=1e-15)

    rng = np.random.default_rng(8)
    ap_err = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 60))
        scores, labels = np.round(rng.random(n), 2), rng.integers(0, 2, n)
        labels[rng.integers(n)] = 1
        ap_err = max(ap_err, abs(Mx.average_precision(scores, labels) - brute_ap(scores, labels)))

    nor_mismatch = 0
    for _ in range(1000):
        p = rng.random(int(rng.integers(1, 7)))
        prod = 1.0
        for pi in p:
            prod *= 1.0 - pi
        nor_mismatch += M.noisy_or(p) != 1.0 - prod

    qs = [0.3, 0.5, 0.7, 0.9]
    cfg = S.GeneratorConfig(n_concepts=4, dim=4, n_train=10_000, n_test=0, k=5,
                            omission="constant", mention_probs=qs, seed=8)
    hr = Mx.human_recall(S.sample_corpus(cfg)[0].refs)
    mc = np.array([simulate_human_recall(q, 5, 5000, rng) for q in qs])
    phr_err = float(np.max(np.abs(hr - mc)))

    ok = ok_worked and ap_err <= 1e-12 and nor_mismatch == 0 and phr_err <= 0.02
    assert record(8, "metric oracles", ok,
                  f"worked AP {worked:.6f}, brute-force AP err {ap_err:.1e} on 100, "
                  f"noisy-OR mismatches {nor_mismatch}/1000, human recall vs Monte Carlo "
                  f"{phr_err:.4f}")


def test_criterion_09_determinism(tmp_path):
    outputs = []
    for name in ("a", "b"):
        root = tmp_path / name
        codes = [main(["gen", "--seed", "4", "--out", str(root / "data")]),
                 main(["train", "--seed", "4", "--corpus", str(root / "data/train.jsonl"),
                       "--out", str(root / "m.ckpt")]),
                 main(["eval", "--seed", "4", "--checkpoint", str(root / "m.ckpt"),
                       "--corpus", str(root / "data/test.jsonl"), "--out", str(root / "eval")])]
        assert codes == [0, 0, 0]
        files = sorted(p for p in root.rglob("*") if p.is_file() and "timing" not in p.name)
        outputs.append({p.relative_to(root): p.read_bytes() for p in files})
    differing = [str(k) for k in outputs[0] if outputs[0][k] != outputs[1].get(k)]
    ok = not differing and outputs[0].keys() == outputs[1].keys()
    assert record(9, "determinism", ok,
                  f"{len(outputs[0])} files compared, differing: {differing or 'none'}")


def test_criterion_10_total_runtime():
    elapsed = time.perf_counter() - SUITE_START
    assert record(10, "acceptance suite runtime", elapsed < 600, f"{elapsed:.0f}s of 600s")

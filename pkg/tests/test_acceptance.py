"""End-to-end acceptance checks; each test reports one PASS/FAIL line in the terminal summary."""

import time

import numpy as np
import pytest
from oracles import NAMES, brute_force, fd_meta_gradient, loss_and_grad, rel_err

from metaperser import autodiff as ad
from metaperser import checkpoint as ckpt
from metaperser import study as st
from metaperser.baselines import prototype_probabilities
from metaperser.cli import main
from metaperser.config import ExperimentConfig
from metaperser.corpus import Batch, EmbeddingSequence
from metaperser.meta import AnnealSchedule, LSLRTable, inner_adapt, meta_gradient_csmt, unroll, vanilla_unroll
from metaperser.metrics import aggregate, score
from metaperser.model import PARAM_NAMES, ClassBalanceWeights, ModelParams, loss, loss_node, soft_targets, threshold_predictions

STUDY_METHODS = ("meta", "entire-few", "entire-zero", "random")
STUDY_SHOTS = (2, 4, 8, 16, 32)
STUDY_BUDGET_S = 15 * 60
ABLATION_ROTATIONS = 1


def multi_hot(rng, n, c=9):
    y = np.zeros((n, c))
    y[np.arange(n), rng.integers(0, c, n)] = 1
    extra = rng.random(n) < 0.3
    y[extra, rng.integers(0, c, extra.sum())] = 1
    return y


def small_problem(seed, n=6, L=2, D=4, H=6, C=9):
    rng = np.random.default_rng(seed)
    theta = ModelParams.random(L, D, H, C, rng=rng).replace({"layer_weights": rng.normal(size=L)})
    weights = ClassBalanceWeights.from_counts(rng.integers(1, 50, C), beta=0.99)
    return theta, (lambda: Batch(rng.normal(size=(n, L, D)), multi_hot(rng, n, C))), weights, rng


def test_gradient_correctness(criterion):
    with criterion(1, "first-order gradients match central differences") as notes:
        start = time.perf_counter()
        rng = np.random.default_rng(0)
        params = ModelParams.random(2, 8, 8, 9, rng=rng).replace({"layer_weights": rng.normal(size=2)})
        seqs = [EmbeddingSequence(f"u{i}", rng.normal(size=(2, 4, 8))) for i in range(8)]
        batch = Batch.from_pairs(zip(seqs, multi_hot(rng, 8)))
        w = ClassBalanceWeights.from_labels(batch.y, beta=0.99)
        nodes = params.variables()
        grads = ad.gradient(loss_node(nodes, batch, w), [nodes[n] for n in PARAM_NAMES])
        analytic = np.concatenate([g.value.ravel() for g in grads])
        flat, h = params.flat(), 1e-5
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            e = np.zeros_like(flat)
            e[i] = h
            fd[i] = (loss(params.from_flat(flat + e), batch, w) - loss(params.from_flat(flat - e), batch, w)) / (2 * h)
        err, elapsed = rel_err(analytic, fd), time.perf_counter() - start
        notes.append(f"rel err {err:.2e}")
        assert err <= 1e-5
        assert elapsed < 5.0


def quadratic_meta_grad(first_order_fraction, alpha=0.1):
    theta = ad.variable(1.0)
    half_square = lambda p: ad.scale(p["theta"] * p["theta"], 0.5)  # noqa: E731
    out = unroll({"theta": theta}, half_square, lambda n, s: alpha, 1, AnnealSchedule(first_order_fraction))
    (g,) = ad.gradient(half_square(out), [theta])
    return g.item()


def test_quadratic_closed_form(criterion):
    with criterion(2, "quadratic meta-gradient closed forms") as notes:
        second, first = quadratic_meta_grad(0.0), quadratic_meta_grad(1.0)
        notes.append(f"second order {second!r}, first order {first!r}")
        assert abs(second - 0.81) <= 1e-12
        assert abs(first - 0.90) <= 1e-12


def test_unrolled_meta_gradient_vs_finite_differences(criterion):
    with criterion(3, "unrolled meta-gradient matches central differences") as notes:
        start = time.perf_counter()
        theta, batch, weights, rng = small_problem(0)
        assert theta.num_parameters <= 200
        lslr = LSLRTable(rng.uniform(0.05, 0.3, size=(3, 2)))
        tasks = [batch(), batch()]
        g_theta, g_rates, _ = meta_gradient_csmt(theta, lslr, tasks, AnnealSchedule(0.0), 2, weights)
        fd_theta, fd_rates = fd_meta_gradient(theta, lslr.rates, [(b, b) for b in tasks], weights.weights)
        flat = np.concatenate([g_theta[n].ravel() for n in NAMES])
        e_theta, e_rates = rel_err(flat, fd_theta), rel_err(g_rates, fd_rates)
        notes.append(f"theta {e_theta:.1e}, rates {e_rates:.1e}")
        assert e_theta <= 1e-4 and e_rates <= 1e-4
        assert time.perf_counter() - start < 30.0


def test_degeneracy_equivalences(criterion):
    with criterion(4, "uniform LSLR, first-order and zero-rate degeneracies"):
        theta, batch, weights, rng = small_problem(5)
        # (a) uniform fixed rates are vanilla MAML, bit for bit
        b = batch()
        adapted = inner_adapt(theta, b, LSLRTable.uniform(3, 0.05, learnable=False), AnnealSchedule(0.0), 3, weights)
        vanilla = vanilla_unroll(theta.variables(), lambda p: loss_node(p, b, weights, soft_targets(b.y)), 0.05, 3)
        assert all(np.array_equal(adapted.params[n], vanilla[n].value) for n in NAMES)
        # (b) fully annealed meta-gradient is the outer gradient at the adapted point
        lslr = LSLRTable(rng.uniform(0.05, 0.3, size=(3, 3)))
        g, _, _ = meta_gradient_csmt(theta, lslr, [b], AnnealSchedule(1.0), 3, weights)
        _, expected = loss_and_grad(inner_adapt(theta, b, lslr, AnnealSchedule(1.0), 3, weights).params, b.x, b.y, weights.weights)
        for n in NAMES:
            np.testing.assert_allclose(g[n], expected[n], rtol=0, atol=1e-10)
        # (c) zero rates leave the plain task-loss gradient
        tasks = [batch(), batch(), batch()]
        g, _, _ = meta_gradient_csmt(theta, LSLRTable.uniform(2, 0.0), tasks, AnnealSchedule(0.3), 2, weights)
        for n in NAMES:
            plain = sum(loss_and_grad(theta, t.x, t.y, weights.weights)[1][n] for t in tasks) / len(tasks)
            np.testing.assert_allclose(g[n], plain, rtol=0, atol=1e-12)


def test_metrics_oracle(criterion):
    with criterion(5, "score() equals the brute-force counter"):
        gold = np.array([[1, 0], [1, 0], [0, 1], [1, 1]], dtype=bool)
        preds = np.array([[1, 0], [0, 1], [0, 1], [1, 0]], dtype=bool)
        r = score(preds, gold)
        assert (r.maF1, r.miF1, r.UA) == brute_force(preds.tolist(), gold.tolist())
        assert abs(r.maF1 - 0.65) <= 1e-12 and round(r.miF1, 4) == 0.6667 and abs(r.UA - 0.625) <= 1e-12
        rng = np.random.default_rng(1000)
        for _ in range(1000):
            n = int(rng.integers(1, 201))
            gold = rng.random((n, 9)) < rng.uniform(0.05, 0.4)
            gold[np.arange(n), rng.integers(0, 9, n)] = True
            preds = rng.random((n, 9)) < rng.uniform(0.0, 0.6)
            r = score(preds, gold)
            assert (r.maF1, r.miF1, r.UA) == brute_force(preds.tolist(), gold.tolist())


def test_prototype_similarity_properties(criterion):
    with criterion(6, "prototype similarity sums, scale invariance, closed form"):
        rng = np.random.default_rng(6)
        for _ in range(50):
            centers, f = rng.normal(size=(int(rng.integers(2, 10)), 16)), rng.normal(size=(32, 16))
            p = prototype_probabilities(centers, f)
            np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12)
            for lam in (1e-3, 0.7, 50.0):
                np.testing.assert_allclose(prototype_probabilities(centers, lam * f), p, rtol=0, atol=1e-12)
        two = prototype_probabilities([[2.0, 0.0], [0.0, 3.0]], [[5.0, 0.0]])[0]
        assert abs(two[0] - 0.7311) <= 1e-4 and abs(two[1] - 0.2689) <= 1e-4


def test_threshold_never_empty(criterion):
    with criterion(7, "thresholding 1e5 softmax vectors at 1/9 is never empty"):
        rng = np.random.default_rng(7)
        z = rng.normal(size=(100_000, 9)) * rng.uniform(1e-6, 30.0, size=(100_000, 1))
        e = np.exp(z - z.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        assert threshold_predictions(p).any(axis=1).all()


# -- synthetic study ------------------------------------------------------------


@pytest.fixture(scope="module")
def study():
    cfg = ExperimentConfig()
    start = time.perf_counter()
    tasks = st.synthetic_tasks(cfg)
    reports, _ = st.run_study(tasks, cfg, STUDY_METHODS, shots=STUDY_SHOTS)
    elapsed = time.perf_counter() - start
    means = {(r["method"], r["k"]): 100 * r["miF1"] for r in aggregate(reports)}
    return means, elapsed, len(tasks)


def test_method_ordering(study, criterion):
    means, elapsed, annotators = study
    with criterion(8, "Meta-PerSER > Entire-Few > Entire-Zero > Random at K=32") as notes:
        meta, few, zero, rand = (means[(m, 32)] for m in STUDY_METHODS)
        notes.append(f"miF1 {meta:.2f} / {few:.2f} / {zero:.2f} / {rand:.2f}, {elapsed:.0f}s")
        assert annotators == 10
        assert meta > few > zero > rand
        assert meta - few >= 2.0
        assert elapsed <= STUDY_BUDGET_S


def test_shot_trend(study, criterion):
    means, _, _ = study
    with criterion(9, "Meta-PerSER miF1 non-decreasing over K") as notes:
        curve = [means[("meta", k)] for k in STUDY_SHOTS]
        notes.append(" ".join(f"K{k}={v:.2f}" for k, v in zip(STUDY_SHOTS, curve)))
        assert all(b >= a - 0.5 for a, b in zip(curve, curve[1:]))


def test_ablation_grid(criterion):
    with criterion(10, "full toggle stack beats the no-enhancement row by 1 point") as notes:
        cfg = ExperimentConfig()
        rows = st.ablation_grid(st.synthetic_tasks(cfg), cfg, rotations=ABLATION_ROTATIONS)
        assert len(rows) == 16
        by = {tuple(r[t] for t in st.TOGGLES): 100 * r["miF1"] for r in rows}
        full, none = by[(True,) * 4], by[(False,) * 4]
        notes.append(f"full {full:.2f}, none {none:.2f}")
        assert full >= none + 1.0


# -- determinism and persistence ------------------------------------------------

PIPELINE = ["annotators=4", "samples=200", "hidden=32", "pretrain_epochs=3", "outer_steps=10", "val_interval=5", "seeds=3"]


def synth(out):
    assert main(["synth", "--out", str(out)] + [a for p in PIPELINE for a in ("--set", p)]) == 0


def run_pipeline(data, out):
    sets = [a for p in PIPELINE for a in ("--set", p)]
    sets += ["--set", f"manifest={data / 'annotations.jsonl'}", "--set", f"store={data / 'embeddings.mpsc'}"]
    assert main(["pretrain", "--out", str(out)] + sets) == 0
    assert main(["meta-train", "--out", str(out), "--init", str(out / "base.mpck")] + sets) == 0
    evaluate = ["evaluate", "--out", str(out), "--checkpoint", str(out / "meta.mpck"), "--base", str(out / "base.mpck")]
    assert main(evaluate + sets + ["--set", "shots=4,16"]) == 0


def test_determinism_and_persistence(criterion, tmp_path):
    with criterion(11, "bitwise-reproducible checkpoints and reports; lossless save/load"):
        synth(tmp_path / "d1")
        synth(tmp_path / "d2")
        for name in ("annotations.jsonl", "embeddings.mpsc"):
            assert (tmp_path / "d1" / name).read_bytes() == (tmp_path / "d2" / name).read_bytes(), name
        run_pipeline(tmp_path / "d1", tmp_path / "a")
        run_pipeline(tmp_path / "d1", tmp_path / "b")
        for name in ("base.mpck", "meta.mpck", "reports.jsonl", "shots.tsv", "report.txt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
        for name in ("base.mpck", "meta.mpck"):
            blob = (tmp_path / "a" / name).read_bytes()
            loaded = ckpt.load(tmp_path / "a" / name)
            ckpt.save(loaded, tmp_path / f"again-{name}")
            assert (tmp_path / f"again-{name}").read_bytes() == blob
            assert ckpt.load(tmp_path / f"again-{name}").equals(loaded)

import logging
import math

import numpy as np
import pytest

from metaperser import baselines as bl
from metaperser.corpus import AnnotationRecord, AnnotatorTask, Batch, sample_episode
from metaperser.errors import ContractError
from metaperser.meta import LSLRTable, evaluate, meta_test
from metaperser.model import ClassBalanceWeights, ModelParams, loss
from metaperser.synth import AnnotatorProfile, SynthPreset, generate_synthetic, preset

CFG = bl.PretrainConfig(epochs=3, hidden=16, batch_size=32)


@pytest.fixture(scope="module")
def corpus():
    tasks, _ = generate_synthetic(preset("seen", dim=12, frames=2), samples=120, seed=0)
    return tasks


def episode(task, seed=0, k=16, q=40):
    return sample_episode(task, k, q, seed)


def weights_for(tasks):
    return ClassBalanceWeights.from_labels(bl.union_batch(tasks)[0].y, 0.999)


def renamed(task, new_id):
    return AnnotatorTask(new_id, [AnnotationRecord(r.utt_id, new_id, r.session, r.labels) for r in task.records], task.store)


def test_single_annotator_pretraining_is_plain_supervised(corpus):
    a, _ = bl.pretrain_base([corpus[0]], corpus[1], CFG)
    b, _ = bl.pretrain_base([renamed(corpus[0], "someone-else")], corpus[1], CFG)
    assert a.equals(b)


def test_duplicate_annotators_do_not_change_the_loss(corpus):
    params = ModelParams.random(2, 12, 8, 9, rng=np.random.default_rng(0))
    w = weights_for(corpus[:1])
    single, _ = bl.union_batch([corpus[0]])
    double, _ = bl.union_batch([corpus[0], renamed(corpus[0], "twin")])
    assert loss(params, double, w) == pytest.approx(loss(params, single, w), rel=1e-14)


def test_pretraining_fits_a_separable_corpus():
    p = SynthPreset([AnnotatorProfile("A", np.full(9, 1 / 9), np.eye(9))], separation=4.0)
    tasks, _ = generate_synthetic(p, samples=2000, seed=0)
    params, history = bl.pretrain_base(tasks, None, bl.PretrainConfig(epochs=60, hidden=64))
    assert evaluate(params, tasks[0].batch()).miF1 >= 0.9
    assert history[-1]["train_loss"] < history[0]["train_loss"]


def test_validation_selects_lowest_loss_epoch(corpus):
    params, history = bl.pretrain_base(corpus[2:], corpus[1], CFG)
    best = min(history, key=lambda h: h["val_loss"])
    w = weights_for(corpus[2:])
    assert loss(params, corpus[1].batch(), w) == best["val_loss"]


def test_entire_few_with_zero_rate_is_entire_zero(corpus):
    base, _ = bl.pretrain_base(corpus[2:], corpus[1], CFG)
    ep = episode(corpus[0])
    w = weights_for(corpus[2:])
    assert bl.entire_few(base, ep.train, ep.test, bl.FinetuneConfig(rate=0.0), w) == bl.entire_zero(base, ep.test)


def test_entire_zero_equals_meta_test_without_steps(corpus):
    base, _ = bl.pretrain_base(corpus[2:], corpus[1], CFG)
    ep = episode(corpus[0], seed=4)
    w = weights_for(corpus[2:])
    assert meta_test(base, LSLRTable.uniform(5, 0.3), ep.train, ep.test, 0, w) == bl.entire_zero(base, ep.test)


def test_zero_base_predicts_everything_and_ua_is_positive_rate(corpus):
    ep = episode(corpus[0])
    r = bl.entire_zero(ModelParams.zeros(2, 12, 8, 9), ep.test)
    assert r.UA == pytest.approx(ep.test.y.mean(axis=0).mean(), abs=1e-12)


def test_linear_few_counts_and_frozen_tensors(corpus):
    base, _ = bl.pretrain_linear(corpus[2:], corpus[1], CFG)
    init = ModelParams.random(2, 12, CFG.hidden, 9, rng=np.random.default_rng(CFG.seed))
    assert np.array_equal(base["linear1.weight"], init["linear1.weight"])
    assert bl.trainable_count(base, bl.LINEAR_TRAINABLE) == 2 + CFG.hidden * 9 + 9
    ep = episode(corpus[0])
    adapted = bl.finetune(base, ep.train, bl.FinetuneConfig(rate=0.1), weights_for(corpus[2:]), bl.LINEAR_TRAINABLE)
    assert np.array_equal(adapted["linear1.weight"], base["linear1.weight"])
    assert np.array_equal(adapted["linear1.bias"], base["linear1.bias"])
    assert not np.array_equal(adapted["linear2.weight"], base["linear2.weight"])


def test_multihead_with_one_annotator_matches_pooled(corpus):
    mh = bl.pretrain_multihead([corpus[0]], corpus[1], CFG)
    pooled, _ = bl.pretrain_base([corpus[0]], corpus[1], CFG)
    assert mh.model(corpus[0].annotator_id).equals(pooled)


def test_multi_few_is_reproducible_and_trunk_frozen(corpus):
    mh = bl.pretrain_multihead(corpus[2:], corpus[1], CFG)
    assert sorted(mh.heads) == sorted(t.annotator_id for t in corpus[2:])
    ep = episode(corpus[0])
    w = weights_for(corpus[2:])
    cfg = bl.FinetuneConfig(rate=0.05)
    assert bl.multi_few(mh, ep.train, ep.test, cfg, w, seed=3) == bl.multi_few(mh, ep.train, ep.test, cfg, w, seed=3)
    params = mh.with_head(bl._fresh_head(CFG.hidden, 9, np.random.default_rng(3)))
    adapted = bl.finetune(params, ep.train, cfg, w, bl.HEAD)
    for n in bl.TRUNK:
        assert np.array_equal(adapted[n], mh.trunk[n])


# -- prototype similarity -------------------------------------------------------


def test_equidistant_sample_is_split_evenly():
    p = bl.prototype_probabilities([[1.0, 0.0], [0.0, 1.0]], [[1.0, 1.0]])
    np.testing.assert_allclose(p, [[0.5, 0.5]], rtol=0, atol=1e-15)


def test_unit_and_orthogonal_similarity_closed_form():
    p = bl.prototype_probabilities([[2.0, 0.0], [0.0, 3.0]], [[5.0, 0.0]])[0]
    assert abs(p[0] - 0.7311) <= 1e-4 and abs(p[1] - 0.2689) <= 1e-4
    assert p[0] == pytest.approx(math.e / (math.e + 1), abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_three_prototypes_match_scalar_recomputation(seed):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(3, 6))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    f = rng.normal(size=6)
    f /= np.linalg.norm(f)
    sims = [sum(c[i] * f[i] for i in range(6)) for c in centers]
    denom = sum(math.exp(s) for s in sims)
    expected = [math.exp(s) / denom for s in sims]
    np.testing.assert_allclose(bl.prototype_probabilities(centers, f[None])[0], expected, rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_prototype_sum_and_scale_invariance(seed):
    rng = np.random.default_rng(seed)
    centers, f = rng.normal(size=(5, 8)), rng.normal(size=(20, 8))
    p = bl.prototype_probabilities(centers, f)
    np.testing.assert_allclose(p.sum(axis=1), 1, rtol=0, atol=1e-12)
    for lam in (1e-3, 0.5, 7.0, 1e4):
        np.testing.assert_allclose(bl.prototype_probabilities(centers, lam * f), p, rtol=0, atol=1e-12)


def test_zero_feature_is_uniform_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        p = bl.prototype_probabilities(np.eye(3), np.zeros((1, 3)))
    np.testing.assert_allclose(p, np.full((1, 3), 1 / 3), atol=1e-15)
    assert "zero-norm" in caplog.text


def test_prototypes_cover_only_present_emotions():
    y = np.zeros((4, 9))
    y[[0, 1], 2] = 1
    y[2, 5] = 1
    y[3, [2, 7]] = 1
    f = np.arange(12.0).reshape(4, 3)
    protos = bl.PrototypeSet.from_features(f, y)
    assert protos.emotions == (2, 5, 7)
    np.testing.assert_allclose(protos.centers[0], f[[0, 1, 3]].mean(axis=0))


def test_entire_sim_never_predicts_uncovered_classes(corpus):
    base, _ = bl.pretrain_base(corpus[2:], corpus[1], CFG)
    ep = episode(corpus[0], k=4)
    covered = ep.train.y.any(axis=0)
    r = bl.entire_sim(base, ep.train, ep.test)
    assert 0.0 <= r.miF1 <= 1.0
    assert not covered.all()


def test_overlapping_sets_rejected(corpus):
    base = ModelParams.zeros(2, 12, 8, 9)
    ep = episode(corpus[0])
    with pytest.raises(ContractError):
        bl.entire_sim(base, ep.train, ep.train)
    with pytest.raises(ContractError):
        bl.entire_few(base, ep.train, ep.train, bl.FinetuneConfig(), ClassBalanceWeights.uniform(9))


# -- random baseline ----------------------------------------------------------------


def balanced_gold(n=128):
    y = np.zeros((n, 9))
    y[np.arange(n), np.arange(n) % 9] = 1
    return Batch(np.zeros((n, 1, 1)), y)


def test_random_is_reproducible():
    b = balanced_gold()
    assert bl.random_baseline(b, 5) == bl.random_baseline(b, 5)
    assert bl.random_baseline(b, 5) != bl.random_baseline(b, 6)


def test_random_baseline_is_monte_carlo_stable():
    b = balanced_gold()
    first = np.mean([[r.maF1, r.miF1, r.UA] for r in (bl.random_baseline(b, s) for s in range(1000))], axis=0)
    second = np.mean([[r.maF1, r.miF1, r.UA] for r in (bl.random_baseline(b, s) for s in range(1000, 2000))], axis=0)
    assert np.max(np.abs(first - second)) <= 0.005
    assert first[0] < 1.0

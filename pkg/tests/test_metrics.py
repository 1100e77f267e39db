import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import brute_force

from metaperser.errors import ContractError
from metaperser.metrics import EpisodeReport, aggregate, format_table, score


def hot(sets, c):
    out = np.zeros((len(sets), c), dtype=bool)
    for i, s in enumerate(sets):
        out[i, list(s)] = True
    return out


def test_worked_two_class_example():
    gold = hot([{0}, {0}, {1}, {0, 1}], 2)
    preds = hot([{0}, {1}, {1}, {0}], 2)
    r = score(preds, gold)
    assert r.maF1 == pytest.approx(0.65, abs=1e-15)
    assert r.miF1 == pytest.approx(6 / 9, abs=1e-15)
    assert r.UA == pytest.approx(0.625, abs=1e-15)


def test_perfect_predictor():
    gold = hot([{0, 3}, {2}, {8}, {1, 4, 5}], 9)
    r = score(gold, gold)
    assert (r.maF1, r.miF1, r.UA) == (1.0, 1.0, 1.0)


def test_single_label_micro_f1_is_accuracy():
    rng = np.random.default_rng(3)
    g = rng.integers(0, 9, 50)
    p = np.where(rng.random(50) < 0.6, g, rng.integers(0, 9, 50))
    r = score(np.eye(9, dtype=bool)[p], np.eye(9, dtype=bool)[g])
    assert r.miF1 == pytest.approx(np.mean(p == g), abs=1e-15)


def test_length_mismatch():
    with pytest.raises(ContractError):
        score(np.ones((3, 9)), np.ones((4, 9)))


def random_case(rng):
    n = int(rng.integers(1, 201))
    gold = rng.random((n, 9)) < rng.uniform(0.05, 0.4)
    gold[np.arange(n), rng.integers(0, 9, n)] = True
    preds = rng.random((n, 9)) < rng.uniform(0.05, 0.6)
    preds[np.arange(n), rng.integers(0, 9, n)] = True
    return preds, gold


def test_score_matches_brute_force_exactly():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        preds, gold = random_case(rng)
        r = score(preds, gold)
        assert (r.maF1, r.miF1, r.UA) == brute_force(preds.tolist(), gold.tolist())


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_permutation_invariances(seed):
    rng = np.random.default_rng(seed)
    preds, gold = random_case(rng)
    base = score(preds, gold)
    rows = rng.permutation(len(gold))
    r = score(preds[rows], gold[rows])
    assert (r.maF1, r.miF1, r.UA) == pytest.approx((base.maF1, base.miF1, base.UA), abs=1e-12)
    cols = rng.permutation(9)
    r = score(preds[:, cols], gold[:, cols])
    assert r.maF1 == pytest.approx(base.maF1, abs=1e-12)
    assert r.UA == pytest.approx(base.UA, abs=1e-12)
    for m in (r.maF1, r.miF1, r.UA):
        assert 0.0 <= m <= 1.0


def test_aggregate_single_report_is_identity():
    rep = EpisodeReport(0.3, 0.4, 0.5, seed=0, annotator="a", method="m", k=32)
    (row,) = aggregate([rep])
    assert (row["maF1"], row["miF1"], row["UA"]) == (0.3, 0.4, 0.5)


def test_aggregate_weights_annotators_equally():
    reps = [EpisodeReport(0.4, 0.4, 0.4, seed=s, annotator="a") for s in range(3)]
    reps += [EpisodeReport(0.6, 0.6, 0.6, seed=s, annotator="b") for s in range(10)]
    (row,) = aggregate(reps)
    assert row["miF1"] == pytest.approx(0.5, abs=1e-15)


def test_aggregate_matches_recomputation():
    rng = np.random.default_rng(5)
    table = rng.random((5, 10, 3))
    reps = [
        EpisodeReport(*table[a, s], seed=s, annotator=f"ann{a}", method="meta", k=32)
        for a in range(5)
        for s in range(10)
    ]
    (row,) = aggregate(reps)
    # spreadsheet style: column of annotator means, then their average
    annotator_means = [[sum(table[a, s, m] for s in range(10)) / 10 for a in range(5)] for m in range(3)]
    expected = [sum(col) / 5 for col in annotator_means]
    assert [row["maF1"], row["miF1"], row["UA"]] == pytest.approx(expected, abs=1e-14)
    assert row["episodes"] == 50 and row["annotators"] == 5


def test_aggregate_rejects_mixed_scenarios():
    with pytest.raises(ContractError):
        aggregate([EpisodeReport(0, 0, 0, scenario="seen"), EpisodeReport(0, 0, 0, scenario="unseen")])


def test_format_table_uses_one_decimal_percent():
    text = format_table([{"method": "meta", "k": 32, "maF1": 0.3567, "miF1": 0.5, "UA": 0.82849}])
    assert "35.7" in text and "50.0" in text and "82.8" in text

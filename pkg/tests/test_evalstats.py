import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from scipy import stats as sps

from fedturn import evalstats
from fedturn.evalstats import CENTRAL_GRID, FEDERATED_GRID
from fedturn.exceptions import EmptyMatrix, LengthMismatch, NTooSmall

classes = st.lists(st.integers(0, 2), min_size=1, max_size=200)


# --- confusion and metrics ------------------------------------------------------

def test_confusion_perfect_is_diagonal():
    y = [0, 1, 2, 2, 1, 0, 0]
    assert np.array_equal(evalstats.confusion(y, y), np.diag([3, 2, 2]))


def test_confusion_all_off_vs_all_left():
    cm = evalstats.confusion([0] * 7, [1] * 7)
    expected = np.zeros((3, 3), int)
    expected[1, 0] = 7
    assert np.array_equal(cm, expected)


def test_confusion_hand_count():
    cm = evalstats.confusion([0, 1, 1, 2, 2, 0], [0, 0, 1, 2, 2, 2])
    assert cm.tolist() == [[1, 1, 0], [0, 1, 0], [1, 0, 2]]


def test_confusion_errors():
    with pytest.raises(LengthMismatch):
        evalstats.confusion([0, 1], [0])
    with pytest.raises(ValueError):
        evalstats.confusion([3], [0])


def test_metrics_diagonal_all_ones():
    m = evalstats.metrics_from_confusion(np.diag([4, 5, 6]))
    assert m.weighted_accuracy == m.average_f1 == 1.0
    assert m.per_class_accuracy.tolist() == m.per_class_f1.tolist() == [1.0] * 3


def test_metrics_hand_example():
    m = evalstats.metrics_from_confusion([[1, 1, 0], [0, 1, 0], [1, 0, 2]])
    np.testing.assert_allclose(m.per_class_accuracy, [0.5, 1.0, 2 / 3], atol=1e-12)
    np.testing.assert_allclose(m.per_class_f1, [0.5, 2 / 3, 0.8], atol=1e-12)
    assert m.average_f1 == pytest.approx(0.6556, abs=1e-4)
    assert m.weighted_accuracy == pytest.approx(4 / 6, abs=1e-12)


def test_absent_class_scores_zero():
    m = evalstats.evaluate_predictions([0, 0, 1, 1], [0, 0, 1, 1])
    assert m.per_class_f1.tolist() == [1.0, 1.0, 0.0]
    assert m.average_f1 == pytest.approx(2 / 3)


def test_empty_matrix():
    with pytest.raises(EmptyMatrix):
        evalstats.metrics_from_confusion(np.zeros((3, 3), int))


@given(classes, st.randoms())
def test_weighted_accuracy_is_plain_accuracy(labels, rnd):
    preds = [rnd.choice([0, 1, 2]) for _ in labels]
    m = evalstats.evaluate_predictions(preds, labels)
    direct = sum(p == t for p, t in zip(preds, labels)) / len(labels)
    assert abs(m.weighted_accuracy - direct) <= 1e-12
    for v in (*m.per_class_accuracy, *m.per_class_f1, m.average_f1):
        assert 0.0 <= v <= 1.0


@given(classes, st.randoms(), st.integers(2, 5))
def test_f1_invariant_to_duplication(labels, rnd, k):
    preds = [rnd.choice([0, 1, 2]) for _ in labels]
    a = evalstats.evaluate_predictions(preds, labels)
    b = evalstats.evaluate_predictions(preds * k, labels * k)
    np.testing.assert_allclose(a.per_class_f1, b.per_class_f1, rtol=1e-12)
    assert a.average_f1 == pytest.approx(b.average_f1, rel=1e-12)


def test_metrics_to_dict_keys():
    d = evalstats.evaluate_predictions([0, 1, 2], [0, 1, 1]).to_dict()
    assert {"weighted_accuracy", "average_f1", "f1_off", "f1_left", "f1_right",
            "accuracy_off", "accuracy_left", "accuracy_right", "confusion"} == set(d)


# --- paired t-test -------------------------------------------------------------------

def test_t_test_hand_example():
    t, p = evalstats.paired_t_test([1, 2, 3], [0, 0, 0])
    assert t == pytest.approx(2 * math.sqrt(3), abs=1e-12)
    assert t == pytest.approx(3.4641, abs=1e-4)
    assert p == pytest.approx(0.0742, abs=1e-3)


def test_t_test_identical_inputs():
    assert evalstats.paired_t_test([0.9, 0.8, 0.7], [0.9, 0.8, 0.7]) == (0.0, 1.0)


def test_t_test_constant_nonzero_difference():
    t, p = evalstats.paired_t_test([2.0, 3.0, 4.0], [1.0, 2.0, 3.0])
    assert t == math.inf and p == 0.0


def test_t_test_errors():
    with pytest.raises(LengthMismatch):
        evalstats.paired_t_test([1, 2, 3], [1, 2])
    with pytest.raises(NTooSmall):
        evalstats.paired_t_test([1], [2])


samples = st.lists(st.floats(-100, 100), min_size=2, max_size=30)


@given(samples, st.randoms())
def test_t_test_matches_scipy(x, rnd):
    y = [v + rnd.uniform(-5, 5) for v in x]
    d = np.subtract(x, y)
    assume(np.std(d) > 1e-6 * (1 + np.abs(d).max()))
    t, p = evalstats.paired_t_test(x, y)
    ref = sps.ttest_rel(x, y)
    assert t == pytest.approx(ref.statistic, rel=1e-9, abs=1e-9)
    assert abs(p - ref.pvalue) < 1e-8
    assert 0.0 < p <= 1.0


@given(samples, st.randoms())
def test_t_test_antisymmetric(x, rnd):
    y = [v + rnd.uniform(-1, 1) for v in x]
    t1, p1 = evalstats.paired_t_test(x, y)
    t2, p2 = evalstats.paired_t_test(y, x)
    assert t1 == -t2 and p1 == pytest.approx(p2, abs=1e-15)


@given(st.floats(0.5, 50), st.floats(0.5, 50), st.floats(0, 1))
def test_betainc_matches_scipy(a, b, x):
    from scipy.special import betainc
    assert abs(evalstats.betainc(a, b, x) - betainc(a, b, x)) < 1e-10


# --- grid search ----------------------------------------------------------------------

def test_grid_sizes():
    assert len(evalstats.expand_grid(CENTRAL_GRID)) == 3 * 6 * 3 * 3 == 162
    assert len(evalstats.expand_grid(FEDERATED_GRID)) == 2 * 1 * 1 * 3 * 3 * 3 == 54


def test_grid_values_from_hyperparameter_table():
    assert CENTRAL_GRID["window_steps"] == [5, 10, 15, 20, 30, 40]
    assert FEDERATED_GRID["clients_per_round"] == [10, 25, "all"]
    assert FEDERATED_GRID["rounds"] == [100] and FEDERATED_GRID["local_epochs"] == [1, 5, 10]


def fake_runner(cell, seed):
    score = (cell["a"] * 7 + cell["b"] * 3) % 10 / 10
    if cell["a"] == 2 and cell["b"] == 2:
        raise RuntimeError("boom")
    return evalstats.evaluate_predictions([0] * 10, [0] * int(10 * score) + [1] * (10 - int(10 * score)))


def test_grid_search_single_point():
    results = evalstats.grid_search({"a": [1], "b": [3]}, fake_runner)
    assert len(results) == 1 and results[0].assignment == {"a": 1, "b": 3}


def test_grid_search_sorted_and_records_failures():
    results = evalstats.grid_search({"a": [0, 1, 2], "b": [0, 1, 2]}, fake_runner, seed=3)
    assert len(results) == 9
    ok = [r for r in results if r.metrics is not None]
    f1s = [r.metrics.average_f1 for r in ok]
    assert f1s == sorted(f1s, reverse=True)
    assert results[-1].metrics is None and "boom" in results[-1].error
    assert all(r.seed == 3 for r in results)


def test_grid_search_order_independent():
    grid = {"a": [0, 1, 2], "b": [0, 1, 2]}
    serial = evalstats.grid_search(grid, fake_runner)
    parallel = evalstats.grid_search(grid, fake_runner, n_jobs=2)
    key = [(r.assignment, None if r.metrics is None else r.metrics.average_f1) for r in serial]
    assert key == [(r.assignment, None if r.metrics is None else r.metrics.average_f1)
                   for r in parallel]
    shuffled = evalstats.sort_results(list(reversed(serial)))
    assert [r.index for r in shuffled] == [r.index for r in serial]


def test_grid_csv_round_trip(tmp_path):
    results = evalstats.grid_search({"a": [0, 1, 2], "b": [0, 1, 2]}, fake_runner)
    path = tmp_path / "grid.csv"
    evalstats.write_grid_csv(results, path)
    header = path.read_text().splitlines()[0].split(",")
    assert header == ["a", "b", "weighted_accuracy", "f1_off", "f1_left", "f1_right",
                      "average_f1", "seed", "runtime_s", "error"]
    rows = evalstats.read_grid_csv(path)
    assert len(rows) == 8
    assert rows[0]["average_f1"] == results[0].metrics.average_f1


def grid_row(bs, lr, f1, **extra):
    row = {"batch_size": bs, "learning_rate": lr, "window_steps": 5, "hidden_units": 50,
           "weighted_accuracy": f1, "average_f1": f1}
    row.update(extra)
    return row


def test_pairing_takes_best_per_key_and_intersects():
    central = [grid_row(64, 1e-3, 0.9), grid_row(128, 1e-3, 0.8), grid_row(256, 1e-3, 0.7),
               grid_row(64, 1e-3, 0.95, window_steps=10)]
    federated = [grid_row(64, 1e-3, 0.7, clients_per_round=10),
                 grid_row(64, 1e-3, 0.85, clients_per_round="all"),
                 grid_row(128, 1e-3, 0.75), grid_row(128, 1e-4, 0.5)]
    pairs = evalstats.pair_results(central, federated)
    assert [(c["average_f1"], f["average_f1"]) for c, f in pairs] == [(0.9, 0.85), (0.8, 0.75)]
    report = evalstats.ttest_report(central, federated)
    assert [r["n_pairs"] for r in report] == [2, 2]
    assert [r["metric"] for r in report] == ["weighted_accuracy", "average_f1"]

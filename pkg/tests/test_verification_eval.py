import json

import numpy as np
import pytest

from errors import ValidationError
from verification_eval import (
    EvalReport,
    PairList,
    best_threshold,
    evaluate_suite,
    fold_indices,
    gap_to_real,
    make_toy_pairs,
    pair_list_names,
    read_pair_list,
    report_from_accuracies,
    tenfold_accuracy,
    tenfold_accuracy_from_scores,
    write_pair_list,
)


def brute_force_tenfold(sims, labels):
    """Exhaustive threshold search per fold, written with plain loops."""
    n = len(sims)
    bounds = [0]
    base, extra = divmod(n, 10)
    for k in range(10):
        bounds.append(bounds[-1] + base + (1 if k < extra else 0))
    accuracies = []
    for k in range(10):
        test = list(range(bounds[k], bounds[k + 1]))
        train = [i for i in range(n) if i not in test]
        values = sorted(set(float(sims[i]) for i in train))
        candidates = [-np.inf] + [(a + b) / 2.0 for a, b in zip(values, values[1:])] + [np.inf]
        best_thr, best_correct = None, -1
        for thr in candidates:
            correct = sum(1 for i in train if (sims[i] > thr) == labels[i])
            if correct > best_correct:
                best_thr, best_correct = thr, correct
        correct = sum(1 for i in test if (sims[i] > best_thr) == labels[i])
        accuracies.append(correct / len(test))
    return float(np.mean(accuracies))


def test_tenfold_matches_exhaustive_reference():
    rng = np.random.default_rng(0)
    for _ in range(20):
        labels = rng.random(200) < 0.5
        # rounding produces ties, which exercise the midpoint candidates
        sims = np.round(np.where(labels, rng.normal(0.5, 0.3, 200), rng.normal(0.0, 0.3, 200)), 2)
        accuracy, _, _ = tenfold_accuracy_from_scores(sims, labels)
        assert accuracy == brute_force_tenfold(sims, labels)


def test_constant_scores_on_balanced_pairs_give_chance():
    sims = np.ones(20)
    labels = np.array([True, False] * 10)
    accuracy, folds, thresholds = tenfold_accuracy_from_scores(sims, labels)
    assert accuracy == 0.5
    assert all(t == -np.inf for t in thresholds)


def test_accuracy_invariant_to_positive_scaling():
    rng = np.random.default_rng(1)
    sims = rng.uniform(-1, 1, 100)
    labels = rng.random(100) < 0.5
    assert tenfold_accuracy_from_scores(sims, labels)[0] == tenfold_accuracy_from_scores(2 * sims, labels)[0]


def test_best_threshold_prefers_lowest_on_ties():
    sims = np.array([0.1, 0.2])
    labels = np.array([True, False])
    threshold, accuracy = best_threshold(sims, labels)
    assert threshold == -np.inf
    assert accuracy == 0.5


def test_folds_are_contiguous_and_balanced():
    folds = fold_indices(205)
    assert len(folds) == 10
    sizes = [len(f) for f in folds]
    assert max(sizes) - min(sizes) <= 1
    assert np.concatenate(folds).tolist() == list(range(205))


def test_too_few_pairs_rejected():
    with pytest.raises(ValidationError):
        tenfold_accuracy_from_scores(np.zeros(9), np.zeros(9, dtype=bool))


def test_gap_to_real_arithmetic():
    assert gap_to_real(94.26, 92.30) == 1.96
    assert gap_to_real(94.26, 90.18) == 4.08


def test_report_average_and_json(tmp_path):
    report = report_from_accuracies({"a": 90.0, "b": 92.0, "c": 94.0}, baseline_avg=94.26)
    assert report.avg == pytest.approx(92.0, abs=1e-9)
    assert report.gap_to_real == pytest.approx(2.26)
    path = report.write_json(str(tmp_path / "report.json"), config_digest="abc")
    with open(path) as f:
        data = json.load(f)
    assert data["config_digest"] == "abc"
    assert "tool_version" in data
    assert EvalReport.read_json(path) == report


def test_pair_list_file_format(tmp_path):
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    pairs = PairList(pairs=[(str(a), str(b), True), (str(b), str(a), False)], name="set1")
    path = tmp_path / "lists" / "set1.tsv"
    write_pair_list(pairs, str(path))
    assert path.read_text().splitlines() == ["../a.png\t../b.png\t1", "../b.png\t../a.png\t0"]
    reread = read_pair_list(str(path))
    assert reread.name == "set1"
    assert reread.pairs == pairs.pairs


def test_malformed_pair_line_rejected(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("a.png\tb.png\tyes\n")
    with pytest.raises(ValidationError):
        read_pair_list(str(path))


def test_toy_pairs_alternate_and_are_seeded(toy_corpus):
    pairs = make_toy_pairs(toy_corpus, 20, seed=3)
    assert [same for _, _, same in pairs.pairs] == [True, False] * 10
    assert pairs.pairs == make_toy_pairs(toy_corpus, 20, seed=3).pairs
    by_path = {toy_corpus.abspath(r): r.subject_id for r in toy_corpus.records}
    for x, y, same in pairs.pairs:
        assert x != y
        assert (by_path[x] == by_path[y]) == same


def test_suite_reports_percentages(toy_corpus, encoder):
    pairs = make_toy_pairs(toy_corpus, 40, seed=0, name="toy")
    accuracy = tenfold_accuracy(pairs, encoder)
    report = evaluate_suite([pairs], encoder, baseline_avg=94.26)
    assert report.per_set["toy"] == pytest.approx(100.0 * accuracy)
    assert report.avg == pytest.approx(100.0 * accuracy)
    assert report.gap_to_real == gap_to_real(94.26, report.avg)


def test_suite_keeps_same_named_sets_apart(toy_corpus, encoder, tmp_path):
    pairs = make_toy_pairs(toy_corpus, 20, seed=0)
    paths = [write_pair_list(pairs, str(tmp_path / d / "pairs.txt")) for d in ("lfw", "cfp")]
    assert pair_list_names(paths) == ["lfw/pairs", "cfp/pairs"]
    assert pair_list_names([paths[0], str(tmp_path / "agedb.txt")]) == ["pairs", "agedb"]

    same_name = [read_pair_list(p) for p in paths]
    with pytest.raises(ValidationError):
        evaluate_suite(same_name, encoder, baseline_avg=94.26)

    named = [read_pair_list(p, name=n) for p, n in zip(paths, pair_list_names(paths))]
    report = evaluate_suite(named, encoder, baseline_avg=94.26)
    assert list(report.per_set) == ["lfw/pairs", "cfp/pairs"]
    assert report.avg == pytest.approx(report.per_set["lfw/pairs"])


def test_missing_pair_files_rejected(encoder, tmp_path):
    pairs = PairList(pairs=[(str(tmp_path / "x.png"), str(tmp_path / "y.png"), True)] * 10)
    with pytest.raises(ValidationError):
        tenfold_accuracy(pairs, encoder)

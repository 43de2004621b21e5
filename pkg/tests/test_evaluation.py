import numpy as np
import pytest

from meltriage.errors import FormatError, MetricUndefinedError, ValidationError
from meltriage.evaluation import (
    BootstrapCI,
    CalibrationReport,
    EvaluationConfig,
    ScoredSet,
    auprc,
    auroc,
    calibration,
    ece,
    evaluate,
    evaluate_partition,
    pr_points,
    read_predictions,
    roc_points,
    specificity_at_sensitivity,
    stratified_bootstrap_ci,
    write_calibration,
    write_curve,
    write_predictions,
)


def _pairwise_auroc(scores, labels):
    """O(n^2) oracle: concordant pairs count 1, tied scores count 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    total = wins = 0.0
    for i in range(len(s)):
        for j in range(len(s)):
            if y[i] == 1 and y[j] == 0:
                total += 1
                if s[i] > s[j]:
                    wins += 1
                elif s[i] == s[j]:
                    wins += 0.5
    return wins / total


def _scan_auprc(scores, labels):
    """Ranked-threshold oracle: AP as recall-weighted precision steps."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    npos = int((y == 1).sum())
    ap = 0.0
    prev_recall = 0.0
    for t in sorted(set(s.tolist()), reverse=True):
        predicted = s >= t
        tp = int((predicted & (y == 1)).sum())
        precision = tp / int(predicted.sum())
        recall = tp / npos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def test_auroc_hand_values():
    assert auroc((0.1, 0.4, 0.35, 0.8), (0, 0, 1, 1)) == 0.75
    assert auroc((0.1, 0.4, 0.35, 0.8), (1, 1, 0, 0)) == 0.25
    assert auroc((0.5, 0.5), (1, 0)) == 0.5  # tie gives half credit
    assert auroc((0.2, 0.9), (0, 1)) == 1.0


def test_auprc_hand_values():
    assert auprc((0.9, 0.8, 0.7), (1, 0, 1)) == pytest.approx(5 / 6, abs=1e-9)
    assert auprc((0.3, 0.2, 0.9), (1, 1, 1)) == 1.0
    assert auprc((0.4, 0.3, 0.2, 0.1), (0, 0, 0, 1)) == 0.25


def test_metrics_reject_one_class():
    with pytest.raises(MetricUndefinedError):
        auroc((0.1, 0.2), (0, 0))
    with pytest.raises(MetricUndefinedError):
        auroc((0.1, 0.2), (1, 1))
    with pytest.raises(MetricUndefinedError):
        auprc((0.1, 0.2), (0, 0))
    with pytest.raises(MetricUndefinedError):
        roc_points((0.1, 0.2), (1, 1))


def test_auroc_equals_pairwise_oracle():
    # small-n exhaustive cross-check with heavy ties; the large sweep runs
    # in the acceptance suite
    rng = np.random.default_rng(17)
    for _ in range(300):
        n = int(rng.integers(2, 13))
        y = rng.integers(0, 2, size=n)
        if y.min() == y.max():
            y[0] = 1 - y[0]
        s = rng.integers(0, 5, size=n) / 4.0  # coarse grid forces ties
        assert auroc(s, y) == _pairwise_auroc(s, y)


def test_auprc_equals_scan_oracle():
    rng = np.random.default_rng(23)
    for _ in range(300):
        n = int(rng.integers(2, 13))
        y = rng.integers(0, 2, size=n)
        if (y == 1).sum() == 0:
            y[0] = 1
        s = rng.integers(0, 5, size=n) / 4.0
        assert auprc(s, y) == pytest.approx(_scan_auprc(s, y), abs=1e-12)


def test_label_flip_identity():
    rng = np.random.default_rng(31)
    for _ in range(100):
        n = int(rng.integers(2, 30))
        y = rng.integers(0, 2, size=n)
        if y.min() == y.max():
            y[0] = 1 - y[0]
        s = rng.random(n)
        assert auroc(s, y) + auroc(s, 1 - y) == pytest.approx(1.0, abs=1e-12)


def test_auroc_monotone_transform_invariance():
    rng = np.random.default_rng(37)
    s = rng.random(40)
    y = rng.integers(0, 2, size=40)
    y[0], y[1] = 0, 1
    warped = 1.0 / (1.0 + np.exp(-7.0 * (s - 0.5)))
    assert auroc(s, y) == auroc(warped, y)
    spec_raw, thr_raw = specificity_at_sensitivity(s, y, 0.9)
    spec_w, thr_w = specificity_at_sensitivity(warped, y, 0.9)
    assert spec_raw == spec_w
    assert thr_w == pytest.approx(
        1.0 / (1.0 + np.exp(-7.0 * (thr_raw - 0.5))), abs=1e-12
    )


def test_roc_point_enumeration():
    curve = roc_points((0.9, 0.1), (1, 0))
    np.testing.assert_array_equal(curve.points, [[0, 0], [0, 1], [1, 1]])
    np.testing.assert_array_equal(curve.thresholds, [np.inf, 0.9, 0.1])


def test_pr_first_point_is_top_precision():
    curve = pr_points((0.9, 0.9, 0.2), (1, 0, 1))
    # two cases tie at the top threshold, one of them positive
    assert curve.points[0, 1] == 0.5
    assert curve.thresholds[0] == 0.9


def test_curve_areas_match_metrics():
    rng = np.random.default_rng(41)
    for _ in range(200):
        n = int(rng.integers(2, 51))
        y = rng.integers(0, 2, size=n)
        if y.min() == y.max():
            y[0] = 1 - y[0]
        s = rng.choice([0.1, 0.25, 0.5, 0.7, 0.9], size=n)
        assert roc_points(s, y).trapezoid_area() == pytest.approx(
            auroc(s, y), abs=1e-12
        )
        assert pr_points(s, y).step_area() == pytest.approx(
            auprc(s, y), abs=1e-12
        )


def test_specificity_at_sensitivity_hand_case():
    scores = (0.9, 0.6, 0.3, 0.8, 0.4, 0.2)
    labels = (1, 1, 1, 0, 0, 0)
    spec, thr = specificity_at_sensitivity(scores, labels, 0.95)
    assert thr == 0.3
    assert spec == pytest.approx(1 / 3, abs=1e-12)
    # separable data reaches specificity 1 at any target
    spec, _ = specificity_at_sensitivity((0.9, 0.8, 0.2, 0.1), (1, 1, 0, 0), 0.99)
    assert spec == 1.0


def test_specificity_target_one_uses_min_positive():
    scores = (0.7, 0.5, 0.5, 0.1)
    labels = (1, 1, 0, 0)
    spec, thr = specificity_at_sensitivity(scores, labels, 1.0)
    assert thr == 0.5  # the lowest positive score
    assert spec == 0.5  # the tied negative counts as a false positive
    with pytest.raises(ValidationError):
        specificity_at_sensitivity(scores, labels, 0.0)
    with pytest.raises(ValidationError):
        specificity_at_sensitivity(scores, labels, 1.1)


def test_specificity_matches_exhaustive_scan():
    rng = np.random.default_rng(43)
    for _ in range(100):
        n = int(rng.integers(4, 30))
        y = rng.integers(0, 2, size=n)
        y[0], y[1] = 0, 1
        s = rng.choice(np.linspace(0, 1, 7), size=n)
        target = float(rng.uniform(0.05, 1.0))
        npos = int((y == 1).sum())
        nneg = n - npos
        best = None
        for t in sorted(set(s.tolist()), reverse=True):
            predicted = s >= t
            sens = int((predicted & (y == 1)).sum()) / npos
            if sens >= target:
                spec_here = 1 - int((predicted & (y == 0)).sum()) / nneg
                if best is None or t > best[1]:
                    best = (spec_here, t)
        got = specificity_at_sensitivity(s, y, target)
        assert got == pytest.approx(best, abs=1e-12)


def test_calibration_hand_value():
    report = calibration((0.2, 0.2, 0.8, 0.8), (0, 1, 1, 1), n_bins=2)
    assert report.ece == pytest.approx(0.25, abs=1e-12)
    lowb, highb = report.bins
    assert (lowb.count, lowb.mean_confidence, lowb.empirical_frequency) == (
        2,
        pytest.approx(0.2),
        0.5,
    )
    assert (highb.count, highb.mean_confidence, highb.empirical_frequency) == (
        2,
        pytest.approx(0.8),
        1.0,
    )


def test_calibration_perfect_predictor_and_edges():
    # predictor equal to each bin's empirical frequency scores ECE 0
    assert ece((0.25, 0.25, 0.25, 0.25), (1, 0, 0, 0), n_bins=2) == 0.0
    # prob 1.0 falls in the last (right-closed) bin
    assert ece((1.0,), (1,), n_bins=10) == 0.0
    report = calibration((1.0,), (1,), n_bins=4)
    assert report.bins[-1].count == 1
    assert all(b.count == 0 for b in report.bins[:-1])
    assert report.bins[0].mean_confidence is None
    with pytest.raises(ValidationError):
        calibration((0.5,), (1,), n_bins=0)
    with pytest.raises(ValidationError):
        calibration((1.5,), (1,), n_bins=4)


def test_calibration_empty_bins_contribute_zero():
    # all mass in two bins; six empty bins must not move the total
    few = ece((0.05, 0.95, 0.95), (0, 1, 0), n_bins=8)
    assert few == pytest.approx(
        (1 / 3) * abs(0.0 - 0.05) + (2 / 3) * abs(0.5 - 0.95), abs=1e-12
    )


def test_bootstrap_deterministic():
    rng = np.random.default_rng(47)
    s = rng.random(60)
    y = rng.integers(0, 2, size=60)
    y[0], y[1] = 0, 1
    a = stratified_bootstrap_ci(auroc, s, y, 200, seed=5)
    b = stratified_bootstrap_ci(auroc, s, y, 200, seed=5)
    assert (a.lower, a.upper, a.point_estimate) == (b.lower, b.upper, b.point_estimate)
    c = stratified_bootstrap_ci(auroc, s, y, 200, seed=6)
    assert (a.lower, a.upper) != (c.lower, c.upper)
    assert a.lower <= a.point_estimate <= a.upper


def test_bootstrap_replicates_keyed_by_index():
    # replicate r draws only from its own (seed, r) stream, so runs with
    # different R agree on the shared prefix
    s = np.array([0.9, 0.7, 0.4, 0.2, 0.6, 0.1])
    y = np.array([1, 1, 1, 0, 0, 0])
    seen_short: list[float] = []
    seen_long: list[float] = []

    def recording(sink):
        def metric(ss, yy):
            value = float(ss.mean())
            sink.append(value)
            return value
        return metric

    stratified_bootstrap_ci(recording(seen_short), s, y, 5, seed=9)
    stratified_bootstrap_ci(recording(seen_long), s, y, 12, seed=9)
    # first call in each run is the full-set point estimate
    assert seen_short[:6] == seen_long[:6]


def test_bootstrap_degenerate_cases():
    ci = stratified_bootstrap_ci(auroc, (0.8, 0.2), (1, 0), 100, seed=0)
    assert (ci.lower, ci.upper) == (1.0, 1.0)
    prevalence = lambda ss, yy: float(np.mean(yy))
    ci = stratified_bootstrap_ci(prevalence, np.linspace(0, 1, 10),
                                 [1, 1, 1, 0, 0, 0, 0, 0, 0, 0], 100, seed=0)
    assert ci.lower == ci.upper == 0.3


def test_bootstrap_rejects():
    with pytest.raises(ValidationError):
        stratified_bootstrap_ci(auroc, (0.5, 0.6), (1, 0), 0, seed=0)
    with pytest.raises(MetricUndefinedError):
        stratified_bootstrap_ci(auroc, (0.5, 0.6), (0, 0), 10, seed=0)


def test_scored_set_validation():
    good = ScoredSet(
        case_ids=("a", "b"),
        scores=np.array([0.2, 0.9]),
        labels=np.array([0, 1]),
    )
    assert good.n == 2
    assert good.tags == (frozenset(), frozenset())
    sub = good.subset([1])
    assert sub.case_ids == ("b",)
    assert sub.scores[0] == 0.9
    with pytest.raises(ValidationError):
        ScoredSet(("a",), np.array([1.5]), np.array([1]))
    with pytest.raises(ValidationError):
        ScoredSet(("a",), np.array([-0.1]), np.array([0]))
    with pytest.raises(ValidationError):
        ScoredSet(("a", "b"), np.array([0.5]), np.array([1]))
    with pytest.raises(ValidationError):
        ScoredSet(("a",), np.array([0.5]), np.array([2]))


def test_predictions_round_trip(tmp_path):
    sset = ScoredSet(
        case_ids=("C2", "C1", "C3"),
        scores=np.array([0.123456789012345, 0.5, 1.0]),
        labels=np.array([1, 0, 1]),
        tags=(frozenset({"scanner_b", "ood"}), frozenset(), frozenset({"x"})),
    )
    path = tmp_path / "pred.csv"
    write_predictions(path, sset, run_config={"seed": 1})
    text = path.read_text()
    assert text.startswith("# seed=1\ncase_id,prob_high,label,tags\n")
    assert "C2,0.123456789012345,high,ood;scanner_b" in text
    back = read_predictions(path)
    assert back.case_ids == sset.case_ids
    np.testing.assert_array_equal(back.scores, sset.scores)
    np.testing.assert_array_equal(back.labels, sset.labels)
    assert back.tags == sset.tags


def test_predictions_read_errors(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(ValidationError):
        read_predictions(empty)

    header_only = tmp_path / "header.csv"
    header_only.write_text("case_id,prob_high,label,tags\n")
    with pytest.raises(ValidationError):
        read_predictions(header_only)

    bad_header = tmp_path / "badhead.csv"
    bad_header.write_text("id,score\nC1,0.5\n")
    with pytest.raises(FormatError):
        read_predictions(bad_header)

    bad_prob = tmp_path / "badprob.csv"
    bad_prob.write_text("case_id,prob_high,label,tags\nC1,zero,high,\n")
    with pytest.raises(FormatError):
        read_predictions(bad_prob)

    bad_label = tmp_path / "badlabel.csv"
    bad_label.write_text("case_id,prob_high,label,tags\nC1,0.5,medium,\n")
    with pytest.raises(ValidationError):
        read_predictions(bad_label)

    short_row = tmp_path / "short.csv"
    short_row.write_text("case_id,prob_high,label,tags\nC1,0.5\n")
    with pytest.raises(FormatError):
        read_predictions(short_row)


def _demo_set(n=40, seed=3):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    y[0], y[1] = 0, 1
    s = np.clip(0.3 * rng.standard_normal(n) + 0.35 + 0.3 * y, 0.0, 1.0)
    tags = tuple(
        frozenset({"scanner_b"}) if i % 2 else frozenset() for i in range(n)
    )
    return ScoredSet(
        case_ids=tuple(f"C{i}" for i in range(n)),
        scores=s,
        labels=y.astype(np.int8),
        tags=tags,
    )


def test_evaluate_report_shape():
    sset = _demo_set()
    config = EvaluationConfig(
        bootstrap_replicates=50, n_bins=5, sensitivities=(0.95, 0.99), seed=4
    )
    report = evaluate(sset, config)
    assert report["n"] == sset.n
    assert report["n_high"] == int(sset.labels.sum())
    assert report["n_low"] == sset.n - report["n_high"]
    assert report["auroc"]["point"] == auroc(sset.scores, sset.labels)
    assert report["auprc"]["point"] == auprc(sset.scores, sset.labels)
    assert report["ece"]["point"] == ece(sset.scores, sset.labels, 5)
    assert set(report["specificity_at_sensitivity"]) == {"0.95", "0.99"}
    entry = report["specificity_at_sensitivity"]["0.95"]
    spec, thr = specificity_at_sensitivity(sset.scores, sset.labels, 0.95)
    assert entry["specificity"]["point"] == spec
    assert entry["threshold"] == thr
    assert report["auroc"]["lower"] <= report["auroc"]["point"] <= report["auroc"]["upper"]


def test_evaluate_partition_identity_and_missing():
    sset = _demo_set()
    config = EvaluationConfig(bootstrap_replicates=30, seed=2)
    tagged_everywhere = ScoredSet(
        case_ids=sset.case_ids,
        scores=sset.scores,
        labels=sset.labels,
        tags=tuple(frozenset({"all"}) for _ in range(sset.n)),
    )
    whole = evaluate(tagged_everywhere, config)
    part = evaluate_partition(tagged_everywhere, "all", config)
    assert part.pop("partition_tag") == "all"
    assert part == whole
    with pytest.raises(ValidationError, match="no_such_tag"):
        evaluate_partition(sset, "no_such_tag", config)


def test_evaluate_partition_matches_manual_subset():
    sset = _demo_set()
    config = EvaluationConfig(bootstrap_replicates=30, seed=2)
    manual = sset.subset([i for i in range(sset.n) if "scanner_b" in sset.tags[i]])
    part = evaluate_partition(sset, "scanner_b", config)
    direct = evaluate(manual, config)
    part.pop("partition_tag")
    assert part == direct


def test_write_curve_and_calibration(tmp_path):
    curve = roc_points((0.9, 0.1), (1, 0))
    curve_path = tmp_path / "roc.csv"
    write_curve(curve_path, curve, ("fpr", "tpr"))
    lines = curve_path.read_text().splitlines()
    assert lines[0] == "threshold,fpr,tpr"
    assert lines[1] == "inf,0.0,0.0"
    assert lines[-1] == "0.1,1.0,1.0"

    cal_path = tmp_path / "cal.csv"
    write_calibration(cal_path, calibration((1.0,), (1,), n_bins=2))
    lines = cal_path.read_text().splitlines()
    assert lines[0] == (
        "bin_lower,bin_upper,count,mean_confidence,empirical_frequency"
    )
    assert lines[1] == "0.0,0.5,0,,"
    assert lines[2] == "0.5,1.0,1,1.0,1.0"

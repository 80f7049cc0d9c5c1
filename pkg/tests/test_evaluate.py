import csv
import json
import warnings

import numpy as np
import pytest

from diffuae.data import NearestCenter, QuadraticClassifier, ring_centers
from diffuae.evaluate import (
    REPORT_CSV_COLUMNS,
    EvalError,
    EvalReport,
    attack_success_rate,
    build_report,
    class_stats_distance,
    flipped_label_rate,
    recomputed_success,
    restart_histogram,
    write_report,
)
from diffuae.guidance import AttackResult

CENTERS = ring_centers(4, 2.0)


def result(x0, y, y_a, success, first=None):
    return AttackResult(np.asarray(x0, float), success, first, [], y, y_a)


def test_asr_and_empty():
    rs = [result([0, 0], 0, 1, True, 0), result([0, 0], 0, 1, False)]
    assert attack_success_rate(rs) == 0.5
    with pytest.raises(EvalError):
        attack_success_rate([])


def test_flipped_label_rate_counts_only_successes():
    oracle = NearestCenter(CENTERS)
    rs = [
        result(CENTERS[0], 0, 1, True, 0),  # still class 0: a genuine adversarial example
        result(CENTERS[1], 0, 1, True, 0),  # became class 1: flipped
        result(CENTERS[1], 0, 1, False),  # failure, ignored
    ]
    rate, empty = flipped_label_rate(rs, oracle)
    assert rate == 0.5 and not empty
    with pytest.warns(UserWarning):
        assert flipped_label_rate(rs[2:], oracle) == (0.0, True)


def test_recomputed_success_targeted_and_untargeted():
    clf = QuadraticClassifier(CENTERS)
    rs = [result(CENTERS[1], 0, 1, True), result(CENTERS[2], 0, None, True), result(CENTERS[0], 0, None, False)]
    np.testing.assert_array_equal(recomputed_success(rs, clf), [True, True, False])


def test_class_stats_against_known_gaussians():
    rng = np.random.default_rng(0)
    n = 20_000
    labels = np.repeat(np.arange(4), n)
    x = CENTERS[labels] + 0.3 * rng.standard_normal((4 * n, 2))
    stats = class_stats_distance(x, labels, CENTERS, 0.3)
    for s in stats:
        assert s.n == n
        assert s.mean_shift < 4 * 0.3 * np.sqrt(2.0 / n)
        assert abs(s.cov_ratio - 1.0) < 0.05
    with pytest.raises(EvalError, match="need at least"):
        class_stats_distance(x[:10], labels[:10], CENTERS, 0.3)


def test_restart_histogram():
    rs = [result([0, 0], 0, 1, True, 0), result([0, 0], 0, 1, True, 2), result([0, 0], 0, 1, False)]
    assert restart_histogram(rs) == {"1": 1, "3": 1, "none": 1}


def test_report_bounds():
    with pytest.raises(EvalError):
        EvalReport(1.5, 0.0, False, 1, [], {})


def test_build_and_write_report(tmp_path):
    rng = np.random.default_rng(1)
    labels = np.arange(160) % 4
    rs = [result(CENTERS[k] + 0.1 * rng.standard_normal(2), k, (k + 1) % 4, bool(i % 3 == 0), 0) for i, k in enumerate(labels)]
    benign = CENTERS[labels] + 0.1 * rng.standard_normal((160, 2))
    rep = build_report(rs, NearestCenter(CENTERS), CENTERS, 0.1, {"s": 0.5}, QuadraticClassifier(CENTERS), benign, labels)
    assert rep.n_attacks == 160 and rep.flipped_label_rate == 0.0
    assert rep.flipped_label_rate_classifier == 0.0 and rep.benign_mean_shift < 0.1
    write_report(rep, tmp_path)
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["asr"] == rep.asr and data["config"] == {"s": 0.5}
    header = next(csv.reader((tmp_path / "report.csv").open()))
    assert header == REPORT_CSV_COLUMNS + ["cfg_s"]


def test_build_report_without_successes_is_quiet():
    labels = np.arange(120) % 4
    rs = [result(CENTERS[k], k, (k + 1) % 4, False) for k in labels]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        rep = build_report(rs, NearestCenter(CENTERS), CENTERS, 0.2)
    assert rep.flipped_label_empty and rep.asr == 0.0

import json
import random

import numpy as np
import pytest

from countclip.backends import ToyBackend
from countclip.curation import FetchError
from countclip.data import Sample
from countclip.evaluator import (
    EvalReport,
    RunResult,
    compare_runs,
    confusion_from_predictions,
    evaluate,
    predict_count,
    predict_counts,
    read_confusion_csv,
    render_confusion,
)


def test_exact_match_wins():
    rng = np.random.default_rng(0)
    img = rng.normal(size=12)
    # orthogonal to img: remove the img component from random rows
    cand = rng.normal(size=(9, 12))
    cand -= np.outer(cand @ img / (img @ img), img)
    cand[3] = img
    assert predict_count(img, cand) == 5


def test_ties_go_to_smallest_count():
    assert predict_count(np.ones(4), np.ones((9, 4))) == 2
    cand = np.zeros((9, 2))
    cand[:, 0] = 1.0
    cand[[4, 7]] = [3.0, 0.0]  # rows 4 and 7 tie after normalization with everything else
    assert predict_count(np.array([1.0, 0.0]), cand) == 2


def test_zero_norm_rejected():
    with pytest.raises(ValueError):
        predict_count(np.zeros(3), np.ones((9, 3)))
    with pytest.raises(ValueError):
        predict_counts(np.ones((2, 3)), np.ones((2, 8, 3)))


def test_report_identities():
    true = np.array([2, 2, 3, 10, 10, 10])
    pred = np.array([2, 5, 3, 10, 9, 10])
    r = EvalReport(confusion_from_predictions(true, pred), n_skipped=2)
    assert r.n_evaluated == 6 and r.accuracy == 4 / 6
    np.testing.assert_array_equal(r.confusion.sum(axis=1), [2, 1, 0, 0, 0, 0, 0, 0, 3])
    pc = r.per_class_accuracy
    assert pc[0] == 0.5 and pc[1] == 1.0 and np.isnan(pc[2]) and pc[8] == 2 / 3
    back = EvalReport.from_dict(json.loads(json.dumps(r.to_dict())))
    np.testing.assert_array_equal(back.confusion, r.confusion)
    assert back.n_skipped == 2


def test_rigged_backend_is_perfect(synthetic_task):
    report = evaluate(ToyBackend.rigged(synthetic_task), synthetic_task.validation)
    assert report.accuracy == 1.0
    assert (report.confusion == np.diag(np.diag(report.confusion))).all()
    assert report.n_evaluated == len(synthetic_task.validation)


def test_single_class_manifest(synthetic_task):
    fours = [s for s in synthetic_task.counting_pool if s.count == 4]
    report = evaluate(synthetic_task.backend(), fours)
    populated = np.flatnonzero(report.confusion.sum(axis=1))
    assert populated.tolist() == [2]


def test_repeatable_and_order_free(synthetic_task):
    backend = synthetic_task.backend(seed=1)
    items = list(synthetic_task.counting_pool)
    first = evaluate(backend, items)
    random.Random(0).shuffle(items)
    for report in (evaluate(backend, synthetic_task.counting_pool), evaluate(backend, items, batch_size=7)):
        np.testing.assert_array_equal(report.confusion, first.confusion)


def test_skips_are_reported(synthetic_task):
    good = synthetic_task.validation[0]

    def loader(item):
        if item.id == "dead":
            raise FetchError("http_404", permanent=True)
        return good.image

    items = [
        good,
        Sample("a photo of a cat", good.image),
        Sample("three cats", good.image, count=4),
        Sample("three cats", None, id="dead"),
        Sample("five cats", None, id="alive"),
    ]
    report = evaluate(synthetic_task.backend(), items, loader)
    assert report.n_evaluated == 2
    assert report.skip_reasons == {"no_count_word": 1, "count_mismatch": 1, "fetch:http_404": 1}
    assert report.n_skipped == 3
    with pytest.raises(ValueError, match="all skipped"):
        evaluate(synthetic_task.backend(), [Sample("three cats", None)])


def test_render_round_trip(tmp_path):
    conf = np.diag(np.arange(9)) + np.eye(9, k=1, dtype=int)
    report = EvalReport(conf)
    out = render_confusion(report, tmp_path / "nested" / "conf.png")
    assert out.exists() and out.stat().st_size > 0
    np.testing.assert_array_equal(read_confusion_csv(tmp_path / "nested" / "conf.csv"), conf)
    assert len((tmp_path / "nested" / "conf.csv").read_text().splitlines()) == 9


def test_render_empty_class_and_determinism(tmp_path):
    conf = np.zeros((9, 9), dtype=int)
    conf[0, 0] = 3
    report = EvalReport(conf)
    with np.errstate(all="raise"):
        render_confusion(report, tmp_path / "a.svg")
    render_confusion(report, tmp_path / "b.svg")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_compare_runs_table():
    table = compare_runs([RunResult("norm sched", 0.2731, 0.28884), ("modal", EvalReport(np.eye(9, dtype=int) * 2))])
    lines = table.to_text().splitlines()
    assert len(lines) == 4
    assert lines[2].split("|")[0].strip() == "norm sched"
    assert [c.strip() for c in lines[2].split("|")[1:]] == ["27.31", "28.88"]
    assert [c.strip() for c in lines[3].split("|")[1:]] == ["100.00", "100.00"]
    assert json.loads(table.to_json())[0]["max_accuracy"] == "28.88"

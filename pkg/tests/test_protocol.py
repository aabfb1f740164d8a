import csv
import json

import pytest

from glintiqa.datasets import IQADataset, Sample
from glintiqa.errors import DataError, ProtocolError
from glintiqa.evaluation.protocol import (
    EvalReport,
    cross_eval,
    make_split,
    make_splits,
    oracle_factory,
    run_protocol,
)


def _authentic(n=25, tag="auth"):
    return IQADataset(tag, [Sample(f"im{i:02d}", float((i * 7) % 11)) for i in range(n)])


def _synthetic(n_content=10, per=4):
    return IQADataset("syn", [Sample(f"c{c}_{k}", float(c + k), content_id=f"c{c}")
                              for c in range(n_content) for k in range(per)])


def test_authentic_split_is_by_image():
    data = _authentic(25)
    assert not data.synthetic
    plan = make_split(data, 0)
    assert len(plan.test_ids) == 5 and len(plan.train_ids) == 20
    assert not set(plan.test_ids) & set(plan.train_ids)


def test_synthetic_split_is_by_content_and_reproducible():
    data = _synthetic()
    plans = make_splits(data, 10, seed=2)
    assert plans == make_splits(data, 10, seed=2)
    assert len({p.test_keys for p in plans}) > 1
    for p in plans:
        assert len(p.test_keys) == 2 and len(p.test_ids) == 8


def test_too_few_ids():
    with pytest.raises(ProtocolError):
        make_split(_authentic(4), 0)
    with pytest.raises(ProtocolError):
        make_split(_synthetic(n_content=3), 0)


def test_oracle_predictor_gives_perfect_medians(tmp_path):
    report = run_protocol(oracle_factory, _authentic(), n_repeats=5, seed=1, model_tag="oracle")
    med = report.medians["auth"]
    assert med["srocc"] == 1.0 and med["plcc"] == 1.0 and med["n_repeats"] == 5
    assert report.medians_consistent()
    jpath, cpath = report.write(tmp_path / "rep")
    loaded = json.loads(jpath.read_text())
    assert loaded["config_hash"] == report.config_hash
    rows = list(csv.reader(cpath.open()))
    assert rows[0][:2] == ["config_hash", report.config_hash]
    assert len(rows) == 2 + 5


def test_failing_repeats_are_reported_not_raised():
    def constant(train, seed):
        return lambda samples: [0.5] * len(samples)

    report = run_protocol(constant, _authentic(), n_repeats=3)
    assert len(report.errors) == 3
    assert all("undefined_correlation" in r["error"] for r in report.errors)
    assert report.medians["auth"]["srocc"] is None


def test_cross_eval_rejects_source_as_target():
    with pytest.raises(ProtocolError):
        cross_eval([lambda s: [x.label for x in s]], "auth", [_authentic()])
    rep = cross_eval([lambda s: [x.label for x in s]] * 2, "koniq", [_authentic(tag="live"), _synthetic()])
    assert rep.protocol == "cross" and rep.source == "koniq"
    assert set(rep.medians) == {"live", "syn"} and rep.medians["live"]["n_repeats"] == 2


def test_labels_csv_adapter(tmp_path):
    (tmp_path / "labels.csv").write_text("image_path,label,content_id\na.png,1.5,c1\nb.png,2.0,c2\n")
    data = IQADataset.from_labels_csv(tmp_path / "labels.csv")
    assert data.tag == "labels" and data.synthetic
    assert data.samples[0].image_path == str(tmp_path / "a.png")
    (tmp_path / "bad.csv").write_text("path,score\n")
    with pytest.raises(DataError):
        IQADataset.from_labels_csv(tmp_path / "bad.csv")


def test_medians_recomputed_from_rows():
    rows = [{"dataset": "x", "repeat": r, "srocc": s, "plcc": s, "error": None} for r, s in
            enumerate([0.5, 0.9, 0.7])]
    rep = EvalReport("single", "m", rows)
    assert rep.medians["x"]["srocc"] == 0.7

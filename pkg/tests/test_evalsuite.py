import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ptx import evalsuite as ev
from ptx.evalsuite import AblationReport, MetricError, format_delta, iou, mae
from ptx.scenes import benchmark_spec, generate_dataset
from ptx.trainer import build_model


def iou_loop(p, g):
    inter = union = 0
    for a, b in zip(p.ravel().tolist(), g.ravel().tolist()):
        inter += a and b
        union += a or b
    return 1.0 if union == 0 else inter / union


def mae_loop(p, g):
    total = Fraction(0)
    for a, b in zip(p.ravel().tolist(), g.ravel().tolist()):
        total += Fraction(abs(a - b))
    return float(total) / p.size


def test_iou_reference_cases():
    m = np.zeros((4, 4), bool)
    m[1:3, 1:3] = True
    assert iou(m, m) == 1.0
    assert iou(m, ~m) == 0.0
    assert iou(np.zeros((4, 4), bool), np.zeros((4, 4), bool)) == 1.0
    assert iou(np.zeros((4, 4), bool), m) == 0.0


def test_mae_reference_cases():
    g = np.eye(4, dtype=bool)
    assert mae(g.astype(float), g) == 0.0
    assert mae(np.full((4, 4), 0.5), g) == 0.5


def test_metrics_match_brute_force_on_1000_pairs():
    r = np.random.default_rng(0)
    for i in range(1000):
        n = 8 if i % 2 else 16
        p = r.random((n, n)) < r.random()
        g = r.random((n, n)) < r.random()
        assert iou(p, g) == iou_loop(p, g)
        prob = r.random((n, n))
        prob[r.random((n, n)) < 0.2] = 0.0
        assert mae(prob, g) == mae_loop(prob, g)


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(bool, (6, 6)), hnp.arrays(bool, (6, 6)))
def test_iou_symmetric_and_bounded(p, g):
    v = iou(p, g)
    assert v == iou(g, p) == iou_loop(p, g)
    assert 0.0 <= v <= 1.0


def test_metric_input_contracts():
    with pytest.raises(MetricError, match="binary"):
        iou(np.array([0.0, 0.5]), np.array([0, 1]))
    with pytest.raises(MetricError, match=r"\[0, 1\]"):
        mae(np.array([1.2, 0.0]), np.array([1, 0]))
    with pytest.raises(MetricError, match="shape"):
        iou(np.zeros(3, bool), np.zeros(4, bool))


def test_delta_format():
    assert format_delta(67.77, 67.35) == "+0.42"
    assert format_delta(70.82, 71.38) == "-0.56"


@pytest.fixture(scope="module")
def tiny_bench():
    return ev.ambiguous_benchmark(n_train=3, n_test=3, epochs=1, lr=1e-3)


@pytest.fixture(scope="module")
def tiny_table1(tiny_bench):
    return ev.run_table1(tiny_bench, seeds=(0, 1))


def test_evaluate_threshold_zero_gives_coverage(tiny_bench):
    m = build_model(tiny_bench.model_config, "parallel")
    res = ev.evaluate(m, tiny_bench.test, None, threshold=0.0)
    for smp, v in zip(tiny_bench.test.samples, res.ious):
        gt = ev.resample_nearest(smp.gt_mask, 16)
        assert v == pytest.approx(gt.mean())


def test_evaluate_is_repeatable_and_skips_unknown_classes(tiny_bench):
    m = build_model(tiny_bench.model_config, "parallel_text", bank=tiny_bench.bank)
    a, b = ev.evaluate(m, tiny_bench.test, tiny_bench.bank), ev.evaluate(m, tiny_bench.test, tiny_bench.bank)
    assert a.to_dict() == b.to_dict()
    from ptx.textbank import build_synthetic

    partial = build_synthetic(["square"], 64)
    res = ev.evaluate(m, tiny_bench.test, partial)
    n_square = sum(s.target_class == "square" for s in tiny_bench.test.samples)
    assert res.count == n_square and res.skipped == len(tiny_bench.test) - n_square


def test_table1_rows_and_footer(tiny_table1):
    report, records = tiny_table1
    d = json.loads(report.to_json())
    assert [r["label"] for r in d["rows"]] == ["No fine-tuning", "Decoder-only", "Parallel", "Parallel-Text"]
    assert all(r["seeds"] == [0, 1] and len(r["per_seed_miou"]) == 2 for r in d["rows"])
    assert sum(len(v) for v in records.values()) == 4 * 2
    assert d["baseline"] == "Parallel" and set(d["deltas"]) == {"No fine-tuning", "Decoder-only", "Parallel-Text"}
    text = report.to_text()
    assert "67.77" in text and "71.38" in text and "Parallel-Text - Parallel:" in text
    assert d["rows"][0]["trainable_params"] == 0


def test_reports_are_byte_deterministic(tiny_bench, tiny_table1, tmp_path):
    again, _ = ev.run_table1(tiny_bench, seeds=(0, 1))
    a = tiny_table1[0].write(tmp_path / "a")
    b = again.write(tmp_path / "b")
    for x, y in zip(a, b):
        assert x.read_bytes() == y.read_bytes()


def test_injection_and_placement_reports(tiny_bench):
    inj, _ = ev.run_injection_ablation(tiny_bench, seeds=(0,))
    assert [r["label"] for r in inj.rows] == ["Prompt Encoder only", "Image Encoder", "Mask Decoder"]
    assert {json.dumps(r["seeds"]) for r in inj.rows} == {"[0]"}
    assert "71.11" in inj.to_text() and "70.82" in inj.to_text()
    assert inj.to_dict()["winner"] in {r["label"] for r in inj.rows}
    pl, _ = ev.run_placement_ablation(tiny_bench, seeds=(0,))
    assert [r["label"] for r in pl.rows] == ["MLP-only", "MLP + MHSA"]
    assert "71.25" in pl.to_text() and pl.rows[0]["miou_std"] is not None
    assert inj.budget == pl.budget


def test_category_self_comparison_gives_zero_deltas(tiny_bench):
    m = build_model(tiny_bench.model_config, "parallel_text", bank=tiny_bench.bank)
    table = ev.category_tests({0: (m, m)}, tiny_bench.test, tiny_bench.bank)
    assert [r["category"] for r in table["rows"]] == [c for c, _, _ in ev.CATEGORIES]
    for r in table["rows"]:
        assert r["delta"] == 0.0
        assert 0.0 <= r["text"] <= 1.0
    assert "cat4_unprompted" in ev.category_table_text(table)


def test_unprompted_recall_definition(tiny_bench):
    smp = next(s for s in ev.category_samples(tiny_bench.test, "partial_instances"))
    full = np.ones((16, 16))
    assert ev.unprompted_recall(full, smp) == 1.0
    assert ev.unprompted_recall(np.zeros((16, 16)), smp) == 0.0


def test_split_overlap_is_rejected(tiny_bench):
    bad = ev.Benchmark(tiny_bench.train, tiny_bench.train, tiny_bench.bank)
    with pytest.raises(ValueError, match="overlap"):
        ev.run_table1(bad, seeds=(0,))


def test_report_text_is_aligned():
    rep = AblationReport("demo", [
        {"label": "A", "miou": 50.0, "miou_std": 1.0, "mae": 0.1, "trainable_params": 10, "seeds": [0]},
        {"label": "Longer name", "miou": 52.5, "miou_std": 0.5, "mae": 0.09, "trainable_params": 200, "seeds": [0]},
    ], baseline="A", budget={"seeds": [0], "epochs": 1})
    lines = rep.to_text().splitlines()
    assert lines[1].index("mIoU") == lines[3].index("50.00") == lines[4].index("52.50")
    assert rep.deltas == {"Longer name": 2.5} and rep.winner == "Longer name"

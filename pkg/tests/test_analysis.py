from __future__ import annotations

import csv
import json
import math

import jsonschema
import pytest
import torch

from meteor import analysis as an
from meteor.datapipe import gen_synthetic
from meteor.embedder import Embedder, EmbedderConfig
from meteor.model import MeteorModel, toy_config
from meteor.numerics import ContractError

# ---------------------------------------------------------------------------
# similarity
# ---------------------------------------------------------------------------


def test_cosine_identity():
    feats = [torch.randn(3, 5, generator=torch.Generator().manual_seed(i)) for i in range(4)]
    for method in an.SIM_METHODS:
        m = an.similarity_matrix(feats, feats, method)
        assert torch.allclose(torch.diagonal(m.values), torch.ones(4, dtype=torch.float64))
        assert m.stats()["top1"] == 1.0


def test_cosine_orthogonal():
    a = torch.tensor([[1.0, 0.0], [0.0, 0.0]])
    b = torch.tensor([[0.0, 1.0], [0.0, 0.0]])
    m = an.similarity_matrix([a, b], [a, b], "flatten")
    assert m.values[0, 1].item() == 0.0 and m.values[1, 0].item() == 0.0
    assert m.values[0, 0].item() == pytest.approx(1.0)


def test_row_mean_differs_from_flatten():
    a = torch.tensor([[10.0, 0.0], [0.0, 1.0]])
    b = torch.tensor([[10.0, 0.0], [0.0, -1.0]])
    flat = an.similarity_matrix([a], [b], "flatten").values[0, 0].item()
    row = an.similarity_matrix([a], [b], "row-mean").values[0, 0].item()
    assert flat == pytest.approx(99 / 101)
    assert row == pytest.approx(0.0)


def test_stats_by_hand():
    v = torch.tensor([[0.9, 0.1, 0.0], [0.95, 0.5, 0.2], [0.0, 0.0, 0.3]], dtype=torch.float64)
    s = an.SimMatrix(v, "flatten").stats()
    assert s["diag_mean"] == pytest.approx((0.9 + 0.5 + 0.3) / 3)
    assert s["offdiag_mean"] == pytest.approx((0.1 + 0.0 + 0.95 + 0.2 + 0.0 + 0.0) / 6)
    assert s["top1"] == pytest.approx(2 / 3)


def test_similarity_errors():
    a = torch.zeros(2, 3)
    with pytest.raises(ContractError):
        an.similarity_matrix([a], [a, a])
    with pytest.raises(ContractError):
        an.similarity_matrix([a], [torch.zeros(3, 3)])
    with pytest.raises(ContractError):
        an.similarity_matrix([a], [a], "median")


def test_sim_matrix_csv(tmp_path):
    v = torch.tensor([[1.0, 0.25], [-0.5, 1.0]], dtype=torch.float64)
    p = an.SimMatrix(v, "flatten").to_csv(tmp_path / "s.csv")
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["", "wo_0", "wo_1"]
    assert [[float(x) for x in r[1:]] for r in rows[1:]] == v.tolist()


def test_tor_retrieval_shapes_and_determinism():
    model = MeteorModel(toy_config(k_tor=3), seed=0)
    pairs = gen_synthetic(10, 0, "mixed")
    a = an.tor_retrieval(model, pairs)
    b = an.tor_retrieval(model, pairs)
    assert a.matrix.values.shape == (10, 10)
    assert torch.equal(a.matrix.values, b.matrix.values)
    assert a.matrix.values.abs().max() <= 1.0 and torch.isfinite(a.matrix.values).all()
    assert a.secondary.method == "row-mean"


def test_tor_retrieval_errors():
    model = MeteorModel(toy_config(), seed=0)
    with pytest.raises(ContractError):
        an.tor_retrieval(model, gen_synthetic(1, 0))
    with pytest.raises(ContractError):
        an.tor_retrieval(MeteorModel(toy_config(use_embedder=False)), gen_synthetic(3, 0))


def test_features_without_rationale_follow_question():
    model = MeteorModel(toy_config(k_tor=3), seed=0)
    ex = an.prepare_examples(gen_synthetic(1, 0, "arith"))[0]
    z_w, z_wo = an.tor_features_pair(model, ex, 3)
    assert z_w.shape == z_wo.shape == (3, model.cfg.embedder.d_emb)
    # the first tor of "even" sits after some rationale text, so the two sets differ
    assert not torch.equal(z_w, z_wo)


# ---------------------------------------------------------------------------
# throughput
# ---------------------------------------------------------------------------

def test_throughput_table_has_baseline():
    cfg = EmbedderConfig(d_emb=16, n_layers=1, d_state=4, n_heads=2)
    rows = an.throughput_bench(cfg, [32, 64], runs=5)
    archs = {(r.architecture, r.length) for r in rows}
    assert archs == {("ssm", 32), ("ssm", 64), ("transformer", 32), ("transformer", 64)}
    assert all(r.tokens_per_sec > 0 and math.isfinite(r.tokens_per_sec) for r in rows)
    table = an.bench_table(rows)
    assert "transformer" in table and "ssm" in table


def test_throughput_requires_sorted_lengths():
    with pytest.raises(ContractError):
        an.throughput_bench(Embedder(EmbedderConfig(d_emb=8, n_layers=1, d_state=4)), [64, 32])


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _report():
    rows = [
        an.AblationRow("e", 0, 0, 10, "even", "ssm", False, False, 100, "ok", 0.25, 1234.5, 40, ""),
        an.AblationRow("e", 1, 0, 10, "even", "ssm", False, True, 100, "ok", 0.1 + 0.2, 99.0, 40, ""),
        an.AblationRow("e", 2, 1, 5, "random", "transformer", True, False, 30, "failed", None, None, 0,
                       "PipelineError: no samples, | pipe"),
    ]
    return an.AblationReport(rows)


def test_csv_round_trip():
    rep = _report()
    back = an.AblationReport.from_csv(rep.to_csv())
    assert back.rows == rep.rows
    assert rep.to_csv().splitlines()[0] == ",".join(an.COLUMNS)


def test_json_round_trip_and_schema():
    rep = _report()
    doc = json.loads(rep.to_json())
    jsonschema.validate(doc, an.REPORT_SCHEMA)
    assert an.AblationReport.from_json(rep.to_json()).rows == rep.rows
    doc["rows"][0]["accuracy"] = "high"
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(doc, an.REPORT_SCHEMA)


def test_markdown_rows():
    md = _report().to_markdown().splitlines()
    assert len(md) == 2 + 3
    assert md[0].count("|") == len(an.COLUMNS) + 1
    assert all(line.count("|") - line.count("\\|") == len(an.COLUMNS) + 1 for line in md)


def test_emit_report(tmp_path):
    rep = _report()
    for fmt, ext in an.REPORT_FORMATS.items():
        p = an.emit_report(rep, fmt, tmp_path / f"r{ext}")
        assert p.read_text()
    with pytest.raises(ContractError):
        an.emit_report(rep, "xlsx", tmp_path / "r.xlsx")


def test_mean_accuracy_filters():
    rep = _report()
    assert rep.mean_accuracy(rationale_used=False, mamba=False) == 0.25
    assert rep.mean_accuracy() == pytest.approx((0.25 + 0.3) / 2)
    assert math.isnan(rep.mean_accuracy(k_tor=99))


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

TINY = an.AblationBudget(pretrain_steps=2, stage1_steps=2, stage2_steps=2, batch_size=4, max_new=3)


@pytest.fixture(scope="module")
def corpus():
    data = gen_synthetic(16, 0, "mixed")
    return data[:12], data[12:], gen_synthetic(8, 1, "mixed", id_prefix="pre-")


def test_single_point_grid_one_row(corpus):
    train, test, _ = corpus
    rep = an.run_ablation([{"k_tor": 3}], toy_config(), train, test, TINY)
    assert len(rep.rows) == 1 and rep.rows[0].status == "ok" and rep.rows[0].k_tor == 3
    assert rep.rows[0].n_eval == len(test)


def test_e_grid_four_rows(corpus):
    train, test, pre = corpus
    rep = an.run_ablation("e", toy_config(), train, test, TINY, pretrain_data=pre)
    assert [(r.mamba, r.rationale_used) for r in rep.rows] == [(False, False), (False, True), (True, False), (True, True)]
    assert all(r.status == "ok" and 0 <= r.accuracy <= 1 for r in rep.rows)
    jsonschema.validate(json.loads(rep.to_json()), an.REPORT_SCHEMA)


def test_infeasible_point_is_failed_row(corpus):
    train, test, _ = corpus
    rep = an.run_ablation([{"k_tor": 500}, {"k_tor": 2}], toy_config(), train, test, TINY)
    assert rep.rows[0].status == "failed" and rep.rows[0].reason
    assert rep.rows[1].status == "ok"


def test_qr_subset():
    data = list(range(100))
    assert an.qr_subset(data, 0, 0) == []
    assert len(an.qr_subset(data, 30, 0)) == 30
    assert an.qr_subset(data, 60, 1) == an.qr_subset(data, 60, 1)
    assert set(an.qr_subset(data, 30, 0)) <= set(data)


def test_unknown_grid():
    with pytest.raises(ContractError):
        an.run_ablation("z", toy_config(), [], [])

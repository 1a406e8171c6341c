from __future__ import annotations

import ast
import json
import operator

import httpx
import numpy as np
import pytest

from meteor import datapipe as dp
from meteor import tokenizer as tk
from meteor.datapipe import (
    CurationClient,
    CurationError,
    FilterError,
    QAPair,
    QRATriple,
    ScoreParseError,
    TripleError,
    curate,
    filter_triples,
    gen_synthetic,
    make_rationale_prompt,
    make_score_prompt,
    mock_score,
    parse_score,
    read_jsonl,
    write_jsonl,
)
from meteor.numerics import ContractError

# ---------------------------------------------------------------------------
# prompt templates
# ---------------------------------------------------------------------------


def test_rationale_prompt_verbatim():
    assert make_rationale_prompt("Q", "A") == (
        "Question: Q. Answer: A. Based on the question and answer, carefully provide an explanation "
        "about how to answer the question in detail."
    )


def test_rationale_prompt_has_two_sites():
    assert dp.RATIONALE_TEMPLATE.count("{") == 2
    out = make_rationale_prompt("what is 2+2", "four")
    assert "what is 2+2" in out and "four" in out


def test_score_prompt_verbatim_and_clauses():
    out = make_score_prompt("Q", "R", "A")
    assert out == (
        "Question: Q. Rationale: R. Answer: A. Based on the question, rationale, and answer, provide a "
        "score from 0 to 10, evaluating how well the rationale is described to solve the question. If the "
        "given rationale is insufficient, you should rigorously give a score below 5."
    )
    assert "provide a score from 0 to 10" in out
    assert "rigorously give a score below 5" in out
    assert dp.SCORE_TEMPLATE.count("{") == 3
    out = make_score_prompt("qq", "rr", "aa")
    assert all(s in out for s in ("qq", "rr", "aa"))


@pytest.mark.parametrize("args", [("", "A"), ("Q", "")])
def test_rationale_prompt_empty_field(args):
    with pytest.raises(ContractError):
        make_rationale_prompt(*args)


@pytest.mark.parametrize("args", [("", "R", "A"), ("Q", "", "A"), ("Q", "R", "")])
def test_score_prompt_empty_field(args):
    with pytest.raises(ContractError):
        make_score_prompt(*args)


# ---------------------------------------------------------------------------
# scores and filtering
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("text,score", [("I give a score of 7.", 7), ("Score: 10/10", 10), ("0", 0), ("5 stars", 5)])
def test_parse_score(text, score):
    assert parse_score(text) == score


@pytest.mark.parametrize("text", ["insufficient rationale", "score: 11", "-1 points", ""])
def test_parse_score_errors(text):
    with pytest.raises(ScoreParseError):
        parse_score(text)


def _t(i, score, approved=None):
    return QRATriple(f"t{i}", None, "q", "r", "a", score, approved)


def test_filter_boundaries():
    res = filter_triples([_t(0, 4), _t(1, 5), _t(2, 9, False), _t(3, 9, True), _t(4, 10), _t(5, 0)])
    assert [t.id for t in res.kept] == ["t1", "t3", "t4"]
    assert res.summary() == {"total": 6, "kept": 3, "dropped_score": 2, "dropped_review": 1, "failed": 0}


def test_filter_missing_score():
    with pytest.raises(FilterError):
        filter_triples([_t(0, 5), _t(1, None)])
    res = filter_triples([_t(0, 5), _t(1, None)], strict=False)
    assert res.summary()["failed"] == 1 and len(res.kept) == 1


def test_filter_is_pure_and_order_preserving():
    rng = np.random.default_rng(0)
    ts = [_t(i, int(rng.integers(0, 11)), [None, True, False][i % 3]) for i in range(50)]
    a, b = filter_triples(ts), filter_triples(list(ts))
    assert [t.id for t in a.kept] == [t.id for t in b.kept]
    ids = [t.id for t in a.kept]
    assert ids == sorted(ids, key=lambda s: int(s[1:]))


def test_triple_invariants():
    with pytest.raises(TripleError):
        QRATriple("x", None, "", "r", "a")
    with pytest.raises(TripleError):
        QRATriple("x", None, "q", "r", "")
    with pytest.raises(TripleError):
        QRATriple("x", None, "q", "r", "a", score=11)
    with pytest.raises(TripleError):
        QRATriple.from_json('{"id": "x", "question": "q", "rationale": "", "answer": "a", "image": null, "extra": 1}')


# ---------------------------------------------------------------------------
# curation
# ---------------------------------------------------------------------------

PAIRS = [QAPair("p0", "What is 3+4", "7"), QAPair("p1", "Color of sky", "blue"), QAPair("p2", "2*5", "10")]


def test_mock_curate_deterministic():
    a = curate(CurationClient(backend="mock", seed=1), PAIRS)
    b = curate(CurationClient(backend="mock", seed=1), PAIRS, concurrency=3)
    assert len(a.triples) == 3 and not a.failed
    assert [t.to_json() for t in a.triples] == [t.to_json() for t in b.triples]
    assert all(t.rationale for t in a.triples)
    assert [t.id for t in a.triples] == ["p0", "p1", "p2"]


def test_mock_end_to_end_filter_oracle():
    pairs = [QAPair(f"p{i}", f"question {i}", f"answer {i}") for i in range(40)]
    client = CurationClient(backend="mock", seed=3)
    res = curate(client, pairs)
    expected = []
    for p in pairs:
        r = dp.mock_rationale(p.question, p.answer)
        if mock_score(make_score_prompt(p.question, r, p.answer), 3) >= 5:
            expected.append(p.id)
    kept = filter_triples(res.triples).kept
    assert [t.id for t in kept] == expected
    assert 0 < len(expected) < 40


def _client(handler, **kw):
    return CurationClient(endpoint="http://curation.test/v1", token="secret", backend="http",
                          transport=httpx.MockTransport(handler), **kw)


def test_http_wire_protocol():
    seen = []

    def handler(request: httpx.Request):
        body = json.loads(request.content)
        seen.append((request.headers.get("authorization"), body))
        if "provide a score" in body["prompt"]:
            return httpx.Response(200, json={"text": "Score: 8"})
        return httpx.Response(200, json={"text": "Because 3+4=7."})

    res = curate(_client(handler), PAIRS[:1])
    assert res.triples[0].rationale == "Because 3+4=7." and res.triples[0].score == 8
    auth, body = seen[0]
    assert auth == "Bearer secret"
    assert set(body) == {"prompt", "max_tokens"} and isinstance(body["max_tokens"], int)


def test_http_500_marks_sample_failed_and_continues():
    def handler(request: httpx.Request):
        prompt = json.loads(request.content)["prompt"]
        if "Color of sky" in prompt:
            return httpx.Response(500, json={"error": "boom"})
        if "provide a score" in prompt:
            return httpx.Response(200, json={"text": "6"})
        return httpx.Response(200, json={"text": "a rationale"})

    res = curate(_client(handler), PAIRS, retries=2)
    assert [t.id for t in res.triples] == ["p0", "p2"]
    assert [f[0] for f in res.failed] == ["p1"] and "500" in res.failed[0][1]
    assert res.summary() == {"total": 3, "curated": 2, "failed": 1}


def test_http_retry_recovers_after_transient_error():
    calls = {"n": 0}

    def handler(request: httpx.Request):
        calls["n"] += 1
        if calls["n"] == 1:
            raise httpx.ConnectError("refused")
        prompt = json.loads(request.content)["prompt"]
        return httpx.Response(200, json={"text": "7" if "provide a score" in prompt else "r"})

    res = curate(_client(handler), PAIRS[:1], retries=1)
    assert len(res.triples) == 1 and not res.failed


def test_http_client_errors():
    with pytest.raises(CurationError) as e:
        _client(lambda r: httpx.Response(404)).complete("x")
    assert not e.value.retryable
    with pytest.raises(CurationError):
        _client(lambda r: httpx.Response(200, json={"nope": 1})).complete("x")
    with pytest.raises(ContractError):
        CurationClient(backend="http").complete("x")


def test_from_env(monkeypatch):
    monkeypatch.setenv(dp.API_URL_ENV, "http://example.invalid/api")
    monkeypatch.setenv(dp.API_KEY_ENV, "tok")
    c = CurationClient.from_env()
    assert c.endpoint == "http://example.invalid/api" and c.token == "tok" and c.backend == "http"


# ---------------------------------------------------------------------------
# JSONL
# ---------------------------------------------------------------------------

def test_jsonl_round_trip_bytes(tmp_path):
    data = gen_synthetic(20, 5, "mixed")
    data[0] = QRATriple("u", None, "¿cuántos? ü", "r", "a", score=5, human_approved=True)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_jsonl(a, data)
    back = read_jsonl(a)
    write_jsonl(b, back)
    assert a.read_bytes() == b.read_bytes()
    assert back == data
    line = json.loads(a.read_text(encoding="utf-8").splitlines()[0])
    assert set(line) == {"id", "image", "question", "rationale", "answer", "score", "human_approved"}


# ---------------------------------------------------------------------------
# synthetic tasks
# ---------------------------------------------------------------------------

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul}


def _evaluate(node):
    if isinstance(node, ast.Constant):
        return node.value
    if isinstance(node, ast.BinOp):
        return _BINOPS[type(node.op)](_evaluate(node.left), _evaluate(node.right))
    raise AssertionError(ast.dump(node))


def _count_cells(image, color):
    img = np.asarray(image)
    px = dp.CELL_PX
    centres = img[px // 2::px, px // 2::px]
    rgb = np.asarray(dp.COLORS[color])
    return int(np.all(centres == rgb, axis=-1).sum())


def test_determinism():
    assert gen_synthetic(30, 7, "mixed") == gen_synthetic(30, 7, "mixed")
    assert gen_synthetic(30, 7, "mixed") != gen_synthetic(30, 8, "mixed")


def test_arith_oracle_agreement():
    for t in gen_synthetic(300, 1, "arith"):
        assert t.image is None and t.question.endswith("=?")
        expr = t.question[:-2]
        assert str(_evaluate(ast.parse(expr, mode="eval").body)) == t.answer
        steps = t.rationale.split("; ")
        assert 3 <= len(steps) <= 6
        assert steps[-1].endswith("=" + t.answer)
        for s in steps:
            lhs, rhs = s.split("=")
            assert _evaluate(ast.parse(lhs, mode="eval").body) == int(rhs)


def test_arith_worked_example():
    q, r, v = dp.arith_rationale(3, [("+", 4), ("*", 2)])
    assert (q, r, v) == ("((3+4)*2)=?", "3+4=7; 7*2=14", 14)
    assert str(_evaluate(ast.parse(q[:-2], mode="eval").body)) == "14"


def test_arith_chain_format():
    for t in gen_synthetic(50, 2, "arith"):
        steps = t.rationale.split("; ")
        assert t.question.startswith("(" * len(steps))
        # each result feeds the next step
        for a, b in zip(steps, steps[1:]):
            assert b.startswith(a.split("=")[1])
        lo, hi = dp.ARITH_RANGE
        assert all(lo <= int(s.split("=")[1]) <= hi for s in steps)


def test_count_oracle_agreement():
    for t in gen_synthetic(200, 4, "count"):
        img = np.asarray(t.image)
        assert img.shape == (16, 16, 3) and img.min() >= 0 and img.max() <= 1
        color = t.question.split()[2]
        assert str(_count_cells(t.image, color)) == t.answer
        rows = [int(part.split(": ")[1]) for part in t.rationale.split("; ")[:-1]]
        assert sum(rows) == int(t.answer) and t.rationale.endswith(f"total {t.answer}")


def test_mixed_alternates_and_prefix():
    data = gen_synthetic(6, 0, "mixed", id_prefix="pre-")
    assert [t.id.split("-")[1] for t in data] == ["arith", "count"] * 3
    assert all(t.id.startswith("pre-") for t in data)


def test_rationale_answer_length_ratio():
    data = gen_synthetic(2000, 0, "mixed")
    r = np.mean([len(tk.encode(t.rationale)) for t in data])
    a = np.mean([len(tk.encode(t.answer)) for t in data])
    assert r / a >= 5


def test_gen_synthetic_errors():
    with pytest.raises(ContractError):
        gen_synthetic(0, 0)
    with pytest.raises(ContractError):
        gen_synthetic(3, 0, "poetry")

"""Question-rationale-answer triples: storage, rationale curation and synthetic tasks."""
from __future__ import annotations

import json
import logging
import os
import re
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import httpx
import numpy as np

from .numerics import ContractError

log = logging.getLogger(__name__)

API_URL_ENV = "METEOR_API_URL"
API_KEY_ENV = "METEOR_API_KEY"

RATIONALE_TEMPLATE = (
    "Question: {q}. Answer: {a}. Based on the question and answer, carefully provide an "
    "explanation about how to answer the question in detail."
)
SCORE_TEMPLATE = (
    "Question: {q}. Rationale: {r}. Answer: {a}. Based on the question, rationale, and answer, "
    "provide a score from 0 to 10, evaluating how well the rationale is described to solve the "
    "question. If the given rationale is insufficient, you should rigorously give a score below 5."
)
MIN_SCORE = 5


class TripleError(ValueError):
    pass


class ScoreParseError(ValueError):
    pass


class FilterError(ValueError):
    pass


class CurationError(RuntimeError):
    """A failed request for one sample; ``retryable`` marks transport-level failures."""

    def __init__(self, message: str, retryable: bool = True):
        super().__init__(message)
        self.retryable = retryable


@dataclass
class QRATriple:
    id: str
    image: list | None
    question: str
    rationale: str
    answer: str
    score: int | None = None
    human_approved: bool | None = None

    def __post_init__(self) -> None:
        if not self.question:
            raise TripleError(f"{self.id}: empty question")
        if not self.answer:
            raise TripleError(f"{self.id}: empty answer")
        if self.score is not None and not 0 <= self.score <= 10:
            raise TripleError(f"{self.id}: score {self.score} outside [0, 10]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "QRATriple":
        obj = json.loads(line)
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise TripleError(f"unknown fields {sorted(unknown)}")
        return cls(**obj)


def write_jsonl(path: str | Path, triples: Iterable[QRATriple]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for t in triples:
            f.write(t.to_json() + "\n")


def read_jsonl(path: str | Path) -> list[QRATriple]:
    with open(path, encoding="utf-8") as f:
        return [QRATriple.from_json(line) for line in f if line.strip()]


# ---------------------------------------------------------------------------
# prompts and scores
# ---------------------------------------------------------------------------

def _require(**kw: str) -> None:
    for name, value in kw.items():
        if not value:
            raise ContractError(f"prompt field {name!r} is empty")


def make_rationale_prompt(q: str, a: str) -> str:
    _require(question=q, answer=a)
    return RATIONALE_TEMPLATE.format(q=q, a=a)


def make_score_prompt(q: str, r: str, a: str) -> str:
    _require(question=q, rationale=r, answer=a)
    return SCORE_TEMPLATE.format(q=q, r=r, a=a)


_INT = re.compile(r"-?\d+")


def parse_score(response: str) -> int:
    """First integer literal in ``response``; must lie in [0, 10]."""
    m = _INT.search(response)
    if m is None:
        raise ScoreParseError(f"no integer in score response {response!r}")
    value = int(m.group())
    if not 0 <= value <= 10:
        raise ScoreParseError(f"score {value} outside [0, 10] in {response!r}")
    return value


# ---------------------------------------------------------------------------
# curation client
# ---------------------------------------------------------------------------

def mock_score(prompt: str, seed: int) -> int:
    return zlib.crc32(f"{seed}:{prompt}".encode()) % 11


def mock_rationale(q: str, a: str) -> str:
    return f"To answer {q!r}, work through it step by step and conclude {a}."


_RATIONALE_PROMPT = re.compile(r"^Question: (.*)\. Answer: (.*)\. Based on the question and answer,", re.S)


@dataclass
class CurationClient:
    endpoint: str = ""
    token: str | None = None
    timeout: float = 30.0
    backend: str = "mock"
    seed: int = 0
    max_tokens: int = 512
    transport: httpx.BaseTransport | None = field(default=None, repr=False)

    @classmethod
    def from_env(cls, backend: str = "http", **kw) -> "CurationClient":
        return cls(endpoint=os.environ.get(API_URL_ENV, ""), token=os.environ.get(API_KEY_ENV), backend=backend, **kw)

    def complete(self, prompt: str) -> str:
        if self.backend == "mock":
            return self._mock(prompt)
        if self.backend != "http":
            raise ContractError(f"unknown curation backend {self.backend!r}")
        if not self.endpoint:
            raise ContractError(f"no endpoint configured (set {API_URL_ENV})")
        headers = {"Authorization": f"Bearer {self.token}"} if self.token else {}
        try:
            with httpx.Client(transport=self.transport, timeout=self.timeout) as client:
                resp = client.post(self.endpoint, json={"prompt": prompt, "max_tokens": self.max_tokens}, headers=headers)
        except httpx.TimeoutException as e:
            raise CurationError(f"timeout: {e}") from e
        except httpx.TransportError as e:
            raise CurationError(f"transport error: {e}") from e
        if resp.status_code >= 500:
            raise CurationError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise CurationError(f"HTTP {resp.status_code}", retryable=False)
        try:
            text = resp.json()["text"]
        except (ValueError, KeyError, TypeError) as e:
            raise CurationError(f"malformed response body: {e}", retryable=False) from e
        if not isinstance(text, str):
            raise CurationError("response field 'text' is not a string", retryable=False)
        return text

    def _mock(self, prompt: str) -> str:
        if "provide a score from 0 to 10" in prompt:
            return f"I give a score of {mock_score(prompt, self.seed)}."
        m = _RATIONALE_PROMPT.match(prompt)
        if m is None:
            return "No rationale available."
        return mock_rationale(m.group(1), m.group(2))


@dataclass
class QAPair:
    id: str
    question: str
    answer: str
    image: list | None = None


@dataclass
class CurationResult:
    triples: list[QRATriple]
    failed: list[tuple[str, str]]

    def summary(self) -> dict:
        return {"total": len(self.triples) + len(self.failed), "curated": len(self.triples), "failed": len(self.failed)}


def _curate_one(client: CurationClient, pair: QAPair, retries: int) -> QRATriple:
    last: CurationError | None = None
    for _ in range(retries + 1):
        try:
            rationale = client.complete(make_rationale_prompt(pair.question, pair.answer))
            score_text = client.complete(make_score_prompt(pair.question, rationale, pair.answer))
            return QRATriple(pair.id, pair.image, pair.question, rationale, pair.answer, parse_score(score_text))
        except CurationError as e:
            last = e
            if not e.retryable:
                break
    assert last is not None
    raise last


def curate(client: CurationClient, pairs: Sequence[QAPair], concurrency: int = 1, retries: int = 0) -> CurationResult:
    """Generate and score a rationale for every pair. Nothing is filtered here.

    Results are committed in input order regardless of ``concurrency``.
    """

    def work(pair: QAPair):
        try:
            return _curate_one(client, pair, retries)
        except (CurationError, ScoreParseError, TripleError) as e:
            return e

    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        outcomes = list(pool.map(work, pairs))
    triples, failed = [], []
    for pair, out in zip(pairs, outcomes):
        if isinstance(out, QRATriple):
            triples.append(out)
        else:
            log.warning("curation failed for %s: %s", pair.id, out)
            failed.append((pair.id, str(out)))
    return CurationResult(triples, failed)


@dataclass
class FilterResult:
    kept: list[QRATriple]
    dropped_score: int = 0
    dropped_review: int = 0
    failed: int = 0

    def summary(self) -> dict:
        total = len(self.kept) + self.dropped_score + self.dropped_review + self.failed
        return {
            "total": total,
            "kept": len(self.kept),
            "dropped_score": self.dropped_score,
            "dropped_review": self.dropped_review,
            "failed": self.failed,
        }


def filter_triples(triples: Sequence[QRATriple], strict: bool = True) -> FilterResult:
    """Keep triples scoring at least 5 that a reviewer did not reject. Order is preserved.

    A triple without a score raises :class:`FilterError` when ``strict``,
    otherwise it is counted under ``failed``.
    """
    res = FilterResult(kept=[])
    for t in triples:
        if t.score is None:
            if strict:
                raise FilterError(f"triple {t.id} has no score")
            res.failed += 1
        elif t.score < MIN_SCORE:
            res.dropped_score += 1
        elif t.human_approved is False:
            res.dropped_review += 1
        else:
            res.kept.append(t)
    return res


# ---------------------------------------------------------------------------
# synthetic tasks
# ---------------------------------------------------------------------------

COLORS = {"red": (1.0, 0.0, 0.0), "green": (0.0, 1.0, 0.0), "blue": (0.0, 0.0, 1.0)}
GRID_CELLS = 4  # count grids are GRID_CELLS x GRID_CELLS cells of CELL_PX pixels: 16x16 images
CELL_PX = 4
OPS = {"+": lambda a, b: a + b, "-": lambda a, b: a - b, "*": lambda a, b: a * b}
ARITH_OPS = "+-"  # operators drawn by the arith generator; "*" stays available to arith_rationale
ARITH_RANGE = (0, 99)  # every intermediate value stays in this range


def arith_rationale(start: int, steps: Sequence[tuple[str, int]]) -> tuple[str, str, int]:
    """(question, rationale, value) for a left-nested chain: 3, [("+", 4), ("*", 2)] -> "((3+4)*2)=?"."""
    expr, value, parts = str(start), start, []
    for op, b in steps:
        out = OPS[op](value, b)
        parts.append(f"{value}{op}{b}={out}")
        expr = f"({expr}{op}{b})"
        value = out
    return f"{expr}=?", "; ".join(parts), value


def _arith_sample(rng: np.random.Generator, idx: int) -> QRATriple:
    start = value = int(rng.integers(1, 10))
    steps: list[tuple[str, int]] = []
    n_ops = int(rng.integers(3, 7))
    lo, hi = ARITH_RANGE
    while len(steps) < n_ops:
        op = str(rng.choice(list(ARITH_OPS)))
        b = int(rng.integers(1, 10))
        out = OPS[op](value, b)
        if not lo <= out <= hi:
            continue
        steps.append((op, b))
        value = out
    question, rationale, value = arith_rationale(start, steps)
    return QRATriple(f"arith-{idx}", None, question, rationale, str(value))


def render_grid(cells: np.ndarray) -> list:
    """(GRID_CELLS, GRID_CELLS) color-index grid (0 = empty) -> 16x16x3 nested float lists."""
    palette = [(0.0, 0.0, 0.0)] + list(COLORS.values())
    img = np.zeros((GRID_CELLS * CELL_PX, GRID_CELLS * CELL_PX, 3))
    for r in range(GRID_CELLS):
        for c in range(GRID_CELLS):
            img[r * CELL_PX:(r + 1) * CELL_PX, c * CELL_PX:(c + 1) * CELL_PX] = palette[cells[r, c]]
    return img.tolist()


def _count_sample(rng: np.random.Generator, idx: int) -> QRATriple:
    names = list(COLORS)
    cells = rng.choice(4, size=(GRID_CELLS, GRID_CELLS), p=[0.55, 0.15, 0.15, 0.15])
    color = int(rng.integers(0, 3))
    per_row = [int((cells[r] == color + 1).sum()) for r in range(GRID_CELLS)]
    rationale = "; ".join(f"row {r + 1}: {c}" for r, c in enumerate(per_row)) + f"; total {sum(per_row)}"
    return QRATriple(
        f"count-{idx}", render_grid(cells), f"How many {names[color]} cells?", rationale, str(sum(per_row))
    )


def gen_synthetic(n: int, seed: int | Sequence[int], task: str = "arith", id_prefix: str = "") -> list[QRATriple]:
    """``task`` is ``arith``, ``count`` or ``mixed`` (alternating)."""
    if n < 1:
        raise ContractError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    makers = {"arith": [_arith_sample], "count": [_count_sample], "mixed": [_arith_sample, _count_sample]}
    if task not in makers:
        raise ContractError(f"unknown synthetic task {task!r}")
    seq = makers[task]
    out = [seq[i % len(seq)](rng, i) for i in range(n)]
    if id_prefix:
        out = [replace(t, id=id_prefix + t.id) for t in out]
    return out

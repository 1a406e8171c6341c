"""<tor>-feature retrieval, embedder throughput and the ablation grid runner."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import tokenizer as tk
from .datapipe import QRATriple
from .embedder import Embedder, EmbedderConfig
from .model import Example, MeteorConfig, MeteorModel
from .numerics import ContractError
from .training import (
    Checkpoint,
    PipelineError,
    StagePlan,
    evaluate,
    initial_checkpoint,
    prepare_examples,
    pretrain_backbone,
    train_stage1,
    train_stage2,
)

log = logging.getLogger(__name__)

SIM_METHODS = ("flatten", "row-mean")


# ---------------------------------------------------------------------------
# tor retrieval
# ---------------------------------------------------------------------------

@dataclass
class SimMatrix:
    values: torch.Tensor  # (n, n) float64, rows = with rationale, cols = without
    method: str

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def stats(self) -> dict:
        v = self.values
        n = self.n
        diag = torch.diagonal(v)
        off = v[~torch.eye(n, dtype=torch.bool)]
        top1 = (v.argmax(dim=1) == torch.arange(n)).double().mean()
        return {"diag_mean": float(diag.mean()), "offdiag_mean": float(off.mean()), "top1": float(top1)}

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow([""] + [f"wo_{j}" for j in range(self.n)])
            for i, row in enumerate(self.values.tolist()):
                w.writerow([f"w_{i}"] + [repr(x) for x in row])
        return path


def _cosine(a: torch.Tensor, b: torch.Tensor) -> float:
    na, nb = a.norm(), b.norm()
    if na == 0 or nb == 0:
        return 0.0
    return float(torch.clamp((a @ b) / (na * nb), -1.0, 1.0))


def similarity_matrix(with_r: Sequence[torch.Tensor], without_r: Sequence[torch.Tensor],
                      method: str = "flatten") -> SimMatrix:
    """Cosine similarities between two lists of (k, d) feature sets.

    ``flatten`` compares the k*d vectors; ``row-mean`` averages the k per-row cosines.
    """
    if method not in SIM_METHODS:
        raise ContractError(f"unknown similarity method {method!r}")
    if len(with_r) != len(without_r):
        raise ContractError("feature lists differ in length")
    n = len(with_r)
    vals = torch.zeros(n, n, dtype=torch.float64)
    for i, a in enumerate(with_r):
        for j, b in enumerate(without_r):
            a64, b64 = a.double(), b.double()
            if a64.shape != b64.shape:
                raise ContractError(f"feature sets {i} and {j} have shapes {tuple(a.shape)} and {tuple(b.shape)}")
            if method == "flatten":
                vals[i, j] = _cosine(a64.reshape(-1), b64.reshape(-1))
            else:
                vals[i, j] = sum(_cosine(x, y) for x, y in zip(a64, b64)) / a64.shape[0]
    return SimMatrix(vals, method)


@dataclass
class RetrievalResult:
    matrix: SimMatrix
    secondary: SimMatrix
    stats: dict


@torch.no_grad()
def tor_features_pair(model: MeteorModel, ex: Example, k: int, seed: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    """Raw (k, d_emb) tor features with the planted rationale and with k bare <tor> after the question."""
    planted = tk.plant_tor(ex.rationale, k, model.cfg.strategy, seed=ex.seed(seed))
    vis = model.vision_encoder(model._images([ex]))
    feats, pos = model.embed_batch([ex], [planted.tokens], vis)
    z_w = model.tor_features(feats, pos)[0][0]
    feats, pos = model.embed_batch([ex], [[tk.TOR] * k], vis)
    z_wo = model.tor_features(feats, pos)[0][0]
    return z_w, z_wo


def tor_retrieval(model: MeteorModel, pairs: Sequence[QRATriple | Example], k: int | None = None,
                  seed: int = 0) -> RetrievalResult:
    """Match each rationale-bearing input to its rationale-free counterpart by cosine similarity."""
    if not model.cfg.use_embedder:
        raise ContractError("tor_retrieval needs a model with an embedder")
    examples = prepare_examples(pairs)
    if len(examples) < 2:
        raise ContractError(f"tor_retrieval needs at least 2 pairs, got {len(examples)}")
    k = model.cfg.k_tor if k is None else k
    model.eval()
    with_r, without_r = [], []
    for ex in examples:
        a, b = tor_features_pair(model, ex, k, seed)
        with_r.append(a)
        without_r.append(b)
    primary = similarity_matrix(with_r, without_r, "flatten")
    secondary = similarity_matrix(with_r, without_r, "row-mean")
    return RetrievalResult(primary, secondary, primary.stats())


# ---------------------------------------------------------------------------
# throughput
# ---------------------------------------------------------------------------

@dataclass
class BenchRow:
    architecture: str
    length: int
    seconds: float
    tokens_per_sec: float


@torch.no_grad()
def time_forward(embedder: Embedder, length: int, runs: int = 5, warmup: int = 1, seed: int = 0) -> float:
    """Median wall-clock seconds of one forward pass over a (1, length, d) input."""
    g = torch.Generator().manual_seed(seed)
    rows = torch.randn(1, length, embedder.cfg.d_emb, generator=g)
    embedder.eval()
    for _ in range(warmup):
        embedder(rows)
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        embedder(rows)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def throughput_bench(embedder: Embedder | EmbedderConfig, lengths: Sequence[int], runs: int = 5,
                     baseline: bool = True, seed: int = 0) -> list[BenchRow]:
    """Forward-only tokens/sec per length, with a transformer embedder of the same width alongside."""
    lengths = list(lengths)
    if lengths != sorted(lengths):
        raise ContractError("lengths must be sorted ascending")
    if runs < 5:
        raise ContractError("use at least 5 timed runs")
    if isinstance(embedder, EmbedderConfig):
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            embedder = Embedder(embedder)
    models = {embedder.cfg.architecture: embedder}
    if baseline and embedder.cfg.architecture != "transformer":
        cfg = replace(embedder.cfg, architecture="transformer", max_len=max(embedder.cfg.max_len, max(lengths)))
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            models["transformer"] = Embedder(cfg)
    rows = []
    for arch, m in models.items():
        for L in lengths:
            sec = time_forward(m, L, runs=runs, seed=seed)
            rows.append(BenchRow(arch, L, sec, L / sec))
    return rows


def bench_table(rows: Sequence[BenchRow]) -> str:
    out = ["architecture  length  seconds     tokens/sec"]
    for r in rows:
        out.append(f"{r.architecture:<12}  {r.length:>6}  {r.seconds:>10.5f}  {r.tokens_per_sec:>10.1f}")
    return "\n".join(out)


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationPoint:
    k_tor: int = 10
    position: str = "even"
    architecture: str = "ssm"
    mamba: bool = True
    rationale_used: bool = True
    qr_ratio: int = 100

    def __post_init__(self) -> None:
        if self.position not in tk.STRATEGIES:
            raise ContractError(f"unknown <tor> position {self.position!r}")
        if not 0 <= self.qr_ratio <= 100:
            raise ContractError(f"qr_ratio must be a percentage, got {self.qr_ratio}")


GRIDS: dict[str, list[dict]] = {
    "a": [{"architecture": a} for a in ("ssm", "transformer")],
    "c": [{"k_tor": k} for k in (2, 5, 10, 15)],
    "d": [{"position": p} for p in ("start", "end", "random", "even")],
    "e": [{"mamba": m, "rationale_used": r} for m in (False, True) for r in (False, True)],
    "f": [{"qr_ratio": q} for q in (0, 30, 60, 90)],
}


@dataclass(frozen=True)
class AblationBudget:
    pretrain_steps: int = 300
    stage1_steps: int = 200
    stage2_steps: int = 300
    batch_size: int = 16
    peak_lr: float = 3e-3
    floor_lr: float = 3e-5
    eval_mode: str = "greedy"
    beam_n: int = 3
    max_new: int = 8
    # points that skip stage 1 spend its steps in stage 2, so every point takes the same number of updates
    match_steps: bool = True


COLUMNS = (
    "grid", "index", "seed", "k_tor", "position", "architecture", "mamba", "rationale_used", "qr_ratio",
    "status", "accuracy", "tokens_per_sec", "n_eval", "reason",
)
_TYPES = {
    "grid": str, "index": int, "seed": int, "k_tor": int, "position": str, "architecture": str,
    "mamba": bool, "rationale_used": bool, "qr_ratio": int, "status": str, "accuracy": float,
    "tokens_per_sec": float, "n_eval": int, "reason": str,
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "meteor ablation report",
    "type": "object",
    "required": ["columns", "rows"],
    "additionalProperties": False,
    "properties": {
        "columns": {"type": "array", "items": {"type": "string"}, "const": list(COLUMNS)},
        "rows": {
            "type": "array",
            "items": {
                "type": "object",
                "required": list(COLUMNS),
                "additionalProperties": False,
                "properties": {
                    "grid": {"type": "string"},
                    "index": {"type": "integer", "minimum": 0},
                    "seed": {"type": "integer"},
                    "k_tor": {"type": "integer", "minimum": 1},
                    "position": {"enum": list(tk.STRATEGIES)},
                    "architecture": {"enum": ["ssm", "transformer"]},
                    "mamba": {"type": "boolean"},
                    "rationale_used": {"type": "boolean"},
                    "qr_ratio": {"type": "integer", "minimum": 0, "maximum": 100},
                    "status": {"enum": ["ok", "failed"]},
                    "accuracy": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                    "tokens_per_sec": {"type": ["number", "null"], "minimum": 0},
                    "n_eval": {"type": "integer", "minimum": 0},
                    "reason": {"type": "string"},
                },
                "if": {"properties": {"status": {"const": "ok"}}},
                "then": {"properties": {"accuracy": {"type": "number"}, "tokens_per_sec": {"type": "number"}}},
            },
        },
    },
}


@dataclass
class AblationRow:
    grid: str
    index: int
    seed: int
    k_tor: int
    position: str
    architecture: str
    mamba: bool
    rationale_used: bool
    qr_ratio: int
    status: str = "ok"
    accuracy: float | None = None
    tokens_per_sec: float | None = None
    n_eval: int = 0
    reason: str = ""

    def as_dict(self) -> dict:
        return {c: getattr(self, c) for c in COLUMNS}


@dataclass
class AblationReport:
    rows: list[AblationRow] = field(default_factory=list)

    def mean_accuracy(self, **where) -> float:
        accs = [r.accuracy for r in self.rows
                if r.status == "ok" and all(getattr(r, k) == v for k, v in where.items())]
        return float(np.mean(accs)) if accs else math.nan

    def to_json(self) -> str:
        return json.dumps({"columns": list(COLUMNS), "rows": [r.as_dict() for r in self.rows]}, indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in r.as_dict().values()])
        return buf.getvalue()

    def to_markdown(self) -> str:
        def cell(v):
            if v is None:
                return ""
            if isinstance(v, bool):
                return "✓" if v else "✗"
            if isinstance(v, float):
                return f"{v:.4f}"
            return str(v).replace("|", "\\|")
        lines = ["| " + " | ".join(COLUMNS) + " |", "|" + "---|" * len(COLUMNS)]
        for r in self.rows:
            lines.append("| " + " | ".join(cell(v) for v in r.as_dict().values()) + " |")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "AblationReport":
        doc = json.loads(text)
        return cls([AblationRow(**row) for row in doc["rows"]])

    @classmethod
    def from_csv(cls, text: str) -> "AblationReport":
        rows = []
        for rec in csv.DictReader(io.StringIO(text)):
            vals = {}
            for c in COLUMNS:
                raw = rec[c]
                t = _TYPES[c]
                if t is bool:
                    vals[c] = raw == "True"
                elif raw == "" and t is not str:
                    vals[c] = None
                else:
                    vals[c] = t(raw)
            rows.append(AblationRow(**vals))
        return cls(rows)


REPORT_FORMATS = {"markdown": ".md", "csv": ".csv", "json": ".json"}


def emit_report(report: AblationReport, fmt: str, path: str | Path) -> Path:
    if fmt not in REPORT_FORMATS:
        raise ContractError(f"unknown report format {fmt!r}; expected one of {sorted(REPORT_FORMATS)}")
    text = {"markdown": report.to_markdown, "csv": report.to_csv, "json": report.to_json}[fmt]()
    path = Path(path)
    path.write_text(text)
    return path


def point_config(base: MeteorConfig, point: AblationPoint) -> MeteorConfig:
    return replace(
        base,
        k_tor=point.k_tor,
        strategy=point.position,
        use_embedder=point.mamba,
        embedder=replace(base.embedder, architecture=point.architecture),
    )


def qr_subset(data: Sequence, ratio: int, seed: int) -> list:
    """The seeded ``ratio`` percent of ``data`` whose rationales stage 1 may use."""
    n = round(len(data) * ratio / 100)
    order = np.random.default_rng([seed, 7]).permutation(len(data))[:n]
    return [data[i] for i in sorted(order)]


class PretrainCache:
    """One warm-started backbone per (seed, marker layout), shared across grid points."""

    def __init__(self, base: MeteorConfig, data, budget: AblationBudget):
        self.base, self.data, self.budget = base, data, budget
        self.store: dict[tuple, Checkpoint] = {}

    def get(self, seed: int, k: int, position: str) -> Checkpoint:
        key = (seed, k, position)
        if key not in self.store:
            cfg = replace(self.base, k_tor=k, strategy=position, use_embedder=True)
            plan = StagePlan(stage=0, steps=self.budget.pretrain_steps, batch_size=self.budget.batch_size,
                             seed=seed, peak_lr=self.budget.peak_lr, floor_lr=self.budget.floor_lr)
            self.store[key] = pretrain_backbone(plan, self.data, cfg).checkpoint
        return self.store[key]


def train_point(point: AblationPoint, base: MeteorConfig, train: Sequence, seed: int,
                budget: AblationBudget, warm: Checkpoint | None) -> MeteorModel:
    """Both training stages for one grid point; stage 1 is skipped when it has nothing to learn from."""
    cfg = point_config(base, point)
    common = dict(batch_size=budget.batch_size, seed=seed, peak_lr=budget.peak_lr, floor_lr=budget.floor_lr)
    stage1_data = qr_subset(train, point.qr_ratio, seed) if point.rationale_used or point.mamba else []
    skip_stage1 = point.qr_ratio == 0 or not (point.rationale_used or point.mamba)
    if skip_stage1:
        init = initial_checkpoint(cfg, seed, warm)
    else:
        source = "rationale" if point.rationale_used else "answer"
        plan1 = StagePlan(stage=1, steps=budget.stage1_steps, rationale_source=source, **common)
        start = None if warm is None else warm.adapt(cfg, seed)
        init = train_stage1(plan1, stage1_data, cfg, init=start, model_seed=seed).checkpoint
    steps2 = budget.stage2_steps + (budget.stage1_steps if skip_stage1 and budget.match_steps else 0)
    plan2 = StagePlan(stage=2, steps=steps2, **common)
    return train_stage2(plan2, train, init).checkpoint.to_model()


def run_ablation(
    grid: str | Sequence[dict],
    base: MeteorConfig,
    train: Sequence[QRATriple],
    test: Sequence[QRATriple],
    budget: AblationBudget = AblationBudget(),
    seeds: Sequence[int] = (0,),
    pretrain_data: Sequence[QRATriple] | None = None,
    grid_name: str | None = None,
    progress: Callable[[AblationRow], None] | None = None,
    cache: PretrainCache | None = None,
) -> AblationReport:
    """Train and evaluate every grid point for every seed.

    ``grid`` is a named grid (``a``, ``c``, ``d``, ``e``, ``f``) or a list of
    :class:`AblationPoint` overrides. With ``pretrain_data`` every point starts
    from a backbone warm-started on that corpus. Points that cannot train are
    reported as failed rows with the reason rather than aborting the run.
    A ``cache`` shares warm-started backbones between runs over the same base config.
    """
    if isinstance(grid, str):
        if grid not in GRIDS:
            raise ContractError(f"unknown grid {grid!r}; expected one of {sorted(GRIDS)}")
        grid_name = grid_name or grid
        grid = GRIDS[grid]
    grid_name = grid_name or "custom"
    default = AblationPoint(base.k_tor, base.strategy, base.embedder.architecture, base.use_embedder, True, 100)
    points = [replace(default, **over) for over in grid]
    train_ex, test_ex = prepare_examples(train), prepare_examples(test)
    if cache is None and pretrain_data is not None:
        cache = PretrainCache(base, prepare_examples(pretrain_data), budget)
    report = AblationReport()
    for seed in seeds:
        for i, point in enumerate(points):
            row = AblationRow(grid_name, i, seed, point.k_tor, point.position, point.architecture,
                              point.mamba, point.rationale_used, point.qr_ratio)
            try:
                warm = None if cache is None else cache.get(seed, point.k_tor, point.position)
                model = train_point(point, base, train_ex, seed, budget, warm)
                t0 = time.perf_counter()
                res = evaluate(model, test_ex, mode=budget.eval_mode, beam_n=budget.beam_n, max_new=budget.max_new)
                elapsed = max(time.perf_counter() - t0, 1e-9)
                n_tokens = sum(len(tk.encode(p)) + 1 for p in res.predictions)
                row.accuracy, row.tokens_per_sec, row.n_eval = res.accuracy, n_tokens / elapsed, res.n
            except (PipelineError, ContractError, tk.PlantingError) as e:
                row.status, row.reason = "failed", f"{type(e).__name__}: {e}"
                log.warning("grid %s point %d seed %d failed: %s", grid_name, i, seed, e)
            report.rows.append(row)
            if progress is not None:
                progress(row)
    return report


"""Causal transformer backbone, mixed-modality sequence assembly and decoding."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from . import numerics as nx
from .embedder import TorFeatures
from .layers import RMSNorm, TransformerBlock, compose_rows, gather_rows
from .numerics import ContractError, DimensionError
from .tokenizer import BOS, EOR, EOS, PAD, TOR, VOCAB_SIZE, PlantedRationale

NO_TARGET = -100

# row kinds used when composing inputs
KIND_TOKEN, KIND_IMAGE, KIND_TOR = 0, 1, 2


class AssemblyError(ValueError):
    pass


class DegenerateLossError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    d_mlm: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_len: int = 512

    def __post_init__(self) -> None:
        if min(self.d_mlm, self.n_layers, self.n_heads, self.max_len) < 1:
            raise ContractError("BackboneConfig fields must be positive")
        if self.d_mlm % self.n_heads:
            raise ContractError(f"d_mlm={self.d_mlm} is not divisible by n_heads={self.n_heads}")


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Parameter(torch.randn(VOCAB_SIZE, cfg.d_mlm) * 0.02)
        self.pos_emb = nn.Parameter(torch.randn(cfg.max_len, cfg.d_mlm) * 0.02)
        self.blocks = nn.ModuleList(TransformerBlock(cfg.d_mlm, cfg.n_heads) for _ in range(cfg.n_layers))
        self.norm = RMSNorm(cfg.d_mlm)
        self.head = nn.Linear(cfg.d_mlm, VOCAB_SIZE, bias=False)
        # residual branches start small so the untrained stack is close to identity
        for blk in self.blocks:
            blk.attn.out.weight.data.mul_(1 / math.sqrt(2 * cfg.n_layers))
            blk.mlp.fc2.weight.data.mul_(1 / math.sqrt(2 * cfg.n_layers))

    def token_rows(self, ids: torch.Tensor) -> torch.Tensor:
        return nx.embedding(ids, self.tok_emb)

    def forward(self, rows: torch.Tensor) -> torch.Tensor:
        """(B, T, d_mlm) rows -> (B, T, V) next-token logits."""
        T = rows.shape[1]
        if T > self.cfg.max_len:
            raise ContractError(f"sequence length {T} exceeds max_len {self.cfg.max_len}")
        if rows.shape[-1] != self.cfg.d_mlm:
            raise DimensionError(f"backbone: rows {tuple(rows.shape)} do not have width {self.cfg.d_mlm}")
        x = rows + self.pos_emb[:T]
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        return nx.linear(x, self.head.weight)


# ---------------------------------------------------------------------------
# layouts
# ---------------------------------------------------------------------------

@dataclass
class Layout:
    """Row-by-row description of one backbone (or embedder) input sequence.

    ``src`` indexes image rows for image kinds and tor rows for tor kinds.
    ``targets[t]`` is the id that row t predicts, ``NO_TARGET`` when the next
    row is not a token.
    """
    provenance: list[str]
    kinds: list[int]
    token_ids: list[int]
    src: list[int]
    targets: list[int]
    loss_mask: list[bool]

    def __len__(self) -> int:
        return len(self.kinds)


class _LayoutBuilder:
    def __init__(self):
        self.provenance: list[str] = []
        self.kinds: list[int] = []
        self.token_ids: list[int] = []
        self.src: list[int] = []
        self.carries_loss: list[bool] = []

    def image(self, n: int) -> None:
        for p in range(n):
            self._row("image", KIND_IMAGE, PAD, p, False)

    def tokens(self, ids: Sequence[int], tag: str, loss: bool) -> None:
        for t in ids:
            self._row(tag, KIND_TOKEN, t, -1, loss)

    def tor(self, j: int) -> None:
        self._row("tor_feature", KIND_TOR, PAD, j, False)

    def _row(self, tag, kind, tok, src, loss) -> None:
        self.provenance.append(tag)
        self.kinds.append(kind)
        self.token_ids.append(tok)
        self.src.append(src)
        self.carries_loss.append(loss)

    def build(self) -> Layout:
        n = len(self.kinds)
        targets, mask = [], []
        for t in range(n):
            nxt = t + 1
            if nxt < n and self.kinds[nxt] == KIND_TOKEN:
                targets.append(self.token_ids[nxt])
                mask.append(self.carries_loss[nxt])
            else:
                targets.append(NO_TARGET)
                mask.append(False)
        return Layout(self.provenance, self.kinds, self.token_ids, self.src, targets, mask)


def stage1_layout(n_img: int, question: Sequence[int], planted: PlantedRationale | Sequence[int]) -> Layout:
    """[image][<bos>][question][<tor>_1 seg_1 ... <tor>_k seg_k][<eor>].

    Rows predicting rationale tokens or the closing <eor> carry loss; no row
    ever predicts a tor-feature row. A plain token list (no markers) gives the
    embedder-free variant.
    """
    b = _LayoutBuilder()
    b.image(n_img)
    b.tokens([BOS], "special", False)
    b.tokens(question, "question", False)
    tokens = planted.tokens if isinstance(planted, PlantedRationale) else tuple(planted)
    j = 0
    for t in tokens:
        if t == TOR:
            b.tor(j)
            j += 1
        else:
            b.tokens([t], "rationale", True)
    b.tokens([EOR], "special", True)
    return b.build()


def lm_layout(n_img: int, question: Sequence[int], planted: PlantedRationale | Sequence[int]) -> Layout:
    """[image][<bos>][question][rationale with <tor> as ordinary tokens][<eor>].

    Used to warm-start the backbone as a plain language model before stage 1.
    Markers sit where stage 1 will later inject tor features; rows predicting
    a marker carry no loss, as in stage 1.
    """
    b = _LayoutBuilder()
    b.image(n_img)
    b.tokens([BOS], "special", False)
    b.tokens(question, "question", True)
    tokens = planted.tokens if isinstance(planted, PlantedRationale) else tuple(planted)
    for t in tokens:
        b.tokens([t], "rationale", t != TOR)
    b.tokens([EOR], "special", True)
    return b.build()


def stage2_layout(n_img: int, question: Sequence[int], k: int, answer: Sequence[int] | None) -> Layout:
    """[image][<bos>][question][tor_1..tor_k][answer][<eos>]; ``answer=None`` gives a generation prefix."""
    b = _LayoutBuilder()
    b.image(n_img)
    b.tokens([BOS], "special", False)
    b.tokens(question, "question", False)
    for j in range(k):
        b.tor(j)
    if answer is not None:
        b.tokens(answer, "answer", True)
        b.tokens([EOS], "special", True)
    return b.build()


@dataclass
class AssembledSequence:
    input_rows: torch.Tensor
    target_ids: torch.Tensor
    loss_mask: torch.Tensor
    provenance: list[str]


def compose_batch(
    backbone: Backbone,
    layouts: Sequence[Layout],
    image_rows: torch.Tensor | None,
    tor_rows: torch.Tensor | None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Right-padded (rows, targets, mask) for a batch of layouts.

    image_rows: (B, P, d) or None; tor_rows: (B, k_max, d) or None.
    """
    B = len(layouts)
    T = max(len(lay) for lay in layouts)
    ids = torch.full((B, T), PAD, dtype=torch.long)
    kinds = torch.full((B, T), KIND_TOKEN, dtype=torch.long)
    src = torch.full((B, T), -1, dtype=torch.long)
    targets = torch.full((B, T), NO_TARGET, dtype=torch.long)
    mask = torch.zeros(B, T, dtype=torch.bool)
    for i, lay in enumerate(layouts):
        n = len(lay)
        ids[i, :n] = torch.as_tensor(lay.token_ids)
        kinds[i, :n] = torch.as_tensor(lay.kinds)
        src[i, :n] = torch.as_tensor(lay.src)
        targets[i, :n] = torch.as_tensor(lay.targets)
        mask[i, :n] = torch.as_tensor(lay.loss_mask)
    rows = backbone.token_rows(ids)
    others = {}
    if image_rows is not None:
        others[KIND_IMAGE] = gather_rows(image_rows, torch.where(kinds == KIND_IMAGE, src, -1))
    elif bool((kinds == KIND_IMAGE).any()):
        raise AssemblyError("layout has image rows but no image features were given")
    if tor_rows is not None:
        others[KIND_TOR] = gather_rows(tor_rows, torch.where(kinds == KIND_TOR, src, -1))
    elif bool((kinds == KIND_TOR).any()):
        raise AssemblyError("layout has tor rows but no tor features were given")
    return compose_rows(rows, kinds, others), targets, mask


def assemble_stage1(
    backbone: Backbone,
    img_proj: torch.Tensor | None,
    question: Sequence[int],
    planted: PlantedRationale,
    tor: TorFeatures,
) -> AssembledSequence:
    if tor.k != planted.k:
        raise AssemblyError(f"planted rationale has {planted.k} <tor> tokens but {tor.k} tor features were given")
    n_img = 0 if img_proj is None else img_proj.shape[0]
    lay = stage1_layout(n_img, question, planted)
    return _assemble(backbone, lay, img_proj, tor.projected)


def assemble_stage2(
    backbone: Backbone,
    img_proj: torch.Tensor | None,
    question: Sequence[int],
    tor: TorFeatures | None,
    answer: Sequence[int] | None,
    training: bool = True,
) -> AssembledSequence:
    if training and not answer:
        raise AssemblyError("stage-2 training requires a non-empty answer")
    n_img = 0 if img_proj is None else img_proj.shape[0]
    k = 0 if tor is None else tor.k
    lay = stage2_layout(n_img, question, k, answer)
    return _assemble(backbone, lay, img_proj, None if tor is None else tor.projected)


def _assemble(backbone, lay, img_proj, tor_rows) -> AssembledSequence:
    rows, targets, mask = compose_batch(
        backbone,
        [lay],
        None if img_proj is None else img_proj[None],
        None if tor_rows is None else tor_rows[None],
    )
    return AssembledSequence(rows[0], targets[0], mask[0], list(lay.provenance))


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def masked_ce_sum(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Sum of token cross-entropies over mask-true positions and their count."""
    n = int(mask.sum())
    if n == 0:
        raise DegenerateLossError("no loss-bearing positions in batch")
    sel = mask.reshape(-1)
    ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1])[sel], targets.reshape(-1)[sel], reduction="sum")
    return ce, n


def forward_loss(backbone: Backbone, seq: AssembledSequence) -> torch.Tensor:
    """Mean next-token cross-entropy over the mask-true rows of one sequence."""
    logits = backbone(seq.input_rows[None])[0]
    total, n = masked_ce_sum(logits, seq.target_ids, seq.loss_mask)
    return total / n


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

StepFn = Callable[[list[tuple[int, ...]]], torch.Tensor]


def beam_search(step_fn: StepFn, beam_n: int, max_new: int, eos_id: int = EOS) -> tuple[int, ...]:
    """Beam search over total log-probability.

    ``step_fn`` maps a list of generated prefixes (all the same length) to a
    (len, V) tensor of next-token log-probabilities. Ties are broken toward the
    lexicographically smaller token sequence. Returns the best hypothesis with
    the trailing <eos> removed.
    """
    if beam_n < 1:
        raise ContractError(f"beam_n must be >= 1, got {beam_n}")
    live: list[tuple[float, tuple[int, ...]]] = [(0.0, ())]
    finished: list[tuple[float, tuple[int, ...]]] = []
    for _ in range(max_new):
        logp = step_fn([seq for _, seq in live]).double().cpu()
        k = min(beam_n, logp.shape[1])
        cands = []
        for (score, seq), row in zip(live, logp):
            top_v, top_i = torch.topk(row, k)
            # include every token tied with the k-th best so tie-breaking stays exact
            cutoff = top_v[-1].item()
            ids = torch.nonzero(row >= cutoff).flatten().tolist()
            for v in ids:
                cands.append((score + row[v].item(), seq + (v,)))
        cands.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for score, seq in cands[:beam_n]:
            (finished if seq[-1] == eos_id else live).append((score, seq))
        if not live:
            break
        best_live = max(s for s, _ in live)
        if finished and max(s for s, _ in finished) >= best_live:
            break
    pool = finished + live
    pool.sort(key=lambda c: (-c[0], c[1]))
    best = pool[0][1]
    return best[:-1] if best and best[-1] == eos_id else best


def greedy_search(step_fn: StepFn, max_new: int, eos_id: int = EOS) -> tuple[int, ...]:
    seq: tuple[int, ...] = ()
    for _ in range(max_new):
        logp = step_fn([seq])[0]
        nxt = int(torch.argmax(logp))
        if nxt == eos_id:
            return seq
        seq = seq + (nxt,)
    return seq


@torch.no_grad()
def generate(
    backbone: Backbone,
    img_proj: torch.Tensor | None,
    question: Sequence[int],
    tor: TorFeatures | None,
    mode: str = "beam",
    beam_n: int = 3,
    max_new: int = 16,
) -> list[int]:
    """Decode an answer after ``[image][<bos>][question][tor rows]``."""
    if mode not in ("greedy", "beam"):
        raise ContractError(f"unknown decoding mode {mode!r}")
    if mode == "beam" and beam_n < 1:
        raise ContractError(f"beam_n must be >= 1, got {beam_n}")
    prefix = assemble_stage2(backbone, img_proj, question, tor, None, training=False).input_rows
    limit = backbone.cfg.max_len - prefix.shape[0]
    max_new = min(max_new, limit)

    def step_fn(seqs: list[tuple[int, ...]]) -> torch.Tensor:
        n = len(seqs)
        rows = prefix[None].expand(n, -1, -1)
        if seqs[0]:
            ids = torch.as_tensor(seqs, dtype=torch.long)
            rows = torch.cat([rows, backbone.token_rows(ids)], dim=1)
        logits = backbone(rows)[:, -1]
        return torch.log_softmax(logits.double(), dim=-1)

    if mode == "greedy":
        return list(greedy_search(step_fn, max_new))
    return list(beam_search(step_fn, beam_n, max_new))

"""Byte-level vocabulary shared by the embedder and the backbone, plus <tor> planting."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import ContractError

TOR = 256
IMG = 257
BOS = 258
EOS = 259
EOR = 260
PAD = 261
VOCAB_SIZE = 262

SPECIAL_NAMES = {TOR: "<tor>", IMG: "<img>", BOS: "<bos>", EOS: "<eos>", EOR: "<eor>", PAD: "<pad>"}
STRATEGIES = ("even", "start", "end", "random")


class UnknownTokenError(ValueError):
    pass


class PlantingError(ValueError):
    pass


def encode(text: str | bytes) -> list[int]:
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return list(data)


def decode_bytes(ids: Sequence[int]) -> bytes:
    out = bytearray()
    for i in ids:
        if not 0 <= i < VOCAB_SIZE:
            raise UnknownTokenError(f"token id {i} is outside the vocabulary (size {VOCAB_SIZE})")
        if i < 256:
            out.append(i)
        else:
            out.extend(SPECIAL_NAMES[i].encode())
    return bytes(out)


def decode(ids: Sequence[int]) -> str:
    """Inverse of :func:`encode`; special ids render as their names."""
    return decode_bytes(ids).decode("utf-8", errors="replace")


def token_repr(i: int) -> str:
    if i in SPECIAL_NAMES:
        return SPECIAL_NAMES[i]
    ch = chr(i)
    return ch if ch.isprintable() and i < 128 else f"<0x{i:02X}>"


def vocab_table() -> dict[str, str]:
    return {str(i): token_repr(i) for i in range(VOCAB_SIZE)}


def vocab_json() -> str:
    return json.dumps(vocab_table(), sort_keys=False, ensure_ascii=True)


def vocab_hash() -> str:
    return hashlib.sha256(vocab_json().encode()).hexdigest()


@dataclass(frozen=True)
class PlantedRationale:
    """A rationale with k <tor> markers inserted.

    ``segments[i]`` is the half-open span of rationale tokens that follow
    ``tor_positions[i]`` up to the next marker. ``lead`` holds tokens placed
    before the first marker (non-empty only for ``end``/``random``).
    """
    tokens: tuple[int, ...]
    tor_positions: tuple[int, ...]
    segments: tuple[tuple[int, int], ...]
    lead: tuple[int, int]
    strategy: str

    @property
    def k(self) -> int:
        return len(self.tor_positions)

    def stripped(self) -> list[int]:
        tor = set(self.tor_positions)
        return [t for i, t in enumerate(self.tokens) if i not in tor]


def _insertion_points(L: int, k: int, strategy: str, seed: int | None) -> list[int]:
    """Indices j (0..L) such that a marker is inserted before rationale token j."""
    if strategy == "even":
        base, extra = divmod(L, k)
        points, at = [], 0
        for i in range(k):
            points.append(at)
            at += base + (1 if i < extra else 0)
        return points
    if strategy == "start":
        return [0] * k
    if strategy == "end":
        return [L] * k
    if strategy == "random":
        rng = np.random.default_rng(seed)
        return sorted(int(j) for j in rng.choice(L, size=k, replace=False))
    raise PlantingError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")


def plant_tor(rationale: Sequence[int], k: int, strategy: str = "even", seed: int | None = 0) -> PlantedRationale:
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    L = len(rationale)
    if strategy in ("even", "random") and L < k:
        raise PlantingError(f"cannot plant {k} <tor> tokens in a rationale of length {L} ({strategy})")
    points = _insertion_points(L, k, strategy, seed)
    tokens: list[int] = []
    tor_positions: list[int] = []
    j = 0
    for p in points:
        tokens.extend(rationale[j:p])
        j = p
        tor_positions.append(len(tokens))
        tokens.append(TOR)
    tokens.extend(rationale[j:])
    bounds = tor_positions[1:] + [len(tokens)]
    segments = tuple((p + 1, b) for p, b in zip(tor_positions, bounds))
    return PlantedRationale(
        tokens=tuple(tokens),
        tor_positions=tuple(tor_positions),
        segments=segments,
        lead=(0, tor_positions[0]),
        strategy=strategy,
    )


def segment_targets(p: PlantedRationale) -> list[bool]:
    """True on every rationale token, False on every <tor>."""
    tor = set(p.tor_positions)
    return [i not in tor for i in range(len(p.tokens))]

"""The model bundle: vision path, rationale embedder, tor projector and backbone.

Samples are prepared once into :class:`Example` records and batched here so
both training stages, evaluation and the analysis tools share one forward path.
"""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
from torch import nn

from . import tokenizer as tk
from .backbone import (
    KIND_IMAGE,
    KIND_TOKEN,
    Backbone,
    BackboneConfig,
    Layout,
    compose_batch,
    lm_layout,
    masked_ce_sum,
    stage1_layout,
    stage2_layout,
)
from .embedder import Embedder, EmbedderConfig, TorFeatures
from .layers import compose_rows, gather_rows
from .numerics import ContractError, ParamGroup
from .vision import MLPProjector, VisionAdapter, VisionConfig, VisionEncoder, image_tensor

GROUPS = ("vision_encoder", "vision_proj", "vision_adapter", "embedder", "tor_proj", "backbone")


@dataclass(frozen=True)
class MeteorConfig:
    vision: VisionConfig = field(default_factory=VisionConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    k_tor: int = 10
    strategy: str = "even"
    use_embedder: bool = True

    def __post_init__(self) -> None:
        if self.k_tor < 1:
            raise ContractError("k_tor must be >= 1")
        if self.strategy not in tk.STRATEGIES:
            raise ContractError(f"unknown strategy {self.strategy!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MeteorConfig":
        return cls(
            vision=VisionConfig(**d.get("vision", {})),
            embedder=EmbedderConfig(**d.get("embedder", {})),
            backbone=BackboneConfig(**d.get("backbone", {})),
            **{k: v for k, v in d.items() if k not in ("vision", "embedder", "backbone")},
        )


def toy_config(k_tor: int = 4, strategy: str = "even", use_embedder: bool = True,
               architecture: str = "ssm", max_len: int = 256) -> MeteorConfig:
    """A few-thousand-parameter stack for gradient checks and overfit sanity runs."""
    return MeteorConfig(
        vision=VisionConfig(d_vis=8),
        embedder=EmbedderConfig(d_emb=8, n_layers=1, d_state=4, n_heads=2, architecture=architecture),
        backbone=BackboneConfig(d_mlm=16, n_layers=1, n_heads=2, max_len=max_len),
        k_tor=k_tor,
        strategy=strategy,
        use_embedder=use_embedder,
    )


@dataclass
class Example:
    """A tokenised training/evaluation sample."""
    id: str
    question: list[int]
    rationale: list[int]
    answer: list[int]
    image: torch.Tensor | None = None

    @classmethod
    def from_triple(cls, t) -> "Example":
        img = None if t.image is None else image_tensor(t.image)
        return cls(t.id, tk.encode(t.question), tk.encode(t.rationale), tk.encode(t.answer), img)

    def seed(self, base: int) -> int:
        return zlib.crc32(f"{base}:{self.id}".encode())


class MeteorModel(nn.Module):
    def __init__(self, cfg: MeteorConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        vc = cfg.vision
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.vision_encoder = VisionEncoder(vc)
            self.vision_proj = MLPProjector(vc.d_vis, cfg.backbone.d_mlm)
            if cfg.use_embedder:
                self.vision_adapter = VisionAdapter(vc.d_vis, cfg.embedder.d_emb)
                self.embedder = Embedder(cfg.embedder)
                self.tor_proj = MLPProjector(cfg.embedder.d_emb, cfg.backbone.d_mlm)
            self.backbone = Backbone(cfg.backbone)

    # -- parameter bookkeeping -------------------------------------------------

    def group_names(self) -> list[str]:
        return [g for g in GROUPS if hasattr(self, g)]

    def frozen_groups(self, stage: int) -> set[str]:
        if stage == 0:
            return set(self.group_names()) - {"backbone"}
        if stage == 1:
            # without an embedder the backbone is the only thing that can absorb rationales
            return {"vision_encoder", "backbone"} if self.cfg.use_embedder else {"vision_encoder"}
        if stage == 2:
            return {"vision_encoder"}
        raise ContractError(f"unknown stage {stage}")

    def named_groups(self) -> dict[str, torch.nn.Parameter]:
        out = {}
        for g in self.group_names():
            for name, p in getattr(self, g).named_parameters():
                out[f"{g}.{name}"] = p
        return out

    def param_groups(self, stage: int) -> list[ParamGroup]:
        frozen = self.frozen_groups(stage)
        groups = []
        for path, p in self.named_groups().items():
            is_frozen = path.split(".", 1)[0] in frozen
            p.requires_grad_(not is_frozen)
            groups.append(ParamGroup(path, p, frozen=is_frozen))
        return groups

    # -- forward paths ---------------------------------------------------------

    def _images(self, examples: Sequence[Example]) -> torch.Tensor:
        vc = self.cfg.vision
        dtype = self.vision_encoder.proj.dtype
        imgs = torch.zeros(len(examples), vc.height, vc.width, vc.channels, dtype=dtype)
        for i, ex in enumerate(examples):
            if ex.image is not None:
                imgs[i] = ex.image.to(dtype)
        return imgs

    def _n_img(self, ex: Example) -> int:
        return 0 if ex.image is None else self.cfg.vision.n_patches

    def embed_batch(self, examples: Sequence[Example], tails: Sequence[Sequence[int]], vis: torch.Tensor):
        """Embedder over ``[image][question][tail]`` per example.

        Returns (features (B, T, d_emb), tor positions (B, k_max) padded with -1).
        """
        B = len(examples)
        lens = [self._n_img(ex) + len(ex.question) + len(t) for ex, t in zip(examples, tails)]
        T = max(lens)
        ids = torch.full((B, T), tk.PAD, dtype=torch.long)
        kinds = torch.full((B, T), KIND_TOKEN, dtype=torch.long)
        src = torch.full((B, T), -1, dtype=torch.long)
        tor_lists = []
        for i, (ex, tail) in enumerate(zip(examples, tails)):
            n_img = self._n_img(ex)
            kinds[i, :n_img] = KIND_IMAGE
            src[i, :n_img] = torch.arange(n_img)
            toks = list(ex.question) + list(tail)
            ids[i, n_img:n_img + len(toks)] = torch.as_tensor(toks, dtype=torch.long)
            tor_lists.append([n_img + j for j, t in enumerate(toks) if t == tk.TOR])
        k_max = max(len(p) for p in tor_lists)
        tor_pos = torch.full((B, max(k_max, 0)), -1, dtype=torch.long)
        for i, p in enumerate(tor_lists):
            tor_pos[i, :len(p)] = torch.as_tensor(p, dtype=torch.long)
        adapted = self.vision_adapter(vis)
        rows = compose_rows(self.embedder.token_rows(ids), kinds, {KIND_IMAGE: gather_rows(adapted, src)})
        return self.embedder(rows), tor_pos

    def tor_features(self, feats: torch.Tensor, tor_pos: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        raw = gather_rows(feats, tor_pos)
        return raw, self.tor_proj(raw)

    def stage1_plan(self, ex: Example, k: int, strategy: str, seed: int, source: str = "rationale"):
        """Planted tokens for one example; ``source='answer'`` embeds the answer instead."""
        text = ex.answer if source == "answer" else ex.rationale
        if not self.cfg.use_embedder:
            return list(text)
        k_eff = min(k, len(text)) if source == "answer" else k
        return tk.plant_tor(text, k_eff, strategy, seed=ex.seed(seed))

    def lm_loss(self, examples, planted) -> tuple[torch.Tensor, int]:
        """Plain language-model loss of the backbone over question + planted rationale text."""
        vis = self.vision_encoder(self._images(examples))
        layouts = [lm_layout(self._n_img(ex), ex.question, p) for ex, p in zip(examples, planted)]
        return self._backbone_loss(layouts, vis, None)

    def stage1_loss(self, examples, planted) -> tuple[torch.Tensor, int]:
        vis = self.vision_encoder(self._images(examples))
        layouts = [stage1_layout(self._n_img(ex), ex.question, p) for ex, p in zip(examples, planted)]
        tor_rows = None
        if self.cfg.use_embedder:
            tails = [p.tokens for p in planted]
            feats, tor_pos = self.embed_batch(examples, tails, vis)
            _, tor_rows = self.tor_features(feats, tor_pos)
        return self._backbone_loss(layouts, vis, tor_rows)

    def stage2_inputs(self, examples, vis) -> torch.Tensor | None:
        if not self.cfg.use_embedder:
            return None
        k = self.cfg.k_tor
        feats, tor_pos = self.embed_batch(examples, [[tk.TOR] * k] * len(examples), vis)
        return self.tor_features(feats, tor_pos)[1]

    def stage2_loss(self, examples) -> tuple[torch.Tensor, int]:
        vis = self.vision_encoder(self._images(examples))
        k = self.cfg.k_tor if self.cfg.use_embedder else 0
        layouts = [stage2_layout(self._n_img(ex), ex.question, k, ex.answer) for ex in examples]
        return self._backbone_loss(layouts, vis, self.stage2_inputs(examples, vis))

    def _backbone_loss(self, layouts: list[Layout], vis, tor_rows):
        rows, targets, mask = compose_batch(self.backbone, layouts, self.vision_proj(vis), tor_rows)
        return masked_ce_sum(self.backbone(rows), targets, mask)

    def stage1_length(self, ex: Example, planted) -> int:
        n = len(planted.tokens) if isinstance(planted, tk.PlantedRationale) else len(planted)
        return self._n_img(ex) + 1 + len(ex.question) + n + 1

    def stage2_length(self, ex: Example) -> int:
        k = self.cfg.k_tor if self.cfg.use_embedder else 0
        return self._n_img(ex) + 1 + len(ex.question) + k + len(ex.answer) + 1

    @torch.no_grad()
    def inference_inputs(self, ex: Example) -> tuple[torch.Tensor | None, TorFeatures | None]:
        """Projected image rows and tor features for one example at inference time."""
        vis = self.vision_encoder(self._images([ex]))
        img_proj = self.vision_proj(vis)[0] if ex.image is not None else None
        tor = None
        if self.cfg.use_embedder:
            k = self.cfg.k_tor
            feats, tor_pos = self.embed_batch([ex], [[tk.TOR] * k], vis)
            raw, proj = self.tor_features(feats, tor_pos)
            tor = TorFeatures(raw=raw[0], projected=proj[0])
        return img_proj, tor

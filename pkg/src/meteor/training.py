"""Two-stage training, checkpoints and exact-match evaluation."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import tokenizer as tk
from .backbone import generate
from .datapipe import QRATriple
from .model import Example, MeteorConfig, MeteorModel
from .numerics import ContractError, LrSchedule, ParamGroup, adamw_step, backward, cosine_lr

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "meteor-checkpoint/1"


class PipelineError(RuntimeError):
    pass


class CheckpointLoadError(ValueError):
    pass


@dataclass(frozen=True)
class StagePlan:
    stage: int
    epochs: int = 1
    steps: int | None = None
    batch_size: int = 16
    grad_accum: int = 1
    seed: int = 0
    peak_lr: float = 2e-3
    floor_lr: float = 2e-5
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float | None = 1.0
    rationale_source: str = "rationale"

    def __post_init__(self) -> None:
        if self.stage not in (0, 1, 2):
            raise ContractError(f"stage must be 0, 1 or 2, got {self.stage}")
        if self.batch_size < 1 or self.grad_accum < 1 or self.epochs < 1:
            raise ContractError("batch_size, grad_accum and epochs must be positive")
        if self.steps is not None and self.steps < 1:
            raise ContractError("steps must be positive when given")
        if self.rationale_source not in ("rationale", "answer"):
            raise ContractError(f"unknown rationale_source {self.rationale_source!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StagePlan":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass
class Checkpoint:
    config: MeteorConfig
    stage: int
    step: int
    seed: int
    params: dict[str, torch.Tensor]
    optim: dict[str, tuple[torch.Tensor, torch.Tensor]] | None = None
    plan: dict | None = None
    vocab_hash: str = field(default_factory=tk.vocab_hash)

    @classmethod
    def capture(cls, model: MeteorModel, stage: int, step: int, seed: int,
                groups: Sequence[ParamGroup] | None = None, plan: StagePlan | None = None) -> "Checkpoint":
        params = {k: p.detach().clone() for k, p in model.named_groups().items()}
        optim = None
        if groups is not None:
            optim = {g.name: (g.exp_avg.clone(), g.exp_avg_sq.clone()) for g in groups if not g.frozen}
        return cls(model.cfg, stage, step, seed, params, optim, None if plan is None else plan.to_dict())

    def adapt(self, config: MeteorConfig, seed: int | None = None) -> "Checkpoint":
        """Re-home these weights in a model built from ``config``.

        Groups the new config shares with this checkpoint keep their weights;
        the rest are freshly initialised from ``seed``. Used to start every
        ablation variant from one warm-started backbone.
        """
        seed = self.seed if seed is None else seed
        fresh = MeteorModel(config, seed=seed)
        params = {}
        for k, p in fresh.named_groups().items():
            src = self.params.get(k)
            params[k] = src.clone() if src is not None and src.shape == p.shape else p.detach().clone()
        return Checkpoint(config, self.stage, 0, seed, params, None, None, self.vocab_hash)

    def to_model(self) -> MeteorModel:
        model = MeteorModel(self.config, seed=self.seed)
        named = model.named_groups()
        missing = set(named) - set(self.params)
        if missing:
            raise CheckpointLoadError(f"checkpoint lacks parameter {sorted(missing)[0]}")
        with torch.no_grad():
            for k, p in named.items():
                src = self.params[k]
                if src.shape != p.shape:
                    raise CheckpointLoadError(f"{k}: checkpoint shape {tuple(src.shape)} != model {tuple(p.shape)}")
                p.copy_(src)
        return model


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------

def _blob(t: torch.Tensor) -> bytes:
    return t.detach().to(torch.float32).contiguous().numpy().astype("<f4", copy=False).tobytes()


def _unblob(path: Path, name: str, shape: list[int]) -> torch.Tensor:
    if not path.exists():
        raise CheckpointLoadError(f"{name}: missing blob {path.name}")
    data = path.read_bytes()
    expected = 4 * math.prod(shape)
    if len(data) != expected:
        raise CheckpointLoadError(f"{name}: blob has {len(data)} bytes, expected {expected}")
    return torch.from_numpy(np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(shape).copy())


def save_checkpoint(ckpt: Checkpoint, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    params = []
    for name, t in ckpt.params.items():
        (d / f"{name}.f32").write_bytes(_blob(t))
        params.append({"path": name, "shape": list(t.shape)})
    optim = None
    if ckpt.optim is not None:
        (d / "optim").mkdir(exist_ok=True)
        optim = []
        for name, (m, v) in ckpt.optim.items():
            (d / "optim" / f"{name}.m.f32").write_bytes(_blob(m))
            (d / "optim" / f"{name}.v.f32").write_bytes(_blob(v))
            optim.append({"path": name, "shape": list(m.shape)})
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": ckpt.config.to_dict(),
        "stage": ckpt.stage,
        "step": ckpt.step,
        "seed": ckpt.seed,
        "vocab_hash": ckpt.vocab_hash,
        "plan": ckpt.plan,
        "params": params,
        "optim": optim,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_checkpoint(directory: str | Path) -> Checkpoint:
    d = Path(directory)
    mf = d / "manifest.json"
    if not mf.exists():
        raise CheckpointLoadError(f"{d}: no manifest.json")
    try:
        manifest = json.loads(mf.read_text())
        cfg = MeteorConfig.from_dict(manifest["config"])
        stage, step, seed = manifest["stage"], manifest["step"], manifest["seed"]
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointLoadError(f"{d}: incomplete manifest ({e})") from e
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointLoadError(f"{d}: unsupported format {manifest.get('format')!r}")
    if manifest.get("vocab_hash") != tk.vocab_hash():
        raise CheckpointLoadError(f"{d}: vocabulary hash mismatch")
    params = {p["path"]: _unblob(d / f"{p['path']}.f32", p["path"], p["shape"]) for p in manifest["params"]}
    optim = None
    if manifest.get("optim") is not None:
        optim = {
            p["path"]: (
                _unblob(d / "optim" / f"{p['path']}.m.f32", p["path"], p["shape"]),
                _unblob(d / "optim" / f"{p['path']}.v.f32", p["path"], p["shape"]),
            )
            for p in manifest["optim"]
        }
    ckpt = Checkpoint(cfg, stage, step, seed, params, optim, manifest.get("plan"), manifest["vocab_hash"])
    ckpt.to_model()  # validates names and shapes against the config
    return ckpt


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------

def prepare_examples(triples: Sequence[QRATriple]) -> list[Example]:
    return [t if isinstance(t, Example) else Example.from_triple(t) for t in triples]


class Trainer:
    """Deterministic single-stage training loop over a fixed example list."""

    def __init__(self, model: MeteorModel, plan: StagePlan, data: Sequence[QRATriple | Example],
                 start_step: int = 0, optim_state: dict | None = None, metrics_path: str | Path | None = None):
        self.model = model
        self.plan = plan
        self.metrics_path = None if metrics_path is None else Path(metrics_path)
        examples = prepare_examples(data)
        self.skipped_empty = 0
        self.dropped_long = 0
        self.examples: list[Example] = []
        self.planted: list = []
        cfg = model.cfg
        for ex in examples:
            if plan.stage in (0, 1):
                text = ex.answer if plan.rationale_source == "answer" else ex.rationale
                if not text:
                    self.skipped_empty += 1
                    continue
                try:
                    p = model.stage1_plan(ex, cfg.k_tor, cfg.strategy, plan.seed, plan.rationale_source)
                except tk.PlantingError as e:
                    log.info("skipping %s: %s", ex.id, e)
                    self.skipped_empty += 1
                    continue
                length = model.stage1_length(ex, p)
            else:
                p = None
                length = model.stage2_length(ex)
            if length > cfg.backbone.max_len:
                self.dropped_long += 1
                continue
            self.examples.append(ex)
            self.planted.append(p)
        if self.skipped_empty:
            log.warning("stage %d: skipped %d samples without usable rationale", plan.stage, self.skipped_empty)
        if self.dropped_long:
            log.warning("stage %d: dropped %d samples longer than max_len", plan.stage, self.dropped_long)
        if not self.examples:
            raise PipelineError(f"stage {plan.stage}: no trainable samples")
        per_step = plan.batch_size * plan.grad_accum
        self.steps_per_epoch = math.ceil(len(self.examples) / per_step)
        self.total_steps = plan.steps or plan.epochs * self.steps_per_epoch
        self.schedule = LrSchedule(self.total_steps, plan.peak_lr, plan.floor_lr)
        self.groups = model.param_groups(plan.stage)
        if optim_state:
            for g in self.groups:
                if g.name in optim_state:
                    m, v = optim_state[g.name]
                    g.exp_avg.copy_(m)
                    g.exp_avg_sq.copy_(v)
        self.step = start_step
        self._perm_cache: dict[int, np.ndarray] = {}

    def _batch_indices(self, step: int) -> list[int]:
        epoch, offset = divmod(step, self.steps_per_epoch)
        if epoch not in self._perm_cache:
            self._perm_cache = {epoch: np.random.default_rng([self.plan.seed, self.plan.stage, epoch]).permutation(len(self.examples))}
        per_step = self.plan.batch_size * self.plan.grad_accum
        return self._perm_cache[epoch][offset * per_step:(offset + 1) * per_step].tolist()

    def micro_batches(self, step: int) -> list[list[int]]:
        idx = self._batch_indices(step)
        b = self.plan.batch_size
        return [idx[i:i + b] for i in range(0, len(idx), b)]

    def batch_loss(self, idx: list[int]) -> tuple[torch.Tensor, int]:
        exs = [self.examples[i] for i in idx]
        if self.plan.stage == 0:
            return self.model.lm_loss(exs, [self.planted[i] for i in idx])
        if self.plan.stage == 1:
            return self.model.stage1_loss(exs, [self.planted[i] for i in idx])
        return self.model.stage2_loss(exs)

    def accumulate(self, step: int) -> tuple[dict[str, torch.Tensor], float]:
        """Token-mean gradients and loss over every micro-batch of ``step``."""
        total_ce = 0.0
        total_n = 0
        grads: dict[str, torch.Tensor] = {}
        self.model.train()
        for mb in self.micro_batches(step):
            ce, n = self.batch_loss(mb)
            g = backward(ce, self.groups)
            for k, v in g.items():
                grads[k] = v if k not in grads else grads[k] + v
            total_ce += float(ce.detach())
            total_n += n
        for k in grads:
            grads[k] = grads[k] / total_n
        return grads, total_ce / total_n

    def step_once(self) -> float:
        """One optimizer step; returns the token-mean loss measured before the update."""
        if self.step >= self.total_steps:
            raise ContractError("training schedule exhausted")
        grads, loss = self.accumulate(self.step)
        if self.plan.clip_norm is not None:
            norm = math.sqrt(sum(float(v.pow(2).sum()) for v in grads.values()))
            if norm > self.plan.clip_norm:
                scale = self.plan.clip_norm / (norm + 1e-6)
                grads = {k: v * scale for k, v in grads.items()}
        lr = cosine_lr(self.step, self.schedule)
        adamw_step(self.groups, grads, lr, self.step + 1, self.plan.betas, self.plan.eps, self.plan.weight_decay)
        self.step += 1
        if self.metrics_path is not None:
            with open(self.metrics_path, "a") as f:
                f.write(json.dumps({"step": self.step, "lr": lr, "loss": loss, "stage": self.plan.stage}) + "\n")
        return loss

    def run(self) -> list[float]:
        losses = []
        while self.step < self.total_steps:
            losses.append(self.step_once())
        return losses

    def checkpoint(self) -> Checkpoint:
        return Checkpoint.capture(self.model, self.plan.stage, self.step, self.plan.seed, self.groups, self.plan)


@dataclass
class StageResult:
    checkpoint: Checkpoint
    losses: list[float]
    skipped: int = 0
    dropped: int = 0


def pretrain_backbone(plan: StagePlan, data: Sequence[QRATriple], config: MeteorConfig,
                      model_seed: int | None = None, metrics_path: str | Path | None = None) -> StageResult:
    """Warm-start the backbone as a language model over question + rationale text.

    Stage 1 keeps the backbone frozen, so it has to arrive already able to
    read a conditioning row and continue text from it. Everything except the
    backbone stays frozen here. The result is tagged stage 0.
    """
    if plan.stage != 0:
        raise ContractError("pretrain_backbone needs a stage-0 plan")
    model = MeteorModel(config, seed=plan.seed if model_seed is None else model_seed)
    trainer = Trainer(model, plan, data, 0, None, metrics_path)
    losses = trainer.run()
    return StageResult(trainer.checkpoint(), losses, trainer.skipped_empty, trainer.dropped_long)


def train_stage1(plan: StagePlan, data: Sequence[QRATriple], config: MeteorConfig | None = None,
                 init: Checkpoint | None = None, model_seed: int | None = None,
                 metrics_path: str | Path | None = None) -> StageResult:
    """Stage 1: embedder, tor projector, vision projector and adapter learn to
    regenerate rationale segments through the frozen backbone.

    ``init`` is either a warm-started (stage-0) checkpoint to begin from or a
    stage-1 checkpoint to resume; without it a fresh model is built from ``config``.
    """
    if plan.stage != 1:
        raise ContractError("train_stage1 needs a stage-1 plan")
    if init is not None:
        if init.stage == 0:
            model, start, optim = init.to_model(), 0, None
        elif init.stage == 1:
            model, start, optim = init.to_model(), init.step, init.optim
        else:
            raise ContractError("train_stage1 starts from a stage-0 checkpoint or resumes a stage-1 one")
    else:
        if config is None:
            raise ContractError("train_stage1 needs a config or a checkpoint")
        model, start, optim = MeteorModel(config, seed=plan.seed if model_seed is None else model_seed), 0, None
    trainer = Trainer(model, plan, data, start, optim, metrics_path)
    losses = trainer.run()
    return StageResult(trainer.checkpoint(), losses, trainer.skipped_empty, trainer.dropped_long)


def train_stage2(plan: StagePlan, data: Sequence[QRATriple], init: Checkpoint | None,
                 metrics_path: str | Path | None = None) -> StageResult:
    """Stage 2: everything except the vision encoder trains on question -> answer
    with the embedder seeing only ``[image][question][<tor> x k]``.

    ``init`` must be a stage-1 checkpoint, or a stage-2 checkpoint to resume.
    """
    if plan.stage != 2:
        raise ContractError("train_stage2 needs a stage-2 plan")
    if init is None:
        raise ContractError("train_stage2 requires a stage-1 checkpoint")
    model = init.to_model()
    if init.stage == 1:
        start, optim = 0, None
    elif init.stage == 2:
        start, optim = init.step, init.optim
    else:
        raise ContractError(f"checkpoint has unknown stage {init.stage}")
    trainer = Trainer(model, plan, data, start, optim, metrics_path)
    losses = trainer.run()
    return StageResult(trainer.checkpoint(), losses, trainer.skipped_empty, trainer.dropped_long)


def initial_checkpoint(config: MeteorConfig, seed: int, base: Checkpoint | None = None) -> Checkpoint:
    """A checkpoint tagged as stage 1 without any rationale training.

    For pipelines that skip stage 1 (the embedder-free baseline, a 0% Q-R
    ratio). ``base`` supplies warm-started weights where the configs overlap.
    """
    if base is None:
        return Checkpoint.capture(MeteorModel(config, seed=seed), stage=1, step=0, seed=seed)
    ckpt = base.adapt(config, seed)
    ckpt.stage = 1
    return ckpt


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    predictions: list[str]
    n: int


@torch.no_grad()
def evaluate(model: MeteorModel, data: Sequence[QRATriple | Example], mode: str = "beam",
             beam_n: int = 3, max_new: int = 8) -> EvalResult:
    """Exact-match accuracy of decoded answers."""
    model.eval()
    examples = prepare_examples(data)
    preds, hits = [], 0
    for ex in examples:
        img_proj, tor = model.inference_inputs(ex)
        out = generate(model.backbone, img_proj, ex.question, tor, mode=mode, beam_n=beam_n, max_new=max_new)
        text = tk.decode(out)
        preds.append(text)
        hits += text == tk.decode(ex.answer)
    return EvalResult(hits / max(len(examples), 1), preds, len(examples))

"""Command-line entry point: ``meteor <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Sequence

import torch

from . import analysis, datapipe, training
from . import numerics as nx
from . import tokenizer as tk
from .config import ConfigError, DataSpec, RunConfig, SyntheticSpec, load_run_config
from .model import MeteorModel, toy_config
from .numerics import ContractError

log = logging.getLogger("meteor")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

RUNTIME_ERRORS = (
    ConfigError,
    ContractError,
    OSError,
    training.PipelineError,
    training.CheckpointLoadError,
    datapipe.TripleError,
    datapipe.FilterError,
    datapipe.CurationError,
    tk.PlantingError,
    tk.UnknownTokenError,
    ValueError,
)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse with usage errors raised instead of exiting with status 2."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _run_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if getattr(args, "config", None) else RunConfig(seed=0)
    return cfg.with_overrides(
        seed=getattr(args, "seed", None),
        k_tor=getattr(args, "k_tor", None),
        strategy=getattr(args, "strategy", None),
        arch=getattr(args, "arch", None),
    )


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(out: Path, cfg: RunConfig) -> None:
    (out / "config.json").write_text(cfg.to_json())


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_splits(cfg: RunConfig, need_test: bool = False):
    """(train, test, pretrain) triples as described by the config's data section."""
    spec: DataSpec = cfg.data
    if spec.train:
        train = datapipe.read_jsonl(spec.train)
        test = datapipe.read_jsonl(spec.test) if spec.test else []
        pre = datapipe.read_jsonl(spec.pretrain) if spec.pretrain else []
    else:
        syn = spec.synthetic or SyntheticSpec()
        data = datapipe.gen_synthetic(syn.n, cfg.seed, syn.task)
        cut = round(syn.n * (1 - syn.test_fraction))
        train, test = data[:cut], data[cut:]
        pre = datapipe.gen_synthetic(syn.pretrain_n, [cfg.seed, 1], syn.task, "pre-") if syn.pretrain_n else []
    if need_test and not test:
        raise ConfigError("no test data configured")
    return train, test, pre


def _load_init(path: str | None) -> training.Checkpoint | None:
    return None if path is None else training.load_checkpoint(path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = _out_dir(args)
    data = datapipe.gen_synthetic(args.n + args.test_n, args.seed, args.task)
    datapipe.write_jsonl(out / "train.jsonl", data[:args.n])
    if args.test_n:
        datapipe.write_jsonl(out / "test.jsonl", data[args.n:])
    print(f"wrote {args.n} samples to {out / 'train.jsonl'}")
    return EXIT_OK


def _read_pairs(path: str) -> list[datapipe.QAPair]:
    pairs = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                obj = json.loads(line)
                pairs.append(datapipe.QAPair(str(obj["id"]), obj["question"], obj["answer"], obj.get("image")))
    return pairs


def cmd_curate(args) -> int:
    out = _out_dir(args)
    if args.backend == "http":
        client = datapipe.CurationClient.from_env(backend="http", seed=args.seed, timeout=args.timeout)
    else:
        client = datapipe.CurationClient(backend="mock", seed=args.seed)
    res = datapipe.curate(client, _read_pairs(args.input), concurrency=args.concurrency, retries=args.retries)
    datapipe.write_jsonl(out / "curated.jsonl", res.triples)
    _write_json(out / "curate_summary.json", {**res.summary(), "failures": [list(f) for f in res.failed]})
    print(json.dumps(res.summary()))
    return EXIT_OK


def cmd_filter(args) -> int:
    out = _out_dir(args)
    res = datapipe.filter_triples(datapipe.read_jsonl(args.input), strict=not args.lenient)
    datapipe.write_jsonl(out / "filtered.jsonl", res.kept)
    _write_json(out / "filter_summary.json", res.summary())
    print(json.dumps(res.summary()))
    return EXIT_OK


def cmd_train_stage1(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args)
    _snapshot(out, cfg)
    train, _, pre = load_splits(cfg)
    metrics = out / "metrics.jsonl"
    metrics.write_text("")
    init = _load_init(args.init)
    if init is None and cfg.stages[0].steps and pre:
        warm = training.pretrain_backbone(cfg.plan(0), pre, cfg.model, metrics_path=metrics)
        training.save_checkpoint(warm.checkpoint, out / "pretrained")
        init = warm.checkpoint
    stage1_data = analysis.qr_subset(train, args.qr_ratio, cfg.seed)
    if init is not None and init.stage == 0:
        init = init.adapt(cfg.model, cfg.seed)
    res = training.train_stage1(cfg.plan(1), stage1_data, cfg.model, init=init, metrics_path=metrics)
    training.save_checkpoint(res.checkpoint, out / "checkpoint")
    _write_json(out / "stage1_summary.json", {
        "steps": res.checkpoint.step, "final_loss": res.losses[-1] if res.losses else None,
        "skipped": res.skipped, "dropped": res.dropped, "samples": len(stage1_data),
    })
    print(f"stage 1 done: {res.checkpoint.step} steps, checkpoint in {out / 'checkpoint'}")
    return EXIT_OK


def cmd_train_stage2(args) -> int:
    if args.init is None:
        raise UsageError("train-stage2: --init CHECKPOINT (a stage-1 checkpoint) is required")
    cfg = _run_config(args)
    out = _out_dir(args)
    _snapshot(out, cfg)
    train, _, _ = load_splits(cfg)
    metrics = out / "metrics.jsonl"
    metrics.write_text("")
    res = training.train_stage2(cfg.plan(2), train, training.load_checkpoint(args.init), metrics_path=metrics)
    training.save_checkpoint(res.checkpoint, out / "checkpoint")
    _write_json(out / "stage2_summary.json", {
        "steps": res.checkpoint.step, "final_loss": res.losses[-1] if res.losses else None,
        "skipped": res.skipped, "dropped": res.dropped,
    })
    print(f"stage 2 done: {res.checkpoint.step} steps, checkpoint in {out / 'checkpoint'}")
    return EXIT_OK


def _decode_mode(beam: int) -> tuple[str, int]:
    if beam < 0:
        raise UsageError("--beam must be >= 0 (0 selects greedy decoding)")
    return ("greedy", 1) if beam == 0 else ("beam", beam)


def cmd_eval(args) -> int:
    if args.init is None:
        raise UsageError("eval: --init CHECKPOINT is required")
    mode, beam_n = _decode_mode(args.beam)
    cfg = _run_config(args)
    out = _out_dir(args)
    _snapshot(out, cfg)
    test = datapipe.read_jsonl(args.data) if args.data else load_splits(cfg, need_test=True)[1]
    model = training.load_checkpoint(args.init).to_model()
    res = training.evaluate(model, test, mode=mode, beam_n=beam_n, max_new=args.max_new)
    with open(out / "predictions.jsonl", "w") as f:
        for t, p in zip(test, res.predictions):
            f.write(json.dumps({"id": t.id, "prediction": p, "answer": t.answer, "correct": p == t.answer}) + "\n")
    _write_json(out / "eval.json", {"accuracy": res.accuracy, "n": res.n, "mode": mode, "beam_n": beam_n})
    print(f"exact match {res.accuracy:.4f} on {res.n} samples")
    return EXIT_OK


def cmd_generate(args) -> int:
    if args.init is None:
        raise UsageError("generate: --init CHECKPOINT is required")
    mode, beam_n = _decode_mode(args.beam)
    image = json.loads(Path(args.image).read_text()) if args.image else None
    model = training.load_checkpoint(args.init).to_model()
    ex = training.prepare_examples([datapipe.QRATriple("cli", image, args.question, "", "?")])[0]
    img_proj, tor = model.inference_inputs(ex)
    from .backbone import generate
    ids = generate(model.backbone, img_proj, ex.question, tor, mode=mode, beam_n=beam_n, max_new=args.max_new)
    text = tk.decode(ids)
    if args.out:
        out = _out_dir(args)
        _write_json(out / "generation.json", {"question": args.question, "answer": text, "mode": mode, "beam_n": beam_n})
    print(text)
    return EXIT_OK


def cmd_analyze_tor(args) -> int:
    if args.init is None:
        raise UsageError("analyze-tor: --init CHECKPOINT is required")
    cfg = _run_config(args)
    out = _out_dir(args)
    _snapshot(out, cfg)
    pairs = datapipe.read_jsonl(args.data) if args.data else load_splits(cfg, need_test=True)[1]
    pairs = pairs[:args.n]
    model = training.load_checkpoint(args.init).to_model()
    res = analysis.tor_retrieval(model, pairs, seed=cfg.seed)
    res.matrix.to_csv(out / "similarity_flatten.csv")
    res.secondary.to_csv(out / "similarity_rowmean.csv")
    _write_json(out / "retrieval.json", {"flatten": res.stats, "row-mean": res.secondary.stats(), "n": res.matrix.n})
    print(json.dumps(res.stats))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args)
    _snapshot(out, cfg)
    rows = analysis.throughput_bench(cfg.model.embedder, sorted(args.lengths), runs=args.runs, seed=cfg.seed)
    _write_json(out / "bench.json", [asdict(r) for r in rows])
    print(analysis.bench_table(rows))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args)
    _snapshot(out, cfg)
    train, test, pre = load_splits(cfg, need_test=True)
    budget = analysis.AblationBudget(
        pretrain_steps=cfg.stages[0].steps or 0,
        stage1_steps=cfg.stages[1].steps or 1,
        stage2_steps=cfg.stages[2].steps or 1,
        batch_size=cfg.stages[2].batch_size,
        peak_lr=cfg.stages[2].peak_lr,
        floor_lr=cfg.stages[2].floor_lr,
        eval_mode=_decode_mode(args.beam)[0],
        beam_n=max(args.beam, 1),
    )
    grid = analysis.GRIDS[args.grid]
    if args.qr_ratio is not None and args.grid != "f":
        grid = [{**g, "qr_ratio": args.qr_ratio} for g in grid]
    seeds = args.seeds if args.seeds else [cfg.seed]
    with open(out / "metrics.jsonl", "w") as log_f:
        def progress(row):
            log_f.write(json.dumps(row.as_dict()) + "\n")
            log_f.flush()
        report = analysis.run_ablation(grid, cfg.model, train, test, budget, seeds,
                                       pretrain_data=pre if budget.pretrain_steps and pre else None,
                                       grid_name=args.grid, progress=progress)
    for fmt in args.format:
        analysis.emit_report(report, fmt, out / f"report{analysis.REPORT_FORMATS[fmt]}")
    print(report.to_markdown())
    return EXIT_OK


def stack_grad_check(cfg, seed: int = 0, max_entries: int = 20, n_samples: int = 2):
    """Finite-difference check of the full stage-1 and stage-2 losses of a float64 stack."""
    data = training.prepare_examples(datapipe.gen_synthetic(n_samples, seed, "mixed"))
    model = MeteorModel(cfg, seed=seed).double()
    reports = {}
    for stage in (1, 2):
        groups = [g for g in model.param_groups(stage) if not g.frozen]
        if stage == 1:
            planted = [model.stage1_plan(ex, cfg.k_tor, cfg.strategy, seed) for ex in data]

            def loss_fn():
                ce, n = model.stage1_loss(data, planted)
                return ce / n
        else:
            def loss_fn():
                ce, n = model.stage2_loss(data)
                return ce / n
        reports[f"stage{stage}"] = nx.grad_check(loss_fn, groups, max_entries=max_entries, seed=seed)
    return reports


def cmd_grad_check(args) -> int:
    cfg = toy_config() if not args.config else _run_config(args).model
    if args.k_tor is not None:
        cfg = replace(cfg, k_tor=args.k_tor)
    if args.arch is not None:
        cfg = replace(cfg, embedder=replace(cfg.embedder, architecture=args.arch))
    reports = stack_grad_check(cfg, seed=args.seed or 0, max_entries=args.max_entries)
    worst = max(r.max_rel_err for r in reports.values())
    for name, rep in reports.items():
        print(f"== {name} ==")
        print(rep.table())
    print(f"max_rel_err {worst:.3e}")
    if args.out:
        out = _out_dir(args)
        _write_json(out / "grad_check.json", {
            "max_rel_err": worst,
            "stages": {k: {"max_rel_err": r.max_rel_err, "per_param": r.per_param} for k, r in reports.items()},
        })
    if worst >= args.tolerance:
        print(f"gradient check FAILED: {worst:.3e} >= {args.tolerance:g}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = Parser(prog="meteor", description="Desk-scale rationale-embedding multimodal model.", formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)
    sub.required = True

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        sp.set_defaults(func=func)
        return sp

    def model_flags(sp, init_help="checkpoint directory to start from"):
        sp.add_argument("--config", metavar="PATH", default=None, help="run config JSON")
        sp.add_argument("--out", metavar="DIR", required=True, help="run directory")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--init", metavar="CHECKPOINT", default=None, help=init_help)
        sp.add_argument("--k-tor", type=int, default=None, help="number of <tor> tokens")
        sp.add_argument("--strategy", choices=tk.STRATEGIES, default=None, help="<tor> placement")
        sp.add_argument("--arch", choices=("ssm", "transformer"), default=None, help="embedder architecture")

    sp = add("synth", cmd_synth, "generate a synthetic Q-R-A corpus")
    sp.add_argument("--task", choices=("arith", "count", "mixed"), default="mixed", help="synthetic task")
    sp.add_argument("--n", type=int, default=100, help="training samples written to train.jsonl")
    sp.add_argument("--test-n", type=int, default=0, help="extra samples written to test.jsonl")
    sp.add_argument("--seed", type=int, default=0, help="corpus seed")
    sp.add_argument("--out", metavar="DIR", required=True, help="output directory")

    sp = add("curate", cmd_curate, "generate and score rationales for question-answer pairs")
    sp.add_argument("--in", dest="input", metavar="PATH", required=True, help="JSONL of {id, question, answer, image?}")
    sp.add_argument("--out", metavar="DIR", required=True, help="output directory")
    sp.add_argument("--backend", choices=("mock", "http"), default="mock",
                    help=f"http reads {datapipe.API_URL_ENV} and {datapipe.API_KEY_ENV}")
    sp.add_argument("--seed", type=int, default=0, help="mock backend seed")
    sp.add_argument("--concurrency", type=int, default=4, help="concurrent requests")
    sp.add_argument("--retries", type=int, default=2, help="retries per sample after a transport error")
    sp.add_argument("--timeout", type=float, default=30.0, help="request timeout in seconds")

    sp = add("filter", cmd_filter, "drop triples scoring below 5 or rejected in review")
    sp.add_argument("--in", dest="input", metavar="PATH", required=True, help="JSONL of curated triples")
    sp.add_argument("--out", metavar="DIR", required=True, help="output directory")
    sp.add_argument("--lenient", action="store_true", help="count unscored triples as failed instead of erroring")

    sp = add("train-stage1", cmd_train_stage1, "warm-start the backbone, then train the rationale embedder")
    model_flags(sp, "stage-0 checkpoint to start from or stage-1 checkpoint to resume")
    sp.add_argument("--qr-ratio", type=int, default=100, metavar="PCT", help="percent of samples whose rationale is used")

    sp = add("train-stage2", cmd_train_stage2, "joint question-answer training from a stage-1 checkpoint")
    model_flags(sp, "stage-1 checkpoint (required)")

    sp = add("eval", cmd_eval, "exact-match accuracy on held-out data")
    model_flags(sp, "trained checkpoint (required)")
    sp.add_argument("--data", metavar="PATH", default=None, help="JSONL test set; the config test split when omitted")
    sp.add_argument("--beam", type=int, default=3, help="beam width; 0 decodes greedily")
    sp.add_argument("--max-new", type=int, default=8, help="maximum answer tokens")

    sp = add("generate", cmd_generate, "answer one question")
    sp.add_argument("--init", metavar="CHECKPOINT", default=None, help="trained checkpoint (required)")
    sp.add_argument("--question", required=True, help="question text")
    sp.add_argument("--image", metavar="PATH", default=None, help="JSON HxWxC nested list")
    sp.add_argument("--beam", type=int, default=3, help="beam width; 0 decodes greedily")
    sp.add_argument("--max-new", type=int, default=8, help="maximum answer tokens")
    sp.add_argument("--out", metavar="DIR", default=None, help="directory for generation.json")

    sp = add("analyze-tor", cmd_analyze_tor, "with/without-rationale <tor> feature similarity")
    model_flags(sp, "stage-1 or later checkpoint (required)")
    sp.add_argument("--data", metavar="PATH", default=None, help="JSONL of question-rationale pairs; the config test split when omitted")
    sp.add_argument("--n", type=int, default=10, help="number of question-rationale pairs")

    sp = add("bench", cmd_bench, "embedder forward throughput")
    model_flags(sp)
    sp.add_argument("--lengths", type=int, nargs="+", default=[256, 512, 1024, 2048], help="sequence lengths to time")
    sp.add_argument("--runs", type=int, default=5, help="timed runs per length (median reported)")

    sp = add("ablate", cmd_ablate, "run an ablation grid and write reports")
    model_flags(sp)
    sp.add_argument("--grid", choices=sorted(analysis.GRIDS), default="e", help="ablation grid")
    sp.add_argument("--seeds", type=int, nargs="*", default=None, help="seeds to repeat the grid over")
    sp.add_argument("--qr-ratio", type=int, default=None, metavar="PCT", help="fix the Q-R ratio on grids other than f")
    sp.add_argument("--beam", type=int, default=0, help="beam width; 0 decodes greedily")
    sp.add_argument("--format", nargs="+", choices=sorted(analysis.REPORT_FORMATS), default=["markdown", "csv", "json"], help="report formats to write")

    sp = add("grad-check", cmd_grad_check, "finite-difference check of the full training losses")
    sp.add_argument("--config", metavar="PATH", default=None, help="run config JSON; the toy stack when omitted")
    sp.add_argument("--out", metavar="DIR", default=None, help="directory for grad_check.json")
    sp.add_argument("--seed", type=int, default=None, help="parameter init and sampling seed")
    sp.add_argument("--k-tor", type=int, default=None, help="number of <tor> tokens")
    sp.add_argument("--arch", choices=("ssm", "transformer"), default=None, help="embedder architecture")
    sp.add_argument("--max-entries", type=int, default=20, help="entries probed per parameter")
    sp.add_argument("--tolerance", type=float, default=1e-3, help="fail when the overall relative error reaches this")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, torch.get_num_threads()))
    try:
        return args.func(args)
    except UsageError as e:
        print(f"meteor: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except RUNTIME_ERRORS as e:
        print(f"meteor: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

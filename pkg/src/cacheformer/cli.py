"""Command-line entry point: ``cacheformer {train,eval,dump,bench,check}``.

Exit codes: 0 success, 1 invalid config, 2 runtime failure, 3 check failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, ModelConfig, build, parse_pairs, split_pairs, validate
from .training import NonFiniteLoss, TrainPlan, evaluate, load_corpus, train

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3
log = logging.getLogger("cacheformer")


@dataclass
class Invocation:
    subcommand: str
    config_path: Path
    out_dir: Path
    checkpoint: Optional[Path] = None
    overrides: dict[str, str] = field(default_factory=dict)
    split: str = "valid"
    layer: int = 0
    head: int = 0
    ns: tuple[int, ...] = (512, 1024, 2048, 4096, 8192)
    repeats: int = 5

    def settings(self) -> tuple[ModelConfig, TrainPlan]:
        text = self.config_path.read_text()
        pairs = parse_pairs(text)
        for key, value in self.overrides.items():
            pairs[key] = value
        model_pairs, plan_pairs = split_pairs(pairs, ModelConfig, TrainPlan)
        config = validate(build(ModelConfig, model_pairs))
        plan = build(TrainPlan, plan_pairs).validate()
        if plan.corpus and not Path(plan.corpus).is_absolute():
            plan = build(TrainPlan, {"corpus": str(self.config_path.parent / plan.corpus)}, base=plan)
        return config, plan


def _parse_override(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cacheformer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name, help_text in (
        ("train", "train one phase and write checkpoints/ and metrics.csv"),
        ("eval", "evaluate a checkpoint on a corpus split"),
        ("dump", "write attention heatmaps and the segment-selection trace"),
        ("bench", "time attention-only forward passes over sequence lengths"),
        ("check", "run the oracle suite and gradient check"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--out", type=Path, default=Path("out"))
        p.add_argument("--ckpt", type=Path)
        p.add_argument("--set", dest="overrides", action="append", default=[], type=_parse_override,
                       metavar="KEY=VALUE")
        if name == "eval":
            p.add_argument("--split", default="valid", choices=("train", "valid", "test"))
        if name == "dump":
            p.add_argument("--split", default="valid", choices=("train", "valid", "test"))
            p.add_argument("--layer", type=int, default=0)
            p.add_argument("--head", type=int, default=0)
        if name == "bench":
            p.add_argument("--ns", type=lambda t: tuple(int(x) for x in t.split(",")),
                           default=(512, 1024, 2048, 4096, 8192))
            p.add_argument("--repeats", type=int, default=5)
    return parser


def _load_model(invocation: Invocation, config: ModelConfig, plan: TrainPlan):
    from .model import LanguageModel

    if invocation.checkpoint is None:
        torch.manual_seed(plan.seed)
        return LanguageModel(config)
    ckpt = load_checkpoint(invocation.checkpoint)
    model = LanguageModel(ckpt.config.replace(aggregation_mode=config.aggregation_mode))
    model.load_state_dict(ckpt.model_state())
    return model


def _cmd_train(inv: Invocation, config: ModelConfig, plan: TrainPlan) -> int:
    if not plan.corpus:
        raise ConfigError("train needs a corpus (set corpus=PATH)")
    result = train(plan, config, load_corpus(plan.corpus), inv.out_dir, inv.checkpoint)
    v = result.final_valid
    print(f"step {result.step}: valid loss {v['cross_entropy_nats']:.6f} nats, "
          f"perplexity {v['perplexity']:.4f}, bpc {v['bpc']:.6f}")
    print(f"checkpoint: {result.checkpoint}")
    return EXIT_OK


def _cmd_eval(inv: Invocation, config: ModelConfig, plan: TrainPlan) -> int:
    if inv.checkpoint is None:
        raise CheckpointError("eval needs --ckpt")
    if not plan.corpus:
        raise ConfigError("eval needs a corpus (set corpus=PATH)")
    model = _load_model(inv, config, plan)
    metrics = evaluate(model, load_corpus(plan.corpus), inv.split, plan.eval_windows, plan.batch_size)
    print("split,loss_nats,perplexity,bpc")
    print(f"{inv.split},{metrics['cross_entropy_nats']:.8f},{metrics['perplexity']:.8f},{metrics['bpc']:.8f}")
    return EXIT_OK


def _cmd_dump(inv: Invocation, config: ModelConfig, plan: TrainPlan) -> int:
    from .diagnostics import dump_attention

    model = _load_model(inv, config, plan)
    n = model.config.n
    if plan.corpus:
        data = load_corpus(plan.corpus).split(inv.split)[:n]
        tokens = torch.from_numpy(data.astype(np.int64))
    else:
        tokens = torch.randint(0, model.config.vocab, (n,), generator=torch.Generator().manual_seed(plan.seed))
    paths = dump_attention(model, tokens, inv.layer, inv.head, inv.out_dir / "dumps")
    for name, path in paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


def _cmd_bench(inv: Invocation, config: ModelConfig, plan: TrainPlan) -> int:
    from .diagnostics import scaling_bench

    report = scaling_bench(inv.ns, repeats=inv.repeats, template=config)
    path = report.write_csv(inv.out_dir / "scaling.csv")
    for variant, slope in report.slopes.items():
        print(f"{variant}: log-log slope {slope:.3f}")
    print(f"report: {path}")
    return EXIT_OK


def _cmd_check(inv: Invocation, config: ModelConfig, plan: TrainPlan) -> int:
    from .diagnostics import run_check_suite

    results = run_check_suite(config, seed=plan.seed)
    for r in results:
        print(f"[{'PASS' if r.passed else 'FAIL'}] {r.name}: {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


COMMANDS = {"train": _cmd_train, "eval": _cmd_eval, "dump": _cmd_dump, "bench": _cmd_bench, "check": _cmd_check}


def run(invocation: Invocation) -> int:
    try:
        config, plan = invocation.settings()
    except (ConfigError, OSError) as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[invocation.subcommand](invocation, config, plan)
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteLoss, CheckpointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    invocation = Invocation(
        subcommand=args.subcommand,
        config_path=args.config,
        out_dir=args.out,
        checkpoint=args.ckpt,
        overrides=dict(args.overrides),
        split=getattr(args, "split", "valid"),
        layer=getattr(args, "layer", 0),
        head=getattr(args, "head", 0),
        ns=getattr(args, "ns", Invocation.ns),
        repeats=getattr(args, "repeats", 5),
    )
    return run(invocation)


if __name__ == "__main__":
    sys.exit(main())

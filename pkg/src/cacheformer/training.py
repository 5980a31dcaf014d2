"""Byte corpus, batching, the optimisation loop and the two-phase schedule."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch

from .checkpoint import CheckpointError, load_checkpoint, restore_optimizer, save_checkpoint
from .config import PHASES, ConfigError, ModelConfig
from .model import LanguageModel, cross_entropy, metrics_from_nats

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "phase", "split", "loss_nats", "perplexity", "bpc", "tokens_per_second")
SPLITS = ("train", "valid", "test")


class NonFiniteLoss(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainPlan:
    phase: str = "pretrain_no_cache"
    steps: int = 1000
    batch_size: int = 8
    learning_rate: float = 3e-4
    warmup_steps: int | None = None  # defaults to 5% of schedule_steps
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    eval_every: int = 100
    checkpoint_every: int = 500
    seed: int = 0
    schedule_steps: int | None = None  # LR horizon; defaults to steps
    corpus: str = ""
    eval_windows: int = 32
    deterministic: bool = False

    def validate(self) -> "TrainPlan":
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}, got {self.phase!r}")
        for name in ("steps", "batch_size", "eval_every", "checkpoint_every", "eval_windows"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.learning_rate < 0 or self.weight_decay < 0 or self.grad_clip <= 0:
            raise ConfigError("learning_rate and weight_decay must be >= 0, grad_clip > 0")
        return self

    @property
    def horizon(self) -> int:
        return self.schedule_steps or self.steps

    @property
    def warmup(self) -> int:
        return self.warmup_steps if self.warmup_steps is not None else max(1, round(0.05 * self.horizon))


def lr_at(step: int, plan: TrainPlan) -> float:
    """Linear warmup then cosine decay to zero over ``plan.horizon`` steps."""
    if step < plan.warmup:
        return plan.learning_rate * (step + 1) / plan.warmup
    span = max(1, plan.horizon - plan.warmup)
    progress = min(1.0, (step - plan.warmup) / span)
    return plan.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


# --------------------------------------------------------------------- corpus


@dataclass
class Corpus:
    data: bytes
    bounds: dict[str, tuple[int, int]]

    @classmethod
    def from_bytes(cls, data: bytes, valid_fraction: float = 0.05, test_fraction: float = 0.05) -> "Corpus":
        size = len(data)
        test_start = size - int(size * test_fraction)
        valid_start = test_start - int(size * valid_fraction)
        return cls(data, {"train": (0, valid_start), "valid": (valid_start, test_start), "test": (test_start, size)})

    def split(self, name: str) -> np.ndarray:
        if name not in self.bounds:
            raise KeyError(f"unknown split {name!r}")
        lo, hi = self.bounds[name]
        return np.frombuffer(self.data, dtype=np.uint8)[lo:hi]

    def check(self, n: int) -> None:
        prev = 0
        for name in SPLITS:
            lo, hi = self.bounds[name]
            if lo != prev or hi < lo:
                raise ValueError("corpus splits must be disjoint and ordered")
            if hi - lo < n + 1:
                raise ValueError(f"split {name!r} has {hi - lo} bytes; need at least n+1={n + 1}")
            prev = hi


def load_corpus(path: str | Path) -> Corpus:
    return Corpus.from_bytes(Path(path).read_bytes())


def window_starts(length: int, n: int) -> np.ndarray:
    if length < n + 1:
        raise ValueError(f"split of {length} bytes is shorter than n+1={n + 1}")
    return np.arange(0, length - n, n)


def _start_batches(count: int, batch_size: int, seed: int, shuffle: bool) -> Iterator[np.ndarray]:
    epoch = 0
    while True:
        order = np.arange(count)
        if shuffle:
            order = np.random.default_rng([seed, epoch]).permutation(count)
        for lo in range(0, count, batch_size):
            yield order[lo:lo + batch_size]
        epoch += 1


def make_batches(
    corpus: Corpus,
    split: str,
    n: int,
    batch_size: int,
    seed: int,
    shuffle: bool = True,
    skip: int = 0,
    epochs: Optional[int] = None,
) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """Stride-n windows of n+1 bytes as ``(input, target)`` int64 batches.

    Each epoch is a seeded permutation of the windows; ``skip`` drops that many
    batches first so a resumed run sees the same stream as an unbroken one.
    """
    data = corpus.split(split)
    starts = window_starts(len(data), n)
    per_epoch = math.ceil(len(starts) / batch_size)
    offsets = np.arange(n + 1)
    for i, chosen in enumerate(_start_batches(len(starts), batch_size, seed, shuffle)):
        if epochs is not None and i >= epochs * per_epoch:
            return
        if i < skip:
            continue
        windows = torch.from_numpy(data[starts[chosen][:, None] + offsets].astype(np.int64))
        yield windows[:, :-1], windows[:, 1:]


@torch.no_grad()
def evaluate(model: LanguageModel, corpus: Corpus, split: str, windows: int, batch_size: int) -> dict[str, float]:
    """Mean metrics over the first ``windows`` stride-n windows of ``split``."""
    was_training = model.training
    model.eval()
    n = model.config.n
    total, count = 0.0, 0
    limit = min(windows, len(window_starts(len(corpus.split(split)), n)))
    for inputs, targets in make_batches(corpus, split, n, batch_size, seed=0, shuffle=False, epochs=1):
        inputs, targets = inputs[: limit - count], targets[: limit - count]
        if not len(inputs):
            break
        logits = model(inputs)
        nll = torch.nn.functional.cross_entropy(
            logits.reshape(-1, logits.shape[-1]).double(), targets.reshape(-1), reduction="sum"
        )
        total += float(nll)
        count += len(inputs)
    model.train(was_training)
    return metrics_from_nats(total / (count * n))


# ------------------------------------------------------------------- training


@dataclass
class TrainResult:
    checkpoint: Path
    metrics_path: Path
    final_valid: dict[str, float]
    step: int


def make_optimizer(model: LanguageModel, plan: TrainPlan) -> torch.optim.Optimizer:
    decay = [p for name, p in model.named_parameters() if p.dim() >= 2]
    other = [p for name, p in model.named_parameters() if p.dim() < 2]
    groups = [{"params": decay, "weight_decay": plan.weight_decay}, {"params": other, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=plan.learning_rate, betas=(0.9, 0.95))


def _format_row(step: int, phase: str, split: str, metrics: dict[str, float], tps: Optional[float]) -> list[str]:
    return [
        str(step), phase, split,
        f"{metrics['cross_entropy_nats']:.8f}", f"{metrics['perplexity']:.8f}", f"{metrics['bpc']:.8f}",
        "" if tps is None else f"{tps:.1f}",
    ]


def _dump_nonfinite(out_dir: Path, step: int, loss: float, model: LanguageModel) -> Path:
    path = out_dir / "dumps" / "nonfinite.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    report = {
        "step": step,
        "loss": repr(loss),
        "parameters": {
            name: {"norm": float(p.detach().double().norm()), "finite": bool(torch.isfinite(p).all())}
            for name, p in model.named_parameters()
        },
    }
    path.write_text(json.dumps(report, indent=2))
    return path


def train(
    plan: TrainPlan,
    config: ModelConfig,
    corpus: Corpus,
    out_dir: str | Path,
    init_checkpoint: Optional[str | Path] = None,
) -> TrainResult:
    """Run one phase of training and write ``checkpoints/`` and ``metrics.csv``.

    ``pretrain_no_cache`` trains with the cache branch off. ``finetune_with_cache``
    requires a checkpoint, loads its weights and optimizer state, enables the
    cache and continues the same global step count and LR schedule up to
    ``plan.steps``. Passing a checkpoint from the same phase resumes it.
    """
    plan = plan.validate()
    with _reproducible(plan.deterministic):
        return _train(plan, config, corpus, Path(out_dir), init_checkpoint)


@contextmanager
def _reproducible(enabled: bool) -> Iterator[None]:
    """Single thread and deterministic kernels for the duration of a run."""
    if not enabled:
        yield
        return
    threads, strict = torch.get_num_threads(), torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.set_num_threads(threads)
        torch.use_deterministic_algorithms(strict)


def _train(
    plan: TrainPlan, config: ModelConfig, corpus: Corpus, out_dir: Path, init_checkpoint: Optional[str | Path]
) -> TrainResult:
    corpus.check(config.n)
    torch.manual_seed(plan.seed)

    cache = plan.phase == "finetune_with_cache"
    model = LanguageModel(config.replace(cache_enabled=cache))
    optimizer = make_optimizer(model, plan)
    start = 0
    if init_checkpoint is None and cache:
        raise CheckpointError("finetune_with_cache needs a pretrain checkpoint (--ckpt)")
    if init_checkpoint is not None:
        ckpt = load_checkpoint(init_checkpoint)
        if cache and ckpt.phase not in PHASES:
            raise CheckpointError(f"checkpoint phase {ckpt.phase!r} is unknown")
        if not cache and ckpt.phase != plan.phase:
            raise CheckpointError("a pretrain run can only resume from a pretrain checkpoint")
        shape_keys = ("n", "d", "h", "w", "s", "r", "p_avg", "layers", "vocab", "overlap_enabled", "ffn", "tie_embeddings")
        mismatched = [k for k in shape_keys if getattr(ckpt.config, k) != getattr(config, k)]
        if mismatched:
            raise ConfigError(f"checkpoint disagrees with config on: {', '.join(mismatched)}")
        model.load_state_dict(ckpt.model_state())
        restore_optimizer(optimizer, model, ckpt.optimizer_slots())
        start = ckpt.step
    if start >= plan.steps:
        raise ConfigError(f"checkpoint is already at step {start}; plan.steps={plan.steps}")

    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    batches = make_batches(corpus, "train", config.n, plan.batch_size, plan.seed, skip=start)
    final_valid: dict[str, float] = {}

    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        model.train()
        running, seen, tokens, t0 = 0.0, 0, 0, time.perf_counter()
        for step in range(start, plan.steps):
            inputs, targets = next(batches)
            lr = lr_at(step, plan)
            for group in optimizer.param_groups:
                group["lr"] = lr
            loss = cross_entropy(model(inputs), targets)
            value = float(loss.detach())
            if not math.isfinite(value):
                where = _dump_nonfinite(out_dir, step, value, model)
                raise NonFiniteLoss(f"non-finite loss {value} at step {step}; diagnostics in {where}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), plan.grad_clip)
            optimizer.step()
            running += value
            seen += 1
            tokens += inputs.numel()
            done = step + 1

            if done % plan.eval_every == 0 or done == plan.steps:
                elapsed = time.perf_counter() - t0
                tps = None if plan.deterministic else tokens / max(elapsed, 1e-9)
                writer.writerow(_format_row(done, plan.phase, "train", metrics_from_nats(running / seen), tps))
                e0 = time.perf_counter()
                final_valid = evaluate(model, corpus, "valid", plan.eval_windows, plan.batch_size)
                etps = None if plan.deterministic else plan.eval_windows * config.n / max(time.perf_counter() - e0, 1e-9)
                writer.writerow(_format_row(done, plan.phase, "valid", final_valid, etps))
                fh.flush()
                log.info("step %d train %.4f bpc valid %.4f bpc", done, running / seen / math.log(2), final_valid["bpc"])
                running, seen, tokens, t0 = 0.0, 0, 0, time.perf_counter()
            if done % plan.checkpoint_every == 0 and done != plan.steps:
                save_checkpoint(ckpt_dir / f"step_{done:06d}.ckpt", model, model.config, plan.phase, done, optimizer)

    final = ckpt_dir / "final.ckpt"
    save_checkpoint(final, model, model.config, plan.phase, plan.steps, optimizer)
    return TrainResult(final, metrics_path, final_valid, plan.steps)


def plan_dict(plan: TrainPlan) -> dict:
    return asdict(plan)


@dataclass
class PhaseComparison:
    baseline_bpc: float
    cached_bpc: float
    baseline: TrainResult
    finetune: TrainResult


def two_phase_comparison(
    plan: TrainPlan, config: ModelConfig, corpus: Corpus, out_dir: str | Path, pretrain_steps: int
) -> PhaseComparison:
    """Cache-free baseline for ``plan.steps`` vs. pretrain-then-finetune with the same total steps.

    Both runs share one LR horizon and data stream, so the two-phase run's
    pretrain phase is step-for-step the baseline's first ``pretrain_steps``
    steps; the finetune phase starts from the baseline checkpoint at that step.
    """
    out_dir = Path(out_dir)
    if not 0 < pretrain_steps < plan.steps:
        raise ConfigError("pretrain_steps must lie strictly inside (0, steps)")
    base_plan = replace_plan(plan, phase="pretrain_no_cache", schedule_steps=plan.steps,
                             checkpoint_every=pretrain_steps)
    baseline = train(base_plan, config, corpus, out_dir / "baseline")
    handoff = out_dir / "baseline" / "checkpoints" / f"step_{pretrain_steps:06d}.ckpt"
    ft_plan = replace_plan(plan, phase="finetune_with_cache", schedule_steps=plan.steps,
                           checkpoint_every=plan.steps)
    finetune = train(ft_plan, config, corpus, out_dir / "two_phase", init_checkpoint=handoff)
    return PhaseComparison(baseline.final_valid["bpc"], finetune.final_valid["bpc"], baseline, finetune)


def replace_plan(plan: TrainPlan, **changes) -> TrainPlan:
    import dataclasses

    return dataclasses.replace(plan, **changes).validate()

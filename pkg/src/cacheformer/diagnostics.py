"""Gradient checking, attention dumps, the scaling benchmark and the check suite."""

from __future__ import annotations

import csv
import dataclasses
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch

from . import oracles
from .attention import (
    causal_block_scores,
    dense_causal_attention,
    dynamic_projection,
    enhanced_attention,
    long_attention,
    long_mask,
    masked_softmax,
    select_topk_segments,
    short_attention,
)
from .config import ModelConfig
from .model import LanguageModel, cross_entropy

# ---------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    tolerance: float
    per_parameter: dict[str, dict[str, float]]
    offenders: list[str]

    @property
    def passed(self) -> bool:
        return not self.offenders

    @property
    def max_relative_error(self) -> float:
        return max((v["max_rel"] for v in self.per_parameter.values()), default=0.0)


def randomize_parameters(model: torch.nn.Module, seed: int, std: float = 0.3) -> None:
    """Generic (non-degenerate) parameter values for gradient checking."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            noise = torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype)
            if name.endswith("bias"):
                p.copy_(0.1 * noise)
            elif p.dim() == 1:
                p.copy_(1.0 + 0.1 * noise)
            else:
                p.copy_(std * noise)


def freeze_selection(model: LanguageModel, tokens: torch.Tensor) -> None:
    """Pin every layer's top-k choice to what ``tokens`` produces now."""
    release_selection(model)
    with torch.no_grad():
        model(tokens)
    for attn in model.attention_modules():
        attn.selection_override = attn.last_selection


def release_selection(model: LanguageModel) -> None:
    for attn in model.attention_modules():
        attn.selection_override = None


def analytic_gradients(model: torch.nn.Module, loss_fn: Callable[[], torch.Tensor]) -> dict[str, torch.Tensor]:
    model.zero_grad(set_to_none=True)
    loss_fn().backward()
    return {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }


def _entries(numel: int, limit: int, gen: np.random.Generator) -> np.ndarray:
    if numel <= limit:
        return np.arange(numel)
    return np.sort(gen.choice(numel, size=limit, replace=False))


def numeric_gradients(
    model: torch.nn.Module,
    loss_fn: Callable[[], torch.Tensor],
    step: float = 1e-4,
    max_entries: int = 48,
    seed: int = 0,
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Central differences on (a sample of) every parameter entry: name -> (flat indices, values)."""
    gen = np.random.default_rng(seed)
    result = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            idx = _entries(flat.numel(), max_entries, gen)
            values = np.empty(len(idx))
            for i, j in enumerate(idx):
                orig = flat[j].item()
                flat[j] = orig + step
                plus = float(loss_fn())
                flat[j] = orig - step
                minus = float(loss_fn())
                flat[j] = orig
                values[i] = (plus - minus) / (2 * step)
            result[name] = (idx, values)
    return result


def compare_gradients(
    analytic: dict[str, torch.Tensor],
    numeric: dict[str, tuple[np.ndarray, np.ndarray]],
    tolerance: float,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Per-entry relative error ``|a - g| / max(|a|, |g|, floor)``."""
    per = {}
    offenders = []
    for name, (idx, num) in numeric.items():
        ana = analytic[name].reshape(-1).double().numpy()[idx]
        diff = np.abs(ana - num)
        rel = diff / np.maximum(np.maximum(np.abs(ana), np.abs(num)), floor)
        per[name] = {
            "max_rel": float(rel.max(initial=0.0)),
            "max_abs": float(diff.max(initial=0.0)),
            "analytic_norm": float(np.linalg.norm(ana)),
            "numeric_norm": float(np.linalg.norm(num)),
            "checked": int(len(idx)),
        }
        if per[name]["max_rel"] >= tolerance:
            offenders.append(name)
    return GradCheckReport(tolerance, per, offenders)


def grad_check(
    config: ModelConfig,
    tolerance: float = 1e-4,
    seed: int = 0,
    batch: int = 2,
    step: float = 1e-4,
    max_entries: int = 48,
    model: Optional[LanguageModel] = None,
) -> GradCheckReport:
    """Backprop vs central differences in float64 on a small random model.

    The top-k segment choice is held at its value for the unperturbed
    parameters, since gradients are defined with the selection fixed.
    """
    torch.manual_seed(seed)
    if model is None:
        model = LanguageModel(config)
        randomize_parameters(model, seed)
    model = model.double()
    gen = torch.Generator().manual_seed(seed)
    tokens = torch.randint(0, config.vocab, (batch, config.n), generator=gen)
    targets = torch.randint(0, config.vocab, (batch, config.n), generator=gen)

    def loss_fn() -> torch.Tensor:
        return cross_entropy(model(tokens), targets)

    freeze_selection(model, tokens)
    try:
        analytic = analytic_gradients(model, loss_fn)
        numeric = numeric_gradients(model, loss_fn, step, max_entries, seed)
    finally:
        release_selection(model)
    return compare_gradients(analytic, numeric, tolerance)


# ---------------------------------------------------------------- CSV output


def write_matrix_csv(path: Path, matrix) -> Path:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(range(matrix.shape[1]))
        for row in matrix:
            writer.writerow(f"{x:.9g}" for x in row)
    return path


def format_segment_row(indices: Iterable[int]) -> str:
    return "[" + ", ".join(str(int(i)) for i in indices) + "]"


@torch.no_grad()
def dump_attention(
    model: LanguageModel, tokens: torch.Tensor, layer: int, head: int, out_dir: str | Path
) -> dict[str, Path]:
    """Write segment scores, the per-block selection trace and branch weights as CSV."""
    config = model.config
    if not 0 <= layer < config.layers:
        raise ValueError(f"layer {layer} out of range [0, {config.layers})")
    if not 0 <= head < config.h:
        raise ValueError(f"head {head} out of range [0, {config.h})")
    out_dir = Path(out_dir)
    if tokens.dim() == 1:
        tokens = tokens[None]
    tokens = tokens[:1]
    was_training = model.training
    model.eval()
    _, bundles = model(tokens, return_bundles=True)
    model.train(was_training)
    bundle = bundles[layer]

    standalone = masked_softmax(bundle.long_logits, long_mask(config.n, config.s, config.c, False))
    scores = causal_block_scores(standalone, config)[0, head]
    selection = select_topk_segments(scores, config)
    if bundle.selection is not None:
        selection_rows = bundle.selection.per_block[0, head].tolist()
    else:
        selection_rows = selection.per_block.tolist()

    paths = {"segment_scores": write_matrix_csv(out_dir / "segment_scores.csv", scores)}
    trace = out_dir / "selection.csv"
    with open(trace, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["block", "first_token", "last_token", "max_allowed", "segments"])
        for b, row in enumerate(selection_rows):
            writer.writerow([
                b, b * config.p_avg, (b + 1) * config.p_avg - 1,
                int(selection.max_allowed[b]), format_segment_row(row),
            ])
    paths["selection"] = trace
    for name in ("short_weights", "long_weights", "overlap_weights", "cache_weights", "aggregated"):
        value = getattr(bundle, name)
        if value is not None:
            paths[name] = write_matrix_csv(out_dir / f"{name}.csv", value[0, head])
    return paths


# ----------------------------------------------------------------- benchmark


@dataclass
class ScalingReport:
    rows: list[dict] = field(default_factory=list)
    slopes: dict[str, float] = field(default_factory=dict)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["n", "variant", "median_seconds", "peak_bytes", "slope"])
            for row in self.rows:
                writer.writerow([
                    row["n"], row["variant"], f"{row['median_seconds']:.6e}", row["peak_bytes"],
                    f"{self.slopes[row['variant']]:.4f}",
                ])
        return path


def bench_config(n: int, template: Optional[ModelConfig] = None) -> ModelConfig:
    """Attention settings for length ``n``: window, projection length and cache
    width held fixed; the segment grows only as far as needed to keep c >= 1."""
    base = template or ModelConfig(d=64, h=1, w=128, s=16, r=256, k=5, u=3, p_avg=256, layers=1)
    s = max(base.s, n // base.r)
    p_avg = max(base.p_avg, s)
    return dataclasses.replace(base, n=n, s=s, p_avg=min(p_avg, n)).replace()


class _PeakRSS:
    """Samples resident memory in a background thread."""

    def __init__(self, interval: float = 0.002):
        import psutil

        self._proc = psutil.Process()
        self.interval = interval
        self.peak = 0
        self._stop = threading.Event()

    def __enter__(self):
        self.base = self._proc.memory_info().rss
        self.peak = self.base
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()
        return self

    def _run(self):
        while not self._stop.is_set():
            self.peak = max(self.peak, self._proc.memory_info().rss)
            time.sleep(self.interval)

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join()
        self.peak = max(self.peak, self._proc.memory_info().rss)

    @property
    def delta(self) -> int:
        return self.peak - self.base


def fit_slope(ns: Sequence[int], seconds: Sequence[float]) -> float:
    return float(np.polyfit(np.log(ns), np.log(seconds), 1)[0])


@torch.no_grad()
def scaling_bench(
    ns: Sequence[int] = (512, 1024, 2048, 4096, 8192),
    variants: Sequence[str] = ("dense", "enhanced"),
    repeats: int = 5,
    template: Optional[ModelConfig] = None,
    seed: int = 0,
) -> ScalingReport:
    """Median forward time of single-head attention per length and variant."""
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    report = ScalingReport()
    try:
        for n in ns:
            config = bench_config(n, template)
            gen = torch.Generator().manual_seed(seed)
            Q, K, V = (torch.randn(1, 1, n, config.d_k, generator=gen) for _ in range(3))
            W_P = torch.randn(1, config.d_k, config.c, generator=gen) * 0.1
            W_Po = torch.randn(1, config.d_k, config.c, generator=gen) * 0.1
            calls = {
                "dense": lambda: dense_causal_attention(Q, K, V),
                "enhanced": lambda: enhanced_attention(Q, K, V, W_P, W_Po, config)[0],
            }
            for variant in variants:
                fn = calls[variant]
                fn()  # warm-up
                times = []
                with _PeakRSS() as mem:
                    for _ in range(repeats):
                        t0 = time.perf_counter()
                        fn()
                        times.append(time.perf_counter() - t0)
                report.rows.append({
                    "n": n, "variant": variant, "median_seconds": float(np.median(times)), "peak_bytes": mem.delta,
                })
    finally:
        torch.set_num_threads(threads)
    for variant in variants:
        rows = [r for r in report.rows if r["variant"] == variant]
        report.slopes[variant] = fit_slope([r["n"] for r in rows], [r["median_seconds"] for r in rows])
    return report


# ---------------------------------------------------------------- check suite


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _short_vs_dense(seed: int) -> CheckResult:
    gen = torch.Generator().manual_seed(seed)
    n, d_k = 16, 8
    config = ModelConfig(n=n, d=d_k, h=1, w=n, s=n, r=n, k=1, u=1, p_avg=n, layers=1,
                         cache_enabled=False, overlap_enabled=False)
    Q, K, V = (torch.randn(n, d_k, generator=gen, dtype=torch.float64) for _ in range(3))
    weights, out = short_attention(Q, K, V, config)
    ref_w, ref_out = oracles.dense_causal_oracle(Q.numpy(), K.numpy(), V.numpy())
    err = max(np.abs(weights[:, n:].numpy() - ref_w).max(), np.abs(out.numpy() - ref_out).max())
    return CheckResult("short_attention == dense causal oracle (w=n)", bool(err <= 1e-6), f"max abs diff {err:.2e}")


def _selection_vs_oracle(seed: int, instances: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(instances):
        s = int(rng.choice([2, 4]))
        n_s = int(rng.integers(4, 17))
        p_avg = s * int(rng.choice([d for d in range(1, n_s + 1) if n_s % d == 0]))
        n = n_s * s
        u = int(rng.choice([1, 3, 5]))
        k = int(rng.integers(1, max(2, (n_s - 1) // u + 1)))
        if k * u > n_s - 1:
            k, u = 1, 1
        config = ModelConfig(n=n, d=4, h=1, w=n, s=s, r=n_s, k=k, u=u, p_avg=p_avg, layers=1)
        avg = rng.integers(0, 4, size=(config.m, n_s)).astype(np.float64)  # many ties
        if rng.random() < 0.5:
            avg = rng.random((config.m, n_s))
        got = select_topk_segments(torch.from_numpy(avg), config).per_block.tolist()
        want = oracles.selection_oracle(avg, k, u, p_avg, s)
        bad += got != want
    return CheckResult("select_topk_segments == selection oracle", bad == 0, f"{bad}/{instances} mismatches")


def _long_vs_oracle(seed: int) -> CheckResult:
    gen = torch.Generator().manual_seed(seed)
    n, s, c, d_k = 16, 4, 1, 4
    config = ModelConfig(n=n, d=d_k, h=1, w=4, s=s, r=n // s * c, k=1, u=1, p_avg=s, layers=1)
    X = torch.randn(3, n, d_k, generator=gen, dtype=torch.float64)
    W = torch.randn(d_k, c, generator=gen, dtype=torch.float64)
    worst = 0.0
    for overlap in (False, True):
        K_bar, _ = dynamic_projection(X[1], W, overlap, config)
        V_bar, _ = dynamic_projection(X[2], W, overlap, config, source=X[1])
        ref_k = oracles.projection_oracle(X[1].numpy(), W.numpy(), s, overlap)
        ref_v = oracles.projection_oracle(X[2].numpy(), W.numpy(), s, overlap, source=X[1].numpy())
        weights, out = long_attention(X[0], K_bar, V_bar, config, overlap)
        ref_w, ref_out = oracles.long_attention_oracle(X[0].numpy(), ref_k, ref_v, s, c, overlap)
        worst = max(worst, *(float(np.abs(a - b).max()) for a, b in (
            (K_bar.numpy(), ref_k), (V_bar.numpy(), ref_v), (weights.numpy(), ref_w), (out.numpy(), ref_out))))
    return CheckResult("dynamic projection + long attention == loop oracle", worst <= 1e-6, f"max abs diff {worst:.2e}")


def causality_violation(model: LanguageModel, tokens: torch.Tensor, t: int, gen: torch.Generator) -> float:
    """Max change in logits[..., :t+1, :] when every token after t is redrawn."""
    n = model.config.n
    perturbed = tokens.clone()
    perturbed[..., t + 1:] = torch.randint(0, model.config.vocab, perturbed[..., t + 1:].shape, generator=gen)
    with torch.no_grad():
        a = model(tokens)[..., : t + 1, :]
        b = model(perturbed)[..., : t + 1, :]
    return float((a - b).abs().max()) if t < n else 0.0


def _causality(config: ModelConfig, seed: int) -> CheckResult:
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for mode in ("joint_softmax", "literal_branch"):
        for cache in (False, True):
            torch.manual_seed(seed)
            model = LanguageModel(config.replace(aggregation_mode=mode, cache_enabled=cache))
            randomize_parameters(model, seed)
            tokens = torch.randint(0, config.vocab, (2, config.n), generator=gen)
            for t in (0, config.n // 3, config.n // 2, config.n - 2):
                worst = max(worst, causality_violation(model, tokens, t, gen))
    return CheckResult("end-to-end causality", worst <= 1e-6, f"max logit change {worst:.2e}")


def run_check_suite(config: ModelConfig, seed: int = 0, selection_instances: int = 1000) -> list[CheckResult]:
    results = [
        _short_vs_dense(seed),
        _selection_vs_oracle(seed, selection_instances),
        _long_vs_oracle(seed),
        _causality(config, seed),
    ]
    report = grad_check(config, tolerance=1e-4, seed=seed)
    worst = ", ".join(report.offenders) or "none"
    results.append(CheckResult(
        "gradient check (float64, central differences)", report.passed,
        f"max relative error {report.max_relative_error:.2e}; offenders: {worst}",
    ))
    return results

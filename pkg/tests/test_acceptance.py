"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``[PASS]``/``[FAIL]`` line (visible without ``-s``)
before asserting. Criterion 7 trains two small models and takes about an hour
on a CPU; deselect it with ``-m "not slow"`` for a quick run.
"""

import dataclasses
import random
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from cacheformer import oracles
from cacheformer.attention import (
    NONE,
    enhanced_attention,
    gather_cache_kv,
    long_attention,
    select_topk_segments,
    short_attention,
)
from cacheformer.config import ModelConfig, load_model_config, parse_pairs, split_pairs, build, validate
from cacheformer.corpus import order0_entropy_bits
from cacheformer.diagnostics import causality_violation, grad_check, randomize_parameters, scaling_bench
from cacheformer.model import LanguageModel, parameter_count
from cacheformer.training import TrainPlan, load_corpus, train, two_phase_comparison

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture
def report(capsys):
    def emit(number: int, passed: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}")
        assert passed, detail

    return emit


def test_1_shape_golden(report):
    cfg = ModelConfig(n=1024, d=64, h=1, w=128, s=16, r=256, k=7, u=1, p_avg=256, layers=1)
    gen = torch.Generator().manual_seed(0)
    Q, K, V = (torch.randn(1024, 64, generator=gen) for _ in range(3))
    W = torch.randn(64, cfg.c, generator=gen) * 0.1
    long_w, _ = long_attention(Q, K[: cfg.r], V[: cfg.r], cfg)
    _, bundle, _ = enhanced_attention(Q, K, V, W, W, cfg, return_bundle=True)

    cfg2048 = validate(ModelConfig(n=2048, d=64, h=1, w=128, s=16, r=256, k=5, u=3, p_avg=256, layers=1))
    cfg_cache = ModelConfig(n=1024, d=64, h=1, w=128, s=16, r=256, k=5, u=3, p_avg=32, layers=1)
    _, bundle_c, selection = enhanced_attention(Q, K, V, W, W, cfg_cache, return_bundle=True)
    K_c, _, _ = gather_cache_kv(K, V, selection, cfg_cache)

    observed = {
        "n_s": cfg.n_s, "c": cfg.c, "long": tuple(long_w.shape), "f(k=7,u=1)": bundle.aggregated.shape[-1],
        "f(n=2048,k=5,u=3)": cfg2048.f, "K_c width": K_c.shape[-2], "A_segavg": tuple(bundle_c.segment_scores.shape),
    }
    expected = {
        "n_s": 64, "c": 4, "long": (1024, 256), "f(k=7,u=1)": 624,
        "f(n=2048,k=5,u=3)": 752, "K_c width": 240, "A_segavg": (32, 64),
    }
    report(1, observed == expected, f"shape golden values {observed}")


def _random_tiny_config(rng: random.Random) -> ModelConfig:
    while True:
        s = rng.choice([2, 4, 8])
        n = rng.choice([16, 32, 64, 128])
        w = rng.choice([x for x in (4, 8, 16, 32) if n % x == 0])
        n_s = n // s
        c = rng.choice([1, 2])
        p_avg = s * rng.choice([q for q in (1, 2, 4, 8) if n_s % q == 0])
        u = rng.choice([1, 3])
        k = rng.randint(1, 3)
        h = rng.choice([1, 2])
        try:
            return validate(ModelConfig(
                n=n, d=8 * h, h=h, w=w, s=s, r=n_s * c, k=k, u=u, p_avg=p_avg,
                layers=rng.choice([1, 2]), vocab=64, overlap_enabled=rng.random() < 0.7,
            ))
        except ValueError:
            continue


def test_2_causality_suite(report):
    rng = random.Random(0)
    gen = torch.Generator().manual_seed(0)
    worst, runs = 0.0, 0
    start = time.perf_counter()
    for i in range(100):
        cfg = _random_tiny_config(rng)
        tokens = torch.randint(0, cfg.vocab, (2, cfg.n), generator=gen)
        for mode in ("joint_softmax", "literal_branch"):
            for cache in (False, True):
                model = LanguageModel(cfg.replace(aggregation_mode=mode, cache_enabled=cache))
                randomize_parameters(model, i)
                model.eval()
                for t in sorted({0, rng.randrange(cfg.n - 1), cfg.n // 2, cfg.n - 2}):
                    worst = max(worst, causality_violation(model, tokens, t, gen))
                runs += 1
    elapsed = time.perf_counter() - start
    report(2, worst <= 1e-6 and elapsed < 120,
           f"{runs} model variants, max logit change {worst:.2e} (<= 1e-6), {elapsed:.1f}s")


def test_3_selection_never_uses_future(report):
    rng = np.random.default_rng(0)
    configs = [
        ModelConfig(n=1024, d=8, h=1, w=128, s=16, r=256, k=7, u=1, p_avg=256, layers=1),
        ModelConfig(n=1024, d=8, h=1, w=128, s=16, r=256, k=5, u=3, p_avg=32, layers=1),
        ModelConfig(n=256, d=8, h=1, w=32, s=8, r=64, k=3, u=3, p_avg=64, layers=1),
    ]
    violations = 0
    for i in range(1000):
        cfg = configs[i % len(configs)]
        if i % 2:
            avg = torch.from_numpy(rng.standard_normal((cfg.m, cfg.n_s)) * 10.0 ** rng.integers(-3, 4))
        else:  # scores that favour the latest segments, the case a leak would pick
            avg = torch.from_numpy(np.sort(rng.random((cfg.m, cfg.n_s)), axis=1))
        per_block = select_topk_segments(avg, cfg).per_block
        for b, row in enumerate(per_block.tolist()):
            bound = b * cfg.p_avg // cfg.s - 1
            if b == 0 and any(j != NONE for j in row):
                violations += 1
            elif any(j != NONE and j > bound for j in row):
                violations += 1
    report(3, violations == 0, f"1000 random inputs, {violations} blocks with a future or non-sentinel segment")


def test_4_oracle_equivalence(report):
    gen = torch.Generator().manual_seed(4)
    n = 64
    cfg = ModelConfig(n=n, d=8, h=1, w=n, s=8, r=16, k=1, u=1, p_avg=8, layers=1)
    Q, K, V = (torch.randn(n, 8, generator=gen, dtype=torch.float64) for _ in range(3))
    weights, out = short_attention(Q, K, V, cfg)
    ref_w, ref_out = oracles.dense_causal_oracle(Q.numpy(), K.numpy(), V.numpy())
    short_err = max(np.abs(weights[:, n:].numpy() - ref_w).max(), np.abs(out.numpy() - ref_out).max())

    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(1000):
        s = int(rng.choice([1, 2, 4]))
        n_s = int(rng.integers(2, 17))
        p_avg = s * int(rng.choice([q for q in range(1, n_s + 1) if n_s % q == 0]))
        u = int(rng.choice([1, 3, 5]))
        if u > n_s - 1:
            u = 1
        k = int(rng.integers(1, (n_s - 1) // u + 1))
        sel_cfg = ModelConfig(n=n_s * s, d=2, h=1, w=n_s * s, s=s, r=n_s, k=k, u=u, p_avg=p_avg, layers=1,
                              overlap_enabled=s % 2 == 0)
        avg = rng.integers(0, 3, (sel_cfg.m, n_s)).astype(float) if rng.random() < 0.5 else rng.random((sel_cfg.m, n_s))
        got = select_topk_segments(torch.from_numpy(avg), sel_cfg).per_block.tolist()
        mismatches += got != oracles.selection_oracle(avg, k, u, p_avg, s)

    long_cfg = ModelConfig(n=16, d=4, h=1, w=4, s=4, r=8, k=1, u=1, p_avg=4, layers=1)
    Ql = torch.randn(16, 4, generator=gen, dtype=torch.float64)
    Kb, Vb = torch.randn(8, 4, generator=gen, dtype=torch.float64), torch.randn(8, 4, generator=gen, dtype=torch.float64)
    long_err = 0.0
    for overlap in (False, True):
        lw, lo = long_attention(Ql, Kb, Vb, long_cfg, overlap)
        rw, ro = oracles.long_attention_oracle(Ql.numpy(), Kb.numpy(), Vb.numpy(), 4, 2, overlap)
        long_err = max(long_err, np.abs(lw.numpy() - rw).max(), np.abs(lo.numpy() - ro).max())

    passed = short_err <= 1e-6 and mismatches == 0 and long_err <= 1e-6
    report(4, passed, f"short vs dense {short_err:.2e}; selection {mismatches}/1000 mismatches; "
                      f"long vs loop {long_err:.2e}")


def test_5_gradient_check(report):
    cfg = ModelConfig(n=32, d=16, h=2, w=8, s=4, r=16, k=2, u=3, p_avg=8, layers=1)
    start = time.perf_counter()
    results = {mode: grad_check(cfg.replace(aggregation_mode=mode), tolerance=1e-4)
               for mode in ("joint_softmax", "literal_branch")}
    elapsed = time.perf_counter() - start
    worst = max(r.max_relative_error for r in results.values())
    passed = all(r.passed for r in results.values()) and worst < 1e-4 and elapsed < 300
    report(5, passed, f"float64 central differences, max relative error {worst:.2e} (< 1e-4), {elapsed:.1f}s")


def test_6_parameter_count_invariance(report):
    full = ModelConfig(n=1024, d=768, h=12, w=128, s=16, r=256, k=5, u=3, p_avg=32, layers=12)
    small = ModelConfig(n=64, d=32, h=4, w=16, s=8, r=16, k=2, u=3, p_avg=16, layers=3)
    ok, details = True, []
    for cfg in (full, small):
        full = parameter_count(cfg.replace(cache_enabled=True, overlap_enabled=True))
        bare = parameter_count(cfg.replace(cache_enabled=False, overlap_enabled=False))
        plain_on = parameter_count(cfg.replace(cache_enabled=True, overlap_enabled=False))
        plain_off = parameter_count(cfg.replace(cache_enabled=False, overlap_enabled=False))
        overlap_weights = cfg.layers * cfg.h * cfg.d_k * cfg.c
        ok &= full - bare == overlap_weights and plain_on == plain_off
        details.append(f"d={cfg.d}: +{full - bare} (W_Po {overlap_weights}), cache on/off {plain_on}/{plain_off}")
    models = {
        (cache, overlap): LanguageModel(small.replace(cache_enabled=cache, overlap_enabled=overlap)).num_parameters()
        for cache in (False, True) for overlap in (False, True)
    }
    ok &= models[(True, False)] == models[(False, False)]
    ok &= models[(True, True)] - models[(False, False)] == small.layers * small.h * small.d_k * small.c
    ok &= all(v == parameter_count(small.replace(cache_enabled=c, overlap_enabled=o)) for (c, o), v in models.items())
    report(6, ok, "; ".join(details))


def _small_run_settings() -> tuple[ModelConfig, TrainPlan]:
    path = ROOT / "configs" / "small.cfg"
    model_pairs, plan_pairs = split_pairs(parse_pairs(path.read_text()), ModelConfig, TrainPlan)
    plan = build(TrainPlan, plan_pairs)
    plan = dataclasses.replace(plan, corpus=str((path.parent / plan.corpus).resolve()))
    return validate(build(ModelConfig, model_pairs)), plan.validate()


@pytest.mark.slow
def test_7_directional_training(report, tmp_path):
    config, plan = _small_run_settings()
    corpus_path = Path(plan.corpus)
    if not corpus_path.exists():
        from cacheformer.corpus import stdlib_corpus

        corpus_path.parent.mkdir(parents=True, exist_ok=True)
        corpus_path.write_bytes(stdlib_corpus())
    corpus = load_corpus(corpus_path)
    entropy = order0_entropy_bits(corpus.data)
    result = two_phase_comparison(plan, config, corpus, tmp_path, pretrain_steps=plan.steps // 3)
    passed = (result.cached_bpc <= result.baseline_bpc + 0.01
              and result.baseline_bpc < entropy and result.cached_bpc < entropy)
    report(7, passed, f"{len(corpus.data)} bytes, order-0 entropy {entropy:.3f}; baseline {result.baseline_bpc:.4f} bpc, "
                      f"two-phase {result.cached_bpc:.4f} bpc (tolerance +0.01)")


def test_8_scaling_benchmark(report):
    start = time.perf_counter()
    result = scaling_bench((512, 1024, 2048, 4096, 8192), repeats=5)
    elapsed = time.perf_counter() - start
    enhanced, dense = result.slopes["enhanced"], result.slopes["dense"]
    passed = enhanced < 1.5 and 1.7 <= dense <= 2.3 and elapsed < 600
    report(8, passed, f"log-log slope enhanced {enhanced:.3f} (< 1.5), dense {dense:.3f} (1.7-2.3), {elapsed:.1f}s")


def test_9_determinism(report, tmp_path):
    config = load_model_config(ROOT / "configs" / "tiny.cfg")
    corpus_bytes = np.random.default_rng(9).integers(0, 256, 20000, dtype=np.uint8).tobytes()
    from cacheformer.training import Corpus

    corpus = Corpus.from_bytes(corpus_bytes)
    plan = TrainPlan(steps=40, batch_size=4, learning_rate=1e-3, eval_every=10, checkpoint_every=20,
                     eval_windows=8, seed=3, deterministic=True)
    a = train(plan, config, corpus, tmp_path / "a").metrics_path.read_bytes()
    b = train(plan, config, corpus, tmp_path / "b").metrics_path.read_bytes()
    report(9, a == b and len(a) > 0, f"two single-threaded runs, metrics.csv {len(a)} bytes, identical={a == b}")

"""Autoregressive byte-level language model built on the enhanced attention."""

from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .attention import AttentionBundle, SegmentSelection, enhanced_attention
from .config import ModelConfig, validate

INIT_STD = 0.02


class EnhancedSelfAttention(nn.Module):
    """Multi-head enhanced attention with output projection W^o."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        d, h = config.d, config.h
        self.h, self.d_k = h, config.d_k
        self.query = nn.Linear(d, d, bias=False)
        self.key = nn.Linear(d, d, bias=False)
        self.value = nn.Linear(d, d, bias=False)
        self.proj_long = nn.Parameter(torch.empty(h, config.d_k, config.c))
        if config.overlap_enabled:
            self.proj_overlap = nn.Parameter(torch.empty(h, config.d_k, config.c))
        else:
            self.register_parameter("proj_overlap", None)
        self.out = nn.Linear(d, d, bias=False)
        # held fixed during finite-difference checks
        self.selection_override: Optional[SegmentSelection] = None
        self.last_selection: Optional[SegmentSelection] = None

    def _heads(self, x: Tensor) -> Tensor:
        B, n, _ = x.shape
        return x.view(B, n, self.h, self.d_k).transpose(1, 2)

    def forward(
        self, x: Tensor, config: ModelConfig, return_bundle: bool = False
    ) -> tuple[Tensor, Optional[AttentionBundle]]:
        B, n, d = x.shape
        q, k, v = self._heads(self.query(x)), self._heads(self.key(x)), self._heads(self.value(x))
        heads, bundle, selection = enhanced_attention(
            q, k, v, self.proj_long, self.proj_overlap, config,
            selection=self.selection_override, return_bundle=return_bundle,
        )
        self.last_selection = selection
        return self.out(heads.transpose(1, 2).reshape(B, n, d)), bundle


class Block(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.ln_attn = nn.LayerNorm(config.d)
        self.attn = EnhancedSelfAttention(config)
        if config.ffn:
            self.ln_ffn = nn.LayerNorm(config.d)
            self.ffn = nn.Sequential(
                nn.Linear(config.d, 4 * config.d), nn.GELU(), nn.Linear(4 * config.d, config.d)
            )
        else:
            self.ln_ffn = None
            self.ffn = None

    def forward(self, x: Tensor, config: ModelConfig, return_bundle: bool = False):
        a, bundle = self.attn(self.ln_attn(x), config, return_bundle)
        x = x + a
        if self.ffn is not None:
            x = x + self.ffn(self.ln_ffn(x))
        return x, bundle


class LanguageModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = validate(config)
        self.token_embedding = nn.Embedding(config.vocab, config.d)
        self.position_embedding = nn.Parameter(torch.empty(config.n, config.d))
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.layers))
        self.ln_final = nn.LayerNorm(config.d)
        self.classifier = nn.Linear(config.d, config.vocab)
        if config.tie_embeddings:
            self.classifier.weight = self.token_embedding.weight
        self.reset_parameters()

    def reset_parameters(self, std: float = INIT_STD) -> None:
        for name, p in self.named_parameters():
            if name.endswith("bias"):
                nn.init.zeros_(p)
            elif p.dim() == 1:  # layer-norm gains
                nn.init.ones_(p)
            else:
                nn.init.normal_(p, 0.0, std)

    def set_cache_enabled(self, enabled: bool) -> None:
        self.config = self.config.replace(cache_enabled=enabled)

    def set_aggregation_mode(self, mode: str) -> None:
        self.config = self.config.replace(aggregation_mode=mode)

    def attention_modules(self) -> list[EnhancedSelfAttention]:
        return [block.attn for block in self.blocks]

    def forward(self, tokens: Tensor, return_bundles: bool = False):
        """Logits ``(B, n, vocab)`` (or ``(n, vocab)`` for a 1-D input).

        With ``return_bundles`` also returns one AttentionBundle per layer.
        """
        squeeze = tokens.dim() == 1
        if squeeze:
            tokens = tokens[None]
        config = self.config
        if tokens.shape[-1] != config.n:
            raise ValueError(f"expected sequences of length {config.n}, got {tokens.shape[-1]}")
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= config.vocab):
            raise ValueError(f"token ids must lie in [0, {config.vocab})")
        x = self.token_embedding(tokens) + self.position_embedding
        bundles = []
        for block in self.blocks:
            x, bundle = block(x, config, return_bundles)
            bundles.append(bundle)
        logits = self.classifier(self.ln_final(x))
        if squeeze:
            logits = logits[0]
        return (logits, bundles) if return_bundles else logits

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def parameter_count(config: ModelConfig) -> int:
    """Exact parameter count as a function of the config alone."""
    d, h, c = config.d, config.h, config.c
    attn = 4 * d * d + h * config.d_k * c * (2 if config.overlap_enabled else 1)
    block = attn + 2 * d
    if config.ffn:
        block += 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d)
    total = config.vocab * d + config.n * d + config.layers * block + 2 * d + config.vocab
    if not config.tie_embeddings:
        total += d * config.vocab
    return total


def cross_entropy(logits: Tensor, targets: Tensor) -> Tensor:
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and targets {tuple(targets.shape)} disagree")
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1))


def metrics_from_nats(nats: float) -> dict[str, float]:
    return {"cross_entropy_nats": nats, "perplexity": math.exp(nats), "bpc": nats / math.log(2)}


def loss_and_metrics(logits: Tensor, targets: Tensor, mask: Optional[Tensor] = None) -> dict[str, float]:
    """Mean cross-entropy in nats over unmasked positions, with perplexity and bits per byte."""
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and targets {tuple(targets.shape)} disagree")
    nll = F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]).double(), targets.reshape(-1), reduction="none"
    )
    if mask is not None:
        nll = nll[mask.reshape(-1)]
    return metrics_from_nats(float(nll.mean()))

"""Enhanced long-short attention: sliding window, compressed long, overlapping
long and segment-cache branches, aggregated per head.

Every function takes tensors with arbitrary leading dims (batch, heads, ...)
followed by ``(n, d_k)``. Masks are boolean, ``True`` meaning "may attend".
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import torch
import torch.nn.functional as F
from torch import Tensor

from .config import ModelConfig

NONE = -1  # sentinel segment index


def masked_softmax(logits: Tensor, mask: Tensor) -> Tensor:
    """Softmax over the last dim restricted to ``mask``; all-masked rows give zeros."""
    x = logits.masked_fill(~mask, float("-inf"))
    peak = x.amax(dim=-1, keepdim=True).detach()
    peak = torch.where(torch.isfinite(peak), peak, torch.zeros_like(peak))
    e = torch.exp(x - peak)
    total = e.sum(dim=-1, keepdim=True)
    return e / torch.where(total > 0, total, torch.ones_like(total))


def _shift_segments(seg: Tensor) -> Tensor:
    # (..., G, w, e) -> same shape holding segment g-1 at g, zeros at g=0
    return F.pad(seg, (0, 0, 0, 0, 1, 0))[..., :-1, :, :]


def _windows(x: Tensor, w: int) -> Tensor:
    """(..., n, e) -> (..., n/w, 2w, e): previous segment followed by the home segment."""
    seg = x.unflatten(-2, (x.shape[-2] // w, w))
    return torch.cat([_shift_segments(seg), seg], dim=-2)


# ---------------------------------------------------------------- short branch


def short_mask(n: int, w: int, device=None) -> Tensor:
    t = torch.arange(n, device=device)
    g, pos = t // w, t % w
    col = torch.arange(2 * w, device=device)
    prev = (col[None, :] < w) & (g[:, None] > 0)
    home = (col[None, :] >= w) & ((col[None, :] - w) <= pos[:, None])
    return prev | home


def short_logits(Q: Tensor, K: Tensor, w: int) -> tuple[Tensor, Tensor]:
    n, d_k = Q.shape[-2], Q.shape[-1]
    if n % w:
        raise ValueError(f"sequence length {n} is not a multiple of w={w}")
    if K.shape[-2:] != Q.shape[-2:]:
        raise ValueError(f"Q {tuple(Q.shape)} and K {tuple(K.shape)} disagree")
    q = Q.unflatten(-2, (n // w, w))
    logits = q @ _windows(K, w).transpose(-1, -2) / math.sqrt(d_k)
    return logits.flatten(-3, -2), short_mask(n, w, Q.device)


def short_apply(weights: Tensor, V: Tensor, w: int) -> Tensor:
    n = V.shape[-2]
    out = weights.unflatten(-2, (n // w, w)) @ _windows(V, w)
    return out.flatten(-3, -2)


def short_attention(Q: Tensor, K: Tensor, V: Tensor, config: ModelConfig) -> tuple[Tensor, Tensor]:
    """Segment-wise causal window: each token sees the previous w-segment and
    its own segment up to itself. Returns weights ``(..., n, 2w)`` and output."""
    logits, mask = short_logits(Q, K, config.w)
    weights = masked_softmax(logits, mask)
    return weights, short_apply(weights, V, config.w)


# ---------------------------------------------------------- dynamic projection


def _segments(x: Tensor, s: int, overlap: bool) -> Tensor:
    n = x.shape[-2]
    if n % s:
        raise ValueError(f"sequence length {n} is not a multiple of s={s}")
    if overlap:
        # shift by s/2 with zeros in front: segment j covers [j*s - s/2, j*s + s/2)
        x = F.pad(x, (0, 0, s // 2, 0))[..., :n, :]
    return x.unflatten(-2, (n // s, s))


def projection_weights(K: Tensor, W_proj: Tensor, s: int, overlap: bool) -> Tensor:
    """P per segment, ``(..., n_s, s, c)``, softmax over the within-segment axis."""
    seg = _segments(K, s, overlap)
    return torch.softmax(seg @ W_proj.unsqueeze(-3), dim=-2)


def compress(P: Tensor, X: Tensor, s: int, overlap: bool) -> Tensor:
    """Apply per-segment ``P^T`` to X, concatenating segments: ``(..., n_s*c, d_k)``."""
    return (P.transpose(-1, -2) @ _segments(X, s, overlap)).flatten(-3, -2)


def dynamic_projection(
    X: Tensor, W_proj: Tensor, overlap: bool, config: ModelConfig, source: Optional[Tensor] = None
) -> tuple[Tensor, Tensor]:
    """Compress X to ``(..., r, d_k)``.

    The projection weights come from ``source`` (defaults to X); pass the keys
    as ``source`` when compressing values so both share one P.
    """
    P = projection_weights(X if source is None else source, W_proj, config.s, overlap)
    return compress(P, X, config.s, overlap), P


# ----------------------------------------------------------------- long branch


def long_mask(n: int, s: int, c: int, overlap: bool, device=None) -> Tensor:
    t = torch.arange(n, device=device)
    seg = torch.arange((n // s) * c, device=device) // c
    end = seg * s + (s // 2 if overlap else s)
    return end[None, :] <= ((t // s) * s)[:, None]


def long_logits(Q: Tensor, K_bar: Tensor, config: ModelConfig, overlap: bool) -> tuple[Tensor, Tensor]:
    n = Q.shape[-2]
    if K_bar.shape[-2] != config.r or K_bar.shape[-1] != Q.shape[-1]:
        raise ValueError(f"compressed keys {tuple(K_bar.shape)} do not match r={config.r}")
    logits = Q @ K_bar.transpose(-1, -2) / math.sqrt(Q.shape[-1])
    return logits, long_mask(n, config.s, config.c, overlap, Q.device)


def long_attention(
    Q: Tensor, K_bar: Tensor, V_bar: Tensor, config: ModelConfig, overlap: bool = False
) -> tuple[Tensor, Tensor]:
    """Attention over compressed segments that lie wholly before the query's home segment."""
    logits, mask = long_logits(Q, K_bar, config, overlap)
    weights = masked_softmax(logits, mask)
    return weights, weights @ V_bar


# ------------------------------------------------------------ segment selection


def segment_attention_vectors(long_weights: Tensor, config: ModelConfig) -> Tensor:
    return long_weights.unflatten(-1, (config.n_s, config.c))


def rms_magnitudes(seg_vectors: Tensor) -> Tensor:
    return seg_vectors.pow(2).mean(dim=-1).sqrt()


def block_average(magnitudes: Tensor, config: ModelConfig) -> Tensor:
    n = magnitudes.shape[-2]
    if n % config.p_avg:
        raise ValueError(f"{n} rows cannot be split into blocks of p_avg={config.p_avg}")
    return magnitudes.unflatten(-2, (n // config.p_avg, config.p_avg)).mean(dim=-2)


def causal_block_scores(long_weights: Tensor, config: ModelConfig) -> Tensor:
    """Per-block segment scores ``(..., m, n_s)`` using only rows up to each block's first token.

    Block b averages the RMS magnitudes of rows ``b*p_avg - p_avg + 1 .. b*p_avg``
    (missing rows count as zero), so a query never influences the selection
    used by earlier queries.
    """
    mags = rms_magnitudes(segment_attention_vectors(long_weights, config))
    shifted = F.pad(mags, (0, 0, config.p_avg - 1, 0))[..., : mags.shape[-2], :]
    return block_average(shifted, config)


def max_allowed_segments(config: ModelConfig, device=None) -> Tensor:
    b = torch.arange(config.m, device=device)
    return b * config.p_avg // config.s - 1


@dataclass
class SegmentSelection:
    per_block: Tensor  # (..., m, k*u) int64, ascending, NONE trailing
    max_allowed: Tensor  # (m,)

    def rows(self) -> list[list[int]]:
        return self.per_block.reshape(-1, self.per_block.shape[-1]).tolist()


def _shift(mask: Tensor, offset: int) -> Tensor:
    """out[..., j] = mask[..., j - offset], False where out of range."""
    out = torch.zeros_like(mask)
    if offset > 0:
        out[..., offset:] = mask[..., :-offset]
    elif offset < 0:
        out[..., :offset] = mask[..., -offset:]
    else:
        out = mask.clone()
    return out


def select_topk_segments(avg: Tensor, config: ModelConfig) -> SegmentSelection:
    """Top-k segments per block with neighbour expansion and contiguity repair.

    1. Candidates are segments ``0 .. max_allowed[b]``; block 0 has none.
    2. Take the k highest scores (lower index wins ties).
    3. Add ``(u-1)/2`` neighbours on each side of every winner, dropping
       out-of-range and duplicate indices.
    4. While fewer than ``k*u`` are held and the pool is not exhausted, add the
       lowest-index free segment adjacent to one already held.
    """
    k, u = config.k, config.u
    quota = k * u
    n_s = avg.shape[-1]
    device = avg.device
    idx = torch.arange(n_s, device=device)
    max_allowed = max_allowed_segments(config, device)
    allowed = (idx[None, :] <= max_allowed[:, None]).expand(avg.shape)

    scores = avg.detach().masked_fill(~allowed, float("-inf"))
    order = torch.sort(scores, dim=-1, descending=True, stable=True).indices[..., : min(k, n_s)]
    top = torch.zeros_like(allowed)
    top.scatter_(-1, order, allowed.gather(-1, order))

    held = top.clone()
    for offset in range(1, (u - 1) // 2 + 1):
        held |= _shift(top, offset) | _shift(top, -offset)
    held &= allowed

    target = torch.clamp(allowed.sum(-1), max=quota)
    need = target - held.sum(-1)
    while bool((need > 0).any()):
        frontier = (_shift(held, 1) | _shift(held, -1)) & allowed & ~held
        frontier &= (need > 0)[..., None]
        has = frontier.any(-1)
        if not bool(has.any()):
            break
        first = frontier.to(torch.int8).argmax(-1)
        held.scatter_(-1, first[..., None], has[..., None] | held.gather(-1, first[..., None]))
        need = need - has.to(need.dtype)

    keyed = torch.where(held, idx, torch.full_like(idx, n_s))
    picked = torch.sort(keyed, dim=-1).values[..., :quota]
    if picked.shape[-1] < quota:
        picked = F.pad(picked, (0, quota - picked.shape[-1]), value=n_s)
    picked = torch.where(picked >= n_s, torch.full_like(picked, NONE), picked)
    return SegmentSelection(per_block=picked, max_allowed=max_allowed)


# ---------------------------------------------------------------- cache branch


def gather_cache_kv(
    K: Tensor, V: Tensor, selection: SegmentSelection, config: ModelConfig
) -> tuple[Tensor, Tensor, Tensor]:
    """Uncompressed rows of the selected segments, ``(..., m, k*u*s, d_k)`` each,
    plus a column mask. Sentinel slots are zero-filled and masked."""
    s = config.s
    sel = selection.per_block
    offsets = torch.arange(s, device=sel.device)
    positions = (sel.clamp_min(0)[..., None] * s + offsets).flatten(-2)  # (..., m, kus)
    valid = (sel >= 0)[..., None].expand(*sel.shape, s).flatten(-2)
    lead = positions.shape[:-2]
    flat = positions.flatten(-2)[..., None].expand(*lead, positions.shape[-2] * positions.shape[-1], K.shape[-1])

    def take(X: Tensor) -> Tensor:
        rows = X.expand(*lead, *X.shape[-2:]).gather(-2, flat).unflatten(-2, positions.shape[-2:])
        return rows * valid[..., None].to(rows.dtype)

    return take(K), take(V), valid


def cache_logits(Q: Tensor, K_c: Tensor, column_mask: Tensor, config: ModelConfig) -> tuple[Tensor, Tensor]:
    n, d_k = Q.shape[-2], Q.shape[-1]
    m, p = config.m, config.p_avg
    if K_c.shape[-3] != m or K_c.shape[-1] != d_k:
        raise ValueError(f"cache keys {tuple(K_c.shape)} do not match m={m}, d_k={d_k}")
    q = Q.unflatten(-2, (m, p))
    logits = (q @ K_c.transpose(-1, -2) / math.sqrt(d_k)).flatten(-3, -2)
    mask = column_mask[..., None, :].expand(*column_mask.shape[:-1], p, column_mask.shape[-1]).flatten(-3, -2)
    return logits, mask


def cache_apply(weights: Tensor, V_c: Tensor, config: ModelConfig) -> Tensor:
    return (weights.unflatten(-2, (config.m, config.p_avg)) @ V_c).flatten(-3, -2)


def cache_attention(
    Q: Tensor, K_c: Tensor, V_c: Tensor, column_mask: Tensor, config: ModelConfig
) -> tuple[Tensor, Tensor]:
    logits, mask = cache_logits(Q, K_c, column_mask, config)
    weights = masked_softmax(logits, mask)
    return weights, cache_apply(weights, V_c, config)


# ----------------------------------------------------------------- aggregation


@dataclass
class AttentionBundle:
    short_logits: Tensor
    short_weights: Tensor
    long_logits: Tensor
    long_weights: Tensor
    overlap_logits: Optional[Tensor]
    overlap_weights: Optional[Tensor]
    cache_logits: Optional[Tensor]
    cache_weights: Optional[Tensor]
    aggregated: Tensor
    head_output: Tensor
    selection: Optional[SegmentSelection] = None
    segment_scores: Optional[Tensor] = None


@dataclass
class _Branch:
    name: str
    logits: Tensor
    mask: Tensor
    apply: Callable[[Tensor], Tensor]


def enhanced_attention(
    Q: Tensor,
    K: Tensor,
    V: Tensor,
    W_P: Tensor,
    W_Po: Optional[Tensor],
    config: ModelConfig,
    selection: Optional[SegmentSelection] = None,
    return_bundle: bool = False,
) -> tuple[Tensor, Optional[AttentionBundle], Optional[SegmentSelection]]:
    """Per-head enhanced attention output ``(..., n, d_k)``.

    ``selection`` overrides the top-k choice (used to hold it fixed during
    finite-difference checks). Selection never carries gradient.
    """
    w, s = config.w, config.s
    branches: list[_Branch] = []

    logits, mask = short_logits(Q, K, w)
    branches.append(_Branch("short", logits, mask, lambda a: short_apply(a, V, w)))

    P_l = projection_weights(K, W_P, s, overlap=False)
    K_l, V_l = compress(P_l, K, s, False), compress(P_l, V, s, False)
    logits, mask = long_logits(Q, K_l, config, overlap=False)
    long_branch = _Branch("long", logits, mask, lambda a: a @ V_l)
    branches.append(long_branch)

    if config.overlap_enabled:
        if W_Po is None:
            raise ValueError("overlap branch enabled but no overlap projection given")
        P_o = projection_weights(K, W_Po, s, overlap=True)
        K_o, V_o = compress(P_o, K, s, True), compress(P_o, V, s, True)
        logits, mask = long_logits(Q, K_o, config, overlap=True)
        branches.append(_Branch("overlap", logits, mask, lambda a: a @ V_o))

    scores = None
    if config.cache_enabled:
        if selection is None:
            with torch.no_grad():
                standalone = masked_softmax(long_branch.logits, long_branch.mask)
                scores = causal_block_scores(standalone, config)
                selection = select_topk_segments(scores, config)
        K_c, V_c, col_mask = gather_cache_kv(K, V, selection, config)
        logits, mask = cache_logits(Q, K_c, col_mask, config)
        branches.append(_Branch("cache", logits, mask, lambda a: cache_apply(a, V_c, config)))
    else:
        selection = None

    masks = [b.mask.expand_as(b.logits) for b in branches]
    if config.aggregation_mode == "joint_softmax":
        joint = masked_softmax(torch.cat([b.logits for b in branches], -1), torch.cat(masks, -1))
        weights = list(joint.split([b.logits.shape[-1] for b in branches], dim=-1))
    elif config.aggregation_mode == "literal_branch":
        weights = [masked_softmax(b.logits, m) for b, m in zip(branches, masks)]
    else:
        raise ValueError(f"unknown aggregation mode {config.aggregation_mode!r}")

    output = branches[0].apply(weights[0])
    for branch, a in zip(branches[1:], weights[1:]):
        output = output + branch.apply(a)

    if not return_bundle:
        return output, None, selection

    by_name = {b.name: (b.logits, a) for b, a in zip(branches, weights)}
    long_sum = by_name["long"][1]
    if "overlap" in by_name:
        long_sum = long_sum + by_name["overlap"][1]
    parts = [by_name["short"][1], long_sum]
    if "cache" in by_name:
        parts.append(by_name["cache"][1])
    bundle = AttentionBundle(
        short_logits=by_name["short"][0],
        short_weights=by_name["short"][1],
        long_logits=by_name["long"][0],
        long_weights=by_name["long"][1],
        overlap_logits=by_name.get("overlap", (None, None))[0],
        overlap_weights=by_name.get("overlap", (None, None))[1],
        cache_logits=by_name.get("cache", (None, None))[0],
        cache_weights=by_name.get("cache", (None, None))[1],
        aggregated=torch.cat(parts, -1),
        head_output=output,
        selection=selection,
        segment_scores=scores,
    )
    return output, bundle, selection


def dense_causal_attention(Q: Tensor, K: Tensor, V: Tensor, rows: int = 256) -> Tensor:
    """Full causal attention, the quadratic baseline for benchmarking.

    Every query still scores all n keys; queries are processed ``rows`` at a
    time so the logits buffer stays small instead of a fresh n x n allocation.
    """
    n = Q.shape[-2]
    scale = 1.0 / math.sqrt(Q.shape[-1])
    cols = torch.arange(n, device=Q.device)
    out = torch.empty(*Q.shape[:-1], V.shape[-1], dtype=V.dtype, device=V.device)
    for lo in range(0, n, rows):
        hi = min(n, lo + rows)
        logits = (Q[..., lo:hi, :] * scale) @ K.transpose(-1, -2)
        future = cols > torch.arange(lo, hi, device=Q.device)[:, None]
        logits.masked_fill_(future, float("-inf"))
        out[..., lo:hi, :] = torch.softmax(logits, -1) @ V
    return out

"""Slow reference implementations used to cross-check the vectorised kernels.

Nothing here imports from the attention module: every oracle is written with
explicit Python loops over numpy arrays in float64.
"""

from __future__ import annotations

import math

import numpy as np


def _softmax_over(values: list[float]) -> list[float]:
    if not values:
        return []
    top = max(values)
    exps = [math.exp(v - top) for v in values]
    total = sum(exps)
    return [e / total for e in exps]


def dense_causal_oracle(Q, K, V) -> tuple[np.ndarray, np.ndarray]:
    """Triple-loop causal attention. Returns ``(weights n x n, output n x d_k)``."""
    Q, K, V = (np.asarray(x, dtype=np.float64) for x in (Q, K, V))
    n, d_k = Q.shape
    weights = np.zeros((n, n))
    output = np.zeros((n, V.shape[1]))
    scale = 1.0 / math.sqrt(d_k)
    for t in range(n):
        logits = []
        for j in range(t + 1):
            dot = 0.0
            for e in range(d_k):
                dot += Q[t, e] * K[j, e]
            logits.append(dot * scale)
        for j, p in enumerate(_softmax_over(logits)):
            weights[t, j] = p
            output[t] += p * V[j]
    return weights, output


def projection_oracle(X, W, s: int, overlap: bool = False, source=None) -> np.ndarray:
    """Per-segment softmax-weighted combinations, one segment at a time."""
    X = np.asarray(X, dtype=np.float64)
    S = X if source is None else np.asarray(source, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    n, d_k = X.shape
    c = W.shape[1]
    shift = s // 2 if overlap else 0
    rows = []
    for j in range(n // s):
        positions = [j * s - shift + i for i in range(s)]
        seg_x = [X[p] if p >= 0 else np.zeros(d_k) for p in positions]
        seg_s = [S[p] if p >= 0 else np.zeros(d_k) for p in positions]
        for q in range(c):
            scores = [float(np.dot(row, W[:, q])) for row in seg_s]
            probs = _softmax_over(scores)
            rows.append(sum(p * row for p, row in zip(probs, seg_x)))
    return np.array(rows)


def long_attention_oracle(Q, K_bar, V_bar, s: int, c: int, overlap: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Masked softmax over compressed columns, looping row by row."""
    Q, K_bar, V_bar = (np.asarray(x, dtype=np.float64) for x in (Q, K_bar, V_bar))
    n, d_k = Q.shape
    r = K_bar.shape[0]
    weights = np.zeros((n, r))
    output = np.zeros((n, V_bar.shape[1]))
    for t in range(n):
        home_start = (t // s) * s
        visible = []
        for col in range(r):
            segment = col // c
            seg_end = segment * s + (s // 2 if overlap else s)
            if seg_end <= home_start:
                visible.append(col)
        logits = [float(np.dot(Q[t], K_bar[col])) / math.sqrt(d_k) for col in visible]
        for col, p in zip(visible, _softmax_over(logits)):
            weights[t, col] = p
            output[t] += p * V_bar[col]
    return weights, output


def selection_oracle(avg, k: int, u: int, p_avg: int, s: int) -> list[list[int]]:
    """Segment choice per block by direct simulation of the selection rules.

    Ranks are found by pairwise comparison against every candidate; refill
    walks the whole pool looking for the free segment closest to the held set.
    """
    avg = np.asarray(avg, dtype=np.float64)
    m, n_s = avg.shape
    quota = k * u
    half = (u - 1) // 2
    out = []
    for b in range(m):
        limit = b * p_avg // s - 1
        pool = [j for j in range(n_s) if j <= limit]
        held: list[int] = []
        if pool:
            ranked = []
            for j in pool:
                beaten_by = 0
                for i in pool:
                    if avg[b, i] > avg[b, j] or (avg[b, i] == avg[b, j] and i < j):
                        beaten_by += 1
                ranked.append((beaten_by, j))
            winners = [j for rank, j in sorted(ranked) if rank < k]
            for j in winners:
                for off in range(-half, half + 1):
                    cand = j + off
                    if cand in pool and cand not in held:
                        held.append(cand)
            while len(held) < min(quota, len(pool)):
                best = None
                for cand in pool:
                    if cand in held:
                        continue
                    dist = min(abs(cand - h) for h in held)
                    if best is None or (dist, cand) < best:
                        best = (dist, cand)
                held.append(best[1])
        row = sorted(held) + [-1] * (quota - len(held))
        out.append(row)
    return out

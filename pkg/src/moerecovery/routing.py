"""Desk-scale gating router: top-k selection under expert masks, and the two
failed-expert selection procedures used to study expert loss.

The router verifies masking semantics only; it makes no accuracy claims.
"""

from __future__ import annotations

import math
from typing import AbstractSet, Sequence

import numpy as np

from .errors import RoutingError

ExpertMask = frozenset[int]

EMPTY_MASK: ExpertMask = frozenset()


def top_k_route(
    logits_row: Sequence[float], k: int, mask: AbstractSet[int] = EMPTY_MASK
) -> list[int]:
    """The k highest-scoring unmasked experts, best first; ties go to the lower id.

    Masked experts behave as if their logits were negative infinity just before
    the selection, so the next-best experts take their place.
    """
    candidates = [(-score, expert) for expert, score in enumerate(logits_row) if expert not in mask]
    if k > len(candidates):
        raise RoutingError(
            f"top-{k} requested but only {len(candidates)} experts remain unmasked"
        )
    candidates.sort()
    return [expert for _, expert in candidates[:k]]


def count_activations(
    logits: np.ndarray, k: int, mask: AbstractSet[int] = EMPTY_MASK
) -> np.ndarray:
    """Per-expert selection counts aggregated over all token rows."""
    tokens, num_experts = logits.shape
    counts = np.zeros(num_experts, dtype=np.int64)
    for row in range(tokens):
        for expert in top_k_route(logits[row], k, mask):
            counts[expert] += 1
    return counts


def _target_size(num_experts: int, fraction: float) -> int:
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    # Tiny epsilon so exact products such as 256 * (1/32) do not floor down.
    return int(math.floor(num_experts * fraction + 1e-9))


def select_failed_task_based(counts: Sequence[int], fraction: float) -> ExpertMask:
    """Fail the most frequently activated experts: the worst-case loss pattern."""
    size = _target_size(len(counts), fraction)
    ranked = sorted(range(len(counts)), key=lambda e: (-counts[e], e))
    return frozenset(ranked[:size])


def select_failed_every_nth(num_experts: int, fraction: float) -> ExpertMask:
    """Fail experts at a uniform stride: ids 0, s, 2s, ... with stride s = 1/fraction."""
    if fraction <= 0:
        raise ValueError(f"fraction must be positive, got {fraction}")
    stride = 1.0 / fraction
    step = round(stride)
    if step < 1 or abs(stride - step) > 1e-9:
        raise ValueError(f"1/fraction must be an integer stride, got {stride}")
    size = _target_size(num_experts, fraction)
    return frozenset(i * step for i in range(size))


def random_logits(tokens: int, num_experts: int, seed: int) -> np.ndarray:
    """Synthetic gating scores: independent uniforms from a seeded generator."""
    rng = np.random.default_rng(seed)
    return rng.random((tokens, num_experts))

"""Importance-preserving rank selection.

Turns per-decoder importance scores and a global sparsity into remaining-rank
ratios ``w`` with ``sum(w) == L*(1-s)`` and ``0 <= w <= 1``, then into integer
attention ranks and MLP widths.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .model import ModelConfig

SCHEMA_VERSION = 1


def _check_inputs(t, s: float) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 1 or t.size == 0:
        raise ValueError("importance scores must be a nonempty vector")
    if not np.all(np.isfinite(t)) or np.any(t < 0):
        raise ValueError("importance scores must be finite and nonnegative")
    if not t.sum() > 0:
        raise ValueError("importance scores are all zero")
    if not 0 <= s < 1:
        raise ValueError(f"sparsity must lie in [0, 1), got {s}")
    return t


def budget(n_layers: int, s: float) -> float:
    return n_layers * (1.0 - s)


def naive_allocation(t, s: float) -> np.ndarray:
    """Plain proportional split of the budget; may exceed 1."""
    t = _check_inputs(t, s)
    return t / t.sum() * budget(t.size, s)


def iprs_allocate(t, s: float) -> np.ndarray:
    """Greedy redistribution: rescale the active set to the remaining budget,
    pin every entry above 1 at exactly 1, repeat until nothing exceeds 1."""
    t = _check_inputs(t, s)
    L = t.size
    B = budget(L, s)
    w = np.zeros(L)
    active = np.ones(L, dtype=bool)
    while active.any():
        total = t[active].sum()
        if total > 0:
            w_tilde = t[active] / total * B
        else:
            # only zero-score layers left: spread what remains evenly
            w_tilde = np.full(active.sum(), B / active.sum())
        over = w_tilde > 1.0
        idx = np.flatnonzero(active)
        if not over.any():
            w[idx] = w_tilde
            break
        w[idx[over]] = 1.0
        B -= over.sum()
        active[idx[over]] = False
    return w


def uniform_allocation(n_layers: int, s: float) -> np.ndarray:
    if not 0 <= s < 1:
        raise ValueError(f"sparsity must lie in [0, 1), got {s}")
    return np.full(n_layers, 1.0 - s)


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5).astype(np.int64)


def round_with_repair(w, dim: int) -> np.ndarray:
    """Round ``w*dim`` into ``[1, dim]`` and nudge the layers with the largest
    rounding residual until the total hits ``round(sum(w)*dim)``."""
    w = np.asarray(w, dtype=np.float64)
    raw = w * dim
    ranks = np.clip(_round_half_up(raw), 1, dim)
    target = int(_round_half_up(np.array(raw.sum()))) if raw.size else 0
    while ranks.sum() != target:
        resid = raw - ranks
        if ranks.sum() < target:
            cand = np.flatnonzero(ranks < dim)
            if cand.size == 0:
                break
            j = cand[np.argmax(resid[cand])]
            ranks[j] += 1
        else:
            cand = np.flatnonzero(ranks > 1)
            if cand.size == 0:
                break
            j = cand[np.argmin(resid[cand])]
            ranks[j] -= 1
    return ranks


def ratios_to_ranks(w, config: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    return round_with_repair(w, config.d_head), round_with_repair(w, config.d_int)


@dataclass
class RankPlan:
    s: float
    B: float
    w: np.ndarray
    ranks_attn: np.ndarray
    ranks_mlp: np.ndarray
    mode: str = "iprs"

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "mode": self.mode,
            "s": float(self.s),
            "B": float(self.B),
            "w": [float(x) for x in self.w],
            "ranks_attn": [int(x) for x in self.ranks_attn],
            "ranks_mlp": [int(x) for x in self.ranks_mlp],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RankPlan":
        return cls(
            s=float(d["s"]), B=float(d["B"]), w=np.asarray(d["w"], dtype=np.float64),
            ranks_attn=np.asarray(d["ranks_attn"], dtype=np.int64),
            ranks_mlp=np.asarray(d["ranks_mlp"], dtype=np.int64),
            mode=d.get("mode", "iprs"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def make_plan(t, s: float, config: ModelConfig, mode: str = "iprs") -> RankPlan:
    if mode == "iprs":
        w = iprs_allocate(t, s)
    elif mode == "uniform":
        w = uniform_allocation(config.n_layers, s)
    else:
        raise ValueError(f"unknown rank mode {mode!r}")
    if w.size != config.n_layers:
        raise ValueError(f"{w.size} importance scores for {config.n_layers} layers")
    ranks_attn, ranks_mlp = ratios_to_ranks(w, config)
    return RankPlan(s, budget(config.n_layers, s), w, ranks_attn, ranks_mlp, mode)

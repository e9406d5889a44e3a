"""Whole-model compression driven by a rank plan."""

from __future__ import annotations

from .attention import HeadCompressionPlan, compress_attention_layer
from .forward import CalibrationCapture
from .iprs import RankPlan
from .mlp import compress_mlp
from .model import CompressedDecoderWeights, DecoderWeights, ModelConfig


def compress_layer(weights: DecoderWeights, capture: CalibrationCapture, layer: int, r: int, k: int,
                   config: ModelConfig, qk: bool = False) -> CompressedDecoderWeights:
    out = compress_attention_layer(weights, capture, HeadCompressionPlan(layer, int(r), qk), config)
    w_up, w_down, idx = compress_mlp(weights, capture.c_sigma[layer], int(k))
    out.w_up, out.w_down, out.mlp_indices = w_up, w_down, idx
    out.retained_mlp = int(k)
    return out


def compress_model(layers: list[DecoderWeights], capture: CalibrationCapture, plan: RankPlan,
                   config: ModelConfig, qk: bool = False) -> list[CompressedDecoderWeights]:
    if len(plan.ranks_attn) != len(layers) or capture.n_layers != len(layers):
        raise ValueError("plan, capture and model disagree on the number of layers")
    out = []
    for l, w in enumerate(layers):
        c = compress_layer(w, capture, l, plan.ranks_attn[l], plan.ranks_mlp[l], config, qk)
        c.validate(config, l)
        out.append(c)
    return out


def param_counts(layers: list[DecoderWeights]) -> dict[str, int]:
    """Parameters in the compressible blocks. Query/key bases count towards ``qk``."""
    counts = {"vo": 0, "qk": 0, "mlp": 0}
    for w in layers:
        counts["vo"] += w.w_v.size + w.w_o.size
        counts["qk"] += w.w_q.size + w.w_k.size
        if w.q_basis is not None:
            counts["qk"] += w.q_basis.size + w.k_basis.size
        counts["mlp"] += w.w_up.size + w.w_down.size
    return counts


def realized_sparsity(original: list[DecoderWeights], compressed: list[DecoderWeights],
                      include_qk: bool = False) -> float:
    """Fraction of parameters removed from the compressed blocks."""
    a, b = param_counts(original), param_counts(compressed)
    keys = ["vo", "mlp"] + (["qk"] if include_qk else [])
    before = sum(a[k] for k in keys)
    after = sum(b[k] for k in keys)
    return float(1.0 - after / before)


def block_sparsity(original, compressed) -> dict[str, float]:
    a, b = param_counts(original), param_counts(compressed)
    return {k: float(1.0 - b[k] / a[k]) for k in a}

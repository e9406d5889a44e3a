"""Head-wise PCA compression of attention weights.

Value/output heads are compressed jointly: the top-r eigenvectors of each
kv-head's value covariance are absorbed into the value rows and into the
output columns of every query head sharing that kv-head.  Query and key heads
can additionally be truncated with their own bases (the bases are kept so
logits are formed in the original head coordinates).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .forward import CalibrationCapture
from .model import CompressedDecoderWeights, DecoderWeights, ModelConfig
from .pca import sym_eig, truncate

SYMMETRY_TOL = 1e-10


@dataclass(frozen=True)
class HeadCompressionPlan:
    layer: int
    r: int
    qk_enabled: bool = False


def _check_rank(r: int, config: ModelConfig) -> None:
    if not 1 <= r <= config.d_head:
        raise ValueError(f"rank {r} out of range [1, {config.d_head}]")


def head_bases(covs: np.ndarray, r: int, what: str = "covariance") -> np.ndarray:
    """Top-r eigenbases of a stack of per-head covariances, shape ``(heads, d, r)``."""
    out = []
    for i, c in enumerate(covs):
        scale = np.max(np.abs(c))
        if np.max(np.abs(c - c.T)) > SYMMETRY_TOL * max(scale, 1e-300):
            raise NumericalError(f"{what} of head {i} is not symmetric")
        out.append(truncate(sym_eig(c), r).Q_tilde)
    return np.stack(out)


def compress_value_output(weights: DecoderWeights, c_v: np.ndarray, r: int, config: ModelConfig):
    """Absorb truncated value bases into ``W_v`` and ``W_o``.

    Returns ``(w_v, w_o, bases)`` with ``w_v`` of shape ``(G*r, d_hid)``,
    ``w_o`` of shape ``(d_hid, H*r)`` and ``bases`` ``(G, d_head, r)``.
    """
    _check_rank(r, config)
    dh = config.d_head
    if weights.value_rank(config) != dh:
        raise ValueError("value/output weights are already compressed")
    bases = head_bases(c_v, r, "value covariance")
    w_v = np.concatenate([
        bases[g].T @ weights.w_v[g * dh:(g + 1) * dh] for g in range(config.n_kv_heads)
    ])
    w_o = np.concatenate([
        weights.w_o[:, h * dh:(h + 1) * dh] @ bases[config.kv_head(h)]
        for h in range(config.n_q_heads)
    ], axis=1)
    return w_v, w_o, bases


def compress_query_key(weights: DecoderWeights, c_q: np.ndarray, c_k: np.ndarray, r: int,
                       config: ModelConfig):
    """Truncate query and key heads with independent bases.

    Returns ``(w_q, w_k, q_basis, k_basis)``; ``w_q`` is ``(H*r, d_hid)``,
    ``w_k`` ``(G*r, d_hid)``.
    """
    _check_rank(r, config)
    dh = config.d_head
    if weights.q_basis is not None or weights.qk_dim(config) != dh:
        raise ValueError("query/key weights are already compressed")
    q_basis = head_bases(c_q, r, "query covariance")
    k_basis = head_bases(c_k, r, "key covariance")
    w_q = np.concatenate([
        q_basis[h].T @ weights.w_q[h * dh:(h + 1) * dh] for h in range(config.n_q_heads)
    ])
    w_k = np.concatenate([
        k_basis[g].T @ weights.w_k[g * dh:(g + 1) * dh] for g in range(config.n_kv_heads)
    ])
    return w_q, w_k, q_basis, k_basis


def compress_attention_layer(weights: DecoderWeights, capture: CalibrationCapture,
                             plan: HeadCompressionPlan, config: ModelConfig) -> CompressedDecoderWeights:
    """Compress the attention part of one decoder; the MLP is carried over unchanged."""
    l = plan.layer
    w_v, w_o, _ = compress_value_output(weights, capture.c_v[l], plan.r, config)
    w_q, w_k, q_basis, k_basis, qk_rank = weights.w_q, weights.w_k, None, None, None
    if plan.qk_enabled:
        w_q, w_k, q_basis, k_basis = compress_query_key(
            weights, capture.c_q[l], capture.c_k[l], plan.r, config
        )
        qk_rank = plan.r
    d_int = weights.mlp_width()
    return CompressedDecoderWeights(
        w_q=w_q, w_k=w_k, w_v=w_v, w_o=w_o,
        w_up=weights.w_up.copy(), w_down=weights.w_down.copy(),
        rms_attn=weights.rms_attn.copy(), rms_mlp=weights.rms_mlp.copy(),
        q_basis=q_basis, k_basis=k_basis,
        retained_rank=plan.r, retained_mlp=d_int, qk_rank=qk_rank,
        mlp_indices=np.arange(d_int),
    )

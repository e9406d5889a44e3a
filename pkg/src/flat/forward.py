"""Decoder forward pass, calibration statistics and decoder importance scores."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .model import DecoderWeights, ModelConfig

MAX_RETAINED_ROWS = 4096


def rms_norm(x: np.ndarray, weight: np.ndarray, eps: float) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * weight


def silu(x: np.ndarray) -> np.ndarray:
    return x * expit(x)


def softmax_causal(scores: np.ndarray) -> np.ndarray:
    """Row softmax over the last two axes with a causal mask."""
    n = scores.shape[-1]
    masked = np.where(np.tril(np.ones((n, n), dtype=bool)), scores, -np.inf)
    masked = masked - masked.max(axis=-1, keepdims=True)
    e = np.exp(masked)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class DecoderTaps:
    """Intermediate activations of one decoder.

    ``y_q`` is ``(H, N, dq)``, ``y_k`` and ``y_v`` are ``(G, N, dq|r)``: the
    raw projection outputs on the normalized input.  ``probs`` holds the
    attention weights ``(H, N, N)``.
    """

    x_attn: np.ndarray
    y_q: np.ndarray
    y_k: np.ndarray
    y_v: np.ndarray
    probs: np.ndarray
    attn_out: np.ndarray
    hidden: np.ndarray
    x_mlp: np.ndarray
    mlp_act: np.ndarray
    mlp_out: np.ndarray


def _split_heads(y: np.ndarray, n_heads: int) -> np.ndarray:
    n = y.shape[0]
    return y.reshape(n, n_heads, -1).transpose(1, 0, 2)


def attention(weights: DecoderWeights, x_attn: np.ndarray, config: ModelConfig):
    """Causal grouped-query attention on already-normalized input.

    Returns ``(attn_out, y_q, y_k, y_v, probs)``.
    """
    H, G = config.n_q_heads, config.n_kv_heads
    y_q = _split_heads(x_attn @ weights.w_q.T, H)
    y_k = _split_heads(x_attn @ weights.w_k.T, G)
    y_v = _split_heads(x_attn @ weights.w_v.T, G)

    q, k = y_q, y_k
    if weights.q_basis is not None:
        # lift reduced query/key coordinates back to d_head
        q = np.einsum("hnr,hdr->hnd", y_q, weights.q_basis)
        k = np.einsum("gnr,gdr->gnd", y_k, weights.k_basis)

    group = np.arange(H) // config.group_size
    scores = q @ k[group].transpose(0, 2, 1) / math.sqrt(config.d_head)
    probs = softmax_causal(scores)
    heads = probs @ y_v[group]  # (H, N, r)
    n = x_attn.shape[0]
    concat = heads.transpose(1, 0, 2).reshape(n, -1)
    return concat @ weights.w_o.T, y_q, y_k, y_v, probs


def forward_decoder(weights: DecoderWeights, x: np.ndarray, config: ModelConfig, taps: bool = False):
    """Pre-norm residual decoder: ``h = x + attn(norm(x))``, ``y = h + mlp(norm(h))``.

    Returns ``y`` or ``(y, DecoderTaps)`` when ``taps`` is set.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != config.d_hid:
        raise ValueError(f"expected input of shape (N, {config.d_hid}), got {x.shape}")
    x_attn = rms_norm(x, weights.rms_attn, config.norm_eps)
    attn_out, y_q, y_k, y_v, probs = attention(weights, x_attn, config)
    hidden = x + attn_out
    x_mlp = rms_norm(hidden, weights.rms_mlp, config.norm_eps)
    act = silu(x_mlp @ weights.w_up.T)
    mlp_out = act @ weights.w_down.T
    y = hidden + mlp_out
    if not taps:
        return y
    return y, DecoderTaps(x_attn, y_q, y_k, y_v, probs, attn_out, hidden, x_mlp, act, mlp_out)


def forward_model(layers: list[DecoderWeights], x: np.ndarray, config: ModelConfig,
                  return_hidden: bool = False):
    """Run all decoders; optionally return every hidden state ``[x_0, ..., x_L]``."""
    states = [np.asarray(x, dtype=np.float64)]
    for w in layers:
        states.append(forward_decoder(w, states[-1], config))
    return states if return_hidden else states[-1]


# -- calibration ----------------------------------------------------------------


def _gram(y: np.ndarray) -> np.ndarray:
    """Batched ``y^T y`` over the leading head axis, made exactly symmetric."""
    c = np.einsum("hni,hnj->hij", y, y)
    return 0.5 * (c + c.transpose(0, 2, 1))


@dataclass
class CalibrationCapture:
    """Per-layer activation statistics summed over calibration batches.

    ``c_v[l]`` has shape ``(G, r, r)``, ``c_q[l]`` ``(H, dq, dq)``,
    ``c_k[l]`` ``(G, dq, dq)`` and ``c_sigma[l]`` ``(k, k)``.  ``x_in`` and
    ``x_out`` hold decoder input/output rows for importance scoring, capped
    at ``max_rows`` by stride subsampling in :meth:`finalize`.
    """

    c_v: list[np.ndarray]
    c_q: list[np.ndarray]
    c_k: list[np.ndarray]
    c_sigma: list[np.ndarray]
    x_in: list[np.ndarray]
    x_out: list[np.ndarray]
    n_batches: int = 0
    n_tokens: int = 0
    value_source: str = "value"
    max_rows: int = MAX_RETAINED_ROWS
    finalized: bool = field(default=False, repr=False)

    @property
    def n_layers(self) -> int:
        return len(self.c_v)

    def merge(self, other: "CalibrationCapture") -> "CalibrationCapture":
        """Elementwise sum of accumulators; hidden-state rows are concatenated in order."""
        if self.finalized or other.finalized:
            raise ValueError("cannot merge finalized captures")
        return CalibrationCapture(
            c_v=[a + b for a, b in zip(self.c_v, other.c_v)],
            c_q=[a + b for a, b in zip(self.c_q, other.c_q)],
            c_k=[a + b for a, b in zip(self.c_k, other.c_k)],
            c_sigma=[a + b for a, b in zip(self.c_sigma, other.c_sigma)],
            x_in=[np.concatenate([a, b]) for a, b in zip(self.x_in, other.x_in)],
            x_out=[np.concatenate([a, b]) for a, b in zip(self.x_out, other.x_out)],
            n_batches=self.n_batches + other.n_batches,
            n_tokens=self.n_tokens + other.n_tokens,
            value_source=self.value_source,
            max_rows=self.max_rows,
        )

    def finalize(self) -> "CalibrationCapture":
        """Subsample retained rows to at most ``max_rows`` with a fixed stride."""
        if self.finalized:
            return self
        x_in, x_out = [], []
        for a, b in zip(self.x_in, self.x_out):
            stride = max(1, math.ceil(a.shape[0] / self.max_rows))
            x_in.append(a[::stride].copy())
            x_out.append(b[::stride].copy())
        self.x_in, self.x_out = x_in, x_out
        self.finalized = True
        return self


def capture_batch(layers: list[DecoderWeights], x: np.ndarray, config: ModelConfig,
                  value_source: str = "value", max_rows: int = MAX_RETAINED_ROWS) -> CalibrationCapture:
    """Statistics of a single batch.

    ``value_source="value"`` accumulates the value-projection outputs
    ``Y_v^g``; ``"attention"`` accumulates the attention-weighted per-query-head
    values ``P^h Y_v^{g(h)}`` summed into their kv-head.
    """
    if value_source not in ("value", "attention"):
        raise ValueError(f"unknown value_source {value_source!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] != config.d_hid:
        raise ValueError(f"calibration batch must be (N>=1, {config.d_hid}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("calibration batch contains non-finite values")
    cap = CalibrationCapture([], [], [], [], [], [], 1, x.shape[0], value_source, max_rows)
    group = np.arange(config.n_q_heads) // config.group_size
    for w in layers:
        y, t = forward_decoder(w, x, config, taps=True)
        if value_source == "value":
            cv = _gram(t.y_v)
        else:
            per_head = _gram(t.probs @ t.y_v[group])
            cv = np.stack([per_head[group == g].sum(axis=0) for g in range(config.n_kv_heads)])
        cap.c_v.append(cv)
        cap.c_q.append(_gram(t.y_q))
        cap.c_k.append(_gram(t.y_k))
        cap.c_sigma.append(_gram(t.mlp_act[None])[0])
        cap.x_in.append(x)
        cap.x_out.append(y)
        x = y
    return cap


def _tree_reduce(parts: list[CalibrationCapture]) -> CalibrationCapture:
    while len(parts) > 1:
        nxt = [parts[i].merge(parts[i + 1]) for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def run_calibration(layers: list[DecoderWeights], batches, config: ModelConfig, *,
                    value_source: str = "value", max_rows: int = MAX_RETAINED_ROWS,
                    threads: int = 1) -> CalibrationCapture:
    """Accumulate calibration statistics over ``batches``.

    Single-threaded runs fold batches left to right. With ``threads > 1``
    per-batch partials are computed concurrently and combined by a pairwise
    tree whose shape depends only on the batch count.
    """
    batches = list(batches)
    if not batches:
        raise ValueError("run_calibration needs at least one batch")

    def one(b):
        return capture_batch(layers, b, config, value_source, max_rows)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cap = _tree_reduce(list(pool.map(one, batches)))
    else:
        cap = one(batches[0])
        for b in batches[1:]:
            cap = cap.merge(one(b))
    return cap.finalize()


# -- importance ------------------------------------------------------------------


def mean_cosine(x_in: np.ndarray, x_out: np.ndarray) -> float:
    """Mean row-wise cosine similarity; rows where either side has zero norm are skipped."""
    if x_in.shape != x_out.shape or x_in.shape[0] == 0:
        raise ValueError(f"hidden-state samples must be nonempty and aligned, got {x_in.shape} / {x_out.shape}")
    n_in = np.linalg.norm(x_in, axis=1)
    n_out = np.linalg.norm(x_out, axis=1)
    keep = (n_in > 0) & (n_out > 0)
    if not keep.any():
        raise ValueError("all hidden-state rows have zero norm; cosine similarity undefined")
    cos = np.sum(x_in[keep] * x_out[keep], axis=1) / (n_in[keep] * n_out[keep])
    return float(np.mean(cos))


def angular_deviation(c: float) -> float:
    return float(np.arccos(np.clip(c, -1.0, 1.0)) / np.pi)


def importance_scores(capture: CalibrationCapture) -> np.ndarray:
    """Normalized angle ``arccos(c_l)/pi`` between each decoder's input and output."""
    return np.array([
        angular_deviation(mean_cosine(a, b)) for a, b in zip(capture.x_in, capture.x_out)
    ])

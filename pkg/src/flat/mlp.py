"""Nystrom compression of MLP blocks with ridge leverage scores.

Channels of the SiLU intermediate state are ranked by the diagonal of
``C (C + I)^-1`` where ``C`` is the uncentered Gram matrix of the activations.
The top-k channels keep their up-projection rows; the down-projection is
refit on the kept channels as ``(S^T C S)^-1 S^T C W2``, which is the
least-squares regression of the full MLP output onto the kept activations.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericalError
from .model import DecoderWeights
from .pca import sym_eig

SINGULAR_RTOL = 1e-12
DAMPING = 1e-8


def ridge_leverage(c_sigma: np.ndarray) -> np.ndarray:
    """``diag(C (C + I)^-1)`` via the eigendecomposition of ``C``."""
    eig = sym_eig(c_sigma)
    shrink = eig.lam / (eig.lam + 1.0)
    return (eig.Q ** 2) @ shrink


def select_topk(scores: np.ndarray, k: int) -> np.ndarray:
    """Sorted indices of the k largest scores; ties go to the lower index."""
    scores = np.asarray(scores)
    if not 1 <= k <= scores.size:
        raise ValueError(f"k={k} out of range [1, {scores.size}]")
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:k])


def nystrom_down(c_sigma: np.ndarray, w2: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Refit the down-projection (``d_int x d_hid`` layout) onto channels ``idx``.

    The selected block is damped by ``1e-8 * trace(C)/d_int`` when its
    condition number exceeds ``1e12``.
    """
    block = c_sigma[np.ix_(idx, idx)]
    rhs = c_sigma[idx] @ w2
    ev = np.linalg.eigvalsh(0.5 * (block + block.T))
    if ev[-1] <= 0 or ev[0] <= SINGULAR_RTOL * ev[-1]:
        eps = DAMPING * np.trace(c_sigma) / c_sigma.shape[0]
        if not eps > 0:
            raise NumericalError("selected activation block is singular (zero activations)")
        block = block + eps * np.eye(len(idx))
    try:
        return np.linalg.solve(block, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"selected activation block is singular: {exc}") from exc


def compress_mlp(weights: DecoderWeights, c_sigma: np.ndarray, k: int):
    """Return ``(w_up, w_down, indices)`` for an MLP of intermediate width k.

    ``w_up`` is ``(k, d_hid)`` and ``w_down`` ``(d_hid, k)``, the same layout
    as the uncompressed weights.  With ``k == d_int`` the weights are returned
    unchanged.
    """
    d_int = weights.mlp_width()
    if c_sigma.shape != (d_int, d_int):
        raise ValueError(f"activation Gram must be {d_int}x{d_int}, got {c_sigma.shape}")
    if not 1 <= k <= d_int:
        raise ValueError(f"k={k} out of range [1, {d_int}]")
    if k == d_int:
        return weights.w_up.copy(), weights.w_down.copy(), np.arange(d_int)
    idx = select_topk(ridge_leverage(c_sigma), k)
    w2 = nystrom_down(c_sigma, weights.w_down.T, idx)
    return weights.w_up[idx].copy(), np.ascontiguousarray(w2.T), idx

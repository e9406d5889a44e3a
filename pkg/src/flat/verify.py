"""Numerical checks of the truncation-error identities and end-to-end reports."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .compress import compress_model
from .forward import forward_decoder, importance_scores, rms_norm, run_calibration, softmax_causal
from .iprs import budget, iprs_allocate, make_plan, naive_allocation
from .model import DecoderWeights, ModelConfig, random_model
from .pca import project, reconstruction_error, sym_eig, tail_sum, truncate

SCHEMA_VERSION = 1
IDENTITY_TOL = 1e-8
MAX_GRID_POINTS = 20_000_000


def _seeds(master: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(master).generate_state(n)]


def _random_activations(rng: np.random.Generator, N: int, d: int) -> np.ndarray:
    # decaying column scales give a spread-out spectrum
    return rng.standard_normal((N, d)) * np.geomspace(1.0, 1e-2, d)


def check_tail_identity(seed: int, N: int, d: int, r: int) -> float:
    """Relative gap between the rank-r projection error and the dropped eigenvalues."""
    if not 1 <= r <= d:
        raise ValueError(f"rank {r} out of range [1, {d}]")
    Y = _random_activations(np.random.default_rng(seed), N, d)
    eig = sym_eig(Y.T @ Y)
    err = reconstruction_error(Y, truncate(eig, r))
    return abs(err - tail_sum(eig, r)) / max(1.0, float(np.sum(Y * Y)))


def check_multihead_tail_identity(seed: int, heads: int, N: int, d_head: int, r: int) -> float:
    """As :func:`check_tail_identity` for concatenated heads, each with its own basis."""
    if not 1 <= r <= d_head:
        raise ValueError(f"rank {r} out of range [1, {d_head}]")
    Y = _random_activations(np.random.default_rng(seed), N, heads * d_head)
    recon, tails = [], 0.0
    for h in range(heads):
        Yh = Y[:, h * d_head:(h + 1) * d_head]
        eig = sym_eig(Yh.T @ Yh)
        recon.append(project(Yh, truncate(eig, r)))
        tails += tail_sum(eig, r)
    R = Y - np.concatenate(recon, axis=1)
    return abs(float(np.sum(R * R)) - tails) / max(1.0, float(np.sum(Y * Y)))


# -- allocation oracle ----------------------------------------------------------


def grid_oracle(w_hat: np.ndarray, B: float, step: float) -> np.ndarray:
    """Closest point to ``w_hat`` among grid points of ``[0,1]^L`` with ``sum == B``.

    The first ``L-1`` coordinates range over the grid; the last one absorbs
    the remaining budget and must land in ``[0, 1]``.
    """
    m = 1.0 / step
    if abs(m - round(m)) > 1e-9:
        raise ValueError(f"grid step {step} must divide 1")
    m = int(round(m))
    L = w_hat.size
    if L == 1:
        return np.array([B])
    grid = np.arange(m + 1) / m
    n_points = (m + 1) ** (L - 1)
    if n_points > MAX_GRID_POINTS:
        raise ValueError(f"grid of {n_points} points is too large; use a coarser step or fewer layers")
    best, best_obj = None, np.inf
    # chunk over the first free coordinate to bound memory
    rest = np.array(list(itertools.product(range(m + 1), repeat=L - 2)), dtype=np.int64)
    rest = rest.reshape((m + 1) ** (L - 2), L - 2)
    for i0 in range(m + 1):
        free = np.concatenate([np.full((rest.shape[0], 1), i0), rest], axis=1)
        pts = grid[free]
        last = B - pts.sum(axis=1)
        ok = (last >= -1e-12) & (last <= 1 + 1e-12)
        if not ok.any():
            continue
        cand = np.concatenate([pts[ok], np.clip(last[ok], 0.0, 1.0)[:, None]], axis=1)
        obj = np.linalg.norm(cand - w_hat, axis=1)
        j = int(np.argmin(obj))
        if obj[j] < best_obj:
            best, best_obj = cand[j], obj[j]
    if best is None:
        raise ValueError("no feasible grid point")
    return best


def compare_allocations(t, s: float, grid_step: float = 0.01) -> dict:
    """Distance to the naive allocation: greedy result vs exhaustive grid search."""
    t = np.asarray(t, dtype=np.float64)
    if t.size > 6:
        raise ValueError("grid oracle supports at most 6 layers")
    w_hat = naive_allocation(t, s)
    B = budget(t.size, s)
    greedy = iprs_allocate(t, s)
    oracle = grid_oracle(w_hat, B, grid_step)
    g_obj = float(np.linalg.norm(greedy - w_hat))
    o_obj = float(np.linalg.norm(oracle - w_hat))
    return {
        "t": t.tolist(),
        "s": float(s),
        "B": float(B),
        "grid_step": float(grid_step),
        "naive": w_hat.tolist(),
        "greedy": greedy.tolist(),
        "oracle": oracle.tolist(),
        "greedy_objective": g_obj,
        "oracle_objective": o_obj,
        "objective_gap": g_obj - o_obj,
        "oracle_budget_error": float(abs(oracle.sum() - B)),
        "greedy_budget_error": float(abs(greedy.sum() - B)),
    }


# -- explicit-projection attention -------------------------------------------------


def projected_attention(weights: DecoderWeights, x: np.ndarray, config: ModelConfig,
                        v_bases: np.ndarray | None = None, q_bases: np.ndarray | None = None,
                        k_bases: np.ndarray | None = None) -> np.ndarray:
    """Attention output of uncompressed weights with ``Q~ Q~^T`` inserted explicitly.

    Written head by head, independent of the absorbed forward path.
    """
    xa = rms_norm(x, weights.rms_attn, config.norm_eps)
    dh = config.d_head
    out = np.zeros_like(x)
    for h in range(config.n_q_heads):
        g = config.kv_head(h)
        yq = xa @ weights.w_q[h * dh:(h + 1) * dh].T
        yk = xa @ weights.w_k[g * dh:(g + 1) * dh].T
        yv = xa @ weights.w_v[g * dh:(g + 1) * dh].T
        if q_bases is not None:
            yq = yq @ q_bases[h] @ q_bases[h].T
            yk = yk @ k_bases[g] @ k_bases[g].T
        if v_bases is not None:
            yv = yv @ v_bases[g] @ v_bases[g].T
        p = softmax_causal(yq @ yk.T / math.sqrt(dh))
        out += p @ yv @ weights.w_o[:, h * dh:(h + 1) * dh].T
    return out


# -- end-to-end report -----------------------------------------------------------------


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    diff = float(np.linalg.norm(a - b))
    nb = float(np.linalg.norm(b))
    return diff / nb if nb > 0 else diff


@dataclass
class ReconReport:
    layers: list[dict]
    output_error: float
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "layers": self.layers,
            "output_error": self.output_error,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReconReport":
        return cls(layers=d["layers"], output_error=d["output_error"], extra=d.get("extra", {}))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def max_error(self, mode: str = "free_running") -> float:
        return max(max(layer[mode].values()) for layer in self.layers)


def end_to_end_report(original: list[DecoderWeights], compressed: list[DecoderWeights],
                      x: np.ndarray, config: ModelConfig, extra: dict | None = None) -> ReconReport:
    """Per-layer relative Frobenius errors, teacher-forced and free-running.

    Teacher-forced feeds every compressed layer the original model's input to
    that layer; free-running lets errors propagate through the compressed stack.
    """
    if len(original) != len(compressed):
        raise ValueError(f"layer count mismatch: {len(original)} vs {len(compressed)}")
    x = np.asarray(x, dtype=np.float64)
    xo, xc = x, x
    layers = []
    for l, (wo, wc) in enumerate(zip(original, compressed)):
        yo, to = forward_decoder(wo, xo, config, taps=True)
        yt, tt = forward_decoder(wc, xo, config, taps=True)
        yf, tf = forward_decoder(wc, xc, config, taps=True)
        layers.append({
            "layer": l,
            "retained_rank": int(wc.value_rank(config)),
            "retained_mlp": int(wc.mlp_width()),
            "teacher_forced": {
                "attn": _rel(tt.attn_out, to.attn_out),
                "mlp": _rel(tt.mlp_out, to.mlp_out),
                "decoder": _rel(yt, yo),
            },
            "free_running": {
                "attn": _rel(tf.attn_out, to.attn_out),
                "mlp": _rel(tf.mlp_out, to.mlp_out),
                "decoder": _rel(yf, yo),
            },
        })
        xo, xc = yo, yf
    return ReconReport(layers, _rel(xc, xo), dict(extra or {}))


# -- desk-scale experiments ---------------------------------------------------------


def engineered_model(config: ModelConfig, seed: int, branch_scales) -> list[DecoderWeights]:
    """Random model whose residual branches are scaled per layer.

    Small scales make a decoder close to the identity (low importance).
    """
    scales = list(branch_scales)
    if len(scales) != config.n_layers:
        raise ValueError("one branch scale per layer required")
    layers = random_model(config, seed)
    for w, a in zip(layers, scales):
        w.w_o *= a
        w.w_down *= a
    return layers


def synthetic_batches(seed: int, n_batches: int, n_tokens: int, d_hid: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((n_tokens, d_hid)) for _ in range(n_batches)]


def mode_comparison(config: ModelConfig, seed: int, sparsities, branch_scales,
                    n_batches: int = 4, n_tokens: int = 64, qk: bool = False) -> dict:
    """Free-running output error of IPRS vs uniform plans on one engineered model."""
    layers = engineered_model(config, seed, branch_scales)
    batches = synthetic_batches(seed + 1, n_batches, n_tokens, config.d_hid)
    x_eval = synthetic_batches(seed + 2, 1, n_tokens, config.d_hid)[0]
    cap = run_calibration(layers, batches, config)
    t = importance_scores(cap)
    out = {"seed": seed, "t": t.tolist(), "errors": {}}
    for s in sparsities:
        row = {}
        for mode in ("uniform", "iprs"):
            plan = make_plan(t, s, config, mode)
            comp = compress_model(layers, cap, plan, config, qk=qk)
            row[mode] = end_to_end_report(layers, comp, x_eval, config).output_error
        out["errors"][str(s)] = row
    return out


# -- suites ---------------------------------------------------------------------------


def suite_theorems(seed: int, trials: int = 100) -> dict:
    seeds = _seeds(seed, 2 * trials)
    single, multi = [], []
    for i in range(trials):
        rng = np.random.default_rng(seeds[i])
        N, d = int(rng.integers(1, 65)), int(rng.integers(1, 17))
        r = int(rng.integers(1, d + 1))
        single.append(check_tail_identity(seeds[i], N, d, r))
    for i in range(trials):
        rng = np.random.default_rng(seeds[trials + i])
        H, N, d = int(rng.integers(1, 9)), int(rng.integers(1, 65)), int(rng.integers(1, 17))
        r = int(rng.integers(1, d + 1))
        multi.append(check_multihead_tail_identity(seeds[trials + i], H, N, d, r))
    worst = max(max(single), max(multi))
    return {
        "suite": "theorems",
        "trials": trials,
        "single_head_max_residual": max(single),
        "multi_head_max_residual": max(multi),
        "tolerance": IDENTITY_TOL,
        "passed": bool(worst <= IDENTITY_TOL),
    }


def suite_alloc(seed: int, trials: int = 1000) -> dict:
    rng = np.random.default_rng(seed)
    worst_budget = 0.0
    bounds_ok = True
    for _ in range(trials):
        L = int(rng.integers(1, 33))
        t = rng.uniform(0.0, 1.0, L)
        t[0] += 1e-3
        s = float(rng.uniform(0.0, 0.95))
        w = iprs_allocate(t, s)
        worst_budget = max(worst_budget, abs(w.sum() - budget(L, s)))
        bounds_ok &= bool(np.all((w >= 0) & (w <= 1)))
    comparisons = [compare_allocations([0.6, 0.3, 0.1], 1 / 3, 0.01)]
    for _ in range(5):
        L = int(rng.integers(2, 5))
        comparisons.append(compare_allocations(rng.uniform(0.05, 1.0, L), float(rng.uniform(0.0, 0.6)), 0.01))
    feasible = all(c["oracle_budget_error"] <= 1e-9 and c["greedy_budget_error"] <= 1e-9 for c in comparisons)
    return {
        "suite": "alloc",
        "trials": trials,
        "max_budget_error": worst_budget,
        "bounds_ok": bounds_ok,
        "comparisons": comparisons,
        "passed": bool(worst_budget <= 1e-9 and bounds_ok and feasible),
    }


def suite_e2e(seed: int) -> dict:
    config = ModelConfig(d_hid=64, d_head=16, n_q_heads=4, n_kv_heads=2, d_int=128, n_layers=4)
    layers = random_model(config, seed)
    batches = synthetic_batches(seed + 1, 4, 64, config.d_hid)
    x_eval = synthetic_batches(seed + 2, 1, 64, config.d_hid)[0]
    cap = run_calibration(layers, batches, config)
    t = importance_scores(cap)
    reports = {}
    for s in (0.0, 0.2):
        plan = make_plan(t, s, config, "iprs")
        comp = compress_model(layers, cap, plan, config)
        reports[str(s)] = end_to_end_report(layers, comp, x_eval, config, {"plan": plan.to_dict()}).to_dict()
    lossless = max(
        max(layer["free_running"].values()) for layer in reports["0.0"]["layers"]
    )
    return {
        "suite": "e2e",
        "reports": reports,
        "lossless_max_error": lossless,
        "passed": bool(lossless <= 1e-10),
    }


SUITES = {"theorems": suite_theorems, "alloc": suite_alloc, "e2e": suite_e2e}

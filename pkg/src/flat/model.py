"""Toy decoder-only transformer: configuration, weights and checkpoint format.

A checkpoint is a directory holding ``manifest.json`` and one raw
little-endian, row-major binary file per tensor.  The manifest carries the
model config, a tensor table (name, layer, shape, dtype, file) and, for
compressed models, the per-layer retained ranks and MLP channel indices.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import CheckpointError

FORMAT_NAME = "flat-checkpoint"
FORMAT_VERSION = 1
MANIFEST = "manifest.json"

_DTYPES = {"f64": np.dtype("<f8"), "f32": np.dtype("<f4")}
_MATRICES = ("w_q", "w_k", "w_v", "w_o", "w_up", "w_down")
_VECTORS = ("rms_attn", "rms_mlp")
_BASES = ("q_basis", "k_basis")


@dataclass(frozen=True)
class ModelConfig:
    d_hid: int
    d_head: int
    n_q_heads: int
    n_kv_heads: int
    d_int: int
    n_layers: int
    norm_eps: float = 1e-6

    def __post_init__(self):
        for name in ("d_hid", "d_head", "n_q_heads", "n_kv_heads", "d_int", "n_layers"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.d_hid != self.n_q_heads * self.d_head:
            raise ValueError(
                f"d_hid ({self.d_hid}) must equal n_q_heads*d_head "
                f"({self.n_q_heads}*{self.d_head})"
            )
        if self.n_q_heads % self.n_kv_heads:
            raise ValueError(
                f"n_q_heads ({self.n_q_heads}) must be a multiple of n_kv_heads ({self.n_kv_heads})"
            )
        if not (math.isfinite(self.norm_eps) and self.norm_eps > 0):
            raise ValueError(f"norm_eps must be positive and finite, got {self.norm_eps!r}")

    @property
    def group_size(self) -> int:
        """Query heads per key/value head."""
        return self.n_q_heads // self.n_kv_heads

    def kv_head(self, h: int) -> int:
        """Key/value head serving query head ``h`` (0-based)."""
        return h // self.group_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DecoderWeights:
    """Dense weights of one decoder.

    Matrices follow the ``y = x @ W.T`` convention.  Query head ``h`` owns
    rows ``h*dq:(h+1)*dq`` of ``w_q``; output head ``h`` owns the matching
    column block of ``w_o``.  ``q_basis``/``k_basis`` are only present after
    query/key compression: they lift the reduced per-head projections back to
    ``d_head`` before the attention logits are formed.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    rms_attn: np.ndarray
    rms_mlp: np.ndarray
    q_basis: np.ndarray | None = None
    k_basis: np.ndarray | None = None

    def tensors(self) -> dict[str, np.ndarray]:
        out = {name: getattr(self, name) for name in _MATRICES + _VECTORS}
        for name in _BASES:
            if getattr(self, name) is not None:
                out[name] = getattr(self, name)
        return out

    def value_rank(self, config: ModelConfig) -> int:
        return self.w_v.shape[0] // config.n_kv_heads

    def qk_dim(self, config: ModelConfig) -> int:
        return self.w_q.shape[0] // config.n_q_heads

    def mlp_width(self) -> int:
        return self.w_up.shape[0]

    def expected_shapes(self, config: ModelConfig) -> dict[str, tuple[int, ...]]:
        return _expected_shapes(config, config.d_head, config.d_int, None)

    def validate(self, config: ModelConfig, layer: int | None = None) -> None:
        where = "" if layer is None else f" in layer {layer}"
        expected = self.expected_shapes(config)
        present = self.tensors()
        for name, shape in expected.items():
            if name not in present:
                raise CheckpointError(f"missing tensor {name}{where}")
            arr = present[name]
            if tuple(arr.shape) != shape:
                raise CheckpointError(
                    f"shape mismatch for {name}{where}: expected {shape}, got {tuple(arr.shape)}"
                )
            if not np.all(np.isfinite(arr)):
                raise CheckpointError(f"non-finite value in {name}{where}")
        extra = set(present) - set(expected)
        if extra:
            raise CheckpointError(f"unexpected tensors{where}: {sorted(extra)}")

    def copy(self) -> "DecoderWeights":
        kwargs = {f.name: getattr(self, f.name) for f in fields(self)}
        for name, value in kwargs.items():
            if isinstance(value, np.ndarray):
                kwargs[name] = value.copy()
        return type(self)(**kwargs)


@dataclass
class CompressedDecoderWeights(DecoderWeights):
    """Decoder after truncation and absorption.

    Value blocks are ``retained_rank x d_hid`` per kv-head, output blocks
    ``d_hid x retained_rank`` per query head, and the MLP keeps
    ``retained_mlp`` intermediate channels (``mlp_indices``).
    """

    retained_rank: int = 0
    retained_mlp: int = 0
    qk_rank: int | None = None
    mlp_indices: np.ndarray | None = None

    def expected_shapes(self, config: ModelConfig) -> dict[str, tuple[int, ...]]:
        return _expected_shapes(config, self.retained_rank, self.retained_mlp, self.qk_rank)

    def validate(self, config: ModelConfig, layer: int | None = None) -> None:
        where = "" if layer is None else f" in layer {layer}"
        if not 1 <= self.retained_rank <= config.d_head:
            raise CheckpointError(f"retained_rank {self.retained_rank} out of [1, {config.d_head}]{where}")
        if not 1 <= self.retained_mlp <= config.d_int:
            raise CheckpointError(f"retained_mlp {self.retained_mlp} out of [1, {config.d_int}]{where}")
        if self.qk_rank is not None and not 1 <= self.qk_rank <= config.d_head:
            raise CheckpointError(f"qk_rank {self.qk_rank} out of [1, {config.d_head}]{where}")
        if self.mlp_indices is not None:
            idx = np.asarray(self.mlp_indices)
            if (
                idx.shape != (self.retained_mlp,)
                or np.any(np.diff(idx) <= 0)
                or idx.min() < 0
                or idx.max() >= config.d_int
            ):
                raise CheckpointError(f"invalid mlp_indices{where}")
        super().validate(config, layer)

    def metadata(self) -> dict:
        return {
            "retained_rank": int(self.retained_rank),
            "retained_mlp": int(self.retained_mlp),
            "qk_rank": None if self.qk_rank is None else int(self.qk_rank),
            "mlp_indices": None if self.mlp_indices is None else [int(i) for i in self.mlp_indices],
        }


def _expected_shapes(config: ModelConfig, r: int, k: int, qk_rank: int | None) -> dict[str, tuple[int, ...]]:
    H, G, d, dh = config.n_q_heads, config.n_kv_heads, config.d_hid, config.d_head
    dq = dh if qk_rank is None else qk_rank
    shapes = {
        "w_q": (H * dq, d),
        "w_k": (G * dq, d),
        "w_v": (G * r, d),
        "w_o": (d, H * r),
        "w_up": (k, d),
        "w_down": (d, k),
        "rms_attn": (d,),
        "rms_mlp": (d,),
    }
    if qk_rank is not None:
        shapes["q_basis"] = (H, dh, qk_rank)
        shapes["k_basis"] = (G, dh, qk_rank)
    return shapes


def random_model(config: ModelConfig, seed: int) -> list[DecoderWeights]:
    """Gaussian weights with standard deviation ``1/sqrt(d_hid)``; RMSNorm gains of one."""
    rng = np.random.default_rng(seed)
    scale = 1.0 / math.sqrt(config.d_hid)
    layers = []
    for _ in range(config.n_layers):
        shapes = _expected_shapes(config, config.d_head, config.d_int, None)
        mats = {name: rng.standard_normal(shapes[name]) * scale for name in _MATRICES}
        layers.append(
            DecoderWeights(
                **mats,
                rms_attn=np.ones(config.d_hid),
                rms_mlp=np.ones(config.d_hid),
            )
        )
    return layers


# -- raw tensor container ---------------------------------------------------


def write_tensor_dir(path, header: dict, tensors: list[tuple[str, int | None, np.ndarray]],
                     dtype: str = "f64") -> None:
    """Write ``manifest.json`` plus one binary file per tensor.

    ``tensors`` is a list of ``(name, layer, array)``; ``layer`` may be None.
    """
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    path = Path(path)
    table = []
    try:
        path.mkdir(parents=True, exist_ok=True)
        for name, layer, arr in tensors:
            fname = f"{name}.bin"
            data = np.ascontiguousarray(arr, dtype=_DTYPES[dtype])
            (path / fname).write_bytes(data.tobytes(order="C"))
            entry = {"name": name, "shape": list(data.shape), "dtype": dtype, "file": fname}
            if layer is not None:
                entry["layer"] = layer
            table.append(entry)
        manifest = dict(header)
        manifest["tensors"] = table
        (path / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint to {path}: {exc}") from exc


def read_tensor_dir(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    mpath = path / MANIFEST
    if not mpath.is_file():
        raise CheckpointError(f"missing {MANIFEST} in {path}")
    try:
        manifest = json.loads(mpath.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest {mpath}: {exc}") from exc
    out = {}
    for entry in manifest.get("tensors", []):
        name = entry["name"]
        dtype = _DTYPES.get(entry.get("dtype"))
        if dtype is None:
            raise CheckpointError(f"tensor {name}: unsupported dtype {entry.get('dtype')!r}")
        shape = tuple(int(s) for s in entry["shape"])
        fpath = path / entry["file"]
        if not fpath.is_file():
            raise CheckpointError(f"tensor {name}: missing file {entry['file']}")
        raw = fpath.read_bytes()
        expected = math.prod(shape) * dtype.itemsize
        if len(raw) != expected:
            raise CheckpointError(
                f"shape mismatch for tensor {name}: declared shape {list(shape)} needs "
                f"{expected} bytes, file {entry['file']} has {len(raw)}"
            )
        arr = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"non-finite value in tensor {name}")
        out[name] = arr
    return manifest, out


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(config: ModelConfig, weights: list[DecoderWeights], path, dtype: str = "f64") -> None:
    """Write a model checkpoint. ``dtype="f32"`` is a lossy export."""
    if len(weights) != config.n_layers:
        raise CheckpointError(f"config declares {config.n_layers} layers, got {len(weights)}")
    for l, w in enumerate(weights):
        w.validate(config, l)
    compressed = any(isinstance(w, CompressedDecoderWeights) for w in weights)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": config.to_dict(),
        "compressed": compressed,
    }
    if compressed:
        header["layers"] = [_layer_meta(config, w) for w in weights]
    tensors = [
        (f"layers.{l}.{name}", l, arr)
        for l, w in enumerate(weights)
        for name, arr in w.tensors().items()
    ]
    write_tensor_dir(path, header, tensors, dtype=dtype)


def _layer_meta(config: ModelConfig, w: DecoderWeights) -> dict:
    if isinstance(w, CompressedDecoderWeights):
        return w.metadata()
    return {"retained_rank": config.d_head, "retained_mlp": config.d_int, "qk_rank": None, "mlp_indices": None}


def load_checkpoint(path) -> tuple[ModelConfig, list[DecoderWeights]]:
    manifest, tensors = read_tensor_dir(path)
    if manifest.get("format") != FORMAT_NAME:
        raise CheckpointError(f"{path} is not a {FORMAT_NAME} directory")
    try:
        config = ModelConfig.from_dict(manifest["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid config in manifest: {exc}") from exc
    metas = manifest.get("layers") if manifest.get("compressed") else None
    if metas is not None and len(metas) != config.n_layers:
        raise CheckpointError(f"manifest lists {len(metas)} layer records for {config.n_layers} layers")
    weights = []
    for l in range(config.n_layers):
        prefix = f"layers.{l}."
        own = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        missing = [n for n in _MATRICES + _VECTORS if n not in own]
        if missing:
            raise CheckpointError(f"missing tensor {missing[0]} in layer {l}")
        base = {n: own.pop(n) for n in _MATRICES + _VECTORS}
        base["q_basis"] = own.pop("q_basis", None)
        base["k_basis"] = own.pop("k_basis", None)
        if own:
            raise CheckpointError(f"unexpected tensors in layer {l}: {sorted(own)}")
        if metas is None:
            w = DecoderWeights(**base)
        else:
            meta = metas[l]
            idx = meta.get("mlp_indices")
            w = CompressedDecoderWeights(
                **base,
                retained_rank=int(meta["retained_rank"]),
                retained_mlp=int(meta["retained_mlp"]),
                qk_rank=None if meta.get("qk_rank") is None else int(meta["qk_rank"]),
                mlp_indices=None if idx is None else np.asarray(idx, dtype=np.int64),
            )
        w.validate(config, l)
        weights.append(w)
    return config, weights

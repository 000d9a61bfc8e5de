"""Dual-stage transformer encoder for fault type / location classification.

Stage 1 (:class:`FeatureExtractor`) embeds the 2-channel phasor sequence and
runs a shallow encoder; stage 2 (:class:`FaultXformer`) re-applies positional
encoding to the stage-1 sequence, runs a deeper encoder, averages over time and
maps to class logits.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .numerics import ops
from .numerics.tensor import DTYPE, ShapeError, Tensor

TASKS = ("type", "location")
N_FEATURES = 2
SEQ_LEN = 100


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int
    n_heads: int
    d_ff: int
    n_layers: int
    max_len: int = SEQ_LEN
    dropout_p: float = 0.1

    def __post_init__(self):
        if self.d_model < 2 or self.n_heads < 1 or self.d_ff < 1 or self.n_layers < 1:
            raise ValueError(f"non-positive encoder dimension in {self}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p={self.dropout_p} outside [0, 1)")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def attention_param_count(self) -> int:
        return 4 * self.d_model ** 2 + 4 * self.d_model

    def layer_param_count(self) -> int:
        d, f = self.d_model, self.d_ff
        return self.attention_param_count() + (d * f + f) + (f * d + d) + 4 * d


# Stage configurations per task: (stage 1, stage 2).
TASK_CONFIGS = {
    "type": (EncoderConfig(68, 4, 16, 2), EncoderConfig(68, 4, 64, 3)),
    "location": (EncoderConfig(90, 5, 16, 2), EncoderConfig(90, 5, 128, 3)),
}
N_CLASSES = {"type": 8, "location": 20}


def positional_encoding(max_len: int, d_model: int) -> np.ndarray:
    if d_model < 2:
        raise ValueError("d_model must be >= 2")
    pos = np.arange(max_len, dtype=DTYPE)[:, None]
    two_i = np.arange(0, d_model, 2, dtype=DTYPE)
    angle = pos / np.power(10000.0, two_i / d_model)
    pe = np.zeros((max_len, d_model), dtype=DTYPE)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe


def scaled_dot_product_attention(q, k, v, return_weights: bool = False):
    """softmax(q kᵀ / √d_k) v over the last two axes."""
    q, k, v = ops.as_tensor(q), ops.as_tensor(k), ops.as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    scores = ops.scale(ops.matmul(q, ops.swapaxes(k, -1, -2)), 1.0 / math.sqrt(q.shape[-1]))
    weights = ops.softmax(scores, axis=-1)
    out = ops.matmul(weights, v)
    return (out, weights) if return_weights else out


class Module:
    """Attribute-order parameter discovery; tensors with ``requires_grad`` are parameters."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, list):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        """Cast parameters and array buffers in place (e.g. to float32 for inference)."""
        for m in self.modules():
            for key, val in vars(m).items():
                if isinstance(val, Tensor):
                    val.data = val.data.astype(dtype)
                elif isinstance(val, np.ndarray) and val.dtype.kind == "f":
                    setattr(m, key, val.astype(dtype))
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"tensor {name!r}: expected {p.shape}, got {state[name].shape}")
            p.data[...] = state[name]


def _uniform(rng: np.random.Generator, shape, fan_in: int, name: str) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = _uniform(rng, (n_in, n_out), n_in, "weight")
        self.bias = _uniform(rng, (n_out,), n_in, "bias")

    def __call__(self, x):
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.weight = Tensor(np.ones(d, dtype=DTYPE), requires_grad=True, name="weight")
        self.bias = Tensor(np.zeros(d, dtype=DTYPE), requires_grad=True, name="bias")
        self.eps = eps

    def __call__(self, x):
        return ops.layer_norm(x, self.weight, self.bias, self.eps)


class MultiHeadAttention(Module):
    """Self-attention with a fused input projection (d → 3d) and an output projection."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.d_model, self.n_heads = d_model, n_heads
        self.in_proj_weight = _uniform(rng, (d_model, 3 * d_model), d_model, "in_proj_weight")
        self.in_proj_bias = _uniform(rng, (3 * d_model,), d_model, "in_proj_bias")
        self.out_proj = Linear(d_model, d_model, rng)
        self.capture = False
        self.last_weights: np.ndarray | None = None

    def __call__(self, x):
        qkv = ops.linear(x, self.in_proj_weight, self.in_proj_bias)
        out, weights = ops.fused_self_attention(qkv, self.n_heads, return_weights=True)
        if self.capture:
            self.last_weights = weights.copy()
        return self.out_proj(out)

    def reference(self, x):
        """Unfused path through :func:`scaled_dot_product_attention`, for cross-checks."""
        b, n, d = x.shape
        w, bias = self.in_proj_weight, self.in_proj_bias

        def heads(i):
            t = ops.linear(x, w[:, i * d:(i + 1) * d], bias[i * d:(i + 1) * d])
            return ops.transpose(ops.reshape(t, (b, n, self.n_heads, -1)), (0, 2, 1, 3))

        out = scaled_dot_product_attention(heads(0), heads(1), heads(2))
        out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (b, n, d))
        return self.out_proj(out)


class EncoderLayer(Module):
    """Post-norm encoder block: LN(x + MHA(x)) then LN(y + FFN(y))."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.linear1 = Linear(cfg.d_model, cfg.d_ff, rng)
        self.linear2 = Linear(cfg.d_ff, cfg.d_model, rng)
        self.norm1 = LayerNorm(cfg.d_model)
        self.norm2 = LayerNorm(cfg.d_model)
        self.dropout_p = cfg.dropout_p

    def __call__(self, x, rng: np.random.Generator | None = None):
        p, train = self.dropout_p, self.training
        y = self.norm1(x + ops.dropout(self.self_attn(x), p, train, rng))
        h = ops.dropout(ops.relu(self.linear1(y)), p, train, rng)
        return self.norm2(y + ops.dropout(self.linear2(h), p, train, rng))


class _EncoderStack(Module):
    def _init_stack(self, cfg: EncoderConfig, rng: np.random.Generator, use_pe: bool):
        self.config = cfg
        self.use_pe = use_pe
        self.pe = positional_encoding(cfg.max_len, cfg.d_model)
        self.layers = [EncoderLayer(cfg, rng) for _ in range(cfg.n_layers)]

    def _encode(self, h: Tensor, rng) -> Tensor:
        if self.use_pe:
            h = h + self.pe[: h.shape[1]]
        for layer in self.layers:
            h = layer(h, rng)
        return h

    def capture_attention(self, on: bool = True) -> None:
        """Record softmax weights of the final layer on each forward."""
        for layer in self.layers:
            layer.self_attn.capture = False
            layer.self_attn.last_weights = None
        self.layers[-1].self_attn.capture = on

    @property
    def last_attention(self) -> np.ndarray | None:
        return self.layers[-1].self_attn.last_weights


class FeatureExtractor(_EncoderStack):
    """Stage 1: input embedding 2 → d_model, positional encoding, encoder layers.

    ``head`` is the temporary pooled classifier used only to train this stage.
    """

    stage = "extractor"

    def __init__(self, cfg: EncoderConfig, n_classes: int, task: str = "type", seed: int = 0,
                 use_pe: bool = True):
        rng = np.random.default_rng(seed)
        self.task = task
        self.n_classes = n_classes
        self.embed = Linear(N_FEATURES, cfg.d_model, rng)
        self._init_stack(cfg, rng, use_pe)
        self.head = Linear(cfg.d_model, n_classes, rng)

    def __call__(self, x, rng=None) -> Tensor:
        x = ops.as_tensor(x)
        if x.ndim != 3 or x.shape[-1] != N_FEATURES:
            raise ShapeError(f"stage 1 expects [B, L, {N_FEATURES}] input, got {x.shape}")
        return self._encode(self.embed(x), rng)

    def logits(self, x, rng=None) -> Tensor:
        return self.head(ops.mean(self(x, rng), axis=1))


class FaultXformer(_EncoderStack):
    """Stage 2: positional encoding, encoder layers, global average pooling, linear head."""

    stage = "classifier"

    def __init__(self, cfg: EncoderConfig, n_classes: int, task: str = "type", seed: int = 0,
                 use_pe: bool = True):
        rng = np.random.default_rng(seed)
        self.task = task
        self.n_classes = n_classes
        self._init_stack(cfg, rng, use_pe)
        self.head = Linear(cfg.d_model, n_classes, rng)

    def __call__(self, encoded, rng=None) -> Tensor:
        encoded = ops.as_tensor(encoded)
        if encoded.ndim != 3 or encoded.shape[-1] != self.config.d_model:
            raise ShapeError(f"stage 2 expects [B, L, {self.config.d_model}] encodings, "
                             f"got {encoded.shape}")
        return self.head(ops.mean(self._encode(encoded, rng), axis=1))

    logits = __call__


@dataclass
class DualStageModel:
    """Frozen extractor feeding a stage-2 classifier; the end-to-end inference path."""

    extractor: FeatureExtractor
    classifier: FaultXformer

    def __post_init__(self):
        if self.extractor.config.d_model != self.classifier.config.d_model:
            raise ShapeError("stage 1 and stage 2 d_model differ")

    def logits(self, x) -> np.ndarray:
        from .numerics.tensor import no_grad
        self.extractor.eval()
        self.classifier.eval()
        with no_grad():
            return self.classifier(self.extractor(x)).data

    def predict(self, x) -> np.ndarray:
        return self.logits(x).argmax(axis=1)


def count_parameters(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


def build_stages(task: str, n_classes: int | None = None, seed: int = 0, dropout_p: float = 0.1,
                 stage1: EncoderConfig | None = None, stage2: EncoderConfig | None = None):
    """Construct (extractor, classifier) for ``task`` with the default per-task shapes."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    c1, c2 = TASK_CONFIGS[task]
    c1 = replace(stage1 or c1, dropout_p=dropout_p)
    c2 = replace(stage2 or c2, dropout_p=dropout_p)
    n = N_CLASSES[task] if n_classes is None else n_classes
    return (FeatureExtractor(c1, n, task, seed=seed),
            FaultXformer(c2, n, task, seed=seed + 1))


# --- checkpoints -------------------------------------------------------------

MAGIC = b"FXF1"
VERSION_F32 = 1
VERSION_F64 = 2


class CheckpointError(ValueError):
    pass


class MagicMismatch(CheckpointError):
    pass


class TensorCountMismatch(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError, ShapeError):
    pass


def save_checkpoint(model: _EncoderStack, path, precision: str = "f32") -> Path:
    """Write ``model`` in the FXF1 binary layout (little-endian throughout).

    ``precision="f32"`` (format version 1) is the interchange default; ``"f64"``
    (version 2) keeps float64 parameters bit-exact.
    """
    if precision not in ("f32", "f64"):
        raise ValueError(f"precision must be 'f32' or 'f64', got {precision!r}")
    version, fmt = (VERSION_F32, "<f4") if precision == "f32" else (VERSION_F64, "<f8")
    cfg = model.config
    params = list(model.named_parameters())
    chunks = [MAGIC, struct.pack("<I", version),
              struct.pack("<7I", TASKS.index(model.task), cfg.d_model, cfg.n_heads, cfg.n_layers,
                          cfg.d_ff, model.n_classes, cfg.max_len),
              struct.pack("<I", len(params))]
    for name, p in params:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype=fmt).tobytes())
    path = Path(path)
    path.write_bytes(b"".join(chunks))
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], int]:
    """Parse a checkpoint into (config dict, name → array, format version)."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise MagicMismatch(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version not in (VERSION_F32, VERSION_F64):
        raise CheckpointError(f"{path}: unsupported format version {version}")
    fmt = "<f4" if version == VERSION_F32 else "<f8"
    itemsize = 4 if version == VERSION_F32 else 8
    task, d_model, heads, layers, d_ff, n_classes, max_len = struct.unpack_from("<7I", buf, 8)
    if task >= len(TASKS):
        raise CheckpointError(f"{path}: unknown task code {task}")
    cfg = dict(task=TASKS[task], d_model=d_model, n_heads=heads, n_layers=layers, d_ff=d_ff,
               n_classes=n_classes, max_len=max_len)
    off = 8 + 28
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", buf, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(buf, dtype=fmt, count=n, offset=off).astype(DTYPE).reshape(dims)
        off += n * itemsize
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return cfg, tensors, version


def load_checkpoint(path, model: _EncoderStack | None = None):
    """Load a checkpoint, either into ``model`` (validated) or into a freshly built one."""
    cfg, tensors, _ = read_checkpoint(path)
    if model is None:
        enc = EncoderConfig(cfg["d_model"], cfg["n_heads"], cfg["d_ff"], cfg["n_layers"],
                            cfg["max_len"], dropout_p=0.0)
        cls = FeatureExtractor if "embed.weight" in tensors else FaultXformer
        model = cls(enc, cfg["n_classes"], cfg["task"])
    params = list(model.named_parameters())
    if len(params) != len(tensors):
        raise TensorCountMismatch(f"{path}: checkpoint has {len(tensors)} tensors, "
                                  f"model expects {len(params)}")
    for name, p in params:
        if name not in tensors:
            raise CheckpointError(f"{path}: tensor {name!r} missing")
        if tensors[name].shape != p.shape:
            raise CheckpointShapeError(f"{path}: tensor {name!r} has shape {tensors[name].shape}, "
                                       f"model expects {p.shape}")
    for name, p in params:
        p.data[...] = tensors[name]
    return model

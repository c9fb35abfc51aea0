"""Neural building blocks over the autograd engine: parameter store,
masked primitives (linear, temporal conv, multi-head attention, layer norm,
temporal max pool), a central finite-difference gradient checker, and the
binary checkpoint format.

All primitives are masking-aware: padded time steps never influence outputs
at real positions, and outputs at padded positions are forced to zero.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autograd import (
    Tensor,
    concat,
    max_over_axis,
    relu,
    sigmoid,
    softmax_last,
    where_mask,
)

CHECKPOINT_MAGIC = b"SFNC"
CHECKPOINT_VERSION = 1
NEG_BIG = -1e9  # additive mask for attention logits


class ParamStore:
    """Named parameters: hierarchical path -> Tensor with gradient buffer.

    Shapes are fixed at creation; modules keep names and fetch tensors at
    call time, so the store can be retyped to float64 for gradient checks.
    """

    def __init__(self):
        self._params = {}

    def create(self, name: str, shape: tuple, rng: np.random.Generator, init: str = "fan_in", fan_in: int | None = None) -> str:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if init == "fan_in":
            if fan_in is None:
                fan_in = int(shape[0]) if len(shape) else 1
            bound = 1.0 / np.sqrt(max(fan_in, 1))
            data = rng.uniform(-bound, bound, size=shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "zeros":
            data = np.zeros(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        self._params[name] = Tensor(data.astype(np.float32), requires_grad=True)
        return name

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def num_params(self, prefix: str = "") -> int:
        return sum(t.data.size for n, t in self._params.items() if n.startswith(prefix))

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def astype(self, dtype):
        for t in self._params.values():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self

    def state(self) -> dict:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state(self, state: dict):
        for name, t in self._params.items():
            if name not in state:
                raise KeyError(f"missing parameter {name!r} in state")
            arr = np.asarray(state[name])
            if arr.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name!r}: {arr.shape} vs {t.data.shape}")
            t.data = arr.astype(t.data.dtype)
            t.grad = None


# ---------------------------------------------------------------------------
# Masked primitives
# ---------------------------------------------------------------------------


def apply_mask(x: Tensor, mask: np.ndarray) -> Tensor:
    """Zero out padded rows of a (T x d) tensor."""
    return x * np.asarray(mask, dtype=x.dtype)[:, None]


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear shape mismatch: input {x.shape} vs weight {w.shape}")
    out = x @ w
    return out + b if b is not None else out


def conv1d_temporal(x: Tensor, weight: Tensor, bias: Tensor | None, mask: np.ndarray) -> Tensor:
    """Temporal convolution with same-length zero padding.

    x: (T x d_in), weight: (k x d_in x d_out).  Padded rows are zeroed on
    input and output, matching the zero-padding discipline at the edges.
    """
    k, d_in, d_out = weight.shape
    if x.shape[1] != d_in:
        raise ValueError(f"conv1d shape mismatch: input {x.shape} vs weight {tuple(weight.shape)}")
    t_len = x.shape[0]
    half = k // 2
    x = apply_mask(x, mask)
    pad = Tensor(np.zeros((half, d_in), dtype=x.dtype))
    padded = concat([pad, x, pad], axis=0)
    windows = concat([padded[off : off + t_len] for off in range(k)], axis=1)  # (T, k*d_in)
    out = windows @ weight.reshape(k * d_in, d_out)
    if bias is not None:
        out = out + bias
    return apply_mask(out, mask)


def multi_head_self_attention(
    x: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    mask: np.ndarray,
    heads: int,
) -> Tensor:
    """Scaled dot-product self-attention with additive masking at padded keys."""
    t_len, d = x.shape
    if d % heads != 0:
        raise ValueError(f"model width {d} not divisible by heads {heads}")
    if wq.shape[0] != d:
        raise ValueError(f"attention shape mismatch: input {x.shape} vs wq {tuple(wq.shape)}")
    d_head = d // heads

    def split(t):  # (T, d) -> (h, T, d_head)
        return t.reshape(t_len, heads, d_head).transpose(1, 0, 2)

    q, k, v = split(x @ wq), split(x @ wk), split(x @ wv)
    scores = (q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(d_head))  # (h, T, T)
    keep = np.broadcast_to(np.asarray(mask, bool)[None, None, :], scores.shape)
    att = softmax_last(where_mask(keep, scores, NEG_BIG))
    mixed = (att @ v).transpose(1, 0, 2).reshape(t_len, d)
    return apply_mask(mixed @ wo, mask)


def attention_similarity(x: Tensor, wq: Tensor, wk: Tensor, mask: np.ndarray, heads: int) -> Tensor:
    """Per-head attention similarity matrices, stacked as (T x T*h) rows."""
    t_len, d = x.shape
    d_head = d // heads

    def split(t):
        return t.reshape(t_len, heads, d_head).transpose(1, 0, 2)

    q, k = split(x @ wq), split(x @ wk)
    scores = (q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(d_head))
    keep = np.broadcast_to(np.asarray(mask, bool)[None, None, :], scores.shape)
    sim = softmax_last(where_mask(keep, scores, NEG_BIG))  # (h, T, T)
    stacked = sim.transpose(1, 0, 2).reshape(t_len, heads * t_len)
    return apply_mask(stacked, mask)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, mask: np.ndarray, eps: float = 1e-5) -> Tensor:
    """Per-frame normalization over the feature axis; padded rows stay zero."""
    if x.shape[-1] != gamma.shape[0]:
        raise ValueError(f"layer_norm shape mismatch: input {x.shape} vs gamma {tuple(gamma.shape)}")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    normed = centered * ((var + eps) ** -0.5)
    return apply_mask(normed * gamma + beta, mask)


def max_pool_time(x: Tensor, mask: np.ndarray) -> Tensor:
    """Element-wise max over non-masked time steps of a (T x d) tensor."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty view")
    keep = np.broadcast_to(mask[:, None], x.shape)
    return max_over_axis(where_mask(keep, x, NEG_BIG), axis=0)


def mse_masked(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean squared error over non-masked positions."""
    mask = np.asarray(mask, dtype=bool)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ValueError(f"mse shape mismatch: pred {pred.shape} vs target {target.shape} vs mask {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("empty view")
    diff = where_mask(mask, pred - Tensor(target), 0.0)
    return (diff * diff).sum() / float(n)


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    per_param: dict
    tolerance: float
    failure: str | None = None

    @property
    def max_error(self) -> float:
        return max(self.per_param.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.failure is None and self.max_error < self.tolerance


def grad_check(loss_fn, store: ParamStore, tolerance: float = 1e-4, eps: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    loss_fn must deterministically map the store's current parameters to a
    scalar loss Tensor.  The store is retyped to float64 for the check.
    """
    store.astype(np.float64)
    store.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        return GradCheckReport(per_param={}, tolerance=tolerance, failure="non-finite")
    loss.backward()
    analytic = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for n, t in store.items()}

    per_param = {}
    for name, t in store.items():
        flat = t.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(loss_fn().data)
            flat[i] = orig - eps
            lo = float(loss_fn().data)
            flat[i] = orig
            numeric[i] = (hi - lo) / (2 * eps)
        a = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-6)
        per_param[name] = float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0
    return GradCheckReport(per_param=per_param, tolerance=tolerance)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, store: ParamStore, config_digest: str = "") -> None:
    """Container: magic 'SFNC', u32 version, digest string, then one record
    (path, rank, dims, float32 little-endian payload) per parameter."""
    digest = config_digest.encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(digest)))
        f.write(digest)
        items = sorted(store.items())
        f.write(struct.pack("<I", len(items)))
        for name, tensor in items:
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", tensor.data.ndim))
            for dim in tensor.data.shape:
                f.write(struct.pack("<I", dim))
            f.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple:
    """Returns (config_digest, {path: float32 array})."""
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic in {path}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (dlen,) = struct.unpack("<I", f.read(4))
        digest = f.read(dlen).decode("utf-8")
        (count,) = struct.unpack("<I", f.read(4))
        state = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            size = int(np.prod(dims)) if dims else 1
            payload = np.frombuffer(f.read(4 * size), dtype="<f4")
            state[name] = payload.reshape(dims).astype(np.float32)
    return digest, state

"""Differentiable building blocks, optimiser, LR schedule and checkpoint I/O.

Everything runs in float64 on CPU. Torch supplies autograd and the primitive
kernels; the layer semantics (padding masks, GLU split order, smoothing
target, clipping, bias-corrected Adam) are spelled out here.

Checkpoint file layout (little-endian)::

    magic   4 bytes  b"VQCK"
    version u16
    step    u64
    count   u32
    count x (u16 name length, UTF-8 name, u8 ndim, ndim x u32 dims)
    float64 payload of every tensor, in manifest order
"""

from __future__ import annotations

import math
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import (CorruptHeader, IndivisibleHeads, InvalidTarget, NonFiniteGradient,
                     OddChannels, ShapeMismatch)

DTYPE = torch.float64


def conv_out_length(length, kernel_size: int = 5, stride: int = 2, padding: int = 2):
    """Output length of a padded strided 1-d convolution; works on ints and tensors."""
    return (length + 2 * padding - kernel_size) // stride + 1


def conv1d_forward(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
                   stride: int = 2, padding: int = 2) -> torch.Tensor:
    """Zero-padded strided correlation over time.

    ``x`` is ``(T, C_in)`` or ``(B, T, C_in)``; ``weight`` is ``(C_out, C_in, k)``.
    """
    if x.dim() not in (2, 3):
        raise ShapeMismatch(f"expected (T, C) or (B, T, C) input, got {tuple(x.shape)}")
    if x.shape[-1] != weight.shape[1]:
        raise ShapeMismatch(f"input has {x.shape[-1]} channels, weight expects {weight.shape[1]}")
    batched = x.dim() == 3
    xb = x if batched else x.unsqueeze(0)
    y = F.conv1d(xb.transpose(1, 2), weight, bias, stride=stride, padding=padding).transpose(1, 2)
    return y if batched else y.squeeze(0)


def glu(x: torch.Tensor) -> torch.Tensor:
    """Gated linear unit over the last axis: first half gated by sigmoid of second half."""
    if x.shape[-1] % 2:
        raise OddChannels(f"GLU needs an even channel count, got {x.shape[-1]}")
    a, b = x.chunk(2, dim=-1)
    return a * torch.sigmoid(b)


def init_uniform_fan_in(weight: torch.Tensor, fan_in: int) -> None:
    k = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        weight.uniform_(-k, k)


class Conv1d(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 5,
                 stride: int = 2, padding: int = 2):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, kernel_size, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(out_channels, dtype=DTYPE))
        init_uniform_fan_in(self.weight, in_channels * kernel_size)

    def out_length(self, length):
        return conv_out_length(length, self.kernel_size, self.stride, self.padding)

    def forward(self, x):
        return conv1d_forward(x, self.weight, self.bias, self.stride, self.padding)


class Linear(nn.Linear):
    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__(in_features, out_features, bias=bias, dtype=DTYPE)

    def reset_parameters(self):
        init_uniform_fan_in(self.weight, self.in_features)
        if self.bias is not None:
            nn.init.zeros_(self.bias)


def layer_norm(dim: int) -> nn.LayerNorm:
    return nn.LayerNorm(dim, dtype=DTYPE)


def causal_mask(size: int) -> torch.Tensor:
    """Boolean mask, True where position i may NOT attend to j (j > i)."""
    return torch.triu(torch.ones(size, size, dtype=torch.bool), diagonal=1)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int,
              mask: torch.Tensor | None = None, return_weights: bool = False):
    """Multi-head scaled dot-product attention without projections.

    ``q`` is ``(..., Tq, E)``, ``k``/``v`` are ``(..., Tk, E)``. ``mask`` is a
    boolean tensor broadcastable to ``(..., heads, Tq, Tk)`` with True marking
    disallowed positions.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
        raise ShapeMismatch(f"q {tuple(q.shape)}, k {tuple(k.shape)}, v {tuple(v.shape)}")
    embed = q.shape[-1]
    if embed % heads:
        raise IndivisibleHeads(f"embedding {embed} not divisible by {heads} heads")
    d = embed // heads

    def split(t):
        return t.reshape(*t.shape[:-1], heads, d).transpose(-3, -2)

    qh, kh, vh = split(q), split(k), split(v)
    scores = qh @ kh.transpose(-1, -2) / math.sqrt(d)
    if mask is not None:
        scores = scores.masked_fill(mask, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    out = (weights @ vh).transpose(-3, -2)
    out = out.reshape(*out.shape[:-2], embed)
    return (out, weights) if return_weights else out


class MultiheadAttention(nn.Module):
    def __init__(self, embed_dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if embed_dim % heads:
            raise IndivisibleHeads(f"embedding {embed_dim} not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = Linear(embed_dim, embed_dim)
        self.k_proj = Linear(embed_dim, embed_dim)
        self.v_proj = Linear(embed_dim, embed_dim)
        self.out_proj = Linear(embed_dim, embed_dim)
        self.dropout = dropout

    def forward(self, query, key, value, key_padding_mask=None, causal: bool = False):
        """``key_padding_mask`` is ``(B, Tk)`` with True at padded keys."""
        mask = None
        if key_padding_mask is not None:
            mask = key_padding_mask[:, None, None, :]
        if causal:
            c = causal_mask(query.shape[-2])
            mask = c if mask is None else (mask | c)
        out = attention(self.q_proj(query), self.k_proj(key), self.v_proj(value), self.heads, mask)
        out = F.dropout(out, self.dropout, self.training)
        return self.out_proj(out)


def multihead_attention(q, k, v, heads: int, mask=None, params: MultiheadAttention | None = None):
    """Functional entry point: projected attention if ``params`` is given, raw otherwise."""
    if params is None:
        return attention(q, k, v, heads, mask)
    qp, kp, vp = params.q_proj(q), params.k_proj(k), params.v_proj(v)
    return params.out_proj(attention(qp, kp, vp, heads, mask))


def sinusoidal_pe(length: int, embed: int) -> torch.Tensor:
    """PE[t, 2i] = sin(t / 10000^(2i/E)), PE[t, 2i+1] = cos(t / 10000^(2i/E))."""
    if embed % 2:
        raise ShapeMismatch("positional encoding needs an even embedding size")
    pos = torch.arange(length, dtype=DTYPE)[:, None]
    freq = torch.pow(10000.0, -torch.arange(0, embed, 2, dtype=DTYPE) / embed)
    pe = torch.empty(length, embed, dtype=DTYPE)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)
    return pe


def label_smoothed_ce(logits: torch.Tensor, targets: torch.Tensor, smoothing: float = 0.1,
                      pad_id: int | None = None):
    """Mean label-smoothed cross entropy over non-pad positions.

    Target distribution is ``(1 - s) * onehot + s / V``. Returns
    ``(loss, grad)`` where ``grad`` is the closed-form gradient with respect to
    ``logits`` (``(p - q) / n_tokens`` at real positions, 0 at pads); ``loss``
    stays attached to the autograd graph.
    """
    vocab = logits.shape[-1]
    flat = logits.reshape(-1, vocab)
    tgt = targets.reshape(-1)
    keep = torch.ones_like(tgt, dtype=torch.bool) if pad_id is None else tgt != pad_id
    if torch.any((tgt[keep] < 0) | (tgt[keep] >= vocab)):
        raise InvalidTarget(f"target ids must lie in [0, {vocab})")
    n = int(keep.sum())
    if n == 0:
        return flat.sum() * 0.0, torch.zeros_like(logits)
    safe = torch.where(keep, tgt, torch.zeros_like(tgt))
    q = torch.full_like(flat, smoothing / vocab)
    q.scatter_add_(1, safe[:, None], torch.full((len(safe), 1), 1.0 - smoothing, dtype=flat.dtype))
    logp = torch.log_softmax(flat, dim=-1)
    per_pos = -(q * logp).sum(dim=-1)
    loss = per_pos[keep].sum() / n
    with torch.no_grad():
        grad = (logp.exp() - q) / n
        grad[~keep] = 0.0
    return loss, grad.reshape(logits.shape)


def lr_schedule(step: int, peak: float = 0.002, warmup: int = 10000) -> float:
    """Linear warmup to ``peak`` then inverse square-root decay."""
    if step < 1:
        raise ValueError("step counts from 1")
    return peak * min(step / warmup, math.sqrt(warmup / step))


@dataclass
class OptimizerState:
    step: int = 0
    lr_peak: float = 0.002
    warmup_steps: int = 10000
    clip_norm: float = 10.0
    clip_mode: str = "norm"
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)

    def lr(self, step: int | None = None) -> float:
        return lr_schedule(self.step if step is None else step, self.lr_peak, self.warmup_steps)


def clip_gradients(grads: dict, threshold: float, mode: str = "norm") -> float:
    """Clip in place; returns the pre-clipping global L2 norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if mode == "norm":
        if total > threshold:
            scale = threshold / total
            for g in grads.values():
                g.mul_(scale)
    elif mode == "value":
        for g in grads.values():
            g.clamp_(-threshold, threshold)
    else:
        raise ValueError(f"unknown clip mode {mode!r}")
    return total


@torch.no_grad()
def adam_step(params: dict, grads: dict, state: OptimizerState) -> dict:
    """One clipped, bias-corrected Adam update applied in place to ``params``.

    Raises NonFiniteGradient (leaving parameters and state untouched) if any
    gradient is NaN or infinite.
    """
    if params.keys() != grads.keys():
        raise ShapeMismatch("params and grads must name the same tensors")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ShapeMismatch(f"{name}: grad {tuple(grads[name].shape)} vs param {tuple(p.shape)}")
        if not torch.isfinite(grads[name]).all():
            raise NonFiniteGradient(f"non-finite gradient in {name} at step {state.step + 1}")

    grads = {k: g.clone() for k, g in grads.items()}
    norm = clip_gradients(grads, state.clip_norm, state.clip_mode)
    state.step += 1
    lr = state.lr()
    bc1 = 1 - state.beta1 ** state.step
    bc2 = 1 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.exp_avg.setdefault(name, torch.zeros_like(p))
        v = state.exp_avg_sq.setdefault(name, torch.zeros_like(p))
        m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return {"lr": lr, "grad_norm": norm}


CKPT_MAGIC = b"VQCK"
CKPT_VERSION = 1


def save_checkpoint(path: str | os.PathLike, tensors: dict, step: int = 0) -> None:
    arrays = OrderedDict((k, np.asarray(v.detach().cpu() if torch.is_tensor(v) else v,
                                        dtype="<f8")) for k, v in tensors.items())
    parts = [CKPT_MAGIC, struct.pack("<HQI", CKPT_VERSION, step, len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    parts.extend(np.ascontiguousarray(arr).tobytes() for arr in arrays.values())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple["OrderedDict[str, np.ndarray]", int]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CKPT_MAGIC:
        raise CorruptHeader(f"{path}: not a checkpoint file")
    try:
        version, step, count = struct.unpack_from("<HQI", blob, 4)
        if version != CKPT_VERSION:
            raise CorruptHeader(f"{path}: unsupported checkpoint version {version}")
        pos = 18
        manifest = []
        for _ in range(count):
            (size,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + size].decode("utf-8")
            pos += size
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            manifest.append((name, shape))
    except struct.error as e:
        raise CorruptHeader(f"{path}: truncated manifest") from e
    out = OrderedDict()
    for name, shape in manifest:
        n = int(np.prod(shape, dtype=np.int64))
        if pos + 8 * n > len(blob):
            raise CorruptHeader(f"{path}: truncated payload at {name}")
        out[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    if pos != len(blob):
        raise CorruptHeader(f"{path}: {len(blob) - pos} trailing bytes")
    return out, step

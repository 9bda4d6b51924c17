"""Convolutional front-ends: plain (single block over N+M channels) and VQ (two blocks).

A block is two stride-2 convolutions, each followed by a GLU. The VQ variant
convolves spectral features in block A and pitch/voice-quality features in
block B, then concatenates the K + L channels so both variants hand the
encoder the same O-dimensional sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ShapeMismatch, TimeMismatch
from .tensor_core import Conv1d, conv_out_length, glu


@dataclass(frozen=True)
class FrontEndConfig:
    variant: str = "plain"
    N: int = 40
    M: int = 0
    p_A: int = 512
    p_B: int = 256
    K: int = 192
    L: int = 64
    O: int = 256
    kernel_size: int = 5
    stride: int = 2
    padding: int = 2

    def __post_init__(self):
        if self.variant not in ("plain", "vq"):
            raise ValueError(f"unknown front-end variant {self.variant!r}")
        if self.variant == "vq":
            if self.M < 1:
                raise ValueError("the vq front-end needs at least one prosodic channel (M >= 1)")
            if self.K + self.L != self.O:
                raise ValueError(f"K + L must equal O ({self.K} + {self.L} != {self.O})")

    @property
    def in_channels(self) -> int:
        return self.N + self.M

    @property
    def plain_hidden(self) -> int:
        # The plain block keeps the block-A hidden width.
        return self.p_A


@dataclass
class FrontEndOutput:
    features: torch.Tensor
    lengths: torch.Tensor
    frame_map: np.ndarray


def _lengths_mask(lengths: torch.Tensor, size: int) -> torch.Tensor:
    return torch.arange(size)[None, :] < lengths[:, None]


class ConvBlock(nn.Module):
    """conv(in -> 2*hidden) -> GLU -> conv(hidden -> 2*out) -> GLU.

    Frames beyond each sequence's length are zeroed before every convolution,
    so outputs inside the valid range never depend on padding content.
    """

    def __init__(self, in_channels: int, hidden: int, out_channels: int,
                 kernel_size: int = 5, stride: int = 2, padding: int = 2):
        super().__init__()
        self.conv1 = Conv1d(in_channels, 2 * hidden, kernel_size, stride, padding)
        self.conv2 = Conv1d(hidden, 2 * out_channels, kernel_size, stride, padding)

    def out_lengths(self, lengths):
        return self.conv2.out_length(self.conv1.out_length(lengths))

    def forward(self, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        x = x * _lengths_mask(lengths, x.shape[1])[..., None]
        x = glu(self.conv1(x))
        lengths = self.conv1.out_length(lengths)
        x = x * _lengths_mask(lengths, x.shape[1])[..., None]
        return glu(self.conv2(x))


def frame_map(n_out: int, n_in: int, cfg: FrontEndConfig) -> np.ndarray:
    """Input-frame span ``[start, end]`` seen by each output step (receptive field)."""
    k, s, p = cfg.kernel_size, cfg.stride, cfg.padding
    j = np.arange(n_out)
    mid_lo, mid_hi = s * j - p, s * j - p + k - 1
    lo, hi = s * mid_lo - p, s * mid_hi - p + k - 1
    return np.stack([np.clip(lo, 0, n_in - 1), np.clip(hi, 0, n_in - 1)], axis=1)


class PlainFrontEnd(nn.Module):
    def __init__(self, cfg: FrontEndConfig):
        super().__init__()
        self.cfg = cfg
        self.plain = ConvBlock(cfg.in_channels, cfg.plain_hidden, cfg.O,
                               cfg.kernel_size, cfg.stride, cfg.padding)

    def out_lengths(self, lengths):
        return self.plain.out_lengths(lengths)

    def forward(self, x: torch.Tensor, lengths: torch.Tensor | None = None) -> FrontEndOutput:
        x, lengths, squeeze = _batched(x, lengths)
        if x.shape[-1] != self.cfg.in_channels:
            raise ShapeMismatch(f"plain front-end expects {self.cfg.in_channels} channels "
                                f"(N+M), got {x.shape[-1]}")
        y = self.plain(x, lengths)
        return _output(y, self.out_lengths(lengths), x.shape[1], self.cfg, squeeze)


class VQFrontEnd(nn.Module):
    def __init__(self, cfg: FrontEndConfig):
        super().__init__()
        self.cfg = cfg
        self.A = ConvBlock(cfg.N, cfg.p_A, cfg.K, cfg.kernel_size, cfg.stride, cfg.padding)
        self.B = ConvBlock(cfg.M, cfg.p_B, cfg.L, cfg.kernel_size, cfg.stride, cfg.padding)

    def out_lengths(self, lengths):
        return self.A.out_lengths(lengths)

    def forward(self, spectral: torch.Tensor, prosody: torch.Tensor,
                lengths: torch.Tensor | None = None) -> FrontEndOutput:
        if spectral.dim() != prosody.dim():
            raise ShapeMismatch("spectral and prosody inputs must both be batched or unbatched")
        if spectral.shape[:-1] != prosody.shape[:-1]:
            raise TimeMismatch(f"spectral {tuple(spectral.shape)} and prosody "
                               f"{tuple(prosody.shape)} differ in time")
        spectral, lengths, squeeze = _batched(spectral, lengths)
        prosody, _, _ = _batched(prosody, lengths)
        if spectral.shape[-1] != self.cfg.N or prosody.shape[-1] != self.cfg.M:
            raise ShapeMismatch(f"expected N={self.cfg.N} spectral and M={self.cfg.M} prosodic "
                                f"channels, got {spectral.shape[-1]} and {prosody.shape[-1]}")
        y = torch.cat([self.A(spectral, lengths), self.B(prosody, lengths)], dim=-1)
        return _output(y, self.out_lengths(lengths), spectral.shape[1], self.cfg, squeeze)


def _batched(x, lengths):
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    if x.dim() != 3:
        raise ShapeMismatch(f"expected (T, C) or (B, T, C), got {tuple(x.shape)}")
    if lengths is None:
        lengths = torch.full((x.shape[0],), x.shape[1], dtype=torch.long)
    return x, torch.as_tensor(lengths, dtype=torch.long), squeeze


def _output(y, lengths, n_in, cfg, squeeze):
    fmap = frame_map(y.shape[1], n_in, cfg)
    if squeeze:
        y = y.squeeze(0)
    return FrontEndOutput(y, lengths, fmap)


def build_frontend(cfg: FrontEndConfig) -> nn.Module:
    return VQFrontEnd(cfg) if cfg.variant == "vq" else PlainFrontEnd(cfg)


def conv_params(c_in: int, c_out: int, kernel_size: int = 5) -> int:
    return c_in * c_out * kernel_size + c_out


def block_parameters(c_in: int, hidden: int, c_out: int, kernel_size: int = 5) -> int:
    return conv_params(c_in, 2 * hidden, kernel_size) + conv_params(hidden, 2 * c_out, kernel_size)


def frontend_parameters(cfg: FrontEndConfig) -> int:
    k = cfg.kernel_size
    if cfg.variant == "plain":
        return block_parameters(cfg.in_channels, cfg.plain_hidden, cfg.O, k)
    return block_parameters(cfg.N, cfg.p_A, cfg.K, k) + block_parameters(cfg.M, cfg.p_B, cfg.L, k)


def output_length(n_frames: int, cfg: FrontEndConfig) -> int:
    once = conv_out_length(n_frames, cfg.kernel_size, cfg.stride, cfg.padding)
    return conv_out_length(once, cfg.kernel_size, cfg.stride, cfg.padding)

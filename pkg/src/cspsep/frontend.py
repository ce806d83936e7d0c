"""Causal convolutional feature encoder, frame masking, and the causal context network.

Every component is strictly causal: conv blocks left-pad by (kernel - stride)
so frame t sees only samples <= (t+1)*hop - 1, normalization statistics are
frame-local, and self-attention is masked to the lower triangle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data_sim import Waveform

ROLE_LATENT = "latent"
ROLE_PATTERN = "pattern"
ROLE_TEACHER = "teacher"


@dataclass
class FrontendConfig:
    """Architecture hyper-parameters of the causal frontend."""

    conv_channels: int = 512
    conv_strides: tuple = (5, 2, 2, 2, 2, 2, 2)
    conv_kernels: tuple = (10, 3, 3, 3, 3, 2, 2)
    model_dim: int = 768
    inner_dim: int = 3072
    heads: int = 8
    layers: int = 12
    pos_kernel: int = 128
    pos_groups: int = 16
    norm_groups: int = 16
    dropout: float = 0.1
    layerdrop: float = 0.05
    mask_ratio: float = 0.65
    mask_span: int = 10

    def __post_init__(self):
        self.conv_strides = tuple(int(s) for s in self.conv_strides)
        self.conv_kernels = tuple(int(k) for k in self.conv_kernels)
        if len(self.conv_strides) != len(self.conv_kernels):
            raise ValueError("conv_strides and conv_kernels must have equal length")
        for k, s in zip(self.conv_kernels, self.conv_strides):
            if k < s:
                raise ValueError(f"kernel {k} < stride {s}: causal left-padding undefined")
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if self.conv_channels % self.norm_groups:
            raise ValueError("conv_channels must be divisible by norm_groups")
        if not 0.0 < self.mask_ratio <= 1.0:
            raise ValueError(f"mask_ratio must be in (0, 1], got {self.mask_ratio}")
        if self.mask_span < 1:
            raise ValueError("mask_span must be >= 1")

    @property
    def hop(self) -> int:
        return math.prod(self.conv_strides)

    def frame_rate(self, sample_rate: int) -> float:
        return sample_rate / self.hop

    def num_frames(self, num_samples: int) -> int:
        n = num_samples
        for s in self.conv_strides:
            n = n // s
        return n


@dataclass
class FrameSequence:
    """T x D frame matrix at a fixed frame rate."""

    values: torch.Tensor
    frame_rate: float
    role: str = ROLE_LATENT

    def __post_init__(self):
        if not torch.is_tensor(self.values):
            self.values = torch.as_tensor(np.asarray(self.values))
        if self.values.ndim != 2:
            raise ValueError(f"frame sequence must be T x D, got shape {tuple(self.values.shape)}")
        if self.values.shape[0] < 1:
            raise ValueError("frame sequence needs at least one frame")
        if not torch.isfinite(self.values.detach()).all():
            raise ValueError("frame sequence contains non-finite values")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class MaskPlan:
    """Mask start indices plus the clipped union of their spans."""

    starts: tuple
    span: int
    masked: frozenset

    @classmethod
    def from_starts(cls, starts, span: int, total: int) -> "MaskPlan":
        masked = set()
        for s in starts:
            masked.update(range(s, min(s + span, total)))
        return cls(starts=tuple(sorted(int(s) for s in starts)), span=int(span), masked=frozenset(masked))


def sample_mask_plan(total: int, ratio: float, span: int, rng_seed: int) -> MaskPlan:
    """Draw round(ratio * total) distinct start indices and take the span union."""
    if total < 1:
        raise ValueError("total must be >= 1")
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    if span < 1:
        raise ValueError("span must be >= 1")
    n_starts = int(round(ratio * total))
    rng = np.random.default_rng(rng_seed)
    starts = rng.choice(total, size=n_starts, replace=False) if n_starts else np.empty(0, dtype=int)
    return MaskPlan.from_starts(starts, span, total)


def apply_mask(seq: FrameSequence, plan: MaskPlan, mask_vector: torch.Tensor) -> FrameSequence:
    """Replace masked frames by the shared mask vector; other frames pass through bit-identically."""
    total = len(seq)
    idx = sorted(plan.masked)
    if idx and (idx[0] < 0 or idx[-1] >= total):
        raise ValueError(f"mask indices out of range for {total} frames")
    values = seq.values.clone()
    if idx:
        values[idx] = mask_vector.to(values.dtype)
    return FrameSequence(values=values, frame_rate=seq.frame_rate, role=seq.role)


class FrameGroupNorm(nn.Module):
    """Group normalization with statistics computed per frame, never across time."""

    def __init__(self, groups: int, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # (B, C, T) -> stats over channel groups within each frame
        b, c, t = x.shape
        y = x.transpose(1, 2).reshape(b * t, c)
        y = self.norm(y)
        return y.reshape(b, t, c).transpose(1, 2)


class CausalConvBlock(nn.Module):
    """1-D conv left-padded by (kernel - stride) so out_len = floor(in_len / stride)."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int,
                 dropout: float, norm_groups: int | None = None):
        super().__init__()
        self.pad = kernel - stride
        self.conv = nn.Conv1d(in_ch, out_ch, kernel, stride=stride)
        nn.init.kaiming_normal_(self.conv.weight)  # keeps scale through the deep stack
        self.norm = FrameGroupNorm(norm_groups, out_ch) if norm_groups else None
        self.dropout = nn.Dropout(dropout)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = nn.functional.pad(x, (self.pad, 0))
        x = self.conv(x)
        if self.norm is not None:
            x = self.norm(x)
        return self.act(self.dropout(x))


class FeatureEncoder(nn.Module):
    """Pyramidal causal CNN mapping waveforms to latent frames at rate / hop."""

    def __init__(self, config: FrontendConfig):
        super().__init__()
        self.config = config
        blocks = []
        in_ch = 1
        for i, (k, s) in enumerate(zip(config.conv_kernels, config.conv_strides)):
            blocks.append(
                CausalConvBlock(
                    in_ch, config.conv_channels, k, s,
                    dropout=config.dropout,
                    norm_groups=config.norm_groups if i == 0 else None,
                )
            )
            in_ch = config.conv_channels
        self.blocks = nn.ModuleList(blocks)
        self.out_norm = nn.LayerNorm(config.conv_channels)  # frame-local

    def forward(self, wav: torch.Tensor) -> torch.Tensor:
        # wav: (B, L) -> (B, T, C)
        if wav.shape[-1] < self.config.hop:
            raise ValueError(
                f"input too short: need at least {self.config.hop} samples "
                f"(one hop), got {wav.shape[-1]}"
            )
        x = wav.unsqueeze(1)
        for block in self.blocks:
            x = block(x)
        return self.out_norm(x.transpose(1, 2))


class CausalPositionalConv(nn.Module):
    """Grouped causal conv positional embedding (left-padded, length preserving)."""

    def __init__(self, dim: int, kernel: int, groups: int):
        super().__init__()
        self.pad = kernel - 1
        self.conv = nn.Conv1d(dim, dim, kernel, groups=groups)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, T, D)
        y = nn.functional.pad(x.transpose(1, 2), (self.pad, 0))
        return self.act(self.conv(y)).transpose(1, 2)


class CausalSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        def split(v):
            return v.view(b, t, self.heads, self.head_dim).transpose(1, 2)
        q, k, v = split(self.q_proj(x)), split(self.k_proj(x)), split(self.v_proj(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        causal = torch.triu(torch.ones(t, t, dtype=torch.bool, device=x.device), diagonal=1)
        scores = scores.masked_fill(causal, float("-inf"))
        attn = self.dropout(torch.softmax(scores, dim=-1))
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.out_proj(out)


class DecoderLayer(nn.Module):
    """Self-attention-only transformer decoder block (post-norm, GELU feed-forward)."""

    def __init__(self, dim: int, inner: int, heads: int, dropout: float):
        super().__init__()
        self.attn = CausalSelfAttention(dim, heads, dropout)
        self.ln1 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, inner)
        self.fc2 = nn.Linear(inner, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.dropout = nn.Dropout(dropout)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.ln1(x + self.dropout(self.attn(x)))
        h = self.fc2(self.dropout(self.act(self.fc1(x))))
        return self.ln2(x + self.dropout(h))


class ContextNetwork(nn.Module):
    """Stack of causal decoder blocks producing predictive patterns from latents."""

    def __init__(self, config: FrontendConfig):
        super().__init__()
        self.config = config
        self.in_proj = nn.Linear(config.conv_channels, config.model_dim)
        self.pos = CausalPositionalConv(config.model_dim, config.pos_kernel, config.pos_groups)
        self.ln = nn.LayerNorm(config.model_dim)
        self.dropout = nn.Dropout(config.dropout)
        self.layers = nn.ModuleList(
            DecoderLayer(config.model_dim, config.inner_dim, config.heads, config.dropout)
            for _ in range(config.layers)
        )

    def forward(self, z: torch.Tensor, train_mode: bool = False,
                generator: torch.Generator | None = None) -> torch.Tensor:
        # z: (B, T, conv_channels) -> (B, T, model_dim)
        if z.shape[-1] != self.config.conv_channels:
            raise ValueError(
                f"expected input dim {self.config.conv_channels}, got {z.shape[-1]}"
            )
        x = self.in_proj(z)
        x = x + self.pos(x)
        x = self.dropout(self.ln(x))
        for layer in self.layers:
            if train_mode and self.config.layerdrop > 0:
                u = torch.rand((), generator=generator).item()
                if u < self.config.layerdrop:
                    continue
            x = layer(x)
        return x


class CspFrontend(nn.Module):
    """Causal frontend: feature encoder, learned mask vector, context network."""

    def __init__(self, config: FrontendConfig):
        super().__init__()
        self.config = config
        self.encoder = FeatureEncoder(config)
        self.context = ContextNetwork(config)
        self.mask_vector = nn.Parameter(torch.randn(config.conv_channels) * 0.1)

    def encode(self, waveform: Waveform) -> FrameSequence:
        dtype = self.mask_vector.dtype
        wav = torch.as_tensor(waveform.samples, dtype=dtype).unsqueeze(0)
        z = self.encoder(wav)[0]
        return FrameSequence(
            values=z,
            frame_rate=self.config.frame_rate(waveform.sample_rate),
            role=ROLE_LATENT,
        )

    def contextualize(self, seq: FrameSequence, train_mode: bool = False,
                      generator: torch.Generator | None = None) -> FrameSequence:
        c = self.context(seq.values.unsqueeze(0), train_mode=train_mode, generator=generator)[0]
        return FrameSequence(values=c, frame_rate=seq.frame_rate, role=ROLE_PATTERN)

    def patterns(self, waveform: Waveform) -> FrameSequence:
        """Unmasked inference path: waveform -> latent frames -> patterns."""
        return self.contextualize(self.encode(waveform))

    def pretrain_forward(self, batch: torch.Tensor, mask_seeds: list[int],
                         generator: torch.Generator | None = None):
        """Masked training pass over a (B, L) batch.

        Returns latent frames Z, patterns C from the masked latents, and the
        per-item mask plans.
        """
        z = self.encoder(batch)
        total = z.shape[1]
        plans = []
        masked = z.clone()
        for b, seed in enumerate(mask_seeds):
            plan = sample_mask_plan(total, self.config.mask_ratio, self.config.mask_span, seed)
            plans.append(plan)
            idx = sorted(plan.masked)
            if idx:
                masked[b, idx] = self.mask_vector.to(masked.dtype)
        c = self.context(masked, train_mode=self.training, generator=generator)
        return z, c, plans

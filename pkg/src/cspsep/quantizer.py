"""Product quantization with Gumbel-softmax selection and a usage-diversity loss."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .frontend import FrameSequence


@dataclass
class QuantizeResult:
    """Quantized tokens plus the selection statistics behind them."""

    tokens: FrameSequence
    indices: torch.Tensor  # (T, G) selected entry per group
    probs: torch.Tensor    # (G, R) softmax selection probabilities averaged over frames


class CodebookSet(nn.Module):
    """G codebooks of R entries; one entry per group is picked and concatenated.

    ``input_proj`` scores the R entries per group from the input frame,
    ``output_proj`` maps the concatenated codeword (dimension ``code_dim``)
    to the requested output dimension.
    """

    def __init__(self, in_dim: int, out_dim: int, groups: int = 2, entries: int = 320,
                 code_dim: int | None = None):
        super().__init__()
        code_dim = out_dim if code_dim is None else code_dim
        if code_dim % groups:
            raise ValueError(f"code_dim {code_dim} not divisible by {groups} groups")
        self.groups = groups
        self.entries = entries
        self.code_dim = code_dim
        self.out_dim = out_dim
        self.input_proj = nn.Linear(in_dim, groups * entries)
        nn.init.normal_(self.input_proj.weight, mean=0.0, std=1.0)
        nn.init.zeros_(self.input_proj.bias)
        self.vectors = nn.Parameter(torch.randn(groups, entries, code_dim // groups))
        # bias-free so distinct codeword combinations stay distinct directions
        self.output_proj = nn.Linear(code_dim, out_dim, bias=False)

    def quantize_values(self, values: torch.Tensor, temperature: float,
                        train_mode: bool, generator: torch.Generator | None = None):
        """Quantize a (T, D) tensor; returns (tokens (T, out_dim), indices, probs)."""
        if temperature <= 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        t = values.shape[0]
        logits = self.input_proj(values).view(t, self.groups, self.entries)
        probs = torch.softmax(logits, dim=-1).mean(dim=0)

        if train_mode:
            u = torch.rand(logits.shape, generator=generator, dtype=values.dtype)
            gumbel = -torch.log((-torch.log(u.clamp_min(1e-20))).clamp_min(1e-20))
            soft = torch.softmax((logits + gumbel) / temperature, dim=-1)
            indices = soft.argmax(dim=-1)
            hard = torch.zeros_like(soft).scatter_(-1, indices.unsqueeze(-1), 1.0)
            select = hard - soft.detach() + soft  # hard forward, soft backward
        else:
            indices = logits.argmax(dim=-1)
            select = torch.zeros_like(logits).scatter_(-1, indices.unsqueeze(-1), 1.0)

        # (T, G, R) x (G, R, d/G) -> (T, G, d/G)
        chosen = torch.einsum("tgr,grd->tgd", select, self.vectors.to(values.dtype))
        tokens = self.output_proj(chosen.reshape(t, self.code_dim))
        return tokens, indices, probs


def quantize(seq: FrameSequence, books: CodebookSet, temperature: float,
             train_mode: bool, generator: torch.Generator | None = None) -> QuantizeResult:
    """Quantize each frame of ``seq`` to a concatenated-codeword token."""
    tokens, indices, probs = books.quantize_values(seq.values, temperature, train_mode, generator)
    return QuantizeResult(
        tokens=FrameSequence(values=tokens, frame_rate=seq.frame_rate, role=seq.role),
        indices=indices,
        probs=probs,
    )


def diversity_loss(probs) -> torch.Tensor:
    """Entropy-based codebook usage penalty in [0, 1].

    0 when every group's averaged selection distribution is uniform, 1 when
    each collapses to a single entry.
    """
    p = probs if torch.is_tensor(probs) else torch.as_tensor(np.asarray(probs), dtype=torch.float64)
    if p.ndim == 1:
        p = p.unsqueeze(0)
    if (p.detach() < 0).any():
        raise ValueError("selection probabilities must be nonnegative")
    row_sums = p.detach().sum(dim=-1)
    if not torch.allclose(row_sums, torch.ones_like(row_sums), atol=1e-4):
        raise ValueError("each group's probabilities must sum to 1")
    entries = p.shape[-1]
    if entries < 2:
        raise ValueError("need at least 2 entries per group")
    plogp = torch.where(p > 0, p * torch.log(p.clamp_min(1e-300)), torch.zeros_like(p))
    entropy = -plogp.sum(dim=-1)
    return (1.0 - entropy / math.log(entries)).mean().clamp(0.0, 1.0)


def anneal_temperature(step: int, start: float = 2.0, floor: float = 0.5,
                       decay: float = 0.999995) -> float:
    """Exponentially decayed Gumbel temperature with a hard floor."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return max(floor, start * decay ** step)

"""Causal time-domain separator with frozen-frontend feature fusion and PIT.

The mixture encoder left-pads by (kernel - stride) so frame t depends only on
samples <= (t+1)*stride - 1; the decoder emits frame t at output samples
[t*stride, t*stride + kernel), which bounds algorithmic lookahead by one hop.
Pattern features are upsampled by nearest-past replication, so attaching the
frontend raises the lookahead to one frontend hop and nothing more.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data_sim import Waveform
from .frontend import CspFrontend, FrameSequence
from .trainer import Checkpoint, CsvLogger, TrainingError, _split_examples

MAX_PIT_SPEAKERS = 4
SI_SDR_CAP_DB = 60.0


@dataclass
class TcnConfig:
    """Temporal convolutional mask estimator sizes."""

    blocks: int = 8
    repeats: int = 3
    channels: int = 512
    kernel: int = 3
    bottleneck: int = 128


@dataclass
class SeparatorConfig:
    enc_kernel: int = 32
    enc_stride: int = 16
    enc_dim: int = 512
    tcn: TcnConfig = field(default_factory=TcnConfig)
    speakers: int = 2
    causal: bool = True

    def __post_init__(self):
        if self.enc_kernel < self.enc_stride:
            raise ValueError("enc_kernel must be >= enc_stride")
        if self.speakers < 2:
            raise ValueError("need at least 2 speakers")


class CumulativeLayerNorm(nn.Module):
    """Layer norm whose statistics run over channels and frames <= t only."""

    def __init__(self, channels: int, eps: float = 1e-8):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(1, channels, 1))
        self.bias = nn.Parameter(torch.zeros(1, channels, 1))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, C, T)
        b, c, t = x.shape
        step_sum = x.sum(dim=1)  # (B, T)
        step_sq = (x * x).sum(dim=1)
        counts = torch.arange(1, t + 1, device=x.device, dtype=x.dtype) * c
        mean = step_sum.cumsum(dim=1) / counts
        var = step_sq.cumsum(dim=1) / counts - mean * mean
        mean = mean.unsqueeze(1)
        std = (var.clamp_min(0.0) + self.eps).sqrt().unsqueeze(1)
        return (x - mean) / std * self.gain + self.bias


class GlobalLayerNorm(nn.Module):
    """Non-causal counterpart: statistics over channels and all frames."""

    def __init__(self, channels: int, eps: float = 1e-8):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(1, channels, 1))
        self.bias = nn.Parameter(torch.zeros(1, channels, 1))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mean = x.mean(dim=(1, 2), keepdim=True)
        var = ((x - mean) ** 2).mean(dim=(1, 2), keepdim=True)
        return (x - mean) / (var + self.eps).sqrt() * self.gain + self.bias


def _norm(channels: int, causal: bool) -> nn.Module:
    return CumulativeLayerNorm(channels) if causal else GlobalLayerNorm(channels)


def _fourier_init(weight: torch.Tensor, channels: int, kernel: int) -> None:
    """Windowed four-phase sinusoid atoms; a trainable filterbank that is
    frequency-selective from the first step instead of random noise.

    Phases come in (0, pi/2, pi, 3pi/2) quadruples so rectified coefficient
    pairs span signed amplitudes under the nonnegative encoder activation."""
    with torch.no_grad():
        n_freq = max(channels // 4, 1)
        i = torch.arange(kernel, dtype=torch.float32)
        window = torch.hann_window(kernel, periodic=False)
        for c in range(channels):
            freq = (c // 4 + 0.5) / n_freq * 0.5  # cycles per sample in (0, 0.5)
            phase = (c % 4) * math.pi / 2
            atom = window * torch.cos(2 * math.pi * freq * i + phase)
            weight.view(channels, kernel)[c] = atom / atom.norm()


class TcnBlock(nn.Module):
    """Dilated depthwise conv block with residual connection."""

    def __init__(self, bottleneck: int, channels: int, kernel: int, dilation: int, causal: bool):
        super().__init__()
        self.causal = causal
        self.dilation = dilation
        self.kernel = kernel
        self.expand = nn.Conv1d(bottleneck, channels, 1)
        self.act1 = nn.PReLU()
        self.norm1 = _norm(channels, causal)
        self.depthwise = nn.Conv1d(channels, channels, kernel, groups=channels, dilation=dilation)
        self.act2 = nn.PReLU()
        self.norm2 = _norm(channels, causal)
        self.project = nn.Conv1d(channels, bottleneck, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.norm1(self.act1(self.expand(x)))
        pad = (self.kernel - 1) * self.dilation
        if self.causal:
            y = nn.functional.pad(y, (pad, 0))
        else:
            y = nn.functional.pad(y, (pad // 2, pad - pad // 2))
        y = self.norm2(self.act2(self.depthwise(y)))
        return x + self.project(y)


class SeparatorModel(nn.Module):
    """Encoder, pattern adaptation, TCN mask estimator, and decoder."""

    def __init__(self, config: SeparatorConfig, pattern_dim: int | None = None,
                 pattern_hop: int | None = None):
        super().__init__()
        self.config = config
        self.pattern_dim = pattern_dim
        n, tcn = config.enc_dim, config.tcn
        self.encoder = nn.Conv1d(1, n, config.enc_kernel, stride=config.enc_stride, bias=False)
        self.enc_act = nn.ReLU()
        _fourier_init(self.encoder.weight, n, config.enc_kernel)
        if pattern_dim is not None:
            if pattern_hop is None or pattern_hop % config.enc_stride:
                raise ValueError("frontend hop must be a multiple of enc_stride")
            self.upsample = pattern_hop // config.enc_stride
            self.adapt_proj = nn.Linear(pattern_dim, n)
            # start as a pass-through so pattern fusion is phased in by training
            nn.init.zeros_(self.adapt_proj.weight)
            nn.init.zeros_(self.adapt_proj.bias)
        self.input_norm = _norm(n, config.causal)
        self.bottleneck = nn.Conv1d(n, tcn.bottleneck, 1)
        self.tcn = nn.ModuleList(
            TcnBlock(tcn.bottleneck, tcn.channels, tcn.kernel, 2 ** b, config.causal)
            for _ in range(tcn.repeats) for b in range(tcn.blocks)
        )
        self.mask_act = nn.PReLU()
        self.mask_conv = nn.Conv1d(tcn.bottleneck, config.speakers * n, 1)
        self.decoder = nn.ConvTranspose1d(n, 1, config.enc_kernel, stride=config.enc_stride,
                                          bias=False)
        _fourier_init(self.decoder.weight, n, config.enc_kernel)

    # ---- single-stage operations -------------------------------------------------

    def encode_mixture(self, wav: torch.Tensor) -> torch.Tensor:
        # (B, L) -> (B, N, T), frame t sees samples <= (t+1)*stride - 1
        if wav.shape[-1] < self.config.enc_kernel:
            raise ValueError(f"input shorter than encoder kernel ({self.config.enc_kernel})")
        pad = self.config.enc_kernel - self.config.enc_stride
        if self.config.causal:
            x = nn.functional.pad(wav.unsqueeze(1), (pad, 0))
        else:
            x = nn.functional.pad(wav.unsqueeze(1), (pad // 2, pad - pad // 2))
        return self.enc_act(self.encoder(x))

    def adapt_patterns(self, patterns: torch.Tensor, target_t: int) -> torch.Tensor:
        # (B, Tc, D) -> (B, N, target_t) by nearest-past replication then projection
        t_c = patterns.shape[1]
        if target_t < t_c:
            raise ValueError(f"target length {target_t} < pattern length {t_c}")
        idx = torch.div(torch.arange(target_t), self.upsample, rounding_mode="floor")
        idx = idx.clamp(max=t_c - 1)  # trailing frames replicate the last pattern
        return self.adapt_proj(patterns[:, idx, :]).transpose(1, 2)

    def estimate_masks(self, fused: torch.Tensor) -> torch.Tensor:
        # (B, N, T) -> (B, speakers, N, T) in [0, 1]
        y = self.bottleneck(self.input_norm(fused))
        for block in self.tcn:
            y = block(y)
        masks = torch.sigmoid(self.mask_conv(self.mask_act(y)))
        b, _, t = masks.shape
        return masks.view(b, self.config.speakers, self.config.enc_dim, t)

    def decode(self, masked: torch.Tensor, length: int) -> torch.Tensor:
        # (B, N, T) -> (B, length); frame t lands on samples [t*stride, t*stride + kernel)
        out = self.decoder(masked).squeeze(1)
        if out.shape[-1] >= length:
            return out[..., :length]
        return nn.functional.pad(out, (0, length - out.shape[-1]))

    def forward(self, mix: torch.Tensor, patterns: torch.Tensor | None = None):
        """Separate a (B, L) mixture batch; returns (estimates (B, S, L), masks)."""
        length = mix.shape[-1]
        e_m = self.encode_mixture(mix)
        if patterns is not None:
            fused = e_m + self.adapt_patterns(patterns, e_m.shape[-1])
        else:
            fused = e_m
        masks = self.estimate_masks(fused)
        est = torch.stack(
            [self.decode(masks[:, s] * e_m, length) for s in range(self.config.speakers)],
            dim=1,
        )
        return est, masks

    # ---- Waveform-level conveniences ---------------------------------------------

    def sep_encode(self, mixture: Waveform) -> FrameSequence:
        wav = torch.as_tensor(mixture.samples, dtype=self.encoder.weight.dtype).unsqueeze(0)
        frames = self.encode_mixture(wav)[0].T
        return FrameSequence(values=frames,
                             frame_rate=mixture.sample_rate / self.config.enc_stride,
                             role="mixture-encoding")

    def reconstruct(self, encoded: FrameSequence, mask: torch.Tensor, length: int) -> Waveform:
        if tuple(mask.shape) != tuple(encoded.values.shape):
            raise ValueError("mask shape must equal the encoded shape")
        masked = (mask * encoded.values).T.unsqueeze(0)
        out = self.decode(masked, length)[0]
        rate = int(round(encoded.frame_rate * self.config.enc_stride))
        return Waveform(out.detach().cpu().numpy(), rate)


class SeparationPipeline(nn.Module):
    """Frozen frontend (optional) feeding a separator; waveform in, waveforms out."""

    def __init__(self, separator: SeparatorModel, frontend: CspFrontend | None = None):
        super().__init__()
        self.separator = separator
        self.frontend = frontend
        if frontend is not None:
            frontend.eval()
            for p in frontend.parameters():
                p.requires_grad_(False)

    def ideal_latency_ms(self, sample_rate: int = 16000) -> float:
        hop = self.frontend.config.hop if self.frontend is not None else self.separator.config.enc_stride
        return 1000.0 * hop / sample_rate

    def patterns_for(self, mix: torch.Tensor) -> torch.Tensor | None:
        if self.frontend is None:
            return None
        with torch.no_grad():
            z = self.frontend.encoder(mix)
            return self.frontend.context(z)

    def forward(self, mix: torch.Tensor):
        return self.separator(mix, self.patterns_for(mix))

    def separate_waveform(self, mixture: Waveform) -> list[Waveform]:
        self.eval()
        with torch.no_grad():
            wav = torch.as_tensor(
                mixture.samples, dtype=self.separator.encoder.weight.dtype).unsqueeze(0)
            est, _ = self.forward(wav)
        return [Waveform(est[0, s].cpu().numpy(), mixture.sample_rate)
                for s in range(est.shape[1])]


class StreamingSeparator:
    """Chunked inference wrapper emitting only frames that are final.

    Recomputes over the accumulated buffer each push (the models keep no
    streaming state); strict causality makes re-emitted prefixes bit-stable.
    """

    def __init__(self, pipeline: SeparationPipeline, sample_rate: int = 16000):
        self.pipeline = pipeline
        self.sample_rate = sample_rate
        self.buffer = np.zeros(0)
        self.emitted = 0
        pipeline.eval()

    def _finalized(self, n: int) -> int:
        stride = self.pipeline.separator.config.enc_stride
        bound = stride * (n // stride)
        if self.pipeline.frontend is not None:
            hop = self.pipeline.frontend.config.hop
            bound = min(bound, hop * (n // hop))
        return bound

    def push(self, samples: np.ndarray) -> np.ndarray:
        """Feed a chunk; returns newly finalized output samples (speakers, n_new)."""
        self.buffer = np.concatenate([self.buffer, np.asarray(samples, dtype=np.float64)])
        bound = self._finalized(len(self.buffer))
        if bound <= self.emitted or bound < self.pipeline.separator.config.enc_kernel:
            return np.zeros((self.pipeline.separator.config.speakers, 0))
        with torch.no_grad():
            wav = torch.as_tensor(self.buffer[:bound],
                                  dtype=self.pipeline.separator.encoder.weight.dtype)
            est, _ = self.pipeline.forward(wav.unsqueeze(0))
        out = est[0, :, self.emitted : bound].cpu().numpy()
        self.emitted = bound
        return out

    def finalize(self) -> np.ndarray:
        """Flush the tail so total output length equals total input length."""
        if len(self.buffer) == 0:
            return np.zeros((self.pipeline.separator.config.speakers, 0))
        with torch.no_grad():
            wav = torch.as_tensor(self.buffer,
                                  dtype=self.pipeline.separator.encoder.weight.dtype)
            est, _ = self.pipeline.forward(wav.unsqueeze(0))
        out = est[0, :, self.emitted :].cpu().numpy()
        self.emitted = len(self.buffer)
        return out


# ---------------------------------------------------------------------------
# PIT loss
# ---------------------------------------------------------------------------

def _si_sdr_torch(est: torch.Tensor, ref: torch.Tensor, cap_db: float = SI_SDR_CAP_DB) -> torch.Tensor:
    est = est - est.mean()
    ref = ref - ref.mean()
    alpha = (est * ref).sum() / (ref * ref).sum().clamp_min(1e-12)
    target = alpha * ref
    num = (target * target).sum()
    den = ((est - target) ** 2).sum()
    ratio = num / den.clamp_min(1e-12)
    return (10.0 * torch.log10(ratio.clamp_min(1e-12))).clamp(-cap_db, cap_db)


def _as_tensor_stack(signals) -> torch.Tensor:
    if torch.is_tensor(signals):
        return signals
    rows = [torch.as_tensor(s.samples) if isinstance(s, Waveform) else torch.as_tensor(s)
            for s in signals]
    return torch.stack(rows)


def pit_loss(estimates, references, cap_db: float = SI_SDR_CAP_DB):
    """Permutation-invariant negative SI-SDR.

    Exhausts all speaker permutations and returns (loss, permutation) where
    ``permutation[i]`` is the estimate index assigned to reference ``i``.
    """
    est = _as_tensor_stack(estimates)
    ref = _as_tensor_stack(references)
    if est.shape[0] != ref.shape[0]:
        raise ValueError(f"{est.shape[0]} estimates vs {ref.shape[0]} references")
    if est.shape[-1] != ref.shape[-1]:
        raise ValueError("estimates and references must share one length")
    n = est.shape[0]
    if n > MAX_PIT_SPEAKERS:
        raise ValueError(f"exhaustive PIT supports at most {MAX_PIT_SPEAKERS} speakers")

    pair = [[_si_sdr_torch(est[j], ref[i], cap_db) for j in range(n)] for i in range(n)]
    best_loss, best_perm = None, None
    for perm in itertools.permutations(range(n)):
        loss = -sum(pair[i][perm[i]] for i in range(n)) / n
        if best_loss is None or loss.detach().item() < best_loss.detach().item():
            best_loss, best_perm = loss, perm
    return best_loss, best_perm


# ---------------------------------------------------------------------------
# Separator training (frontend frozen)
# ---------------------------------------------------------------------------

@dataclass
class SepTrainConfig:
    lr: float = 1e-3
    batch_size: int = 2
    crop_s: float = 3.0
    max_steps: int = 200
    steps_per_epoch: int = 0
    patience_epochs: int = 30
    plateau_epochs: int = 5
    lr_decay: float = 0.5
    grad_clip: float = 5.0
    seed: int = 0
    num_threads: int = 1
    val_fraction: float = 0.25
    separator: SeparatorConfig = field(default_factory=SeparatorConfig)


def train_separator(manifest, cfg: SepTrainConfig, frontend: CspFrontend | None = None,
                    out_dir: str | Path | None = None):
    """Train the separator with PIT on labeled mixtures; the frontend stays frozen.

    Returns (best checkpoint, log rows).
    """
    from .data_sim import crop_batch  # local import keeps module load light

    torch.set_num_threads(cfg.num_threads)
    torch.manual_seed(cfg.seed)

    train_entries, val_entries = _split_examples(manifest, cfg.val_fraction)
    for e in train_entries + val_entries:
        if not e.source_paths:
            raise TrainingError(f"entry {e.id} has no reference sources; separator training needs labels")
    train_examples = [manifest.load_example(e) for e in train_entries]
    val_examples = [manifest.load_example(e) for e in val_entries]

    pattern_dim = frontend.config.model_dim if frontend is not None else None
    pattern_hop = frontend.config.hop if frontend is not None else None
    separator = SeparatorModel(cfg.separator, pattern_dim=pattern_dim, pattern_hop=pattern_hop)
    pipeline = SeparationPipeline(separator, frontend)
    trainable = [p for p in pipeline.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(trainable, lr=cfg.lr)
    data_rng = np.random.default_rng(cfg.seed + 2)

    steps_per_epoch = cfg.steps_per_epoch or math.ceil(len(train_examples) / cfg.batch_size)
    out_dir = Path(out_dir) if out_dir is not None else None
    log = CsvLogger(out_dir / "separator_log.csv" if out_dir else None, ["step", "lr", "pit"])

    def batch_loss(examples) -> torch.Tensor:
        mix = torch.stack([torch.as_tensor(ex.mixture.samples, dtype=torch.float32)
                           for ex in examples])
        est, _ = pipeline.forward(mix)
        losses = []
        for b, ex in enumerate(examples):
            refs = torch.stack([torch.as_tensor(s.samples, dtype=torch.float32)
                                for s in ex.sources])
            loss, _ = pit_loss(est[b], refs)
            losses.append(loss)
        return sum(losses) / len(losses)

    def validate() -> float:
        pipeline.eval()
        with torch.no_grad():
            vals = []
            for i, ex in enumerate(val_examples):
                batch = crop_batch([ex], cfg.crop_s, rng_seed=cfg.seed + 9000 + i)
                vals.append(float(batch_loss(batch)))
        pipeline.train()
        if frontend is not None:
            frontend.eval()  # frozen modules stay in eval even while training
        return float(np.mean(vals))

    lr = cfg.lr
    best_state, best_val, best_step, best_epoch = None, math.inf, 0, 0
    stale = plateau = 0
    step = epoch = 0
    pipeline.train()
    if frontend is not None:
        frontend.eval()

    done = False
    while not done:
        epoch += 1
        for _ in range(steps_per_epoch):
            step += 1
            pick = data_rng.choice(len(train_examples), size=cfg.batch_size, replace=True)
            batch = crop_batch([train_examples[i] for i in pick], cfg.crop_s,
                               rng_seed=cfg.seed + 10 * step)
            loss = batch_loss(batch)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step}")
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(trainable, cfg.grad_clip)
            optimizer.step()
            log.log(step=step, lr=lr, pit=float(loss.detach()))
            if step >= cfg.max_steps:
                done = True
                break

        val_loss = validate()
        if val_loss < best_val:
            best_val = val_loss
            best_state = {k: v.detach().clone() for k, v in pipeline.state_dict().items()}
            best_step, best_epoch = step, epoch
            stale = plateau = 0
        else:
            stale += 1
            plateau += 1
        if plateau >= cfg.plateau_epochs:
            lr *= cfg.lr_decay
            for group in optimizer.param_groups:
                group["lr"] = lr
            plateau = 0
        if stale >= cfg.patience_epochs:
            done = True

    if best_state is not None:
        pipeline.load_state_dict(best_state)
    config = {
        "train": cfg,
        "separator": cfg.separator,
        "frontend": frontend.config if frontend is not None else None,
    }
    ckpt = Checkpoint.from_model("separator", config, pipeline, optimizer,
                                 step=best_step, epoch=best_epoch, best_val_loss=best_val)
    if out_dir is not None:
        ckpt.save(out_dir / "separator.ckpt")
    log.close()
    return ckpt, log.rows


def build_pipeline(ckpt: Checkpoint) -> SeparationPipeline:
    """Reconstruct a separation pipeline (frontend included if present) from a checkpoint."""
    from .frontend import FrontendConfig
    from .trainer import CheckpointError

    if ckpt.kind != "separator":
        raise CheckpointError(f"expected a separator checkpoint, got kind {ckpt.kind!r}")
    sep_cfg_dict = dict(ckpt.config["separator"])
    sep_cfg = SeparatorConfig(tcn=TcnConfig(**sep_cfg_dict.pop("tcn")), **sep_cfg_dict)
    frontend = None
    pattern_dim = pattern_hop = None
    if ckpt.config.get("frontend"):
        fe_cfg = FrontendConfig(**ckpt.config["frontend"])
        frontend = CspFrontend(fe_cfg)
        pattern_dim, pattern_hop = fe_cfg.model_dim, fe_cfg.hop
    separator = SeparatorModel(sep_cfg, pattern_dim=pattern_dim, pattern_hop=pattern_hop)
    pipeline = SeparationPipeline(separator, frontend)
    ckpt.apply_to(pipeline)
    pipeline.eval()
    return pipeline

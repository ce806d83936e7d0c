"""Self-supervised objectives: contrastive prediction over quantized frames,
teacher clustering and distillation, and the combined multi-task loss."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .data_sim import Waveform
from .frontend import ROLE_TEACHER, FrameSequence
from .quantizer import CodebookSet, diversity_loss

DEFAULT_NEGATIVES = 100
DEFAULT_CLUSTERS = 100
DEFAULT_NCE_TEMPERATURE = 0.1

_EPS_NORM = 1e-12


def _values(seq) -> torch.Tensor:
    return seq.values if isinstance(seq, FrameSequence) else seq


@dataclass
class CandidateSet:
    """One positive vector and N negative distractors."""

    positive: torch.Tensor
    negatives: torch.Tensor

    def __post_init__(self):
        if self.negatives.ndim != 2 or self.negatives.shape[0] < 1:
            raise ValueError("need at least one negative (N x D)")

    @property
    def n(self) -> int:
        return self.negatives.shape[0]


def _cosine(anchor: torch.Tensor, others: torch.Tensor) -> torch.Tensor:
    a_norm = anchor.norm()
    o_norm = others.norm(dim=-1)
    if a_norm.detach() < _EPS_NORM or (o_norm.detach() < _EPS_NORM).any():
        raise ValueError("cosine similarity undefined for zero-norm vectors")
    return (others @ anchor) / (o_norm * a_norm)


def info_nce(anchor: torch.Tensor, candidates: CandidateSet, omega: float) -> torch.Tensor:
    """Contrastive loss separating the positive from the negatives.

    Uses cosine similarity scaled by the temperature ``omega``; the positive
    is included in the denominator, so the loss is always > 0.
    """
    if omega <= 0:
        raise ValueError(f"temperature must be positive, got {omega}")
    cands = torch.cat([candidates.positive.unsqueeze(0), candidates.negatives], dim=0)
    logits = _cosine(anchor, cands) / omega
    return torch.logsumexp(logits, dim=0) - logits[0]


def _batched_info_nce(anchors: torch.Tensor, positives: torch.Tensor,
                      negatives: torch.Tensor, omega: float) -> torch.Tensor:
    """(M, D), (M, D), (M, N, D) -> per-anchor losses (M,)."""
    if omega <= 0:
        raise ValueError(f"temperature must be positive, got {omega}")
    cands = torch.cat([positives.unsqueeze(1), negatives], dim=1)  # (M, 1+N, D)
    a_norm = anchors.norm(dim=-1, keepdim=True)
    c_norm = cands.norm(dim=-1)
    if (a_norm.detach() < _EPS_NORM).any() or (c_norm.detach() < _EPS_NORM).any():
        raise ValueError("cosine similarity undefined for zero-norm vectors")
    sims = torch.einsum("mnd,md->mn", cands, anchors) / (c_norm * a_norm)
    logits = sims / omega
    return torch.logsumexp(logits, dim=1) - logits[:, 0]


def _negative_indices(total: int, exclude: int, count: int, rng: np.random.Generator) -> np.ndarray:
    pool = np.concatenate([np.arange(exclude), np.arange(exclude + 1, total)])
    if pool.size == 0:
        raise ValueError("no negatives exist for a single-frame sequence")
    replace = pool.size < count
    return rng.choice(pool, size=count, replace=replace)


def sample_negatives(seq, t: int, count: int, rng_seed: int) -> CandidateSet:
    """Draw ``count`` frames uniformly from the sequence, never index ``t``.

    Sampling is without replacement whenever enough distinct frames exist.
    """
    values = _values(seq)
    total = values.shape[0]
    if total < 2:
        raise ValueError("need at least two frames to sample negatives")
    if not 0 <= t < total:
        raise ValueError(f"positive index {t} out of range for {total} frames")
    rng = np.random.default_rng(rng_seed)
    idx = _negative_indices(total, t, count, rng)
    return CandidateSet(positive=values[t], negatives=values[idx])


def td_loss(patterns, latents, books_u: CodebookSet, omega: float, rng_seed: int,
            n_negatives: int = DEFAULT_NEGATIVES, temperature: float = 1.0,
            train_mode: bool = False, generator: torch.Generator | None = None):
    """Predict the next quantized latent token from the current pattern.

    Returns (mean contrastive loss, diversity loss of the latent quantizer).
    """
    c = _values(patterns)
    z = _values(latents)
    total = z.shape[0]
    if c.shape[0] != total:
        raise ValueError("patterns and latents must have equal length")
    if total < 2:
        raise ValueError("need at least two frames for next-step prediction")

    tokens, _, probs = books_u.quantize_values(z, temperature, train_mode, generator)
    if tokens.shape[-1] != c.shape[-1]:
        raise ValueError(
            f"latent token dim {tokens.shape[-1]} must match pattern dim {c.shape[-1]}"
        )
    rng = np.random.default_rng(rng_seed)
    anchors = c[: total - 1]
    positives = tokens[1:total]
    neg_idx = np.stack([_negative_indices(total, t + 1, n_negatives, rng)
                        for t in range(total - 1)])
    losses = _batched_info_nce(anchors, positives, tokens[neg_idx], omega)
    return losses.mean(), diversity_loss(probs)


def bu_loss(patterns, latents, books_v: CodebookSet, omega: float, rng_seed: int,
            anchor_proj: nn.Module | None = None, n_negatives: int = DEFAULT_NEGATIVES,
            temperature: float = 1.0, train_mode: bool = False,
            generator: torch.Generator | None = None):
    """Recognize the current quantized pattern token from the next latent frame.

    ``anchor_proj`` maps latent frames into the pattern-token space; identity
    when omitted (dimensions must then already agree).
    """
    c = _values(patterns)
    z = _values(latents)
    total = z.shape[0]
    if c.shape[0] != total:
        raise ValueError("patterns and latents must have equal length")
    if total < 2:
        raise ValueError("need at least two frames for next-step recognition")

    tokens, _, probs = books_v.quantize_values(c, temperature, train_mode, generator)
    anchors = anchor_proj(z[1:total]) if anchor_proj is not None else z[1:total]
    if anchors.shape[-1] != tokens.shape[-1]:
        raise ValueError(
            f"projected latent dim {anchors.shape[-1]} must match pattern token dim {tokens.shape[-1]}"
        )
    rng = np.random.default_rng(rng_seed)
    positives = tokens[: total - 1]
    neg_idx = np.stack([_negative_indices(total, t, n_negatives, rng)
                        for t in range(total - 1)])
    losses = _batched_info_nce(anchors, positives, tokens[neg_idx], omega)
    return losses.mean(), diversity_loss(probs)


# ---------------------------------------------------------------------------
# Teacher clustering and distillation
# ---------------------------------------------------------------------------

@dataclass
class TeacherCentroids:
    """K-means centroids over teacher frames; assignment is nearest in Euclidean distance."""

    centroids: np.ndarray
    objective_trace: list = field(default_factory=list)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 2:
            raise ValueError("need at least 2 centroids (K x D)")
        # pairwise-distinct check
        k = self.centroids.shape[0]
        for i in range(k):
            for j in range(i + 1, k):
                if np.array_equal(self.centroids[i], self.centroids[j]):
                    raise ValueError(f"centroids {i} and {j} are identical")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def assign(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float64)
        d2 = ((frames[:, None, :] - self.centroids[None, :, :]) ** 2).sum(axis=-1)
        return d2.argmin(axis=1)


def _sq_dists(frames: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((frames[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)


def fit_teacher_centroids(teacher_frames, k: int, rng_seed: int,
                          max_iter: int = 100) -> TeacherCentroids:
    """Lloyd's k-means with k-means++ seeding over stacked teacher frames.

    Empty clusters are re-seeded from the points farthest from their assigned
    centroid; the recorded objective trace is non-increasing.
    """
    if isinstance(teacher_frames, (list, tuple)):
        arrays = [np.asarray(_values(f).detach().cpu().numpy() if torch.is_tensor(_values(f)) else _values(f))
                  for f in teacher_frames]
        frames = np.concatenate(arrays, axis=0).astype(np.float64)
    else:
        frames = np.asarray(teacher_frames, dtype=np.float64)
    if frames.ndim != 2:
        raise ValueError("teacher frames must stack to an M x D matrix")
    m = frames.shape[0]
    if m < k:
        raise ValueError(f"need at least k={k} frames, got {m}")

    rng = np.random.default_rng(rng_seed)

    # k-means++ seeding
    centroids = np.empty((k, frames.shape[1]))
    centroids[0] = frames[rng.integers(m)]
    closest = ((frames - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            centroids[i] = frames[rng.integers(m)]
        else:
            centroids[i] = frames[rng.choice(m, p=closest / total)]
        closest = np.minimum(closest, ((frames - centroids[i]) ** 2).sum(axis=1))

    trace = []
    assign = None
    for _ in range(max_iter):
        d2 = _sq_dists(frames, centroids)
        new_assign = d2.argmin(axis=1)
        trace.append(float(d2[np.arange(m), new_assign].sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for i in range(k):
            members = frames[assign == i]
            if len(members):
                centroids[i] = members.mean(axis=0)
            else:
                farthest = d2[np.arange(m), assign].argmax()
                centroids[i] = frames[farthest]

    # nudge exact duplicates apart so assignments stay well-defined
    for i in range(k):
        for j in range(i + 1, k):
            if np.array_equal(centroids[i], centroids[j]):
                centroids[j] = centroids[j] + 1e-9 * (j + 1)
    return TeacherCentroids(centroids=centroids, objective_trace=trace)


def ckd_loss(patterns, teacher_frames, centroids: TeacherCentroids, omega: float,
             rng_seed: int, proj: nn.Module | None = None,
             n_negatives: int = DEFAULT_NEGATIVES,
             negatives_from: str = "frames") -> torch.Tensor:
    """Contrastively align each pattern with its teacher frame's cluster centroid.

    Negatives come either from other frames' assigned centroids
    (``negatives_from="frames"``, the default) or from the other centroids
    themselves (``"centroids"``). ``proj`` maps centroids into pattern space.
    """
    c = _values(patterns)
    teach = _values(teacher_frames)
    teach_np = teach.detach().cpu().numpy() if torch.is_tensor(teach) else np.asarray(teach)
    total = c.shape[0]
    if teach_np.shape[0] != total:
        raise ValueError(
            f"patterns ({total} frames) and teacher ({teach_np.shape[0]}) must be time-aligned"
        )
    if negatives_from not in ("frames", "centroids"):
        raise ValueError(f"unknown negatives_from mode {negatives_from!r}")

    assign = centroids.assign(teach_np)
    cent = torch.as_tensor(centroids.centroids, dtype=c.dtype)
    cent = proj(cent) if proj is not None else cent
    if cent.shape[-1] != c.shape[-1]:
        raise ValueError(
            f"projected centroid dim {cent.shape[-1]} must match pattern dim {c.shape[-1]}"
        )

    rng = np.random.default_rng(rng_seed)
    positives = cent[assign]
    if negatives_from == "frames":
        if total < 2:
            raise ValueError("need at least two frames for frame-drawn negatives")
        neg_idx = np.stack([_negative_indices(total, t, n_negatives, rng)
                            for t in range(total)])
        negatives = cent[assign[neg_idx]]
    else:
        neg_idx = np.stack([_negative_indices(centroids.k, int(assign[t]), n_negatives, rng)
                            for t in range(total)])
        negatives = cent[neg_idx]
    return _batched_info_nce(c, positives, negatives, omega).mean()


# ---------------------------------------------------------------------------
# Combined multi-task loss
# ---------------------------------------------------------------------------

@dataclass
class LossReport:
    """Named loss components together with the weights that combine them."""

    td_nce: float
    td_div: float
    bu_nce: float
    bu_div: float
    ckd: float
    ahp: float
    total: float
    alpha: float
    beta: float
    gamma: float
    omega: float

    FIELDS = ("td_nce", "td_div", "bu_nce", "bu_div", "ckd", "total")

    def as_dict(self) -> dict:
        out = {}
        for name in self.FIELDS:
            value = getattr(self, name)
            out[name] = float(value.detach()) if torch.is_tensor(value) else float(value)
        return out


def csp_loss(td_nce, td_div, bu_nce, bu_div, ckd, alpha: float = 1.0,
             beta: float = 10.0, gamma: float = 10.0,
             omega: float = DEFAULT_NCE_TEMPERATURE) -> LossReport:
    """Combine the prediction and distillation terms into one loss report.

    Works on plain floats and on scalar tensors alike; the ``ahp``/``total``
    fields keep whatever arithmetic type the parts carry.
    """
    if alpha < 0 or beta < 0 or gamma < 0:
        raise ValueError("loss weights must be nonnegative")
    ahp = alpha * (td_div + td_nce) + beta * (bu_div + bu_nce)
    total = ahp + gamma * ckd
    return LossReport(
        td_nce=td_nce, td_div=td_div, bu_nce=bu_nce, bu_div=bu_div, ckd=ckd,
        ahp=ahp, total=total, alpha=alpha, beta=beta, gamma=gamma, omega=omega,
    )


# ---------------------------------------------------------------------------
# Built-in teacher stub and external teacher files
# ---------------------------------------------------------------------------

class SmoothedLogMelTeacher:
    """Deterministic non-causal teacher: log-mel frames smoothed symmetrically.

    Emits one frame per frontend hop so student and teacher sequences align
    without resampling. The symmetric smoothing window makes it explicitly
    non-causal, as a distillation teacher should be allowed to be.
    """

    def __init__(self, n_mels: int = 40, hop: int = 320, win: int = 400,
                 smooth: int = 1, sample_rate: int = 16000):
        self.n_mels = n_mels
        self.hop = hop
        self.win = win
        self.smooth = smooth
        self.sample_rate = sample_rate
        self._window = np.hanning(win)
        self._fbank = _mel_filterbank(n_mels, win, sample_rate)

    @property
    def dim(self) -> int:
        return self.n_mels

    def frames(self, waveform: Waveform) -> FrameSequence:
        if waveform.sample_rate != self.sample_rate:
            raise ValueError(
                f"teacher expects {self.sample_rate} Hz audio, got {waveform.sample_rate}"
            )
        x = waveform.samples
        total = len(x) // self.hop
        if total < 1:
            raise ValueError(f"need at least {self.hop} samples, got {len(x)}")
        padded = np.concatenate([x, np.zeros(self.win)])
        feats = np.empty((total, self.n_mels))
        for t in range(total):
            seg = padded[t * self.hop : t * self.hop + self.win] * self._window
            power = np.abs(np.fft.rfft(seg)) ** 2
            feats[t] = np.log(self._fbank @ power + 1e-10)
        smoothed = np.empty_like(feats)
        for t in range(total):
            lo, hi = max(0, t - self.smooth), min(total, t + self.smooth + 1)
            smoothed[t] = feats[lo:hi].mean(axis=0)
        return FrameSequence(
            values=torch.as_tensor(smoothed),
            frame_rate=self.sample_rate / self.hop,
            role=ROLE_TEACHER,
        )


def _mel_filterbank(n_mels: int, win: int, sample_rate: int) -> np.ndarray:
    def to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def from_mel(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    n_bins = win // 2 + 1
    freqs = np.linspace(0, sample_rate / 2, n_bins)
    mel_pts = from_mel(np.linspace(to_mel(0.0), to_mel(sample_rate / 2), n_mels + 2))
    bank = np.zeros((n_mels, n_bins))
    for i in range(n_mels):
        lo, mid, hi = mel_pts[i], mel_pts[i + 1], mel_pts[i + 2]
        up = (freqs - lo) / max(mid - lo, 1e-9)
        down = (hi - freqs) / max(hi - mid, 1e-9)
        bank[i] = np.clip(np.minimum(up, down), 0.0, None)
    return bank


_RATE_KEY = "__frame_rate__"


def save_teacher_frames(path, frames_by_id: dict, frame_rate: float) -> None:
    """Write teacher representations keyed by example id to a named-array file."""
    if _RATE_KEY in frames_by_id:
        raise ValueError(f"id {_RATE_KEY!r} is reserved")
    arrays = {k: np.asarray(_values(v).detach().cpu().numpy() if torch.is_tensor(_values(v)) else _values(v))
              for k, v in frames_by_id.items()}
    np.savez(path, **{_RATE_KEY: np.array(frame_rate)}, **arrays)


def load_teacher_frames(path):
    """Read teacher representations; returns ({id: array}, frame_rate)."""
    with np.load(path) as data:
        if _RATE_KEY not in data:
            raise ValueError(f"{path}: missing frame-rate header")
        rate = float(data[_RATE_KEY])
        frames = {k: data[k] for k in data.files if k != _RATE_KEY}
    return frames, rate

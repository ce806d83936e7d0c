"""Signal metrics, per-utterance reporting, analytic MACs, streaming profiling,
and an exhaustive-enumeration checker for the discrete information bounds."""
from __future__ import annotations

import csv
import itertools
import json
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data_sim import Manifest, Waveform
from .frontend import FrontendConfig
from .separation import SeparatorConfig, StreamingSeparator, pit_loss

SI_SDR_CAP_DB = 60.0


class MetricError(ValueError):
    """Raised for degenerate metric inputs (zero reference, length mismatch)."""


# ---------------------------------------------------------------------------
# SI-SDR / SDR
# ---------------------------------------------------------------------------

def si_sdr(estimate, reference, cap_db: float = SI_SDR_CAP_DB) -> float:
    """Scale-invariant SDR in dB, capped at +/- cap_db."""
    est = np.asarray(estimate.samples if isinstance(estimate, Waveform) else estimate, dtype=np.float64)
    ref = np.asarray(reference.samples if isinstance(reference, Waveform) else reference, dtype=np.float64)
    if est.shape != ref.shape:
        raise MetricError(f"length mismatch: {est.shape} vs {ref.shape}")
    est = est - est.mean()
    ref = ref - ref.mean()
    ref_energy = float(ref @ ref)
    if ref_energy <= 0.0:
        raise MetricError("reference has no energy after mean removal")
    alpha = float(est @ ref) / ref_energy
    target = alpha * ref
    noise = est - target
    num = float(target @ target)
    den = float(noise @ noise)
    if den <= 0.0:
        return cap_db
    if num <= 0.0:
        return -cap_db
    return float(np.clip(10.0 * np.log10(num / den), -cap_db, cap_db))


def sdr(estimate, reference, cap_db: float = SI_SDR_CAP_DB) -> float:
    """Plain SDR in dB (no scale projection), capped at +/- cap_db."""
    est = np.asarray(estimate.samples if isinstance(estimate, Waveform) else estimate, dtype=np.float64)
    ref = np.asarray(reference.samples if isinstance(reference, Waveform) else reference, dtype=np.float64)
    if est.shape != ref.shape:
        raise MetricError(f"length mismatch: {est.shape} vs {ref.shape}")
    num = float(ref @ ref)
    if num <= 0.0:
        raise MetricError("reference has no energy")
    den = float((est - ref) @ (est - ref))
    if den <= 0.0:
        return cap_db
    return float(np.clip(10.0 * np.log10(num / den), -cap_db, cap_db))


@dataclass
class MetricRow:
    id: str
    si_sdr_db: float
    si_sdri_db: float
    sdri_db: float
    permutation: tuple


@dataclass
class EvalSummary:
    count: int
    mean_si_sdri_db: float
    mean_sdri_db: float


def _evaluate_entry(manifest: Manifest, entry, separate_fn):
    if not entry.source_paths:
        return None, (entry.id, "missing reference sources")
    try:
        example = manifest.load_example(entry)
    except Exception as exc:  # unreadable audio is a per-row failure
        return None, (entry.id, str(exc))
    estimates = separate_fn(example.mixture)
    refs = example.sources
    if len(estimates) != len(refs):
        return None, (entry.id, f"{len(estimates)} estimates vs {len(refs)} references")

    _, perm = pit_loss([torch.as_tensor(e.samples) for e in estimates],
                       [torch.as_tensor(r.samples) for r in refs])
    sep_si = float(np.mean([si_sdr(estimates[perm[i]], refs[i]) for i in range(len(refs))]))
    sep_sd = float(np.mean([sdr(estimates[perm[i]], refs[i]) for i in range(len(refs))]))
    mix_si = float(np.mean([si_sdr(example.mixture, r) for r in refs]))
    mix_sd = float(np.mean([sdr(example.mixture, r) for r in refs]))
    row = MetricRow(
        id=entry.id,
        si_sdr_db=sep_si,
        si_sdri_db=sep_si - mix_si,
        sdri_db=sep_sd - mix_sd,
        permutation=tuple(perm),
    )
    return row, None


def evaluate_set(manifest: Manifest, separate_fn, out_csv: str | Path | None = None,
                 workers: int = 1):
    """Run a separator over a labeled manifest and collect per-utterance metrics.

    ``separate_fn`` maps a mixture Waveform to a list of estimate Waveforms.
    Returns (rows, errors, summary); entries without references end up in
    ``errors`` and are excluded from the summary. With ``workers > 1``
    utterances are processed in a thread pool but reported in manifest order.
    """
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda e: _evaluate_entry(manifest, e, separate_fn),
                                    manifest.entries))
    else:
        results = [_evaluate_entry(manifest, e, separate_fn) for e in manifest.entries]

    rows = [row for row, err in results if row is not None]
    errors = [err for row, err in results if err is not None]

    summary = EvalSummary(
        count=len(rows),
        mean_si_sdri_db=float(np.mean([r.si_sdri_db for r in rows])) if rows else float("nan"),
        mean_sdri_db=float(np.mean([r.sdri_db for r in rows])) if rows else float("nan"),
    )
    if out_csv is not None:
        write_metrics_csv(out_csv, rows)
    return rows, errors, summary


def write_metrics_csv(path: str | Path, rows: list) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "si_sdr_db", "si_sdri_db", "sdri_db", "perm"])
        for r in rows:
            writer.writerow([r.id, f"{r.si_sdr_db:.6f}", f"{r.si_sdri_db:.6f}",
                             f"{r.sdri_db:.6f}", "-".join(str(p) for p in r.permutation)])


# ---------------------------------------------------------------------------
# Histogram
# ---------------------------------------------------------------------------

@dataclass
class HistogramBin:
    lo_db: float
    hi_db: float
    count: int


def histogram(values, bin_width_db: float = 1.0) -> list[HistogramBin]:
    """Half-open bins [lo, lo + w) covering the data range; counts conserve rows."""
    if bin_width_db <= 0:
        raise ValueError("bin width must be positive")
    vals = [v.si_sdri_db if isinstance(v, MetricRow) else float(v) for v in values]
    if not vals:
        return []
    lo_edge = math.floor(min(vals) / bin_width_db)
    hi_edge = math.floor(max(vals) / bin_width_db)
    bins = []
    for k in range(lo_edge, hi_edge + 1):
        lo, hi = k * bin_width_db, (k + 1) * bin_width_db
        count = sum(1 for v in vals if lo <= v < hi)
        bins.append(HistogramBin(lo_db=lo, hi_db=hi, count=count))
    return bins


def write_histogram_csv(path: str | Path, bins: list[HistogramBin]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo_db", "bin_hi_db", "count"])
        for b in bins:
            writer.writerow([f"{b.lo_db:.6f}", f"{b.hi_db:.6f}", b.count])


def plot_histogram(path: str | Path, bins: list[HistogramBin]) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar([b.lo_db for b in bins], [b.count for b in bins],
           width=[b.hi_db - b.lo_db for b in bins], align="edge", edgecolor="black")
    ax.set_xlabel("SI-SDRi (dB)")
    ax.set_ylabel("utterances")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Analytic MACs
# ---------------------------------------------------------------------------

def count_macs(frontend_cfg: FrontendConfig | None, separator_cfg: SeparatorConfig | None,
               seconds: float, sample_rate: int = 16000) -> float:
    """Analytic multiply-accumulate count in G-MACs per second of input.

    conv: out_T * out_C * (in_C / groups) * kernel; linear: T * in * out;
    attention per layer: 2*T^2*dim + 4*T*dim^2.
    """
    if seconds <= 0:
        raise ValueError("seconds must be positive")
    samples = int(round(seconds * sample_rate))
    total = 0.0
    pattern_dim = None

    if frontend_cfg is not None:
        t = samples
        in_c = 1
        for kernel, stride in zip(frontend_cfg.conv_kernels, frontend_cfg.conv_strides):
            t = t // stride
            total += t * frontend_cfg.conv_channels * in_c * kernel
            in_c = frontend_cfg.conv_channels
        d = frontend_cfg.model_dim
        total += t * frontend_cfg.conv_channels * d                      # input projection
        total += t * d * (d / frontend_cfg.pos_groups) * frontend_cfg.pos_kernel
        total += frontend_cfg.layers * (2 * t * t * d + 4 * t * d * d)   # attention
        total += frontend_cfg.layers * 2 * t * d * frontend_cfg.inner_dim  # feed-forward
        pattern_dim = d

    if separator_cfg is not None:
        n = separator_cfg.enc_dim
        t = samples // separator_cfg.enc_stride
        total += t * n * 1 * separator_cfg.enc_kernel                    # encoder
        if pattern_dim is not None:
            total += t * pattern_dim * n                                 # adaptation projection
        tcn = separator_cfg.tcn
        total += t * n * tcn.bottleneck                                  # bottleneck 1x1
        per_block = (t * tcn.bottleneck * tcn.channels                   # expand 1x1
                     + t * tcn.channels * tcn.kernel                     # depthwise
                     + t * tcn.channels * tcn.bottleneck)                # project 1x1
        total += tcn.blocks * tcn.repeats * per_block
        total += t * tcn.bottleneck * separator_cfg.speakers * n         # mask conv
        total += separator_cfg.speakers * t * n * separator_cfg.enc_kernel  # decoder
    return total / seconds / 1e9


# ---------------------------------------------------------------------------
# Streaming profile
# ---------------------------------------------------------------------------

@dataclass
class ProfileReport:
    ideal_latency_ms: float
    macs_g_per_s: float
    rtf: float
    measured_latency_ms: float
    chunk_ms: float
    hardware: str
    audio_s: float

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, indent=2) + "\n"


def profile_streaming(pipeline, chunk_ms: float, audio: Waveform,
                      frontend_cfg: FrontendConfig | None = None,
                      separator_cfg: SeparatorConfig | None = None) -> ProfileReport:
    """Feed audio chunk by chunk and measure wall-clock compute per chunk.

    The timing numbers are reported, never asserted: they depend on the host.
    Runs single-threaded to keep the measurement comparable across chunks.
    """
    ideal = pipeline.ideal_latency_ms(audio.sample_rate)
    if chunk_ms < ideal:
        raise ValueError(f"chunk_ms {chunk_ms} below the model's ideal latency {ideal} ms")

    if separator_cfg is None:
        separator_cfg = pipeline.separator.config
    if frontend_cfg is None and pipeline.frontend is not None:
        frontend_cfg = pipeline.frontend.config
    macs = count_macs(frontend_cfg, separator_cfg, seconds=1.0, sample_rate=audio.sample_rate)

    old_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        stream = StreamingSeparator(pipeline, sample_rate=audio.sample_rate)
        chunk = int(round(chunk_ms * audio.sample_rate / 1000.0))
        times = []
        for start in range(0, len(audio), chunk):
            piece = audio.samples[start : start + chunk]
            t0 = time.perf_counter()
            stream.push(piece)
            times.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        stream.finalize()
        times.append(time.perf_counter() - t0)
    finally:
        torch.set_num_threads(old_threads)

    compute_s = float(sum(times))
    return ProfileReport(
        ideal_latency_ms=ideal,
        macs_g_per_s=macs,
        rtf=compute_s / audio.duration_s,
        measured_latency_ms=chunk_ms + 1000.0 * compute_s / len(times),
        chunk_ms=chunk_ms,
        hardware=f"{platform.machine()} {platform.processor() or 'cpu'} "
                 f"python{platform.python_version()} torch{torch.__version__} 1-thread",
        audio_s=audio.duration_s,
    )


# ---------------------------------------------------------------------------
# Discrete mutual-information bound checker
# ---------------------------------------------------------------------------

@dataclass
class DiscreteJoint:
    """Exact joint distribution over (c, s1, s2); the mixture is z = s1 + s2."""

    table: np.ndarray  # shape (|c|, |s1|, |s2|)
    conditionally_independent: bool = False

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.float64)
        if self.table.ndim != 3:
            raise ValueError("joint table must have shape (|c|, |s1|, |s2|)")
        if (self.table < 0).any():
            raise ValueError("joint table has negative entries")
        total = float(self.table.sum())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"joint table sums to {total}, expected 1")
        if self.conditionally_independent:
            dev = self._ci_deviation()
            if dev > 1e-9:
                raise ValueError(
                    f"flagged conditionally independent but max deviation is {dev:.3g}")

    def _ci_deviation(self) -> float:
        dev = 0.0
        for c in range(self.table.shape[0]):
            pc = self.table[c].sum()
            if pc <= 0:
                continue
            joint = self.table[c] / pc
            outer = joint.sum(axis=1, keepdims=True) * joint.sum(axis=0, keepdims=True)
            dev = max(dev, float(np.abs(joint - outer).max()))
        return dev


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def _mutual_information(joint_2d: np.ndarray) -> float:
    return _entropy(joint_2d.sum(axis=1)) + _entropy(joint_2d.sum(axis=0)) - _entropy(joint_2d.ravel())


@dataclass
class MiBoundReport:
    lhs_bits: float
    rhs_bits: float
    holds: bool
    chain_lhs_bits: float
    chain_rhs_bits: float
    chain_abs_err: float

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, indent=2) + "\n"


def mi_bound_check(joint: DiscreteJoint, cbar_rule=None, tol: float = 1e-9) -> MiBoundReport:
    """Verify I(c;s1) >= I(c;z) + H(s1) - H(z) by exhaustive enumeration.

    Also evaluates the chain-rule identity
    I(c;s1) = I(c;(cbar,s1)) - I(c;cbar|s1) for the supplied deterministic
    map ``cbar = cbar_rule(s1, s2)`` (identity map of s1 when omitted).
    """
    nc, n1, n2 = joint.table.shape
    if max(nc, n1, n2) > 16:
        raise ValueError("alphabets larger than 16 make enumeration unreasonable here")

    # I(c; s1)
    p_cs1 = joint.table.sum(axis=2)
    lhs = _mutual_information(p_cs1)

    # z = s1 + s2
    nz = n1 + n2 - 1
    p_cz = np.zeros((nc, nz))
    for i in range(n1):
        for j in range(n2):
            p_cz[:, i + j] += joint.table[:, i, j]
    h_s1 = _entropy(p_cs1.sum(axis=0))
    h_z = _entropy(p_cz.sum(axis=0))
    rhs = _mutual_information(p_cz) + h_s1 - h_z

    # chain-rule identity with a deterministic cbar of the sources
    rule = cbar_rule if cbar_rule is not None else (lambda s1, s2: s1)
    cbar_vals = sorted({rule(i, j) for i in range(n1) for j in range(n2)})
    index = {v: k for k, v in enumerate(cbar_vals)}
    p_c_cb_s1 = np.zeros((nc, len(cbar_vals), n1))
    for i in range(n1):
        for j in range(n2):
            p_c_cb_s1[:, index[rule(i, j)], i] += joint.table[:, i, j]
    # I(c; (cbar, s1))
    flat = p_c_cb_s1.reshape(nc, -1)
    i_c_joint = _mutual_information(flat)
    # I(c; cbar | s1) = sum_s1 p(s1) I(c; cbar | s1 = v)
    i_cond = 0.0
    for i in range(n1):
        slab = p_c_cb_s1[:, :, i]
        w = slab.sum()
        if w > 0:
            i_cond += w * _mutual_information(slab / w)
    chain_rhs = i_c_joint - i_cond

    return MiBoundReport(
        lhs_bits=lhs,
        rhs_bits=rhs,
        holds=bool(lhs >= rhs - tol),
        chain_lhs_bits=lhs,
        chain_rhs_bits=chain_rhs,
        chain_abs_err=abs(lhs - chain_rhs),
    )


def random_ci_joint(n_c: int, n_s1: int, n_s2: int, rng: np.random.Generator) -> DiscreteJoint:
    """Random joint satisfying s1 independent of s2 given c, by construction."""
    p_c = rng.dirichlet(np.ones(n_c))
    table = np.empty((n_c, n_s1, n_s2))
    for c in range(n_c):
        p1 = rng.dirichlet(np.ones(n_s1))
        p2 = rng.dirichlet(np.ones(n_s2))
        table[c] = p_c[c] * np.outer(p1, p2)
    return DiscreteJoint(table=table, conditionally_independent=True)

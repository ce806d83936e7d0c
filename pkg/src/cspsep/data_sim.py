"""Two-speaker mixture simulation, WAV and manifest I/O, and batch cropping.

Audio is mono 16 kHz by default. Manifests are JSON-lines files with one
object per mixture; paths inside a manifest are resolved relative to the
manifest's own directory.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

DEFAULT_SAMPLE_RATE = 16000


class DataError(ValueError):
    """Malformed audio input, manifest, or directory layout."""


@dataclass
class Waveform:
    """Mono audio buffer (float64, nominal range [-1, 1]) with its sample rate."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DataError(f"waveform must be mono 1-D, got shape {self.samples.shape}")
        if self.samples.size < 1:
            raise DataError("waveform must contain at least one sample")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("waveform contains non-finite samples")
        self.sample_rate = int(self.sample_rate)
        if self.sample_rate <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class MixtureExample:
    """A mixture waveform, optionally with its (gain-scaled) sources."""

    id: str
    mixture: Waveform
    sources: list[Waveform] | None = None
    gains_db: list[float] = field(default_factory=list)
    peak_scale: float = 1.0

    def __post_init__(self):
        if self.sources is not None:
            for s in self.sources:
                if s.sample_rate != self.mixture.sample_rate:
                    raise DataError(f"{self.id}: source sample rate differs from mixture")
                if len(s) != len(self.mixture):
                    raise DataError(f"{self.id}: source length differs from mixture")


def simulate_mixture(
    sources: list[Waveform],
    gains_db: list[float],
    example_id: str = "mix",
    peak_normalize: bool = False,
) -> MixtureExample:
    """Additively combine gain-scaled sources into a mixture.

    The returned example keeps the scaled sources so the mixture always equals
    their elementwise sum. If the mixture peak exceeds 1.0 the scale needed to
    bring it back to 1.0 is recorded in ``peak_scale``; it is applied jointly
    to mixture and sources only when ``peak_normalize`` is set.
    """
    if not sources:
        raise DataError("need at least one source")
    if len(gains_db) != len(sources):
        raise DataError(f"got {len(sources)} sources but {len(gains_db)} gains")
    rate = sources[0].sample_rate
    length = len(sources[0])
    for s in sources[1:]:
        if s.sample_rate != rate:
            raise DataError("sources must share one sample rate")
        if len(s) != length:
            raise DataError("sources must be padded/truncated to a common length first")

    scaled = [s.samples * 10.0 ** (g / 20.0) for s, g in zip(sources, gains_db)]
    mix = np.sum(scaled, axis=0)

    peak = float(np.max(np.abs(mix)))
    scale = 1.0 / peak if peak > 1.0 else 1.0
    if peak_normalize and scale != 1.0:
        mix = mix * scale
        scaled = [s * scale for s in scaled]

    return MixtureExample(
        id=example_id,
        mixture=Waveform(mix, rate),
        sources=[Waveform(s, rate) for s in scaled],
        gains_db=[float(g) for g in gains_db],
        peak_scale=scale,
    )


def crop_batch(
    examples: list[MixtureExample], duration_s: float, rng_seed: int,
    *, align: int = 1, return_offsets: bool = False,
):
    """Crop every example to ``round(duration_s * rate)`` samples.

    Offsets are uniform over the valid range under the seeded RNG (snapped
    down to multiples of ``align`` when requested); examples shorter than the
    target are zero-padded on the right (never shifted), so causal models see
    no future content moved left.
    """
    if duration_s <= 0:
        raise DataError(f"duration_s must be positive, got {duration_s}")
    if not examples:
        return ([], []) if return_offsets else []
    rate = examples[0].mixture.sample_rate
    for ex in examples:
        if ex.mixture.sample_rate != rate:
            raise DataError("crop_batch requires a single sample rate per batch")
    n = int(round(duration_s * rate))
    rng = np.random.default_rng(rng_seed)

    out = []
    offsets = []
    for ex in examples:
        total = len(ex.mixture)
        offset = int(rng.integers(0, max(total - n, 0) + 1))
        offset = (offset // align) * align
        offsets.append(offset)

        def cut(w: Waveform) -> Waveform:
            piece = w.samples[offset : offset + n]
            if piece.size < n:
                piece = np.concatenate([piece, np.zeros(n - piece.size)])
            return Waveform(piece, rate)

        out.append(
            MixtureExample(
                id=ex.id,
                mixture=cut(ex.mixture),
                sources=[cut(s) for s in ex.sources] if ex.sources is not None else None,
                gains_db=list(ex.gains_db),
                peak_scale=ex.peak_scale,
            )
        )
    return (out, offsets) if return_offsets else out


# ---------------------------------------------------------------------------
# WAV I/O (RIFF, mono, 16-bit PCM or 32-bit float)
# ---------------------------------------------------------------------------

def write_wav(path: str | Path, waveform: Waveform, pcm16: bool = False) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if pcm16:
        data = np.clip(np.round(waveform.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = waveform.samples.astype(np.float32)
    wavfile.write(str(path), waveform.sample_rate, data)


def read_wav(path: str | Path) -> Waveform:
    path = Path(path)
    try:
        rate, data = wavfile.read(str(path))
    except Exception as exc:
        raise DataError(f"unreadable WAV file {path}: {exc}") from exc
    if data.ndim != 1:
        raise DataError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise DataError(f"{path}: unsupported sample format {data.dtype} (use 16-bit PCM or 32-bit float)")
    return Waveform(samples, int(rate))


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    id: str
    mixture_path: str
    source_paths: list[str]
    gains_db: list[float]
    duration_s: float
    sample_rate: int


@dataclass
class Manifest:
    """Ordered collection of mixture entries, serialized as JSON lines."""

    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DataError("manifest ids must be unique")

    def __len__(self) -> int:
        return len(self.entries)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(
                    json.dumps(
                        {
                            "id": e.id,
                            "mixture_path": e.mixture_path,
                            "source_paths": e.source_paths,
                            "gains_db": e.gains_db,
                            "duration_s": e.duration_s,
                            "sample_rate": e.sample_rate,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        path = Path(path)
        entries = []
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        for i, line in enumerate(lines):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                entries.append(
                    ManifestEntry(
                        id=obj["id"],
                        mixture_path=obj["mixture_path"],
                        source_paths=list(obj.get("source_paths", [])),
                        gains_db=[float(g) for g in obj.get("gains_db", [])],
                        duration_s=float(obj["duration_s"]),
                        sample_rate=int(obj["sample_rate"]),
                    )
                )
            except (KeyError, ValueError, json.JSONDecodeError) as exc:
                raise DataError(f"manifest {path}, line {i + 1}: {exc}") from exc
        if not entries:
            raise DataError(f"manifest {path} has no entries")
        return cls(entries=entries, root=path.parent)

    def load_example(self, entry: ManifestEntry, with_sources: bool = True) -> MixtureExample:
        mixture = read_wav(self.root / entry.mixture_path)
        sources = None
        if with_sources and entry.source_paths:
            sources = [read_wav(self.root / p) for p in entry.source_paths]
        return MixtureExample(
            id=entry.id,
            mixture=mixture,
            sources=sources,
            gains_db=list(entry.gains_db),
        )


def build_manifest(root_dir: str | Path) -> Manifest:
    """Enumerate a mixture tree into a manifest, sorted lexicographically by id.

    Expected layout: ``<root>/mix/<id>.wav`` with optional parallel source
    directories ``<root>/s1``, ``<root>/s2``, ... holding one file per id.
    Per-source gains may be declared in ``<root>/gains.json`` ({id: [dB, ...]});
    entries without a declaration get 0 dB per source.
    """
    root = Path(root_dir)
    mix_dir = root / "mix"
    if not mix_dir.is_dir():
        raise DataError(f"no mixture directory at {mix_dir}")
    mix_files = sorted(mix_dir.glob("*.wav"), key=lambda p: p.stem)
    if not mix_files:
        raise DataError(f"no mixtures found under {mix_dir}")

    source_dirs = sorted(
        (d for d in root.iterdir() if d.is_dir() and d.name.startswith("s") and d.name[1:].isdigit()),
        key=lambda d: int(d.name[1:]),
    )
    gains_path = root / "gains.json"
    gains_map = json.loads(gains_path.read_text(encoding="utf-8")) if gains_path.exists() else {}

    entries = []
    for f in mix_files:
        ex_id = f.stem
        wav = read_wav(f)  # validates readability; DataError carries the path
        source_paths = []
        for d in source_dirs:
            src = d / f.name
            if not src.exists():
                raise DataError(f"{ex_id}: missing source file {src}")
            source_paths.append(str(src.relative_to(root)))
        gains = [float(g) for g in gains_map.get(ex_id, [0.0] * len(source_paths))]
        entries.append(
            ManifestEntry(
                id=ex_id,
                mixture_path=str(f.relative_to(root)),
                source_paths=source_paths,
                gains_db=gains,
                duration_s=wav.duration_s,
                sample_rate=wav.sample_rate,
            )
        )
    return Manifest(entries=entries, root=root)


def synth_voice(duration_s: float, seed: int, sample_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Deterministic speech-like test signal.

    Concatenates short syllable-like segments, each with its own pitch,
    harmonic profile, and noise level, under a smooth articulation envelope,
    so the spectral content actually changes every couple hundred ms.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    base_f0 = rng.uniform(90.0, 220.0)
    sig = np.zeros(n)
    pos = 0
    while pos < n:
        seg_len = int(rng.uniform(0.12, 0.3) * sample_rate)
        seg_len = min(seg_len, n - pos)
        t = np.arange(seg_len) / sample_rate
        f0 = base_f0 * rng.uniform(0.7, 1.5)
        pitch = f0 * (1.0 + rng.uniform(-0.15, 0.15) * t / max(t[-1], 1e-6))
        phase = 2 * np.pi * np.cumsum(pitch) / sample_rate
        seg = np.zeros(seg_len)
        for h in range(1, 7):
            seg += rng.uniform(0.0, 1.0) / h * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
        seg += rng.uniform(0.05, 0.3) * rng.standard_normal(seg_len)
        # raised-cosine articulation envelope per syllable
        env = 0.15 + 0.85 * np.sin(np.pi * np.arange(seg_len) / seg_len) ** 2
        sig[pos : pos + seg_len] = seg * env * rng.uniform(0.4, 1.0)
        pos += seg_len
    sig *= 0.5 / np.max(np.abs(sig))
    return Waveform(sig, sample_rate)

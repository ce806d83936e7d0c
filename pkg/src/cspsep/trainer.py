"""Frontend pretraining: optimization schedule, early stopping, checkpointing."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import pretext
from .data_sim import Manifest, MixtureExample, Waveform, crop_batch
from .frontend import CspFrontend, FrontendConfig
from .pretext import (
    DEFAULT_CLUSTERS,
    DEFAULT_NEGATIVES,
    LossReport,
    SmoothedLogMelTeacher,
    TeacherCentroids,
    csp_loss,
    fit_teacher_centroids,
)
from .quantizer import CodebookSet, anneal_temperature

CHECKPOINT_FORMAT_VERSION = 1

# fixed zip timestamp so checkpoints are byte-identical across runs
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class TrainingError(RuntimeError):
    """Raised when optimization cannot proceed (e.g. non-finite loss)."""


class CheckpointError(RuntimeError):
    """Raised for unreadable, corrupt, or version-mismatched checkpoints."""


@dataclass
class QuantizerSpec:
    """Sizes of the two product quantizers."""

    groups: int = 2
    entries: int = 320
    code_dim: int | None = None  # defaults to the token output dimension


@dataclass
class PretrainConfig:
    """Hyper-parameters of the self-supervised pretraining stage."""

    lr: float = 5e-4
    weight_decay: float = 0.01
    warmup_steps: int = 32000
    adam_betas: tuple = (0.9, 0.999)
    dropout: float = 0.1
    layerdrop: float = 0.05
    crop_s: float = 15.6
    patience_epochs: int = 50
    seed: int = 0
    alpha: float = 1.0
    beta: float = 10.0
    gamma: float = 10.0
    omega: float = 0.1
    batch_size: int = 2
    max_steps: int = 1000
    steps_per_epoch: int = 0  # 0 -> ceil(n_train / batch_size)
    val_fraction: float = 0.25
    temp_start: float = 2.0
    temp_floor: float = 0.5
    temp_decay: float = 0.999995
    n_negatives: int = DEFAULT_NEGATIVES
    clusters: int = DEFAULT_CLUSTERS
    ckd_negatives: str = "frames"  # or "centroids"
    grad_clip: float = 10.0
    num_threads: int = 1
    centroids_path: str = ""
    teacher_frames_path: str = ""  # external teacher: named arrays keyed by id
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    quantizer: QuantizerSpec = field(default_factory=QuantizerSpec)

    def __post_init__(self):
        if self.patience_epochs < 1:
            raise ValueError("patience_epochs must be >= 1")
        for name in ("lr", "crop_s", "omega"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("weight_decay", "dropout", "layerdrop", "alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def lr_schedule(step: int, cfg: PretrainConfig) -> float:
    """Linear warmup to ``cfg.lr`` followed by inverse-square-root decay."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step <= cfg.warmup_steps:
        return cfg.lr * step / max(cfg.warmup_steps, 1)
    return cfg.lr * math.sqrt(cfg.warmup_steps / step)


class PretrainModel(nn.Module):
    """Frontend plus the quantizers and projections only pretraining needs."""

    def __init__(self, cfg: PretrainConfig, teacher_dim: int):
        super().__init__()
        fe_cfg = dataclasses.replace(cfg.frontend, dropout=cfg.dropout, layerdrop=cfg.layerdrop)
        self.frontend = CspFrontend(fe_cfg)
        d = fe_cfg.model_dim
        q = cfg.quantizer
        self.books_u = CodebookSet(fe_cfg.conv_channels, d, q.groups, q.entries, q.code_dim)
        self.books_v = CodebookSet(d, d, q.groups, q.entries, q.code_dim)
        self.bu_anchor_proj = nn.Linear(fe_cfg.conv_channels, d)
        self.teacher_proj = nn.Linear(teacher_dim, d)


def parameter_hash(module: nn.Module) -> str:
    """SHA-256 over all parameters in name order; stable iff no weight changed."""
    digest = hashlib.sha256()
    for name, param in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(param.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Checkpoints: single-file zip with a version header, canonical-text config
# snapshot, and named float arrays.
# ---------------------------------------------------------------------------

def _write_array(zf: zipfile.ZipFile, name: str, array: np.ndarray) -> None:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(array))
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, buf.getvalue())


def _write_text(zf: zipfile.ZipFile, name: str, text: str) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, text.encode("utf-8"))


def _config_to_jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {k: _config_to_jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _config_to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_config_to_jsonable(v) for v in obj]
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_config_to_jsonable(obj), sort_keys=True, indent=2) + "\n"


@dataclass
class Checkpoint:
    """Serialized training state: config snapshot, parameters, optimizer, counters."""

    kind: str
    config: dict
    params: dict
    optim_arrays: dict = field(default_factory=dict)
    optim_meta: dict = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    best_val_loss: float = math.inf
    format_version: int = CHECKPOINT_FORMAT_VERSION

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {
            "format_version": self.format_version,
            "kind": self.kind,
            "step": self.step,
            "epoch": self.epoch,
            "best_val_loss": self.best_val_loss,
        }
        with zipfile.ZipFile(path, "w") as zf:
            _write_text(zf, "meta.json", canonical_json(meta))
            _write_text(zf, "config.json", canonical_json(self.config))
            for name in sorted(self.params):
                _write_array(zf, f"params/{name}.npy", self.params[name])
            for name in sorted(self.optim_arrays):
                _write_array(zf, f"optim/{name}.npy", self.optim_arrays[name])
            _write_text(zf, "optim_meta.json", canonical_json(self.optim_meta))

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        try:
            with zipfile.ZipFile(path) as zf:
                meta = json.loads(zf.read("meta.json"))
                version = meta.get("format_version")
                if version != CHECKPOINT_FORMAT_VERSION:
                    raise CheckpointError(
                        f"checkpoint {path} has format version {version}, "
                        f"this build reads version {CHECKPOINT_FORMAT_VERSION}"
                    )
                config = json.loads(zf.read("config.json"))
                optim_meta = json.loads(zf.read("optim_meta.json"))
                params, optim_arrays = {}, {}
                for name in zf.namelist():
                    if name.startswith("params/"):
                        params[name[len("params/"):-len(".npy")]] = np.lib.format.read_array(
                            io.BytesIO(zf.read(name)))
                    elif name.startswith("optim/"):
                        optim_arrays[name[len("optim/"):-len(".npy")]] = np.lib.format.read_array(
                            io.BytesIO(zf.read(name)))
        except CheckpointError:
            raise
        except (OSError, zipfile.BadZipFile, KeyError, json.JSONDecodeError, ValueError) as exc:
            raise CheckpointError(f"corrupt or unreadable checkpoint {path}: {exc}") from exc
        return cls(
            kind=meta["kind"],
            config=config,
            params=params,
            optim_arrays=optim_arrays,
            optim_meta=optim_meta,
            step=meta["step"],
            epoch=meta["epoch"],
            best_val_loss=meta["best_val_loss"],
        )

    @classmethod
    def from_model(cls, kind: str, config, model: nn.Module,
                   optimizer: torch.optim.Optimizer | None = None,
                   step: int = 0, epoch: int = 0,
                   best_val_loss: float = math.inf) -> "Checkpoint":
        params = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
        optim_arrays, optim_meta = {}, {}
        if optimizer is not None:
            optim_arrays, optim_meta = _optimizer_to_arrays(model, optimizer)
        return cls(
            kind=kind,
            config=_config_to_jsonable(config),
            params=params,
            optim_arrays=optim_arrays,
            optim_meta=optim_meta,
            step=step,
            epoch=epoch,
            best_val_loss=best_val_loss,
        )

    def apply_to(self, model: nn.Module) -> None:
        state = {k: torch.as_tensor(v) for k, v in self.params.items()}
        model.load_state_dict(state)

    def restore_optimizer(self, model: nn.Module, optimizer: torch.optim.Optimizer) -> None:
        if not self.optim_meta:
            return
        names = [n for n, _ in model.named_parameters()]
        state = {}
        for i, name in enumerate(names):
            entry = {}
            for key in self.optim_meta.get("array_keys", []):
                arr_name = f"{name}.{key}"
                if arr_name in self.optim_arrays:
                    entry[key] = torch.as_tensor(self.optim_arrays[arr_name])
            if entry:
                state[i] = entry
        groups = json.loads(self.optim_meta["param_groups"])
        for g, params_idx in zip(groups, [list(range(len(names)))]):
            g["params"] = params_idx
        optimizer.load_state_dict({"state": state, "param_groups": groups})


def _optimizer_to_arrays(model: nn.Module, optimizer: torch.optim.Optimizer):
    names = [n for n, _ in model.named_parameters()]
    sd = optimizer.state_dict()
    arrays, keys = {}, set()
    for idx, entry in sd["state"].items():
        for key, value in entry.items():
            keys.add(key)
            arrays[f"{names[idx]}.{key}"] = (
                value.detach().cpu().numpy() if torch.is_tensor(value) else np.asarray(value)
            )
    groups = [{k: v for k, v in g.items() if k != "params"} for g in sd["param_groups"]]
    meta = {"array_keys": sorted(keys), "param_groups": json.dumps(groups)}
    return arrays, meta


# ---------------------------------------------------------------------------
# Pretraining loop
# ---------------------------------------------------------------------------

class CsvLogger:
    """Appends one row of named metrics per step."""

    def __init__(self, path: str | Path | None, columns):
        self.columns = list(columns)
        self.rows = []
        self._fh = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "w", newline="", encoding="utf-8")
            self._writer = csv.writer(self._fh)
            self._writer.writerow(self.columns)

    def log(self, **values):
        row = [values[c] for c in self.columns]
        self.rows.append(dict(zip(self.columns, row)))
        if self._fh is not None:
            self._writer.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in row])
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def _split_examples(manifest: Manifest, val_fraction: float):
    entries = sorted(manifest.entries, key=lambda e: e.id)
    if len(entries) < 2:
        raise TrainingError("need at least 2 examples for a disjoint train/validation split")
    n_val = max(1, int(round(val_fraction * len(entries))))
    n_val = min(n_val, len(entries) - 1)
    return entries[:-n_val], entries[-n_val:]


class _TeacherSource:
    """Per-crop teacher frames, either from the built-in stub or an external file."""

    def __init__(self, cfg: PretrainConfig):
        self.hop = cfg.frontend.hop
        self.external = None
        if cfg.teacher_frames_path:
            frames, rate = pretext.load_teacher_frames(cfg.teacher_frames_path)
            expected = 16000 / self.hop
            if abs(rate - expected) > 1e-6:
                raise TrainingError(
                    f"external teacher frame rate {rate} Hz does not match the "
                    f"frontend frame rate {expected} Hz")
            self.external = {k: np.asarray(v, dtype=np.float64) for k, v in frames.items()}
            dims = {v.shape[1] for v in self.external.values()}
            if len(dims) != 1:
                raise TrainingError("external teacher arrays must share one dimension")
            self.dim = dims.pop()
            self.stub = None
        else:
            self.stub = SmoothedLogMelTeacher(hop=self.hop)
            self.dim = self.stub.dim

    @property
    def crop_align(self) -> int:
        # external frames are indexed at the frontend hop, so crops must align
        return self.hop if self.external is not None else 1

    def frames_for(self, example: MixtureExample, offset: int) -> torch.Tensor:
        n_frames = len(example.mixture) // self.hop
        if self.external is None:
            return self.stub.frames(example.mixture).values
        if example.id not in self.external:
            raise TrainingError(f"no external teacher frames for id {example.id!r}")
        full = self.external[example.id]
        start = offset // self.hop
        piece = full[start : start + n_frames]
        if piece.shape[0] < n_frames:  # crop ran past the recorded frames
            pad = np.repeat(piece[-1:], n_frames - piece.shape[0], axis=0)
            piece = np.concatenate([piece, pad], axis=0)
        return torch.as_tensor(piece)

    def all_frames(self, examples) -> np.ndarray:
        if self.external is None:
            return np.concatenate(
                [self.stub.frames(ex.mixture).values.numpy() for ex in examples], axis=0)
        return np.concatenate([self.external[ex.id] for ex in examples], axis=0)


def _item_losses(model: PretrainModel, z_item, c_item, teacher_item, centroids,
                 cfg: PretrainConfig, temperature: float, seed: int,
                 train_mode: bool, generator):
    td_nce, td_div = pretext.td_loss(
        c_item, z_item, model.books_u, cfg.omega, rng_seed=seed,
        n_negatives=cfg.n_negatives, temperature=temperature,
        train_mode=train_mode, generator=generator,
    )
    bu_nce, bu_div = pretext.bu_loss(
        c_item, z_item, model.books_v, cfg.omega, rng_seed=seed + 1,
        anchor_proj=model.bu_anchor_proj, n_negatives=cfg.n_negatives,
        temperature=temperature, train_mode=train_mode, generator=generator,
    )
    if cfg.gamma > 0:
        ckd = pretext.ckd_loss(
            c_item, teacher_item, centroids, cfg.omega, rng_seed=seed + 2,
            proj=model.teacher_proj, n_negatives=cfg.n_negatives,
            negatives_from=cfg.ckd_negatives,
        )
    else:
        ckd = torch.zeros((), dtype=z_item.dtype)
    return td_nce, td_div, bu_nce, bu_div, ckd


def _batch_report(model, batch, teacher_items, centroids, cfg, temperature, seeds,
                  train_mode, generator):
    """Forward pass + loss aggregation over one (B, L) batch, fixed reduction order."""
    waves = torch.stack([torch.as_tensor(ex.mixture.samples, dtype=torch.float32)
                         for ex in batch])
    z, c, _ = model.frontend.pretrain_forward(waves, mask_seeds=seeds, generator=generator)
    parts = []
    for b in range(len(batch)):
        parts.append(_item_losses(model, z[b], c[b], teacher_items[b], centroids, cfg,
                                  temperature, seeds[b], train_mode, generator))
    sums = [sum(p[i] for p in parts) / len(parts) for i in range(5)]
    return csp_loss(*sums, alpha=cfg.alpha, beta=cfg.beta, gamma=cfg.gamma, omega=cfg.omega)


def pretrain(manifest: Manifest, cfg: PretrainConfig, out_dir: str | Path | None = None):
    """Run self-supervised pretraining and return (best checkpoint, log rows).

    Deterministic under a fixed seed and single-worker loading; aborts with
    the offending step on a non-finite loss.
    """
    torch.set_num_threads(cfg.num_threads)
    torch.manual_seed(cfg.seed)

    train_entries, val_entries = _split_examples(manifest, cfg.val_fraction)
    train_examples = [manifest.load_example(e, with_sources=False) for e in train_entries]
    val_examples = [manifest.load_example(e, with_sources=False) for e in val_entries]

    teacher = _TeacherSource(cfg)
    centroids = None
    if cfg.gamma > 0:
        if cfg.centroids_path:
            loaded = np.load(cfg.centroids_path)
            arrays = loaded["centroids"] if hasattr(loaded, "files") else loaded
            centroids = TeacherCentroids(centroids=arrays)
        else:
            centroids = fit_teacher_centroids(
                teacher.all_frames(train_examples), k=cfg.clusters, rng_seed=cfg.seed)

    model = PretrainModel(cfg, teacher_dim=teacher.dim)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr,
                                  betas=tuple(cfg.adam_betas),
                                  weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    data_rng = np.random.default_rng(cfg.seed + 2)

    steps_per_epoch = cfg.steps_per_epoch or math.ceil(len(train_examples) / cfg.batch_size)
    out_dir = Path(out_dir) if out_dir is not None else None
    log = CsvLogger(
        out_dir / "pretrain_log.csv" if out_dir else None,
        ["step", "lr"] + list(LossReport.FIELDS),
    )

    best_state = None
    best_val = math.inf
    best_step = best_epoch = 0
    stale = 0
    epoch = 0
    step = 0

    def teacher_items_for(batch, offsets):
        if cfg.gamma <= 0:
            return [None] * len(batch)
        return [teacher.frames_for(ex, off) for ex, off in zip(batch, offsets)]

    def temperature_at(s: int) -> float:
        return anneal_temperature(s, start=cfg.temp_start, floor=cfg.temp_floor,
                                  decay=cfg.temp_decay)

    def validate() -> float:
        model.eval()
        with torch.no_grad():
            losses = []
            for i, ex in enumerate(val_examples):
                batch, offsets = crop_batch([ex], cfg.crop_s, rng_seed=cfg.seed + 9000 + i,
                                            align=teacher.crop_align, return_offsets=True)
                report = _batch_report(model, batch, teacher_items_for(batch, offsets),
                                       centroids, cfg,
                                       temperature=temperature_at(step),
                                       seeds=[cfg.seed + 7000 + i],
                                       train_mode=False, generator=None)
                losses.append(float(report.total))
        model.train()
        return float(np.mean(losses))

    model.train()
    done = False
    while not done:
        epoch += 1
        for _ in range(steps_per_epoch):
            step += 1
            lr = lr_schedule(step, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr

            pick = data_rng.choice(len(train_examples), size=cfg.batch_size, replace=True)
            batch, offsets = crop_batch([train_examples[i] for i in pick], cfg.crop_s,
                                        rng_seed=cfg.seed + 10 * step,
                                        align=teacher.crop_align, return_offsets=True)
            seeds = [cfg.seed + 100000 * step + 31 * b for b in range(len(batch))]
            report = _batch_report(model, batch, teacher_items_for(batch, offsets),
                                   centroids, cfg,
                                   temperature=temperature_at(step - 1),
                                   seeds=seeds, train_mode=True, generator=gen)
            total = report.total
            if not torch.isfinite(total):
                raise TrainingError(f"non-finite loss at step {step}")

            optimizer.zero_grad()
            total.backward()
            nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()

            log.log(step=step, lr=lr, **{k: float(v) for k, v in report.as_dict().items()})
            if step >= cfg.max_steps:
                done = True
                break

        val_loss = validate()
        if val_loss < best_val:
            best_val = val_loss
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            best_step, best_epoch = step, epoch
            stale = 0
        else:
            stale += 1
        if stale >= cfg.patience_epochs:
            done = True

    if best_state is not None:
        model.load_state_dict(best_state)
    ckpt = Checkpoint.from_model("pretrain", cfg, model, optimizer,
                                 step=best_step, epoch=best_epoch, best_val_loss=best_val)
    if out_dir is not None:
        ckpt.save(out_dir / "frontend.ckpt")
    log.close()
    return ckpt, log.rows


def build_pretrain_model(ckpt: Checkpoint) -> PretrainModel:
    """Reconstruct a pretraining model (frontend included) from a checkpoint."""
    if ckpt.kind != "pretrain":
        raise CheckpointError(f"expected a pretrain checkpoint, got kind {ckpt.kind!r}")
    cfg = pretrain_config_from_dict(ckpt.config)
    teacher_dim = ckpt.params["teacher_proj.weight"].shape[1]
    model = PretrainModel(cfg, teacher_dim=teacher_dim)
    ckpt.apply_to(model)
    model.eval()
    return model


def pretrain_config_from_dict(obj: dict) -> PretrainConfig:
    obj = dict(obj)
    frontend = FrontendConfig(**obj.pop("frontend"))
    quant = QuantizerSpec(**obj.pop("quantizer"))
    return PretrainConfig(frontend=frontend, quantizer=quant, **obj)

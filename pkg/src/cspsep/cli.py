"""Command-line entry point: simulate, pretrain, cluster-teacher, train-sep,
eval, profile, mi-check."""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import evaluation, pretext, separation, trainer
from .data_sim import (
    DataError,
    Manifest,
    ManifestEntry,
    Waveform,
    read_wav,
    simulate_mixture,
    synth_voice,
    write_wav,
)
from .trainer import Checkpoint, CheckpointError, TrainingError, canonical_json

# dotted-path aliases accepted in config files and --set overrides
_LOSS_ALIAS = {"loss.alpha": "alpha", "loss.beta": "beta",
               "loss.gamma": "gamma", "loss.omega": "omega"}


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------

def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {p}")
    text = p.read_bytes()
    if p.suffix == ".json":
        return json.loads(text)
    return tomllib.loads(text.decode("utf-8"))


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _apply_overrides(data: dict, sets: list[str]) -> dict:
    for item in sets or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = _LOSS_ALIAS.get(key, key)
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise CliError(f"cannot descend into non-table key {part!r}")
        node[parts[-1]] = _parse_value(raw)
    return data


def _flatten_aliases(data: dict) -> dict:
    loss = data.pop("loss", None)
    if isinstance(loss, dict):
        for k, v in loss.items():
            if f"loss.{k}" not in _LOSS_ALIAS:
                raise CliError(f"unknown config key loss.{k}")
            data[k] = v
    return data


def _from_dict(cls, data: dict):
    """Build a dataclass tree from a plain dict, rejecting unknown keys."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise CliError(f"unknown config key {key!r} for {cls.__name__}")
        f = fields[key]
        if dataclasses.is_dataclass(f.type) and isinstance(value, dict):
            kwargs[key] = _from_dict(f.type, value)
        elif f.name == "frontend" and isinstance(value, dict):
            from .frontend import FrontendConfig
            kwargs[key] = _from_dict(FrontendConfig, value)
        elif f.name == "quantizer" and isinstance(value, dict):
            kwargs[key] = _from_dict(trainer.QuantizerSpec, value)
        elif f.name == "separator" and isinstance(value, dict):
            kwargs[key] = _from_dict(separation.SeparatorConfig, value)
        elif f.name == "tcn" and isinstance(value, dict):
            kwargs[key] = _from_dict(separation.TcnConfig, value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad configuration for {cls.__name__}: {exc}") from exc


def _resolve_seed(args, config_data: dict) -> int:
    if args.seed is not None:
        return args.seed
    if "seed" in config_data:
        return int(config_data["seed"])
    env = os.environ.get("CSP_SEED")
    if env is not None:
        return int(env)
    return 0


def _echo_config(out_dir: Path, subcommand: str, seed: int, config) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"subcommand": subcommand, "seed": seed, "config": config}
    (out_dir / "effective_config.json").write_text(canonical_json(payload), encoding="utf-8")


def _build_train_config(cls, args) -> tuple:
    data = _load_config_file(args.config)
    data = _apply_overrides(data, args.set)
    data = _flatten_aliases(data)
    seed = _resolve_seed(args, data)
    data["seed"] = seed
    cfg = _from_dict(cls, data)
    return cfg, seed


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    out = Path(args.out)
    rng = np.random.default_rng(_resolve_seed(args, {}))
    seed = _resolve_seed(args, {})

    if args.synthetic:
        sources = [synth_voice(args.duration, seed=seed * 1000003 + i)
                   for i in range(args.synthetic)]
    elif args.sources:
        paths = sorted(Path(args.sources).glob("*.wav"))
        if len(paths) < 2:
            raise CliError(f"need at least 2 source wavs under {args.sources}")
        sources = [read_wav(p) for p in paths]
    elif args.manifest:
        man = Manifest.load(args.manifest)
        sources = [read_wav(man.root / e.mixture_path) for e in man.entries]
        if len(sources) < 2:
            raise CliError("need at least 2 source utterances to mix")
    else:
        raise CliError("one of --synthetic, --sources, or --manifest is required")

    count = args.count or len(sources) // 2
    entries = []
    for i in range(count):
        pick = rng.choice(len(sources), size=2, replace=False)
        pair = [sources[int(p)] for p in pick]
        n = min(len(w) for w in pair)
        pair = [Waveform(w.samples[:n], w.sample_rate) for w in pair]
        gains = [float(rng.uniform(args.gain_low, args.gain_high)) for _ in pair]
        ex = simulate_mixture(pair, gains, example_id=f"{i:05d}",
                              peak_normalize=not args.no_peak_normalize)
        write_wav(out / "mix" / f"{ex.id}.wav", ex.mixture)
        source_paths = []
        for k, src in enumerate(ex.sources, start=1):
            write_wav(out / f"s{k}" / f"{ex.id}.wav", src)
            source_paths.append(f"s{k}/{ex.id}.wav")
        entries.append(ManifestEntry(
            id=ex.id,
            mixture_path=f"mix/{ex.id}.wav",
            source_paths=source_paths,
            gains_db=ex.gains_db,
            duration_s=ex.mixture.duration_s,
            sample_rate=ex.mixture.sample_rate,
        ))
    Manifest(entries=entries, root=out).save(out / "manifest.jsonl")
    _echo_config(out, "simulate", seed, {
        "count": count, "duration": args.duration,
        "gain_low": args.gain_low, "gain_high": args.gain_high,
        "peak_normalize": not args.no_peak_normalize,
    })
    print(f"wrote {count} mixtures to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg, seed = _build_train_config(trainer.PretrainConfig, args)
    out = Path(args.out)
    _echo_config(out, "pretrain", seed, cfg)
    manifest = Manifest.load(args.manifest)
    ckpt, rows = trainer.pretrain(manifest, cfg, out_dir=out)
    print(f"pretraining done: {len(rows)} steps, best val loss {ckpt.best_val_loss:.4f}, "
          f"checkpoint at {out / 'frontend.ckpt'}")
    return 0


def cmd_cluster_teacher(args) -> int:
    seed = _resolve_seed(args, {})
    manifest = Manifest.load(args.manifest)
    teacher = pretext.SmoothedLogMelTeacher()
    frames = []
    for entry in manifest.entries:
        ex = manifest.load_example(entry, with_sources=False)
        frames.append(teacher.frames(ex.mixture).values.numpy())
    cents = pretext.fit_teacher_centroids(np.concatenate(frames, axis=0),
                                          k=args.clusters, rng_seed=seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.save(out, cents.centroids)
    _echo_config(out.parent, "cluster-teacher", seed,
                 {"clusters": args.clusters, "manifest": str(args.manifest)})
    print(f"wrote {cents.k} centroids to {out} "
          f"(final objective {cents.objective_trace[-1]:.4f})")
    return 0


def cmd_train_sep(args) -> int:
    cfg, seed = _build_train_config(separation.SepTrainConfig, args)
    out = Path(args.out)
    _echo_config(out, "train-sep", seed, cfg)
    manifest = Manifest.load(args.manifest)
    frontend = None
    if args.frontend:
        model = trainer.build_pretrain_model(Checkpoint.load(args.frontend))
        frontend = model.frontend
    ckpt, rows = separation.train_separator(manifest, cfg, frontend=frontend, out_dir=out)
    print(f"separator training done: {len(rows)} steps, best val loss "
          f"{ckpt.best_val_loss:.4f}, checkpoint at {out / 'separator.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    seed = _resolve_seed(args, {})
    out = Path(args.out)
    pipeline = separation.build_pipeline(Checkpoint.load(args.checkpoint))
    manifest = Manifest.load(args.manifest)
    rows, errors, summary = evaluation.evaluate_set(
        manifest, pipeline.separate_waveform, out_csv=out / "metrics.csv",
        workers=args.workers)
    if args.write_audio:
        for entry in manifest.entries:
            ex = manifest.load_example(entry, with_sources=False)
            for k, est in enumerate(pipeline.separate_waveform(ex.mixture), start=1):
                write_wav(out / "separated" / f"{entry.id}_spk{k}.wav", est)
    if args.histogram:
        bins = evaluation.histogram(rows, bin_width_db=args.bin_width)
        evaluation.write_histogram_csv(out / "histogram.csv", bins)
        try:
            evaluation.plot_histogram(out / "histogram.png", bins)
        except ImportError:
            pass
    _echo_config(out, "eval", seed, {"checkpoint": str(args.checkpoint),
                                     "manifest": str(args.manifest)})
    for ex_id, msg in errors:
        print(f"skipped {ex_id}: {msg}", file=sys.stderr)
    print(f"evaluated {summary.count} utterances: mean SI-SDRi "
          f"{summary.mean_si_sdri_db:.2f} dB, mean SDRi {summary.mean_sdri_db:.2f} dB")
    return 0


def cmd_profile(args) -> int:
    seed = _resolve_seed(args, {})
    out = Path(args.out)
    pipeline = separation.build_pipeline(Checkpoint.load(args.checkpoint))
    if args.audio:
        audio = read_wav(args.audio)
    else:
        pair = [synth_voice(args.seconds, seed=seed * 7 + i) for i in range(2)]
        audio = simulate_mixture(pair, [0.0, 0.0], peak_normalize=True).mixture
    report = evaluation.profile_streaming(pipeline, args.chunk_ms, audio)
    out.mkdir(parents=True, exist_ok=True)
    (out / "profile.json").write_text(report.to_json(), encoding="utf-8")
    _echo_config(out, "profile", seed, {"chunk_ms": args.chunk_ms,
                                        "checkpoint": str(args.checkpoint)})
    print(f"RTF {report.rtf:.3f}, ideal latency {report.ideal_latency_ms:.1f} ms, "
          f"measured latency {report.measured_latency_ms:.1f} ms "
          f"({report.macs_g_per_s:.2f} G-MACs/s)")
    return 0


def cmd_mi_check(args) -> int:
    seed = _resolve_seed(args, {})
    rng = np.random.default_rng(seed)
    reports = []
    all_hold = True
    max_chain = 0.0
    for _ in range(args.joints):
        sizes = rng.integers(2, args.max_alphabet + 1, size=3)
        joint = evaluation.random_ci_joint(int(sizes[0]), int(sizes[1]), int(sizes[2]), rng)
        rep = evaluation.mi_bound_check(joint)
        all_hold &= rep.holds
        max_chain = max(max_chain, rep.chain_abs_err)
        reports.append(rep)
    payload = {
        "joints": args.joints,
        "all_bounds_hold": bool(all_hold),
        "max_chain_rule_error_bits": max_chain,
        "min_bound_margin_bits": min(r.lhs_bits - r.rhs_bits for r in reports),
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "mi_report.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n",
                                        encoding="utf-8")
    _echo_config(out, "mi-check", seed, {"joints": args.joints,
                                         "max_alphabet": args.max_alphabet})
    print(f"checked {args.joints} joints: bounds hold={all_hold}, "
          f"max chain-rule error {max_chain:.3e} bits")
    return 0 if all_hold else 1


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser, config: bool = False) -> None:
    p.add_argument("--seed", type=int, default=None,
                   help="RNG seed (falls back to config seed, then $CSP_SEED, then 0)")
    p.add_argument("--workers", type=int, default=1, help="worker parallelism bound")
    if config:
        p.add_argument("--config", default=None, help="TOML or JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted-path config override, e.g. --set loss.gamma=0")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cspsep",
        description="Pretrain a causal frontend on speech mixtures, train a causal "
                    "separator on its predictive patterns, evaluate, and profile.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate two-speaker mixtures")
    p.add_argument("--out", required=True)
    p.add_argument("--synthetic", type=int, default=0,
                   help="generate this many synthetic single-speaker sources")
    p.add_argument("--sources", default=None, help="directory of single-speaker wavs")
    p.add_argument("--manifest", default=None,
                   help="manifest of single-speaker utterances to mix")
    p.add_argument("--count", type=int, default=0, help="number of mixtures")
    p.add_argument("--duration", type=float, default=4.0,
                   help="duration of synthetic sources (s)")
    p.add_argument("--gain-low", type=float, default=-2.5)
    p.add_argument("--gain-high", type=float, default=2.5)
    p.add_argument("--no-peak-normalize", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("pretrain", help="self-supervised frontend pretraining")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_common(p, config=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("cluster-teacher", help="fit teacher centroids for distillation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output .npy centroid file")
    p.add_argument("--clusters", type=int, default=pretext.DEFAULT_CLUSTERS)
    _add_common(p)
    p.set_defaults(func=cmd_cluster_teacher)

    p = sub.add_parser("train-sep", help="train a causal separator (frontend frozen)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frontend", default=None, help="pretrained frontend checkpoint")
    _add_common(p, config=True)
    p.set_defaults(func=cmd_train_sep)

    p = sub.add_parser("eval", help="evaluate a separator checkpoint on a labeled set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--histogram", action="store_true", help="also write the SI-SDRi histogram")
    p.add_argument("--bin-width", type=float, default=1.0)
    p.add_argument("--write-audio", action="store_true",
                   help="write separated wavs as {id}_spk{i}.wav")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile", help="streaming RTF/latency measurement")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--chunk-ms", type=float, default=20.0)
    p.add_argument("--audio", default=None, help="wav to stream (default: synthetic mixture)")
    p.add_argument("--seconds", type=float, default=2.0)
    _add_common(p)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("mi-check", help="verify the discrete information bounds")
    p.add_argument("--joints", type=int, default=100)
    p.add_argument("--max-alphabet", type=int, default=8)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_mi_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, DataError, TrainingError, CheckpointError,
            ValueError, OSError) as exc:
        line = json.dumps({"error": type(exc).__name__, "message": str(exc)})
        print(line, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

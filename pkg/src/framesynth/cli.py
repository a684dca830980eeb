"""Command-line surface: data generation, training, synthesis, evaluation,
gradient checking and attention-map dumps.

Exit codes: 0 success, 2 usage (bad flags/arguments/config keys), 3 I/O
(missing or malformed files), 4 numeric failure (divergence, gradient
mismatch).

Training runs are driven by an INI-style config with [model], [train] and
[data] sections; unknown keys are rejected and the fully resolved config is
echoed into the run directory. Defaults are listed in DEFAULTS below.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys

import numpy as np

from . import engine, metrics, posenc, training
from .model import (ModelConfig, SynthesisRequest, build_parameters, decode,
                    embed, encode, forward, load_checkpoint)
from .synthdata import (FrameSequence, generate, make_specs, read_frames,
                        read_manifest, write_frames, write_manifest,
                        write_ppm_gray)
from .training import OptimConfig, TrainSettings, train


class UsageError(ValueError):
    pass


DEFAULTS = {
    "model": {
        "preset": "desk",         # desk | micro | reference
        "posenc": "",             # override: per_layer | once | off
        "residual": "",           # override: true | false
        "heads": "",              # override: head count
        "layers": "",             # override: encoder/decoder depth
        "ff_layers": "",          # override: 1 | 2
    },
    "train": {
        "steps": "500",
        "seed": "0",
        "lr": "1e-4",
        "decay_rate": "0.95",
        "decay_every": "20000",
        "stepwise_decay": "false",
        "mode": "extrapolate",    # extrapolate | interpolate
        "targets": "1",
        "loss": "mse",            # mse | l2
        "batch": "1",
        "dtype": "float32",
        "checkpoint_every": "0",
        "metrics_every": "0",
    },
    "data": {
        "manifest": "",           # required: training sequences
        "val_manifest": "",       # optional: validation sequences
    },
}


def _parse_bool(text: str, key: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise UsageError(f"{key}: expected a boolean, got {text!r}")


def load_run_config(path: str):
    """Parse and validate a run config; returns (ModelConfig, TrainSettings,
    data dict, resolved-text)."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.read(path)
    resolved = {s: dict(DEFAULTS[s]) for s in DEFAULTS}
    for section in parser.sections():
        if section not in DEFAULTS:
            raise UsageError(f"unknown config section [{section}]")
        for key, value in parser.items(section):
            if key not in DEFAULTS[section]:
                raise UsageError(f"unknown config key {key!r} in [{section}]")
            resolved[section][key] = value

    m = resolved["model"]
    config = ModelConfig.preset(m["preset"])
    overrides = {}
    if m["posenc"]:
        overrides["posenc_mode"] = m["posenc"]
    if m["residual"]:
        overrides["residual"] = _parse_bool(m["residual"], "model.residual")
    for key, attr in (("heads", "heads"), ("layers", "layers"),
                      ("ff_layers", "ff_layers")):
        if m[key]:
            overrides[attr] = int(m[key])
    if overrides:
        config = ModelConfig(**{**config.__dict__, **overrides})

    t = resolved["train"]
    settings = TrainSettings(
        steps=int(t["steps"]), seed=int(t["seed"]), mode=t["mode"],
        target_count=int(t["targets"]), loss=t["loss"], batch=int(t["batch"]),
        dtype=t["dtype"],
        optim=OptimConfig(base_lr=float(t["lr"]),
                          decay_rate=float(t["decay_rate"]),
                          decay_every=int(t["decay_every"]),
                          stepwise_decay=_parse_bool(t["stepwise_decay"],
                                                     "train.stepwise_decay")),
        checkpoint_every=int(t["checkpoint_every"]),
        metrics_every=int(t["metrics_every"]))

    lines = []
    for section in ("model", "train", "data"):
        lines.append(f"[{section}]")
        for key, value in resolved[section].items():
            lines.append(f"{key} = {value}")
        lines.append("")
    return config, settings, resolved["data"], "\n".join(lines)


def _load_dataset(manifest_path: str):
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    root = os.path.dirname(os.path.abspath(manifest_path))
    names = read_manifest(manifest_path)
    if not names:
        raise UsageError(f"manifest {manifest_path} lists no sequences")
    return [read_frames(os.path.join(root, name)) for name in names]


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    if args.count <= 0:
        raise UsageError("count must be positive")
    specs = make_specs(args.preset, args.count, args.seed, canvas=args.canvas)
    os.makedirs(args.out, exist_ok=True)
    names = []
    for i, spec in enumerate(specs):
        name = f"seq_{i:04d}"
        write_frames(generate(spec), os.path.join(args.out, name))
        names.append(name)
    write_manifest(os.path.join(args.out, "manifest.txt"), names)
    print(f"wrote {len(names)} sequences to {args.out}")
    return 0


def cmd_train(args) -> int:
    config, settings, data, resolved = load_run_config(args.config)
    if not data["manifest"]:
        raise UsageError("config [data] manifest is required")
    dataset = _load_dataset(data["manifest"])
    val = _load_dataset(data["val_manifest"]) if data["val_manifest"] else None
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "resolved_config.ini"), "w") as fh:
        fh.write(resolved)
    report = train(config, dataset, settings, out_dir=args.out, val_dataset=val)
    final = report.losses[-1] if report.losses else float("nan")
    print(f"trained {settings.steps} steps; final loss {final:.6g}; "
          f"checkpoint {report.final_checkpoint}")
    return 0


def cmd_synth(args) -> int:
    if args.mode == "extrapolate" and not 1 <= args.targets <= 3:
        raise UsageError(f"targets must be 1..3, got {args.targets}")
    engine.set_default_dtype(np.float32)
    config, store = load_checkpoint(args.checkpoint)
    seq = read_frames(args.input_dir)
    n_in = 4 if args.mode == "extrapolate" else 6
    if seq.frames.shape[0] != n_in:
        raise UsageError(
            f"{args.mode} needs exactly {n_in} input frames, directory has "
            f"{seq.frames.shape[0]}")
    request = SynthesisRequest(
        mode=args.mode, frames=seq.frames.astype(np.float32),
        positions=seq.positions,
        target_count=args.targets if args.mode == "extrapolate" else 3)
    predicted = forward(request, store, config)
    write_frames(predicted, args.out)
    print(f"wrote {len(predicted)} frames to {args.out} "
          f"(positions {predicted.positions})")
    return 0


def cmd_eval(args) -> int:
    pred = read_frames(args.pred_dir)
    truth = read_frames(args.truth_dir)
    if pred.frames.shape != truth.frames.shape:
        raise UsageError(
            f"prediction {pred.frames.shape} vs truth {truth.frames.shape}")
    out_dir = args.out or args.pred_dir
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    psnrs, ssims = [], []
    for i in range(len(pred)):
        s = metrics.score(pred.frames[i], truth.frames[i])
        psnrs.append(s.psnr_db)
        ssims.append(s.ssim)
        heat, lo, hi = metrics.residual_map(pred.frames[i], truth.frames[i])
        write_ppm_gray(os.path.join(out_dir, f"residual_{i:04d}.ppm"), heat)
        lines.append(f"frame {i} psnr {s.psnr_db:.4f} ssim {s.ssim:.6f} "
                     f"residual_min {lo:.1f} residual_max {hi:.1f}")
    mean_psnr = float(np.mean(psnrs))
    mean_ssim = float(np.mean(ssims))
    lines.append(f"mean psnr {mean_psnr:.4f} ssim {mean_ssim:.6f}")
    with open(os.path.join(out_dir, "scores.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def cmd_gradcheck(args) -> int:
    config = ModelConfig.preset(args.preset)
    result = training.gradcheck(config=config, seed=args.seed)
    print(f"gradcheck: max relative error {result.max_rel_error:.3e} "
          f"at {result.worst_parameter} "
          f"({result.coords_checked} coordinates, {result.coords_skipped} near "
          f"a rectifier kink resampled)")
    return 0


def cmd_dump_attention(args) -> int:
    if args.queries < 1:
        raise UsageError("queries must be >= 1")
    engine.set_default_dtype(np.float32)
    config, store = load_checkpoint(args.checkpoint)
    if not 0 <= args.layer < config.layers:
        raise UsageError(f"layer must be in 0..{config.layers - 1}")
    if not 0 <= args.head < config.heads:
        raise UsageError(f"head must be in 0..{config.heads - 1}")
    seq = read_frames(args.input_dir)
    frames = engine.tensor(seq.frames.astype(np.float32))
    positions = [float(p) for p in seq.positions]

    emb = embed(frames, store, config)
    z = posenc.add_positional(emb, positions) if config.posenc_mode == "once" else emb
    sink = {"encoder": [], "decoder_self": [], "decoder_cross": []}
    memory = encode(z, positions, store, config, sink=sink)
    last = engine.narrow(emb, 0, emb.shape[0] - 1, 1)
    queries = engine.concat([last] * args.queries, axis=0) if args.queries > 1 else last
    qpos = [positions[-1] + k for k in range(1, args.queries + 1)]
    if config.posenc_mode == "once":
        queries = posenc.add_positional(queries, qpos)
    decode(queries, qpos, memory, store, config, sink=sink)

    maps = sink["decoder_cross"][args.layer][args.head].values
    os.makedirs(args.out, exist_ok=True)
    count = 0
    for qi in range(maps.shape[0]):
        for kj in range(maps.shape[1]):
            name = f"attention_l{args.layer}_h{args.head}_q{qi}_k{kj}.ppm"
            write_ppm_gray(os.path.join(args.out, name),
                           maps[qi, kj] * 255.0)
            count += 1
    print(f"wrote {count} attention maps to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="framesynth",
        description="Video frame extrapolation/interpolation with "
                    "convolutional self-attention.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a moving-shapes dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--preset", default="squares",
                   choices=["squares", "direction", "interp"],
                   help="scene family to sample")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--count", type=int, required=True,
                   help="number of sequences")
    p.add_argument("--canvas", type=int, default=16, help="frame side length")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True, help="INI run configuration")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="synthesize frames from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input-dir", required=True,
                   help="directory of input frames (PPM + meta.txt)")
    p.add_argument("--mode", default="extrapolate",
                   choices=["extrapolate", "interpolate"])
    p.add_argument("--targets", type=int, default=1,
                   help="frames to extrapolate (1..3)")
    p.add_argument("--out", required=True, help="output frame directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--truth-dir", required=True)
    p.add_argument("--out", default=None,
                   help="where to write scores and residual maps "
                        "(default: pred dir)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of all gradients")
    p.add_argument("--preset", default="micro",
                   choices=["micro", "desk", "reference"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-attention",
                       help="write decoder cross-attention maps as PPM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input-dir", required=True)
    p.add_argument("--layer", type=int, default=0, help="decoder layer index")
    p.add_argument("--head", type=int, default=0, help="attention head index")
    p.add_argument("--queries", type=int, default=1,
                   help="number of query frames")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_attention)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, NotADirectoryError, PermissionError, OSError,
            ValueError) as exc:
        # ValueError here means a malformed file or container, not bad flags
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (training.TrainingDiverged, training.GradcheckFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry points: pretrain, reconstruct, eval, gen-data.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric abort.
Commands refuse to overwrite existing outputs unless --force is given.
"""

from __future__ import annotations

import argparse
import datetime
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, config_hash, default_config, parse_config
from .dataio import (
    SequenceStore,
    gen_synthetic,
    load_checkpoint,
    read_frame,
    write_frame,
    write_store,
)
from .errors import ConfigError, DataError, NumericsError
from .evalprop import PropagationConfig, evaluate_sequence, write_results
from .masking import sample_mask
from .model import decode, encode, init_params, patchify, unpatchify
from .tensor import Tensor, no_grad
from .trainer import Trainer

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _utcnow() -> str:
    return datetime.datetime.now(datetime.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _refuse_existing(path: Path, force: bool, kind: str) -> None:
    if force:
        return
    if path.is_dir() and any(path.iterdir()):
        raise ConfigError(f"{kind} {path} exists and is not empty (use --force to overwrite)")
    if path.is_file():
        raise ConfigError(f"{kind} {path} already exists (use --force to overwrite)")


def _load_run_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text)


def cmd_pretrain(args) -> int:
    run_cfg = _load_run_config(args.config)
    out = Path(args.out)
    _refuse_existing(out, args.force, "output directory")
    store = SequenceStore.open(args.data)
    resume = load_checkpoint(args.resume) if args.resume else None
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": run_cfg.text,
        "config_hash": config_hash(run_cfg.text),
        "seed": run_cfg.train.seed,
        "started_at": _utcnow(),
        "outputs": ["loss.csv", "ckpt_final.vmc"],
    }
    trainer = Trainer(
        store, run_cfg.train, run_cfg.encoder, run_cfg.decoder, out, run_cfg.text, resume=resume
    )
    trainer.run()
    manifest["ended_at"] = _utcnow()
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    if not 0.0 <= args.ratio < 1.0:
        raise ConfigError(f"--ratio must be in [0, 1), got {args.ratio}")
    ckpt = load_checkpoint(args.ckpt)
    run_cfg = parse_config(ckpt["config_text"])
    out = Path(args.out)
    _refuse_existing(out, args.force, "output directory")
    out.mkdir(parents=True, exist_ok=True)

    frames = [read_frame(p) for p in args.pair]
    h, w = frames[0].shape[1:]
    if frames[1].shape != frames[0].shape:
        raise DataError(f"frame sizes differ: {frames[0].shape} vs {frames[1].shape}")
    down = run_cfg.encoder.total_downsampling
    if h % down != 0 or w % down != 0:
        raise DataError(f"frame size {h}x{w} not divisible by model downsampling {down}")
    grid_h, grid_w = h // down, w // down
    online = init_params(run_cfg.encoder, run_cfg.decoder, np.random.default_rng(0))
    for name, t in online.items():
        t.data = ckpt["online"][name].astype(t.data.dtype)
    target = {name: Tensor(arr) for name, arr in ckpt["target"].items()}

    rng = np.random.default_rng(args.seed)
    mask = sample_mask(grid_h, grid_w, args.ratio, rng, seed=args.seed)
    patch = run_cfg.decoder.patch_size
    names = ("frame1", "frame2")
    branch = (online, target)
    for i, (frame, pset) in enumerate(zip(frames, branch)):
        x = frame.data[None]
        raw_rows = patchify(x, patch)
        mean = raw_rows.mean(axis=2, keepdims=True)
        std = np.sqrt(raw_rows.var(axis=2, keepdims=True) + 1e-6)
        with no_grad():
            z = encode(Tensor(x), mask, pset, run_cfg.encoder)
            pred = decode(z, mask, pset, run_cfg.decoder).data
        pred = pred * std + mean  # undo per-patch target normalization
        rows = raw_rows.copy()
        masked = mask.masked_flat()
        rows[:, masked, :] = pred[:, masked, :]
        recon = unpatchify(rows, patch, grid_h, grid_w)[0]
        masked_img = raw_rows.copy()
        masked_img[:, masked, :] = 0.5
        write_frame(out / f"{names[i]}_masked.ppm", unpatchify(masked_img, patch, grid_h, grid_w)[0])
        write_frame(out / f"{names[i]}_recon.ppm", recon)
    return EXIT_OK


def cmd_eval(args) -> int:
    if (args.ckpt is None) == (not args.random_init):
        raise ConfigError("exactly one of --ckpt or --random-init is required")
    out = Path(args.out)
    _refuse_existing(out, args.force, "results file")
    store = SequenceStore.open(args.data)
    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt)
        run_cfg = parse_config(ckpt["config_text"])
        params = init_params(run_cfg.encoder, run_cfg.decoder, np.random.default_rng(0))
        for name, t in params.items():
            t.data = ckpt["online"][name].astype(t.data.dtype)
    else:
        run_cfg = _load_run_config(args.config) if args.config else default_config()
        params = init_params(run_cfg.encoder, run_cfg.decoder, np.random.default_rng(args.seed))
    prop = PropagationConfig()
    records = []
    for idx in range(len(store)):
        name = store.sequences[idx][0]
        if not store.has_labels(idx):
            raise DataError(f"sequence {name} has no label maps")
        frames = [store.frame(idx, t).data for t in range(store.num_frames(idx))]
        labels = [store.labels(idx, t) for t in range(store.num_frames(idx))]
        rec = evaluate_sequence(frames, labels, params, run_cfg.encoder, prop)
        records.append({"name": name, **rec})
    out.parent.mkdir(parents=True, exist_ok=True)
    write_results(out, records)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = default_config()
    patch = cfg.decoder.patch_size
    if args.size % patch != 0:
        raise ConfigError(f"--size {args.size} not divisible by patch size {patch}")
    out = Path(args.out)
    _refuse_existing(out, args.force, "output directory")
    seqs = gen_synthetic(args.seed, args.sequences, args.frames, args.size)
    write_store(out, seqs)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="convmvm", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    pt = sub.add_parser("pretrain", help="run masked video pretraining")
    pt.add_argument("--config", required=True)
    pt.add_argument("--data", required=True)
    pt.add_argument("--out", required=True)
    pt.add_argument("--resume", default=None)
    pt.add_argument("--force", action="store_true")
    pt.set_defaults(fn=cmd_pretrain)

    rc = sub.add_parser("reconstruct", help="write masked inputs and reconstructions for a frame pair")
    rc.add_argument("--ckpt", required=True)
    rc.add_argument("--pair", nargs=2, required=True, metavar=("F1", "F2"))
    rc.add_argument("--ratio", type=float, required=True)
    rc.add_argument("--seed", type=int, default=0)
    rc.add_argument("--out", required=True)
    rc.add_argument("--force", action="store_true")
    rc.set_defaults(fn=cmd_reconstruct)

    ev = sub.add_parser("eval", help="label-propagation benchmark over frozen features")
    ev.add_argument("--ckpt", default=None)
    ev.add_argument("--random-init", action="store_true")
    ev.add_argument("--config", default=None, help="model config for --random-init (default: desk config)")
    ev.add_argument("--seed", type=int, default=0, help="init seed for --random-init")
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--force", action="store_true")
    ev.set_defaults(fn=cmd_eval)

    gd = sub.add_parser("gen-data", help="generate a synthetic sequence store")
    gd.add_argument("--seed", type=int, default=0)
    gd.add_argument("--sequences", type=int, default=16)
    gd.add_argument("--frames", type=int, default=8)
    gd.add_argument("--size", type=int, default=32)
    gd.add_argument("--out", required=True)
    gd.add_argument("--force", action="store_true")
    gd.set_defaults(fn=cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericsError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

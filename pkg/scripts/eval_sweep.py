"""Sweep eval-protocol knobs over the pretrained checkpoint bank."""

import sys
from pathlib import Path

import numpy as np

from convmvm.config import parse_config
from convmvm.dataio import gen_synthetic, load_checkpoint
from convmvm.evalprop import PropagationConfig, evaluate_sequence
from convmvm.model import DecoderConfig, EncoderConfig, init_params

ENC = EncoderConfig()
DEC = DecoderConfig()
ROOT = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("/tmp/repq_bank")
SEEDS = [int(s) for s in sys.argv[2:]] or [0]


def params_from(path, table="online"):
    ck = load_checkpoint(path)
    cfg = parse_config(ck["config_text"])
    p = init_params(cfg.encoder, cfg.decoder, np.random.default_rng(0))
    for name, t in p.items():
        t.data = ck[table][name].astype(t.data.dtype)
    return p


def mean_iou(params, eval_seqs, prop):
    vals = []
    for seq in eval_seqs:
        frames = [seq.frames[t] for t in range(seq.frames.shape[0])]
        labels = [seq.labels[t] for t in range(seq.labels.shape[0])]
        vals.append(evaluate_sequence(frames, labels, params, ENC, prop)["mean_iou"])
    return float(np.mean(vals))


def main():
    protos = {
        "base(stage2,64px,k7)": (64, PropagationConfig(), "online"),
        "stage1,32px": (32, PropagationConfig(feature_stage=1), "online"),
        "t0.2": (64, PropagationConfig(temperature=0.2), "online"),
        "ctx1": (64, PropagationConfig(context_frames=1), "online"),
        "base,target-params": (64, PropagationConfig(), "target"),
        "t0.2,target-params": (64, PropagationConfig(temperature=0.2), "target"),
    }
    agg = {name: [] for name in protos}
    for seed in SEEDS:
        banks = {}
        for table in ("online", "target"):
            banks[("g1", table)] = params_from(ROOT / f"run_s{seed}_g1" / "ckpt_final.vmc", table)
            banks[("g0", table)] = params_from(ROOT / f"run_s{seed}_g0" / "ckpt_final.vmc", table)
        rand = init_params(ENC, DEC, np.random.default_rng(seed))
        cache = {}
        for name, (size, prop, table) in protos.items():
            if size not in cache:
                cache[size] = gen_synthetic(seed=900 + seed, num_sequences=16, frames_per_seq=8, size=size)
            seqs = cache[size]
            r = {
                "rand": mean_iou(rand, seqs, prop),
                "g1": mean_iou(banks[("g1", table)], seqs, prop),
                "g0": mean_iou(banks[("g0", table)], seqs, prop),
            }
            agg[name].append(r)
            print(
                f"seed{seed} {name:22s} rand={r['rand']:.4f} g1={r['g1']:.4f} g0={r['g0']:.4f} "
                f"gap1={100 * (r['g1'] - r['rand']):5.1f} gap0={100 * (r['g0'] - r['rand']):5.1f} "
                f"d(g1-g0)={100 * (r['g1'] - r['g0']):+.2f}",
                flush=True,
            )
    print("\n=== 3-seed aggregates ===")
    for name, rs in agg.items():
        if not rs:
            continue
        min_gap1 = min(100 * (r["g1"] - r["rand"]) for r in rs)
        mean_d = np.mean([100 * (r["g1"] - r["g0"]) for r in rs])
        print(f"{name:22s} min_gap1={min_gap1:5.1f} mean_d(g1-g0)={mean_d:+.2f}")


if __name__ == "__main__":
    main()

"""Pretrain g0/g1 for several seeds once; checkpoints reused by eval sweeps."""

import sys
import time
from pathlib import Path

from convmvm.config import render_config
from convmvm.dataio import SequenceStore, gen_synthetic, write_store
from convmvm.model import DecoderConfig, EncoderConfig
from convmvm.trainer import Trainer, TrainConfig

ENC = EncoderConfig()
DEC = DecoderConfig()

ROOT = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("/tmp/repq_bank")
SEEDS = [int(s) for s in sys.argv[2:]] or [0, 1, 2]

for seed in SEEDS:
    train_root = ROOT / f"train{seed}"
    if not train_root.exists():
        write_store(train_root, gen_synthetic(seed=100 + seed, num_sequences=64, frames_per_seq=4, size=32))
    store = SequenceStore.open(train_root)
    for gamma in (1.0, 0.0):
        out = ROOT / f"run_s{seed}_g{int(gamma)}"
        if (out / "ckpt_final.vmc").exists():
            print(f"skip {out}", flush=True)
            continue
        cfg = TrainConfig(
            epochs=50, warmup_epochs=5, batch_size=16, pairs_per_epoch=64,
            seed=seed, gamma=gamma, momentum=0.95,
        )
        t0 = time.time()
        Trainer(store, cfg, ENC, DEC, out, render_config(cfg, ENC, DEC)).run()
        print(f"{out} done in {time.time() - t0:.0f}s", flush=True)
print("all done", flush=True)

"""Probe longer pretraining + longer eval sequences on the problem seed."""

import sys
import time
from pathlib import Path

import numpy as np

from convmvm.config import render_config
from convmvm.dataio import SequenceStore, gen_synthetic, write_store
from convmvm.evalprop import PropagationConfig, evaluate_sequence
from convmvm.model import DecoderConfig, EncoderConfig, init_params
from convmvm.trainer import Trainer, TrainConfig

ENC = EncoderConfig()
DEC = DecoderConfig()
ROOT = Path("/tmp/repq_bank")


def mean_iou(params, eval_seqs, prop):
    vals = []
    for seq in eval_seqs:
        frames = [seq.frames[t] for t in range(seq.frames.shape[0])]
        labels = [seq.labels[t] for t in range(seq.labels.shape[0])]
        vals.append(evaluate_sequence(frames, labels, params, ENC, prop)["mean_iou"])
    return float(np.mean(vals))


def pretrain(seed, gamma, ppe, out):
    if (out / "ckpt_final.vmc").exists():
        from convmvm.dataio import load_checkpoint
        from convmvm.config import parse_config

        ck = load_checkpoint(out / "ckpt_final.vmc")
        p = init_params(ENC, DEC, np.random.default_rng(0))
        for name, t in p.items():
            t.data = ck["online"][name].astype(t.data.dtype)
        return p
    store = SequenceStore.open(ROOT / f"train{seed}")
    cfg = TrainConfig(epochs=50, warmup_epochs=5, batch_size=16, pairs_per_epoch=ppe,
                      seed=seed, gamma=gamma, momentum=0.95)
    t0 = time.time()
    tr = Trainer(store, cfg, ENC, DEC, out, render_config(cfg, ENC, DEC))
    tr.run()
    print(f"  {out.name}: trained in {time.time() - t0:.0f}s", flush=True)
    return tr.dual.online


seed = 2
prop = PropagationConfig()
evals = {
    8: gen_synthetic(seed=900 + seed, num_sequences=16, frames_per_seq=8, size=64),
    14: gen_synthetic(seed=900 + seed, num_sequences=16, frames_per_seq=14, size=64),
}
rand = init_params(ENC, DEC, np.random.default_rng(seed))
for frames, seqs in evals.items():
    print(f"frames={frames} rand={mean_iou(rand, seqs, prop):.4f}", flush=True)

for ppe in (128,):
    for gamma in (1.0, 0.0):
        p = pretrain(seed, gamma, ppe, ROOT / f"run_s{seed}_g{int(gamma)}_ppe{ppe}")
        for frames, seqs in evals.items():
            print(f"ppe={ppe} g{int(gamma)} frames={frames}: iou={mean_iou(p, seqs, prop):.4f}", flush=True)

# also re-check the existing 200-step runs on the longer eval
from convmvm.dataio import load_checkpoint
from convmvm.config import parse_config

for gamma in (1, 0):
    ck = load_checkpoint(ROOT / f"run_s{seed}_g{gamma}" / "ckpt_final.vmc")
    p = init_params(ENC, DEC, np.random.default_rng(0))
    for name, t in p.items():
        t.data = ck["online"][name].astype(t.data.dtype)
    print(f"ppe=64 g{gamma} frames=14: iou={mean_iou(p, evals[14], prop):.4f}", flush=True)

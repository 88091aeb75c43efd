"""Protocol probe for the representation-quality acceptance criteria."""

import sys
import tempfile
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


def pretrain(store, seed, gamma, workdir, epochs=50, momentum=0.95):
    cfg = TrainConfig(
        epochs=epochs,
        warmup_epochs=5,
        batch_size=16,
        pairs_per_epoch=64,
        seed=seed,
        gamma=gamma,
        momentum=momentum,
    )
    tr = Trainer(store, cfg, ENC, DEC, workdir, render_config(cfg, ENC, DEC))
    tr.run()
    return tr.dual.online


def eval_params(params, eval_seqs, prop):
    means = []
    for seq in eval_seqs:
        frames = [seq.frames[t] for t in range(seq.frames.shape[0])]
        labels = [seq.labels[t] for t in range(seq.labels.shape[0])]
        rec = evaluate_sequence(frames, labels, params, ENC, prop)
        means.append(rec["mean_iou"])
    return float(np.mean(means))


def run_seed(seed, tmp, eval_size=64, eval_frames=8, epochs=50, momentum=0.95, stage=None):
    t0 = time.time()
    train_root = tmp / f"train{seed}"
    if not train_root.exists():
        write_store(train_root, gen_synthetic(seed=100 + seed, num_sequences=64, frames_per_seq=4, size=32))
    store = SequenceStore.open(train_root)
    eval_seqs = gen_synthetic(seed=900 + seed, num_sequences=16, frames_per_seq=eval_frames, size=eval_size)
    prop = PropagationConfig(feature_stage=stage)

    rand_params = init_params(ENC, DEC, np.random.default_rng(seed))
    iou_rand = eval_params(rand_params, eval_seqs, prop)
    p1 = pretrain(store, seed, 1.0, tmp / f"g1_{seed}", epochs, momentum)
    iou_g1 = eval_params(p1, eval_seqs, prop)
    p0 = pretrain(store, seed, 0.0, tmp / f"g0_{seed}", epochs, momentum)
    iou_g0 = eval_params(p0, eval_seqs, prop)
    print(
        f"seed {seed}: rand={iou_rand:.4f} g1={iou_g1:.4f} g0={iou_g0:.4f} "
        f"gap_g1={100 * (iou_g1 - iou_rand):.1f}pts gap_g0={100 * (iou_g0 - iou_rand):.1f}pts "
        f"({time.time() - t0:.0f}s)",
        flush=True,
    )
    return iou_rand, iou_g1, iou_g0


if __name__ == "__main__":
    seeds = [int(s) for s in sys.argv[1:]] or [0]
    tmp = Path(tempfile.mkdtemp(prefix="repq_"))
    print("workdir", tmp, flush=True)
    for s in seeds:
        run_seed(s, tmp)

"""Label propagation over frozen encoder features, scored by IoU.

Frames run through the dense export of the encoder (pretrained weights behave
identically to the sparse all-visible forward). Per-site feature vectors are
L2-normalized; a target frame's sites match against a context window of the
first frame plus the most recent predictions, propagating soft label
distributions through a temperature softmax over the top-k affinities. Hard
labels are the argmax (ties resolve to the lowest label id) and are upsampled
nearest-neighbor back to frame resolution for scoring.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .model import EncoderConfig, encode_dense
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class PropagationConfig:
    k: int = 7
    temperature: float = 0.07
    context_frames: int = 3
    feature_stage: int | None = None  # None = final stage

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.context_frames < 0:
            raise ValueError("context_frames must be >= 0")


def extract_features(
    frame: np.ndarray | Tensor,
    params: dict[str, Tensor],
    enc_cfg: EncoderConfig,
    stage: int | None = None,
) -> np.ndarray:
    """(3,H,W) frame -> (C,h,w) unit-norm per-site features from the chosen stage."""
    data = frame.data if isinstance(frame, Tensor) else np.asarray(frame)
    if data.ndim == 3:
        data = data[None]
    with no_grad():
        feats = encode_dense(Tensor(data), params, enc_cfg, upto_stage=stage).data[0]
    norms = np.sqrt((feats * feats).sum(axis=0, keepdims=True))
    return feats / np.maximum(norms, 1e-12)


def _downsample_labels(labels: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest sampling at cell centers."""
    fh, fw = labels.shape[0] // h, labels.shape[1] // w
    return labels[fh // 2 :: fh, fw // 2 :: fw][:h, :w]


def _upsample_labels(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    fh, fw = out_h // labels.shape[0], out_w // labels.shape[1]
    return np.repeat(np.repeat(labels, fh, axis=0), fw, axis=1)


def propagate_labels(
    features: list[np.ndarray],
    first_labels: np.ndarray,
    cfg: PropagationConfig,
) -> list[np.ndarray]:
    """Propagate frame-0 labels across the video; returns per-frame label maps.

    features: per-frame (C,h,w) unit-norm maps; first_labels: (H,W) int map at
    frame resolution. Output maps are at frame resolution.
    """
    if len(features) < 2:
        raise DataError("propagation needs at least 2 frames")
    # Normalize defensively: similarity must see unit vectors no matter how
    # the caller scaled the features (a no-op for already-unit inputs).
    features = [f / np.maximum(np.sqrt((f * f).sum(axis=0, keepdims=True)), 1e-12) for f in features]
    c, h, w = features[0].shape
    out_h, out_w = first_labels.shape
    num_labels = int(first_labels.max()) + 1
    lab0 = _downsample_labels(first_labels, h, w)
    dist0 = np.zeros((h * w, num_labels))
    dist0[np.arange(h * w), lab0.reshape(-1)] = 1.0

    results = [first_labels.copy()]
    history: list[tuple[np.ndarray, np.ndarray]] = []  # (feats (hw,C), dists (hw,L))
    f0 = features[0].reshape(c, -1).T
    for t in range(1, len(features)):
        ctx_feats = [f0] + [f for f, _ in history[-cfg.context_frames :]]
        ctx_dists = [dist0] + [d for _, d in history[-cfg.context_frames :]]
        feats_ctx = np.concatenate(ctx_feats, axis=0)  # (M, C)
        dists_ctx = np.concatenate(ctx_dists, axis=0)  # (M, L)
        ft = features[t].reshape(c, -1).T  # (hw, C)
        sim = ft @ feats_ctx.T  # cosine: inputs are unit-norm
        k = min(cfg.k, sim.shape[1])
        topk = np.argpartition(-sim, k - 1, axis=1)[:, :k]
        rows = np.arange(sim.shape[0])[:, None]
        vals = sim[rows, topk] / cfg.temperature
        vals = vals - vals.max(axis=1, keepdims=True)
        weights = np.exp(vals)
        weights /= weights.sum(axis=1, keepdims=True)
        dist_t = (weights[:, :, None] * dists_ctx[topk]).sum(axis=1)  # (hw, L)
        hard = dist_t.argmax(axis=1).reshape(h, w)  # argmax tie -> lowest label id
        results.append(_upsample_labels(hard.astype(first_labels.dtype), out_h, out_w))
        history.append((ft, dist_t))
    return results


def score_iou(pred: np.ndarray, truth: np.ndarray) -> tuple[dict[int, float], float]:
    """Per-label IoU for nonzero labels; mean over labels present in truth."""
    if pred.shape != truth.shape:
        raise DataError(f"score_iou: shapes {pred.shape} vs {truth.shape}")
    labels = sorted(int(v) for v in np.unique(truth) if v != 0)
    if not labels:
        raise DataError("score_iou: ground truth has no nonzero labels")
    per = {}
    for k in labels:
        inter = ((pred == k) & (truth == k)).sum()
        union = ((pred == k) | (truth == k)).sum()
        per[k] = float(inter / union) if union else 0.0
    return per, float(np.mean(list(per.values())))


def evaluate_sequence(
    frames: list[np.ndarray],
    labels: list[np.ndarray],
    params: dict[str, Tensor],
    enc_cfg: EncoderConfig,
    cfg: PropagationConfig,
) -> dict:
    feats = [extract_features(f, params, enc_cfg, cfg.feature_stage) for f in frames]
    preds = propagate_labels(feats, labels[0], cfg)
    per_label_acc: dict[int, list[float]] = {}
    frame_means = []
    for t in range(1, len(frames)):
        per, mean = score_iou(preds[t], labels[t])
        frame_means.append(mean)
        for k, v in per.items():
            per_label_acc.setdefault(k, []).append(v)
    return {
        "per_label_iou": {str(k): float(np.mean(v)) for k, v in sorted(per_label_acc.items())},
        "mean_iou": float(np.mean(frame_means)),
    }


def write_results(path, records: list[dict]) -> None:
    """JSON-lines: one record per sequence plus a trailing dataset summary."""
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
        mean = float(np.mean([r["mean_iou"] for r in records])) if records else 0.0
        f.write(json.dumps({"summary": True, "mean_iou": mean, "sequences": len(records)}, sort_keys=True) + "\n")

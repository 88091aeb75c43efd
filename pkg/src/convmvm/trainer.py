"""Online/target dual-network training loop.

One step: draw a batch of frame pairs sharing a single mask, push frame 1
through the online encoder/decoder and frame 2 through the EMA target
encoder/decoder, form the three-term objective, backprop through the online
branch only, take an AdamW step, then let the target chase the updated online
weights by exponential moving average. Deterministic end to end for a fixed
seed: one Generator drives initialization, sampling, masking, and
augmentation in a fixed order, and its state rides along in checkpoints.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataio import SequenceStore, save_checkpoint
from .errors import ConfigError, DataError, NumericsError
from .masking import MaskGrid, asymmetric_pair, sample_mask
from .model import DecoderConfig, EncoderConfig, clone_params, decode, encode, init_params, patchify_targets
from .objective import LossReport, consistency_loss, online_loss, target_loss, total_loss
from .tensor import Tensor, no_grad

AUGMENT_MODES = ("none", "spatial", "color", "spatial+color")
MASKING_MODES = ("symmetric", "asymmetric")
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-3
    batch_size: int = 16
    epochs: int = 100
    warmup_epochs: int = 5
    min_lr: float = 2e-9
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    mask_ratio: float = 0.75
    gamma: float = 1.0
    frame_gap: int = 1
    momentum: float = 0.996
    seed: int = 0
    image_size: int = 32
    pairs_per_epoch: int = 64
    masking: str = "symmetric"
    augment: str = "spatial"
    checkpoint_every: int = 0
    target_grad_to_online: str = "off"

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"need 0 <= warmup_epochs < epochs, got {self.warmup_epochs}/{self.epochs}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError(f"momentum must be in [0, 1], got {self.momentum}")
        if self.masking not in MASKING_MODES:
            raise ConfigError(f"masking must be one of {MASKING_MODES}, got {self.masking!r}")
        if self.masking == "asymmetric" and self.gamma != 0.0:
            raise ConfigError("asymmetric masking requires gamma=0: the consistency loss needs a shared masked set")
        if self.augment not in AUGMENT_MODES:
            raise ConfigError(f"augment must be one of {AUGMENT_MODES}, got {self.augment!r}")
        if self.target_grad_to_online != "off":
            raise ConfigError("target_grad_to_online supports only 'off'")
        if self.batch_size < 1 or self.pairs_per_epoch < 1:
            raise ConfigError("batch_size and pairs_per_epoch must be >= 1")
        if self.frame_gap < 1:
            raise ConfigError(f"frame_gap must be >= 1, got {self.frame_gap}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")

    @property
    def steps_per_epoch(self) -> int:
        return -(-self.pairs_per_epoch // self.batch_size)

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch


@dataclass
class DualParams:
    online: dict[str, Tensor]
    target: dict[str, Tensor]
    momentum: float

    @classmethod
    def create(cls, enc: EncoderConfig, dec: DecoderConfig, momentum: float, rng: np.random.Generator):
        online = init_params(enc, dec, rng)
        return cls(online=online, target=clone_params(online, requires_grad=False), momentum=momentum)

    def zero_grads(self) -> None:
        for t in self.online.values():
            t.zero_grad()


@dataclass(frozen=True)
class AugmentRecord:
    top: int
    left: int
    crop_h: int
    crop_w: int
    flip: bool
    brightness: float = 1.0
    contrast: float = 1.0


@dataclass
class FramePair:
    frame1: np.ndarray  # (3, H, W)
    frame2: np.ndarray
    gap: int
    record: AugmentRecord
    mask: Optional[MaskGrid] = None  # assigned when the batch is assembled
    mask2: Optional[MaskGrid] = None  # only in asymmetric mode


def ema_update(dual: DualParams) -> None:
    """target <- m*target + (1-m)*online, every parameter including norm affine and token."""
    m = dual.momentum
    for name, tgt in dual.target.items():
        src = dual.online[name]
        if tgt.data.shape != src.data.shape:
            raise ConfigError(f"ema_update: shape mismatch for {name}: {tgt.data.shape} vs {src.data.shape}")
        tgt.data = m * tgt.data + (1.0 - m) * src.data


# ---------------------------------------------------------------------------
# Pair sampling and augmentation
# ---------------------------------------------------------------------------


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of (C,H,W), half-pixel centers."""
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def _sample_crop_box(h: int, w: int, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Scale in [0.5, 1] of area, aspect in [3/4, 4/3]; center-crop fallback."""
    area = h * w
    for _ in range(10):
        target = area * rng.uniform(0.5, 1.0)
        aspect = math.exp(rng.uniform(math.log(3 / 4), math.log(4 / 3)))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    side = min(h, w)
    return (h - side) // 2, (w - side) // 2, side, side


def augment_pair(
    f1: np.ndarray,
    f2: np.ndarray,
    rng: np.random.Generator,
    out_size: int,
    mode: str = "spatial",
) -> tuple[np.ndarray, np.ndarray, AugmentRecord]:
    """One crop box and one flip decision, applied identically to both frames."""
    if f1.shape != f2.shape:
        raise DataError(f"augment_pair: frames differ in shape {f1.shape} vs {f2.shape}")
    h, w = f1.shape[1:]
    spatial = mode in ("spatial", "spatial+color")
    color = mode in ("color", "spatial+color")
    if spatial:
        top, left, ch, cw = _sample_crop_box(h, w, rng)
        flip = bool(rng.integers(0, 2))
    else:
        top, left, ch, cw = 0, 0, h, w
        flip = False
    brightness = float(rng.uniform(0.6, 1.4)) if color else 1.0
    contrast = float(rng.uniform(0.6, 1.4)) if color else 1.0
    rec = AugmentRecord(top, left, ch, cw, flip, brightness, contrast)
    return apply_augment(f1, rec, out_size), apply_augment(f2, rec, out_size), rec


def apply_augment(frame: np.ndarray, rec: AugmentRecord, out_size: int) -> np.ndarray:
    out = frame[:, rec.top : rec.top + rec.crop_h, rec.left : rec.left + rec.crop_w]
    out = resize_bilinear(out, out_size, out_size)
    if rec.flip:
        out = out[:, :, ::-1].copy()
    if rec.brightness != 1.0:
        out = np.clip(out * rec.brightness, 0.0, 1.0)
    if rec.contrast != 1.0:
        mean = out.mean()
        out = np.clip((out - mean) * rec.contrast + mean, 0.0, 1.0)
    return out


def sample_pair(
    store: SequenceStore,
    frame_gap: int,
    rng: np.random.Generator,
    out_size: int | None = None,
    augment: str = "none",
) -> FramePair:
    """Uniform sequence, uniform start index, frames (t, t+gap), shared augmentation."""
    valid = [i for i in range(len(store)) if store.num_frames(i) > frame_gap]
    if not valid:
        raise DataError(
            f"no sequence longer than frame gap {frame_gap} "
            f"(skipped all {len(store)} sequences)"
        )
    seq = valid[int(rng.integers(0, len(valid)))]
    t = int(rng.integers(0, store.num_frames(seq) - frame_gap))
    f1 = store.frame(seq, t).data
    f2 = store.frame(seq, t + frame_gap).data
    if out_size is None:
        out_size = f1.shape[1]
    f1, f2, rec = augment_pair(f1, f2, rng, out_size, augment)
    return FramePair(frame1=f1, frame2=f2, gap=frame_gap, record=rec)


# ---------------------------------------------------------------------------
# Schedule and optimizer
# ---------------------------------------------------------------------------


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0, then cosine decay to min_lr at the last step."""
    total = cfg.total_steps
    warm = cfg.warmup_epochs * cfg.steps_per_epoch
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside 0..{total}")
    if step < warm:
        return cfg.lr * step / warm
    if total == warm:
        return cfg.lr
    progress = (step - warm) / (total - warm)
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


def init_opt_state(params: dict[str, Tensor]) -> dict[str, dict]:
    return {
        name: {"t": 0, "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
        for name, p in params.items()
    }


def adamw_update(
    params: dict[str, Tensor],
    opt_state: dict[str, dict],
    lr: float,
    betas: tuple[float, float],
    weight_decay: float,
    eps: float = ADAM_EPS,
) -> None:
    """Bias-corrected AdamW; decoupled decay skips biases, norm affine, and the mask token.

    Decay applies exactly to matrix/kernel weights (ndim >= 2); every
    1-d parameter is a bias, a norm scale/offset, or the mask token.
    """
    b1, b2 = betas
    for name, p in params.items():
        g = p.grad
        if g is None:
            raise NumericsError(f"adamw_update: parameter {name} has no gradient")
        if not np.isfinite(g).all():
            raise NumericsError(f"adamw_update: non-finite gradient in {name}")
        st = opt_state[name]
        st["t"] += 1
        st["m"] = b1 * st["m"] + (1.0 - b1) * g
        st["v"] = b2 * st["v"] + (1.0 - b2) * (g * g)
        mhat = st["m"] / (1.0 - b1 ** st["t"])
        vhat = st["v"] / (1.0 - b2 ** st["t"])
        if weight_decay != 0.0 and p.data.ndim >= 2:
            p.data = p.data * (1.0 - lr * weight_decay)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)


# ---------------------------------------------------------------------------
# One training step
# ---------------------------------------------------------------------------


def train_step(
    dual: DualParams,
    pairs: Sequence[FramePair],
    cfg: TrainConfig,
    enc_cfg: EncoderConfig,
    dec_cfg: DecoderConfig,
    opt_state: dict[str, dict],
    lr: float,
) -> LossReport:
    if not pairs:
        raise ValueError("train_step: empty batch")
    mask = pairs[0].mask
    if mask is None:
        raise ValueError("train_step: pairs carry no mask")
    for p in pairs:
        if p.mask is not mask:
            raise ValueError("train_step: all pairs in a batch must share one MaskGrid")
    mask2 = pairs[0].mask2 if cfg.masking == "asymmetric" else None

    f1 = np.stack([p.frame1 for p in pairs])
    f2 = np.stack([p.frame2 for p in pairs])
    targets1 = patchify_targets(f1, dec_cfg.patch_size)
    targets2 = patchify_targets(f2, dec_cfg.patch_size)

    dual.zero_grads()
    z1 = encode(Tensor(f1), mask, dual.online, enc_cfg)
    o1 = decode(z1, mask, dual.online, dec_cfg)
    with no_grad():
        tgt_mask = mask2 if mask2 is not None else mask
        z2 = encode(Tensor(f2), tgt_mask, dual.target, enc_cfg)
        o2 = decode(z2, tgt_mask, dual.target, dec_cfg)

    l_o = online_loss(targets1, o1, mask)
    l_t = target_loss(targets2, o2, tgt_mask)
    if cfg.masking == "symmetric":
        l_c = consistency_loss(o1, o2, mask)
    else:
        l_c = Tensor(np.asarray(0.0))  # undefined across differing masked sets
    total, report = total_loss(l_o, l_t, l_c, cfg.gamma)
    if not report.finite():
        raise NumericsError(f"non-finite loss: {report}")
    total.backward()
    adamw_update(dual.online, opt_state, lr, cfg.betas, cfg.weight_decay)
    ema_update(dual)
    return report


# ---------------------------------------------------------------------------
# The loop
# ---------------------------------------------------------------------------

CSV_HEADER = "step,l_online,l_target,l_consistency,l_total,lr"


class Trainer:
    def __init__(
        self,
        store: SequenceStore,
        cfg: TrainConfig,
        enc_cfg: EncoderConfig,
        dec_cfg: DecoderConfig,
        out_dir,
        config_text: str = "",
        resume: Optional[dict] = None,
    ):
        if cfg.image_size % enc_cfg.total_downsampling != 0:
            raise ConfigError(
                f"image_size {cfg.image_size} not divisible by total downsampling "
                f"{enc_cfg.total_downsampling}"
            )
        grid = cfg.image_size // enc_cfg.total_downsampling
        if enc_cfg.total_downsampling != dec_cfg.patch_size:
            raise ConfigError(
                f"patch_size {dec_cfg.patch_size} must equal total downsampling "
                f"{enc_cfg.total_downsampling} (mask lives at the coarsest grid)"
            )
        if int(np.floor(cfg.mask_ratio * grid * grid)) < 1:
            raise ConfigError(
                f"mask_ratio {cfg.mask_ratio} masks zero cells on a {grid}x{grid} grid"
            )
        self.store = store
        self.cfg = cfg
        self.enc_cfg = enc_cfg
        self.dec_cfg = dec_cfg
        self.grid = grid
        self.out_dir = Path(out_dir)
        self.config_text = config_text
        self.rng = np.random.default_rng(cfg.seed)
        self.dual = DualParams.create(enc_cfg, dec_cfg, cfg.momentum, self.rng)
        self.opt_state = init_opt_state(self.dual.online)
        self.step = 0
        if resume is not None:
            self._restore(resume)
        skipped = [
            store.sequences[i][0]
            for i in range(len(store))
            if store.num_frames(i) <= cfg.frame_gap
        ]
        if skipped:
            print(
                f"skipping {len(skipped)} sequence(s) shorter than frame gap "
                f"{cfg.frame_gap}: {', '.join(skipped[:5])}{'...' if len(skipped) > 5 else ''}",
                file=sys.stderr,
            )

    def _restore(self, ckpt: dict) -> None:
        if self.config_text and ckpt["config_text"] != self.config_text:
            raise ConfigError("resume: checkpoint config does not match the provided config")
        for name, arr in ckpt["online"].items():
            if name not in self.dual.online:
                raise ConfigError(f"resume: unknown parameter {name!r} in checkpoint")
            if self.dual.online[name].data.shape != arr.shape:
                raise ConfigError(
                    f"resume: shape mismatch for {name}: "
                    f"{arr.shape} vs {self.dual.online[name].data.shape}"
                )
            self.dual.online[name].data = arr.astype(self.dual.online[name].data.dtype)
        for name, arr in ckpt["target"].items():
            self.dual.target[name].data = arr.astype(self.dual.target[name].data.dtype)
        for name, st in ckpt["opt_state"].items():
            self.opt_state[name] = {"t": int(st["t"]), "m": st["m"].copy(), "v": st["v"].copy()}
        self.rng.bit_generator.state = ckpt["rng_state"]
        self.step = int(ckpt["step"])

    def _build_batch(self, batch_size: int) -> list[FramePair]:
        pairs = [
            sample_pair(self.store, self.cfg.frame_gap, self.rng, self.cfg.image_size, self.cfg.augment)
            for _ in range(batch_size)
        ]
        if self.cfg.masking == "symmetric":
            mask = sample_mask(self.grid, self.grid, self.cfg.mask_ratio, self.rng, seed=self.cfg.seed)
            m2 = None
        else:
            mask, m2 = asymmetric_pair(self.grid, self.grid, self.cfg.mask_ratio, self.rng, seed=self.cfg.seed)
        for p in pairs:
            p.mask = mask
            p.mask2 = m2
        return pairs

    def _batch_size_at(self, step: int) -> int:
        within = step % self.cfg.steps_per_epoch
        remaining = self.cfg.pairs_per_epoch - within * self.cfg.batch_size
        return min(self.cfg.batch_size, remaining)

    def _save(self, path) -> None:
        save_checkpoint(
            path, self.config_text, self.step, self.dual.online, self.dual.target, self.opt_state, self.rng
        )

    def run(self, csv_path=None, checkpoint_dir=None) -> LossReport:
        """Train from self.step to the end; appends rows to the loss CSV."""
        csv_path = Path(csv_path) if csv_path else self.out_dir / "loss.csv"
        ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else self.out_dir
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        fresh = self.step == 0 or not csv_path.exists()
        report = None
        with open(csv_path, "w" if fresh else "a", encoding="utf-8") as csv:
            if fresh:
                csv.write(CSV_HEADER + "\n")
            while self.step < self.cfg.total_steps:
                lr = lr_at(self.step, self.cfg)
                pairs = self._build_batch(self._batch_size_at(self.step))
                try:
                    report = train_step(
                        self.dual, pairs, self.cfg, self.enc_cfg, self.dec_cfg, self.opt_state, lr
                    )
                except NumericsError as e:
                    raise NumericsError(f"step {self.step + 1}: {e}") from e
                self.step += 1
                csv.write(
                    f"{self.step},{report.l_online!r},{report.l_target!r},"
                    f"{report.l_consistency!r},{report.l_total!r},{lr!r}\n"
                )
                csv.flush()
                if self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                    self._save(ckpt_dir / f"ckpt_step{self.step:06d}.vmc")
        self._save(ckpt_dir / "ckpt_final.vmc")
        return report

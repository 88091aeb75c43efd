"""Hierarchical sparse encoder and single-block dense decoder.

The encoder stem downsamples by ``stem_factor``, then each stage runs its
blocks at one resolution and halves it on entry to the next stage. Every
encoder op is mask-preserving, so the latent is zero at masked sites and
visible latents never depend on masked pixels. The decoder projects the
latent to its own width, drops a shared learnable token into every masked
slot, runs dense blocks, and maps each site to a flattened pixel patch.

Parameters live in a flat name -> Tensor dict; the same weights can run
sparse (pretraining) or dense (deployment) because the sparse ops reduce to
their dense counterparts under an all-visible mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .masking import MaskGrid, view_at
from .sparse import (
    SparseActivation,
    downsample_conv,
    sparse_add,
    sparse_conv2d,
    sparse_gelu,
    sparse_grn,
    sparse_layer_norm,
    wrap,
)
from .tensor import (
    Tensor,
    add,
    add_mask_token,
    conv2d,
    default_dtype,
    gelu,
    grn,
    layer_norm_channels,
    mask_sites,
)

BLOCK_KINDS = ("convnext_v2", "convnext_v1", "basic_residual")


@dataclass(frozen=True)
class EncoderConfig:
    stem_factor: int = 4
    stage_depths: tuple[int, ...] = (2, 2)
    stage_widths: tuple[int, ...] = (32, 64)
    block_kind: str = "convnext_v2"
    downsample_factor_per_stage: int = 2
    in_channels: int = 3

    def __post_init__(self):
        if len(self.stage_depths) != len(self.stage_widths):
            raise ConfigError(
                f"stage_depths ({len(self.stage_depths)}) and stage_widths "
                f"({len(self.stage_widths)}) must have equal length"
            )
        if self.block_kind not in BLOCK_KINDS:
            raise ConfigError(f"unknown block_kind {self.block_kind!r}; expected one of {BLOCK_KINDS}")
        if self.stem_factor < 1 or self.downsample_factor_per_stage < 1:
            raise ConfigError("stem_factor and downsample_factor_per_stage must be >= 1")

    @property
    def num_stages(self) -> int:
        return len(self.stage_depths)

    @property
    def total_downsampling(self) -> int:
        return self.stem_factor * self.downsample_factor_per_stage ** (self.num_stages - 1)

    @property
    def final_width(self) -> int:
        return self.stage_widths[-1]


@dataclass(frozen=True)
class DecoderConfig:
    depth: int = 1
    width: int = 512
    patch_size: int = 8
    out_channels: int = 3

    def __post_init__(self):
        if self.depth < 1 or self.width < 1:
            raise ConfigError("decoder depth and width must be >= 1")

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.out_channels


def _trunc_normal(shape, rng: np.random.Generator, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +/- 2 std by rejection resampling."""
    n = int(np.prod(shape))
    vals = rng.standard_normal(n)
    bad = np.abs(vals) > 2.0
    while bad.any():
        vals[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(vals) > 2.0
    return (std * vals).astype(default_dtype()).reshape(shape)


def init_params(enc: EncoderConfig, dec: DecoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Truncated-normal conv/linear weights, zero biases, unit/zero norm affine."""
    p: dict[str, Tensor] = {}

    def param(name, data):
        p[name] = Tensor(data, requires_grad=True)

    def conv(name, cout, cin, k):
        param(f"{name}.w", _trunc_normal((cout, cin, k, k), rng))
        param(f"{name}.b", np.zeros(cout))

    def norm(name, c):
        param(f"{name}.g", np.ones(c))
        param(f"{name}.b", np.zeros(c))

    def grn_affine(name, c):
        param(f"{name}.g", np.zeros(c))
        param(f"{name}.b", np.zeros(c))

    def block(prefix, width, kind):
        if kind in ("convnext_v2", "convnext_v1"):
            param(f"{prefix}.dw.w", _trunc_normal((width, 1, 7, 7), rng))
            param(f"{prefix}.dw.b", np.zeros(width))
            norm(f"{prefix}.norm", width)
            conv(f"{prefix}.pw1", 4 * width, width, 1)
            if kind == "convnext_v2":
                grn_affine(f"{prefix}.grn", 4 * width)
            conv(f"{prefix}.pw2", width, 4 * width, 1)
        else:  # basic_residual
            conv(f"{prefix}.conv1", width, width, 3)
            norm(f"{prefix}.norm", width)
            conv(f"{prefix}.conv2", width, width, 3)

    conv("encoder.stem.conv", enc.stage_widths[0], enc.in_channels, enc.stem_factor)
    norm("encoder.stem.norm", enc.stage_widths[0])
    for s, (depth, width) in enumerate(zip(enc.stage_depths, enc.stage_widths)):
        if s > 0:
            norm(f"encoder.stage{s}.down.norm", enc.stage_widths[s - 1])
            conv(
                f"encoder.stage{s}.down.conv",
                width,
                enc.stage_widths[s - 1],
                enc.downsample_factor_per_stage,
            )
        for i in range(depth):
            block(f"encoder.stage{s}.block{i}", width, enc.block_kind)

    conv("decoder.proj", dec.width, enc.final_width, 1)
    param("decoder.mask_token", _trunc_normal((dec.width,), rng))
    for i in range(dec.depth):
        block(f"decoder.block{i}", dec.width, "convnext_v1")
    conv("decoder.head", dec.patch_dim, dec.width, 1)
    return p


def param_count(params: dict[str, Tensor]) -> int:
    return sum(t.size for t in params.values())


def clone_params(params: dict[str, Tensor], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v.data.copy(), requires_grad=requires_grad) for k, v in params.items()}


# ---------------------------------------------------------------------------
# Sparse (pretraining) forward
# ---------------------------------------------------------------------------


def _sparse_block(x: SparseActivation, params, prefix: str, kind: str) -> SparseActivation:
    if kind in ("convnext_v2", "convnext_v1"):
        c = x.dense.shape[1]
        h = sparse_conv2d(x, params[f"{prefix}.dw.w"], params[f"{prefix}.dw.b"], padding=3, groups=c)
        h = sparse_layer_norm(h, params[f"{prefix}.norm.g"], params[f"{prefix}.norm.b"])
        h = sparse_conv2d(h, params[f"{prefix}.pw1.w"], params[f"{prefix}.pw1.b"])
        h = sparse_gelu(h)
        if kind == "convnext_v2":
            h = sparse_grn(h, params[f"{prefix}.grn.g"], params[f"{prefix}.grn.b"])
        h = sparse_conv2d(h, params[f"{prefix}.pw2.w"], params[f"{prefix}.pw2.b"])
        return sparse_add(x, h)
    h = sparse_conv2d(x, params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"], padding=1)
    h = sparse_layer_norm(h, params[f"{prefix}.norm.g"], params[f"{prefix}.norm.b"])
    h = sparse_gelu(h)
    h = sparse_conv2d(h, params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"], padding=1)
    return sparse_add(x, h)


def encode(
    frame: Tensor,
    mask: MaskGrid,
    params: dict[str, Tensor],
    cfg: EncoderConfig,
    return_stages: bool = False,
):
    """Frame (N,3,H,W) -> latent SparseActivation at the final-stage resolution."""
    if frame.ndim != 4:
        raise ShapeError(f"encode: frame must be (N,3,H,W), got {frame.shape}")
    n, c, h, w = frame.shape
    down = cfg.total_downsampling
    if h % down != 0 or w % down != 0:
        raise ConfigError(f"frame size {h}x{w} not divisible by total downsampling {down}")
    if (mask.grid_h, mask.grid_w) != (h // down, w // down):
        raise ConfigError(
            f"mask grid {mask.grid_h}x{mask.grid_w} does not match final-stage "
            f"resolution {h // down}x{w // down}"
        )
    stages = []
    x = wrap(frame, view_at(mask, h, w))
    x = downsample_conv(x, params["encoder.stem.conv.w"], params["encoder.stem.conv.b"], cfg.stem_factor)
    x = sparse_layer_norm(x, params["encoder.stem.norm.g"], params["encoder.stem.norm.b"])
    for s in range(cfg.num_stages):
        if s > 0:
            x = sparse_layer_norm(
                x, params[f"encoder.stage{s}.down.norm.g"], params[f"encoder.stage{s}.down.norm.b"]
            )
            x = downsample_conv(
                x,
                params[f"encoder.stage{s}.down.conv.w"],
                params[f"encoder.stage{s}.down.conv.b"],
                cfg.downsample_factor_per_stage,
            )
        for i in range(cfg.stage_depths[s]):
            x = _sparse_block(x, params, f"encoder.stage{s}.block{i}", cfg.block_kind)
        stages.append(x)
    return (x, stages) if return_stages else x


# ---------------------------------------------------------------------------
# Dense (deployment) forward: same weights, no mask machinery anywhere
# ---------------------------------------------------------------------------


def _dense_block(x: Tensor, params, prefix: str, kind: str) -> Tensor:
    if kind in ("convnext_v2", "convnext_v1"):
        c = x.shape[1]
        h = conv2d(x, params[f"{prefix}.dw.w"], params[f"{prefix}.dw.b"], padding=3, groups=c)
        h = layer_norm_channels(h, params[f"{prefix}.norm.g"], params[f"{prefix}.norm.b"])
        h = conv2d(h, params[f"{prefix}.pw1.w"], params[f"{prefix}.pw1.b"])
        h = gelu(h)
        if kind == "convnext_v2":
            h = grn(h, params[f"{prefix}.grn.g"], params[f"{prefix}.grn.b"])
        h = conv2d(h, params[f"{prefix}.pw2.w"], params[f"{prefix}.pw2.b"])
        return add(x, h)
    h = conv2d(x, params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"], padding=1)
    h = layer_norm_channels(h, params[f"{prefix}.norm.g"], params[f"{prefix}.norm.b"])
    h = gelu(h)
    h = conv2d(h, params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"], padding=1)
    return add(x, h)


def encode_dense(
    frame: Tensor,
    params: dict[str, Tensor],
    cfg: EncoderConfig,
    upto_stage: int | None = None,
) -> Tensor:
    """Plain dense export of the encoder; optionally stop after stage ``upto_stage`` (1-based)."""
    if frame.ndim != 4:
        raise ShapeError(f"encode_dense: frame must be (N,3,H,W), got {frame.shape}")
    h, w = frame.shape[2], frame.shape[3]
    if h % cfg.total_downsampling != 0 or w % cfg.total_downsampling != 0:
        raise ConfigError(f"frame size {h}x{w} not divisible by {cfg.total_downsampling}")
    last = cfg.num_stages if upto_stage is None else upto_stage
    if not 1 <= last <= cfg.num_stages:
        raise ConfigError(f"stage {upto_stage} out of range 1..{cfg.num_stages}")
    x = conv2d(frame, params["encoder.stem.conv.w"], params["encoder.stem.conv.b"], stride=cfg.stem_factor)
    x = layer_norm_channels(x, params["encoder.stem.norm.g"], params["encoder.stem.norm.b"])
    for s in range(last):
        if s > 0:
            x = layer_norm_channels(
                x, params[f"encoder.stage{s}.down.norm.g"], params[f"encoder.stage{s}.down.norm.b"]
            )
            x = conv2d(
                x,
                params[f"encoder.stage{s}.down.conv.w"],
                params[f"encoder.stage{s}.down.conv.b"],
                stride=cfg.downsample_factor_per_stage,
            )
        for i in range(cfg.stage_depths[s]):
            x = _dense_block(x, params, f"encoder.stage{s}.block{i}", cfg.block_kind)
    return x


# ---------------------------------------------------------------------------
# Decoder
# ---------------------------------------------------------------------------


def decode(z: SparseActivation, mask: MaskGrid, params: dict[str, Tensor], cfg: DecoderConfig) -> Tensor:
    """Latent -> per-patch pixel predictions (N, grid_h*grid_w, P*P*out_channels).

    Predictions cover every position; the loss selects the masked ones.
    """
    gh, gw = z.dense.shape[2], z.dense.shape[3]
    if (mask.grid_h, mask.grid_w) != (gh, gw):
        raise ShapeError(f"decode: latent {gh}x{gw} does not match mask grid {mask.grid_h}x{mask.grid_w}")
    x = sparse_conv2d(z, params["decoder.proj.w"], params["decoder.proj.b"])
    x = add_mask_token(x.dense, params["decoder.mask_token"], mask.visible)
    for i in range(cfg.depth):
        x = _dense_block(x, params, f"decoder.block{i}", "convnext_v1")
    x = conv2d(x, params["decoder.head.w"], params["decoder.head.b"])
    n = x.shape[0]
    return x.transpose(0, 2, 3, 1).reshape(n, gh * gw, cfg.patch_dim)


# ---------------------------------------------------------------------------
# Patch targets
# ---------------------------------------------------------------------------


def patchify(frames: np.ndarray, patch_size: int) -> np.ndarray:
    """(N,C,H,W) -> (N, grid_h*grid_w, P*P*C) patch rows, channel-major within a patch."""
    n, c, h, w = frames.shape
    if h % patch_size != 0 or w % patch_size != 0:
        raise ShapeError(f"patchify: {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = frames.reshape(n, c, gh, patch_size, gw, patch_size)
    return np.ascontiguousarray(x.transpose(0, 2, 4, 1, 3, 5)).reshape(n, gh * gw, c * patch_size * patch_size)


def unpatchify(rows: np.ndarray, patch_size: int, grid_h: int, grid_w: int, channels: int = 3) -> np.ndarray:
    """Exact inverse of patchify."""
    n = rows.shape[0]
    x = rows.reshape(n, grid_h, grid_w, channels, patch_size, patch_size)
    return np.ascontiguousarray(x.transpose(0, 3, 1, 4, 2, 5)).reshape(
        n, channels, grid_h * patch_size, grid_w * patch_size
    )


def patchify_targets(
    frames: np.ndarray, patch_size: int, normalize: bool = True, eps: float = 1e-6
) -> Tensor:
    """Regression targets: flattened patches, standardized per patch when asked.

    Returned as a constant Tensor; targets never carry gradients.
    """
    rows = patchify(np.asarray(frames, dtype=default_dtype()), patch_size)
    if normalize:
        mean = rows.mean(axis=2, keepdims=True)
        var = rows.var(axis=2, keepdims=True)
        rows = (rows - mean) / np.sqrt(var + eps)
    return Tensor(rows)

"""Mask-preserving ("submanifold") variants of the dense ops.

Semantics: zero the masked sites, run the dense op, then zero the masked
output sites again. Masked inputs therefore contribute exactly nothing to any
output, masked outputs are exactly zero (no bias leaks in), and with an
all-visible mask every op reduces to its dense counterpart, which is what lets
pretrained weights run densely downstream. The contract is the guarantee; a
coordinate-list backend could replace the implementation without changing it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import MaskError, ShapeError
from .masking import MaskView, view_at
from .tensor import (
    Tensor,
    _conv_out_size,
    add,
    conv2d,
    gelu,
    grn,
    layer_norm_channels,
    mask_sites,
)


@dataclass
class SparseActivation:
    """A dense (N,C,H,W) tensor that is exactly zero at masked sites."""

    dense: Tensor
    mask: MaskView

    def __post_init__(self):
        if self.dense.ndim != 4:
            raise ShapeError(f"SparseActivation: dense must be 4-d, got {self.dense.shape}")
        if self.dense.shape[2:] != (self.mask.stage_h, self.mask.stage_w):
            raise ShapeError(
                f"SparseActivation: spatial {self.dense.shape[2:]} != mask "
                f"{(self.mask.stage_h, self.mask.stage_w)}"
            )

    def zeros_hold(self) -> bool:
        """True iff every masked site is exactly zero (test hook)."""
        hidden = ~self.mask.visible
        return bool((self.dense.data[:, :, hidden] == 0.0).all())


def wrap(dense: Tensor, mask: MaskView) -> SparseActivation:
    """Impose the invariant on an arbitrary dense tensor by zeroing masked sites."""
    return SparseActivation(mask_sites(dense, mask.visible), mask)


def _derive_out_mask(mask: MaskView, out_h: int, out_w: int) -> MaskView:
    if out_h == mask.stage_h and out_w == mask.stage_w:
        return mask
    try:
        return view_at(mask.grid, out_h, out_w)
    except MaskError as e:
        raise MaskError(f"stride incompatible with mask block structure: {e}") from e


def sparse_conv2d(
    x: SparseActivation,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> SparseActivation:
    """Convolution over visible sites only; output re-zeroed at masked sites."""
    zeroed = mask_sites(x.dense, x.mask.visible)
    n, c, h, wd = x.dense.shape
    kh, kw = w.shape[2], w.shape[3]
    out_h = _conv_out_size(h, kh, stride, padding)
    out_w = _conv_out_size(wd, kw, stride, padding)
    out_mask = _derive_out_mask(x.mask, out_h, out_w)
    y = conv2d(zeroed, w, b, stride=stride, padding=padding, groups=groups)
    return SparseActivation(mask_sites(y, out_mask.visible), out_mask)


def sparse_layer_norm(x: SparseActivation, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> SparseActivation:
    y = layer_norm_channels(mask_sites(x.dense, x.mask.visible), gamma, beta, eps)
    return SparseActivation(mask_sites(y, x.mask.visible), x.mask)


def sparse_grn(x: SparseActivation, gamma: Tensor, beta: Tensor) -> SparseActivation:
    if not x.mask.visible.any():
        raise MaskError("sparse_grn: no visible sites")
    zeroed = mask_sites(x.dense, x.mask.visible)
    y = grn(zeroed, gamma, beta, site_mask=x.mask.visible)
    return SparseActivation(mask_sites(y, x.mask.visible), x.mask)


def sparse_gelu(x: SparseActivation) -> SparseActivation:
    # gelu(0) == 0 exactly, so masked sites stay zero without re-zeroing.
    return SparseActivation(gelu(mask_sites(x.dense, x.mask.visible)), x.mask)


def sparse_add(a: SparseActivation, b: SparseActivation) -> SparseActivation:
    if a.mask is not b.mask and not np.array_equal(a.mask.visible, b.mask.visible):
        raise MaskError("sparse_add: operands carry different masks")
    return SparseActivation(add(a.dense, b.dense), a.mask)


def downsample_conv(x: SparseActivation, w: Tensor, b: Optional[Tensor], factor: int) -> SparseActivation:
    """Non-overlapping factor x factor strided convolution; halves (or /factor) the view."""
    kh, kw = w.shape[2], w.shape[3]
    if kh != factor or kw != factor:
        raise ShapeError(f"downsample_conv: kernel {kh}x{kw} must equal factor {factor}")
    blk_h = x.mask.stage_h // x.mask.grid.grid_h
    blk_w = x.mask.stage_w // x.mask.grid.grid_w
    if blk_h % factor != 0 or blk_w % factor != 0:
        raise MaskError(
            f"downsample_conv: mask blocks {blk_h}x{blk_w} not divisible by factor {factor} "
            "(would mix masked and visible sites)"
        )
    return sparse_conv2d(x, w, b, stride=factor, padding=0)

"""The three loss terms and their weighted sum.

Online and target losses are masked-patch MSEs between per-patch pixel
targets and the respective branch's predictions. The consistency loss is the
masked-patch MSE between the two branches' predictions, with the target
branch treated as a constant so gradients only reach the online network. Per
patch the squared norm is averaged over elements, keeping values patch-size
invariant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MaskError
from .masking import MaskGrid
from .tensor import Tensor, masked_patch_mse


@dataclass(frozen=True)
class LossReport:
    l_online: float
    l_target: float
    l_consistency: float
    l_total: float
    gamma: float

    def finite(self) -> bool:
        return all(
            np.isfinite(v) for v in (self.l_online, self.l_target, self.l_consistency, self.l_total)
        )


def _check_mask(mask: MaskGrid, num_positions: int) -> np.ndarray:
    masked = mask.masked_flat()
    if masked.size != num_positions:
        raise MaskError(f"mask has {masked.size} cells, predictions have {num_positions} positions")
    if not masked.any():
        raise MaskError("loss over an empty masked set")
    return masked


def online_loss(targets: Tensor, out: Tensor, mask: MaskGrid) -> Tensor:
    """Mean over masked patches (and batch) of per-patch MSE; differentiable."""
    return masked_patch_mse(out, targets, _check_mask(mask, out.shape[1]))


def target_loss(targets: Tensor, out: Tensor, mask: MaskGrid) -> Tensor:
    """Same form on the target branch; a pure monitoring value, never a gradient."""
    return masked_patch_mse(out.detach(), targets.detach(), _check_mask(mask, out.shape[1]))


def consistency_loss(
    out_online: Tensor, out_target: Tensor, mask: MaskGrid, mask_target: MaskGrid | None = None
) -> Tensor:
    """Masked-patch MSE between the two reconstructions; gradient stops at the target."""
    if mask_target is not None and mask_target is not mask:
        if not np.array_equal(mask_target.visible, mask.visible):
            raise MaskError(
                "consistency loss needs symmetric masks: the two frames carry different masked sets"
            )
    return masked_patch_mse(out_online, out_target.detach(), _check_mask(mask, out_online.shape[1]))


def total_loss(l_online: Tensor, l_target: Tensor, l_consistency: Tensor, gamma: float) -> tuple[Tensor, LossReport]:
    """Weighted sum as a backward-able scalar plus the per-step report.

    gamma == 0 drops the consistency term from the graph entirely (its value
    is still reported), so such a run is bit-identical to one without the term.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    total = l_online + l_target.detach()
    if gamma > 0:
        total = total + gamma * l_consistency
    report = LossReport(
        l_online=float(l_online.data),
        l_target=float(l_target.data),
        l_consistency=float(l_consistency.data),
        l_total=float(total.data),
        gamma=gamma,
    )
    return total, report

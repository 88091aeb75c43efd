"""Random patch masks at the coarsest grid and their per-stage views.

A MaskGrid lives at the patch resolution (image size divided by the total
downsampling factor). Exactly floor(ratio * cells) cells are masked, chosen by
shuffling cell indices. Every finer resolution used inside the encoder sees a
MaskView derived by integer-factor nearest-neighbor upsampling, so all stages
agree on which region is hidden by construction. Both frames of a symmetric
pair share one MaskGrid object.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MaskError


@dataclass(frozen=True, eq=False)
class MaskGrid:
    grid_h: int
    grid_w: int
    visible: np.ndarray  # (grid_h, grid_w) bool, True = visible
    ratio: float
    seed: int = 0

    def __post_init__(self):
        self.visible.setflags(write=False)

    @property
    def num_masked(self) -> int:
        return int((~self.visible).sum())

    def masked_flat(self) -> np.ndarray:
        """Row-major (grid_h*grid_w,) bool, True = masked."""
        return ~self.visible.reshape(-1)


@dataclass(frozen=True, eq=False)
class MaskView:
    stage_h: int
    stage_w: int
    visible: np.ndarray  # (stage_h, stage_w) bool, block-constant
    grid: MaskGrid = field(repr=False)

    def __post_init__(self):
        self.visible.setflags(write=False)

    def at(self, stage_h: int, stage_w: int) -> "MaskView":
        """Sibling view of the same grid at another stage resolution."""
        return view_at(self.grid, stage_h, stage_w)


def sample_mask(grid_h: int, grid_w: int, ratio: float, rng: np.random.Generator, seed: int = 0) -> MaskGrid:
    """Mask a uniformly random subset of exactly floor(ratio * cells) cells."""
    if grid_h < 1 or grid_w < 1:
        raise MaskError(f"grid dimensions must be >= 1, got {grid_h}x{grid_w}")
    if not 0.0 <= ratio < 1.0:
        raise MaskError(f"masking ratio must be in [0, 1), got {ratio}")
    n = grid_h * grid_w
    num_masked = int(np.floor(ratio * n))
    order = rng.permutation(n)
    visible = np.ones(n, dtype=bool)
    visible[order[:num_masked]] = False
    return MaskGrid(grid_h, grid_w, visible.reshape(grid_h, grid_w), ratio, seed)


def view_at(mask: MaskGrid, stage_h: int, stage_w: int) -> MaskView:
    """Block-constant boolean map at a stage resolution (integer upscale of the grid)."""
    if stage_h % mask.grid_h != 0 or stage_w % mask.grid_w != 0:
        raise MaskError(
            f"stage resolution {stage_h}x{stage_w} is not an integer multiple of grid "
            f"{mask.grid_h}x{mask.grid_w}"
        )
    fh = stage_h // mask.grid_h
    fw = stage_w // mask.grid_w
    if fh == 1 and fw == 1:
        vis = mask.visible
    else:
        vis = np.repeat(np.repeat(mask.visible, fh, axis=0), fw, axis=1)
    return MaskView(stage_h, stage_w, vis, mask)


def asymmetric_pair(
    grid_h: int, grid_w: int, ratio: float, rng: np.random.Generator, seed: int = 0
) -> tuple[MaskGrid, MaskGrid]:
    """Two independent draws with the same ratio (ablation-only configuration)."""
    m1 = sample_mask(grid_h, grid_w, ratio, rng, seed)
    m2 = sample_mask(grid_h, grid_w, ratio, rng, seed)
    return m1, m2


def dump_mask(mask: MaskGrid) -> str:
    """Debug text form: header line then one '0'/'1' row per grid row ('1' = visible)."""
    lines = [f"MASK {mask.grid_h} {mask.grid_w} {mask.ratio} {mask.seed}"]
    for row in mask.visible:
        lines.append("".join("1" if v else "0" for v in row))
    return "\n".join(lines) + "\n"


def load_mask(text: str) -> MaskGrid:
    lines = [ln for ln in text.splitlines() if ln]
    head = lines[0].split()
    if len(head) != 5 or head[0] != "MASK":
        raise MaskError(f"bad mask dump header: {lines[0]!r}")
    grid_h, grid_w = int(head[1]), int(head[2])
    ratio, seed = float(head[3]), int(head[4])
    if len(lines) != 1 + grid_h:
        raise MaskError(f"mask dump has {len(lines) - 1} rows, expected {grid_h}")
    visible = np.array([[ch == "1" for ch in ln] for ln in lines[1:]], dtype=bool)
    if visible.shape != (grid_h, grid_w):
        raise MaskError(f"mask dump rows have wrong width, expected {grid_w}")
    return MaskGrid(grid_h, grid_w, visible, ratio, seed)

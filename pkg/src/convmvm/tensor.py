"""Dense n-dimensional tensors with reverse-mode automatic differentiation.

The engine is a tape: every operation returns a new Tensor that remembers its
parent tensors and a closure that scatters the incoming gradient back to them.
``backward()`` on a scalar walks the recorded graph in reverse topological
order and accumulates gradients additively into every tensor that requires
them. All arithmetic happens in numpy at a globally selectable precision
(float64 by default so finite-difference checks are meaningful; float32 can be
switched on for speed).

Deliberately small surface: shapes must match exactly except for bias-add and
per-channel affine parameters. Convolution is im2col + matmul.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import MaskError, ShapeError

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float64
_grad_enabled = True

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def set_default_dtype(name: str) -> None:
    """Switch global precision ("float64" for checks, "float32" for speed)."""
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown dtype {name!r}; expected float32 or float64")
    _default_dtype = _DTYPES[name]


def default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


class no_grad:
    """Context manager that disables graph recording (target-network forwards)."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense array plus optional gradient buffer and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_default_dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Optional[Callable[[np.ndarray], None]] = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def backward(self) -> None:
        """Accumulate d(self)/d(x) into every requires_grad tensor below self.

        Repeated calls without zeroing gradients accumulate additively.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
        # Interior activations are transient; keep gradients only on leaves.
        for node in topo:
            if node is not self and node._backward_fn is not None:
                node.grad = None

    # Operator sugar for the handful of compositions the objective needs.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, s: float) -> "Tensor":
        return scale(self, s)

    __rmul__ = __mul__

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out._parents = ()
        out._backward_fn = None
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# Elementwise and linear-algebra primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _result(a.data - b.data, (a, b), backward, "sub")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * s)

    return _result(a.data * s, (a,), backward, "scale")


def tsum(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, float(g)))

    return _result(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), backward, "sum")


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def backward(g):
        if a.requires_grad:
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
            a._accumulate(g * (cdf + x * pdf))

    return _result(out, (a,), backward, "gelu")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """y = x @ w (+ b). x: (M, K), w: (K, J), b: (J,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} @ {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.data.T)
        if w.requires_grad:
            w._accumulate(x.data.T @ g)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward, "linear")


def mse_mean(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over all elements of squared error."""
    _check_same_shape(pred, target, "mse_mean")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=pred.data.dtype)

    def backward(g):
        coeff = 2.0 * float(g) / n
        if pred.requires_grad:
            pred._accumulate(coeff * diff)
        if target.requires_grad:
            target._accumulate(-coeff * diff)

    return _result(out, (pred, target), backward, "mse_mean")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(old))

    return _result(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inv))

    return _result(a.data.transpose(axes), (a,), backward, "transpose")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def _conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols


def _col2im(gcols: np.ndarray, xp_shape, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    gxp = np.zeros(xp_shape, dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
    return gxp


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Cross-correlation of (N,C,H,W) with (K,C/groups,kh,kw) weights."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-d (N,C,H,W), got {x.shape}")
    if w.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-d (K,C/g,kh,kw), got {w.shape}")
    n, c, h, wd = x.shape
    k, cg, kh, kw = w.shape
    if c % groups != 0 or k % groups != 0:
        raise ShapeError(f"conv2d: channels C={c}, K={k} not divisible by groups={groups}")
    if cg != c // groups:
        raise ShapeError(f"conv2d: weight axis 1 is {cg}, expected C/groups = {c // groups}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: spatial axes (H={h}, W={wd}) too small for kernel ({kh},{kw}) with padding {padding}"
        )
    if b is not None and b.shape != (k,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({k},)")

    ho = _conv_out_size(h, kh, stride, padding)
    wo = _conv_out_size(wd, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)

    if groups == 1:
        c2 = cols.reshape(n, c * kh * kw, ho * wo)
        w2 = w.data.reshape(k, c * kh * kw)
        out = np.matmul(w2, c2)  # (N, K, ho*wo) via broadcast
    elif groups == c and k == c:
        c2 = cols.reshape(n, c, kh * kw, ho * wo)
        w2 = w.data.reshape(c, kh * kw)
        out = np.einsum("nckl,ck->ncl", c2, w2, optimize=True)
    else:
        kg = k // groups
        c2 = cols.reshape(n, groups, cg * kh * kw, ho * wo)
        w2 = w.data.reshape(groups, kg, cg * kh * kw)
        out = np.einsum("ngcl,gkc->ngkl", c2, w2, optimize=True).reshape(n, k, ho * wo)
    if b is not None:
        out = out + b.data.reshape(1, k, 1)
    out = out.reshape(n, k, ho, wo)

    def backward(g):
        gr = g.reshape(n, k, ho * wo)
        if b is not None and b.requires_grad:
            b._accumulate(gr.sum(axis=(0, 2)))
        if groups == 1:
            c2l = cols.reshape(n, c * kh * kw, ho * wo)
            if w.requires_grad:
                gw = np.tensordot(gr, c2l, axes=([0, 2], [0, 2]))
                w._accumulate(gw.reshape(w.shape))
            if x.requires_grad:
                w2l = w.data.reshape(k, c * kh * kw)
                gcols = np.matmul(w2l.T, gr).reshape(n, c, kh, kw, ho, wo)
                gxp = _col2im(gcols, xp.shape, kh, kw, stride, ho, wo)
                x._accumulate(gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp)
        elif groups == c and k == c:
            c2l = cols.reshape(n, c, kh * kw, ho * wo)
            if w.requires_grad:
                gw = np.einsum("ncl,nckl->ck", gr, c2l, optimize=True)
                w._accumulate(gw.reshape(w.shape))
            if x.requires_grad:
                w2l = w.data.reshape(c, kh * kw)
                gcols = (gr[:, :, None, :] * w2l[None, :, :, None]).reshape(n, c, kh, kw, ho, wo)
                gxp = _col2im(gcols, xp.shape, kh, kw, stride, ho, wo)
                x._accumulate(gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp)
        else:
            kg = k // groups
            c2l = cols.reshape(n, groups, cg * kh * kw, ho * wo)
            grg = gr.reshape(n, groups, kg, ho * wo)
            if w.requires_grad:
                gw = np.einsum("ngkl,ngcl->gkc", grg, c2l, optimize=True)
                w._accumulate(gw.reshape(w.shape))
            if x.requires_grad:
                w2l = w.data.reshape(groups, kg, cg * kh * kw)
                gcols = np.einsum("gkc,ngkl->ngcl", w2l, grg, optimize=True)
                gcols = gcols.reshape(n, c, kh, kw, ho, wo)
                gxp = _col2im(gcols, xp.shape, kh, kw, stride, ho, wo)
                x._accumulate(gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward, "conv2d")


# ---------------------------------------------------------------------------
# Normalizations
# ---------------------------------------------------------------------------


def layer_norm_channels(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize each spatial site of (N,C,H,W) across its C values."""
    if x.ndim != 4:
        raise ShapeError(f"layer_norm_channels: input must be 4-d, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm_channels: affine shapes {gamma.shape}/{beta.shape} != ({c},)")
    if eps <= 0:
        raise ValueError("layer_norm_channels: eps must be > 0")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    out = xh * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            gamma._accumulate((g * xh).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gy = g * gamma.data[None, :, None, None]
            m1 = gy.mean(axis=1, keepdims=True)
            m2 = (gy * xh).mean(axis=1, keepdims=True)
            x._accumulate(inv * (gy - m1 - xh * m2))

    return _result(out, (x, gamma, beta), backward, "layer_norm_channels")


def grn(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    site_mask: Optional[np.ndarray] = None,
    eps: float = 1e-6,
) -> Tensor:
    """Global response normalization: y = gamma * x * N(x) + beta + x.

    The per-channel response G[n,c] is the L2 norm of channel c over spatial
    sites (restricted to visible sites when ``site_mask`` is given) and
    N = G / (mean_c G + eps). Affine parameters are per channel.
    """
    if x.ndim != 4:
        raise ShapeError(f"grn: input must be 4-d, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"grn: affine shapes {gamma.shape}/{beta.shape} != ({c},)")
    if site_mask is not None:
        if site_mask.shape != (h, w):
            raise ShapeError(f"grn: site_mask shape {site_mask.shape} != ({h},{w})")
        if not site_mask.any():
            raise MaskError("grn: no visible sites")
        m = site_mask.astype(x.data.dtype)[None, None]
        xm = x.data * m
    else:
        m = None
        xm = x.data
    gx = np.sqrt((xm * xm).sum(axis=(2, 3)))  # (N, C)
    mx = gx.mean(axis=1, keepdims=True)  # (N, 1)
    nx = gx / (mx + eps)
    gb = gamma.data[None, :, None, None]
    out = gb * (x.data * nx[:, :, None, None]) + beta.data[None, :, None, None] + x.data

    def backward(g):
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            gamma._accumulate((g * x.data * nx[:, :, None, None]).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            a = (g * gb * x.data).sum(axis=(2, 3))  # dL/dNx, shape (N, C)
            denom = mx + eps
            dgx = a / denom - (a * gx).sum(axis=1, keepdims=True) / (denom * denom) / c
            safe = np.where(gx > 0.0, gx, 1.0)
            dxm = dgx[:, :, None, None] * xm / safe[:, :, None, None]
            if m is not None:
                dxm = dxm * m
            x._accumulate(g * (gb * nx[:, :, None, None] + 1.0) + dxm)

    return _result(out, (x, gamma, beta), backward, "grn")


# ---------------------------------------------------------------------------
# Mask-structured primitives (shared by the sparse ops and the decoder)
# ---------------------------------------------------------------------------


def mask_sites(x: Tensor, visible: np.ndarray) -> Tensor:
    """Zero every masked spatial site of (N,C,H,W); visible is an (H,W) bool map."""
    if x.ndim != 4:
        raise ShapeError(f"mask_sites: input must be 4-d, got {x.shape}")
    if visible.shape != x.shape[2:]:
        raise ShapeError(f"mask_sites: mask shape {visible.shape} != spatial {x.shape[2:]}")
    m = visible.astype(x.data.dtype)[None, None]

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * m)

    return _result(x.data * m, (x,), backward, "mask_sites")


def add_mask_token(x: Tensor, token: Tensor, visible: np.ndarray) -> Tensor:
    """Insert a learnable channel vector at every masked site of (N,C,H,W)."""
    if x.ndim != 4:
        raise ShapeError(f"add_mask_token: input must be 4-d, got {x.shape}")
    c = x.shape[1]
    if token.shape != (c,):
        raise ShapeError(f"add_mask_token: token shape {token.shape} != ({c},)")
    if visible.shape != x.shape[2:]:
        raise ShapeError(f"add_mask_token: mask shape {visible.shape} != spatial {x.shape[2:]}")
    hidden = (~visible).astype(x.data.dtype)[None, None]
    out = x.data + token.data[None, :, None, None] * hidden

    def backward(g):
        if x.requires_grad:
            x._accumulate(g)
        if token.requires_grad:
            token._accumulate((g * hidden).sum(axis=(0, 2, 3)))

    return _result(out, (x, token), backward, "add_mask_token")


def masked_patch_mse(pred: Tensor, target: Tensor, masked: np.ndarray) -> Tensor:
    """Mean over masked patches (and batch) of the per-patch mean squared error.

    pred/target: (N, L, D) patch rows; masked: (L,) bool selecting the patches
    that enter the loss. The per-patch squared L2 norm is averaged over its D
    elements so the value is patch-size invariant.
    """
    _check_same_shape(pred, target, "masked_patch_mse")
    if pred.ndim != 3:
        raise ShapeError(f"masked_patch_mse: expected (N,L,D), got {pred.shape}")
    n, l, d = pred.shape
    if masked.shape != (l,):
        raise ShapeError(f"masked_patch_mse: mask shape {masked.shape} != ({l},)")
    idx = np.flatnonzero(masked)
    if idx.size == 0:
        raise MaskError("masked_patch_mse: empty masked set")
    diff = pred.data[:, idx, :] - target.data[:, idx, :]
    out = np.asarray((diff * diff).sum() / (n * idx.size * d), dtype=pred.data.dtype)

    def backward(g):
        coeff = 2.0 * float(g) / (n * idx.size * d)
        if pred.requires_grad:
            gp = np.zeros(pred.shape, dtype=pred.data.dtype)
            gp[:, idx, :] = coeff * diff
            pred._accumulate(gp)
        if target.requires_grad:
            gt = np.zeros(target.shape, dtype=target.data.dtype)
            gt[:, idx, :] = -coeff * diff
            target._accumulate(gt)

    return _result(out, (pred, target), backward, "masked_patch_mse")

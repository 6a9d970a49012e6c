"""Dense float64 tensor ops with shape contracts, plus a finite-difference checker.

Tensors are ``torch.Tensor`` in float64; torch's autograd graph plays the
role of the computation tape. Spatial maps use height x width x channels
layout throughout.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidAxis, InvalidTarget, NonScalarLoss, ShapeMismatch

DTYPE = torch.float64


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    return torch.as_tensor(np.asarray(data, dtype=np.float64)).clone().requires_grad_(requires_grad)


def _check_2d(name: str, x: torch.Tensor) -> None:
    if x.dim() != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got shape {tuple(x.shape)}")


def _check_broadcast(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.numel() == 1 or b.numel() == 1:
        return
    if a.shape != b.shape:
        raise ShapeMismatch(f"cannot combine shapes {tuple(a.shape)} and {tuple(b.shape)}")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_2d("A", a)
    _check_2d("B", b)
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"inner extents differ: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    if not -x.dim() <= axis < x.dim():
        raise InvalidAxis(f"axis {axis} invalid for a {x.dim()}-D tensor")
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def scaled_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    bias: torch.Tensor | None = None,
) -> torch.Tensor:
    """softmax(q k^T / sqrt(d_k) + bias) v for 2-D operands."""
    for name, t in (("Q", q), ("K", k), ("V", v)):
        _check_2d(name, t)
    if q.shape[1] != k.shape[1]:
        raise ShapeMismatch(f"d_k differs between Q {tuple(q.shape)} and K {tuple(k.shape)}")
    if k.shape[0] != v.shape[0]:
        raise ShapeMismatch(f"K has {k.shape[0]} rows but V has {v.shape[0]}")
    logits = (q @ k.T) / math.sqrt(q.shape[1])
    if bias is not None:
        if bias.shape != logits.shape:
            raise ShapeMismatch(f"bias shape {tuple(bias.shape)} != {tuple(logits.shape)}")
        logits = logits + bias
    return softmax(logits, axis=-1) @ v


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_broadcast(a, b)
    return a + b


def multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_broadcast(a, b)
    return a * b


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """x @ weight + bias, with ``weight`` stored as (in, out)."""
    if weight.dim() != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeMismatch(f"input {tuple(x.shape)} incompatible with weight {tuple(weight.shape)}")
    out = x @ weight
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeMismatch(f"bias shape {tuple(bias.shape)} != ({weight.shape[1]},)")
        out = out + bias
    return out


def conv2d(
    x: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> torch.Tensor:
    """Cross-correlation of an h x w x c_in map with a kh x kw x c_in x c_out kernel."""
    if x.dim() != 3 or weight.dim() != 4:
        raise ShapeMismatch(f"expected h x w x c input and 4-D kernel, got {tuple(x.shape)}, {tuple(weight.shape)}")
    kh, kw, c_in, c_out = weight.shape
    h, w, c = x.shape
    if c != c_in:
        raise ShapeMismatch(f"input has {c} channels, kernel expects {c_in}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeMismatch(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeMismatch(f"bias shape {tuple(bias.shape)} != ({c_out},)")
    out = F.conv2d(x.permute(2, 0, 1)[None], weight.permute(3, 2, 0, 1), bias, stride=stride, padding=padding)
    return out[0].permute(1, 2, 0)


def adaptive_avg_pool(x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    h, w, _ = x.shape
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise InvalidTarget(f"cannot pool {h}x{w} to {out_h}x{out_w}")
    if (out_h, out_w) == (h, w):
        return x
    return F.adaptive_avg_pool2d(x.permute(2, 0, 1)[None], (out_h, out_w))[0].permute(1, 2, 0)


def _linear_axis(x: torch.Tensor, axis: int, out_n: int) -> torch.Tensor:
    n = x.shape[axis]
    src = ((torch.arange(out_n, dtype=DTYPE) + 0.5) * (n / out_n) - 0.5).clamp(0.0, n - 1)
    lo = src.floor().long()
    hi = (lo + 1).clamp(max=n - 1)
    shape = [1] * x.dim()
    shape[axis] = out_n
    t = (src - lo).reshape(shape)
    a = x.index_select(axis, lo)
    # a + t (b - a) keeps constant runs exact
    return a + t * (x.index_select(axis, hi) - a)


def bilinear_interp(x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Bilinear resampling with half-pixel centres (align_corners=False), edges clamped."""
    if out_h < 1 or out_w < 1:
        raise InvalidTarget(f"target extents must be >= 1, got {out_h}x{out_w}")
    if x.dim() != 3:
        raise ShapeMismatch(f"expected h x w x c map, got {tuple(x.shape)}")
    if (out_h, out_w) == tuple(x.shape[:2]):
        return x
    return _linear_axis(_linear_axis(x, 0, out_h), 1, out_w)


def flatten_hw(x: torch.Tensor) -> torch.Tensor:
    h, w, c = x.shape
    return x.reshape(h * w, c)


def backward(loss: torch.Tensor) -> None:
    if loss.numel() != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise NonScalarLoss("loss does not depend on any tensor that requires grad")
    loss.reshape(()).backward()


def _relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def gradient_errors(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-5,
    samples_per_param: int | None = None,
    seed: int = 0,
) -> list[np.ndarray]:
    """Relative errors between autograd and central differences, per parameter.

    ``f`` re-evaluates the scalar objective from the current parameter values.
    With ``samples_per_param`` set, that many coordinates are drawn per tensor,
    half of them from coordinates with nonzero analytic gradient when possible.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    with torch.enable_grad():
        loss = f()
        if loss.numel() != 1:
            raise NonScalarLoss(f"objective must be scalar, got shape {tuple(loss.shape)}")
        grads = torch.autograd.grad(loss.reshape(()), params, allow_unused=True)
    rng = np.random.default_rng(seed)
    out = []
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        g_flat = g.detach().reshape(-1).numpy()
        n = p.numel()
        if samples_per_param is None or samples_per_param >= n:
            coords = np.arange(n)
        else:
            nonzero = np.flatnonzero(g_flat)
            k_nz = min(len(nonzero), samples_per_param // 2)
            picked = rng.choice(nonzero, size=k_nz, replace=False) if k_nz else np.empty(0, dtype=np.int64)
            rest = np.setdiff1d(np.arange(n), picked)
            extra = rng.choice(rest, size=samples_per_param - k_nz, replace=False)
            coords = np.sort(np.concatenate([picked, extra]))
        flat = p.data.view(-1)
        errs = np.empty(len(coords))
        with torch.no_grad():
            for j, idx in enumerate(coords):
                orig = flat[idx].item()
                flat[idx] = orig + eps
                f_plus = f().item()
                flat[idx] = orig - eps
                f_minus = f().item()
                flat[idx] = orig
                numeric = (f_plus - f_minus) / (2 * eps)
                errs[j] = _relative_error(float(g_flat[idx]), numeric)
        out.append(errs)
    return out


def finite_diff_check(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-5,
    samples_per_param: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error of autograd gradients against central differences."""
    errs = gradient_errors(f, params, eps=eps, samples_per_param=samples_per_param, seed=seed)
    return max((float(e.max()) for e in errs if e.size), default=0.0)

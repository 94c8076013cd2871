"""Multi-modality super-resolution loss terms.

Every function accepts tensors (or numpy arrays) whose last two axes are the
image plane. Leading axes (batch, channel) are treated as independent images:
per-image values are averaged unless ``reduction="none"`` is passed, in which
case the per-image values are returned with the leading shape intact.

All computations go through differentiable torch ops, so the returned loss can
be back-propagated into both arguments.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np
import torch

from .errors import ParameterError, ShapeError

SCALE = 8


@dataclass(frozen=True)
class SSIMParams:
    """Constants of the global SSIM loss.

    ``form="printed"`` uses ``mu_x*mu_y + C1`` in the luminance numerator,
    ``form="standard"`` uses the usual ``2*mu_x*mu_y + C1``.
    """

    N: float = 1.0
    C1: float = 0.02
    C2: float = 0.06
    form: str = "printed"

    def __post_init__(self):
        if self.N <= 0:
            raise ParameterError(f"N must be positive, got {self.N}")
        if self.C1 <= 0 or self.C2 <= 0:
            raise ParameterError(f"C1 and C2 must be positive, got {self.C1}, {self.C2}")
        if self.form not in ("printed", "standard"):
            raise ParameterError(f"unknown SSIM form {self.form!r}")


STANDARD_SSIM = SSIMParams(form="standard")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 2.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 1.0
    w_adv: float = 1.0
    w_cyc: float = 10.0
    w_idt: float = 0.0
    # only used by the shared-latent (UNIT) objective
    w_recon: float = 10.0
    w_kl: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ParameterError(f"loss weight {f.name} must be >= 0")


@dataclass
class LossBreakdown:
    """Components of the full generator objective.

    Fields hold 0-d tensors while training (so ``total`` can be
    back-propagated) or plain floats once :meth:`detach` has been called.
    ``extras`` carries auxiliary values (discriminator losses, UNIT terms).
    """

    total: torch.Tensor | float
    orig: torch.Tensor | float
    s_x: torch.Tensor | float
    s_y: torch.Tensor | float
    d_term: torch.Tensor | float
    u_term: torch.Tensor | float
    extras: dict = field(default_factory=dict)

    COMPONENTS = ("total", "orig", "s_x", "s_y", "d_term", "u_term")

    def detach(self) -> "LossBreakdown":
        def f(v):
            return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)

        return LossBreakdown(
            *(f(getattr(self, n)) for n in self.COMPONENTS),
            extras={k: f(v) for k, v in self.extras.items()},
        )

    def weighted_sum(self, w: LossWeights) -> float:
        b = self.detach()
        return b.orig + w.lambda1 * b.s_x + w.lambda2 * b.s_y + w.lambda3 * b.d_term + w.lambda4 * b.u_term

    def as_dict(self) -> dict:
        b = self.detach()
        out = {n: getattr(b, n) for n in self.COMPONENTS}
        out.update(b.extras)
        return out


def _as_tensor(a) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def _check_pair(a: torch.Tensor, b: torch.Tensor):
    if a.dim() < 2 or a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.shape[-1] == 0 or a.shape[-2] == 0:
        raise ShapeError("empty image")


def _reduce(v: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "mean":
        return v.mean()
    if reduction == "none":
        return v
    raise ParameterError(f"unknown reduction {reduction!r}")


def patch_stats(x, y):
    """Per-image mean, population variance and covariance.

    Returns ``(mu_x, mu_y, var_x, var_y, cov_xy)`` with the leading shape of
    the inputs (0-d tensors for plain 2D images).
    """
    x, y = _as_tensor(x), _as_tensor(y)
    _check_pair(x, y)
    dims = (-2, -1)
    mu_x = x.mean(dims)
    mu_y = y.mean(dims)
    dx = x - mu_x[..., None, None]
    dy = y - mu_y[..., None, None]
    return mu_x, mu_y, (dx * dx).mean(dims), (dy * dy).mean(dims), (dx * dy).mean(dims)


def ssim_loss(x, y, p: SSIMParams = SSIMParams(), reduction: str = "mean") -> torch.Tensor:
    """Global (single-window) SSIM loss ``(1 - s) / N``.

    With the default printed form the value at ``x == y`` is zero only when
    the mean intensity is zero.
    """
    mu_x, mu_y, var_x, var_y, cov = patch_stats(x, y)
    k = 1.0 if p.form == "printed" else 2.0
    num = (k * mu_x * mu_y + p.C1) * (2 * cov + p.C2)
    den = (mu_x**2 + mu_y**2 + p.C1) * (var_x + var_y + p.C2)
    return _reduce((1 - num / den) / p.N, reduction)


def ssim_index(x, y, p: SSIMParams = STANDARD_SSIM, reduction: str = "mean") -> torch.Tensor:
    """Similarity value ``s`` itself (1 for identical images in standard form)."""
    return _reduce(1 - p.N * ssim_loss(x, y, p, reduction="none"), reduction)


def nn_upsample_g(y_lr, factor: int = SCALE) -> torch.Tensor:
    """Nearest-neighbour upsampling: each pixel becomes a factor x factor block."""
    if factor < 1:
        raise ParameterError(f"factor must be >= 1, got {factor}")
    y_lr = _as_tensor(y_lr)
    if y_lr.dim() < 2:
        raise ShapeError("need at least a 2D image")
    return y_lr.repeat_interleave(factor, dim=-2).repeat_interleave(factor, dim=-1)


def _halving_mean(t: torch.Tensor, dim: int) -> torch.Tensor:
    # repeated pairwise averaging returns a constant block's value exactly;
    # ``dim`` is negative, so after unflatten the pair axis sits at ``dim``
    while t.shape[dim] > 1 and t.shape[dim] % 2 == 0:
        a, b = t.unflatten(dim, (-1, 2)).unbind(dim)
        t = (a + b) / 2
    return t.mean(dim=dim)


def avg_downsample_f(x_hr, factor: int = SCALE) -> torch.Tensor:
    """Average pooling over non-overlapping factor x factor blocks.

    Power-of-two factors use pairwise averaging, so a block of equal values
    maps to exactly that value and ``f(g(y)) == y`` holds bit for bit.
    """
    if factor < 1:
        raise ParameterError(f"factor must be >= 1, got {factor}")
    x_hr = _as_tensor(x_hr)
    if x_hr.dim() < 2:
        raise ShapeError("need at least a 2D image")
    h, w = x_hr.shape[-2:]
    if h % factor or w % factor or h == 0 or w == 0:
        raise ShapeError(f"image {h}x{w} is not divisible by {factor}")
    lead = x_hr.shape[:-2]
    blocks = x_hr.reshape(*lead, h // factor, factor, w // factor, factor)
    return _halving_mean(_halving_mean(blocks, -1), -2)


def mse(a, b, reduction: str = "mean") -> torch.Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair(a, b)
    d = a - b
    return _reduce((d * d).mean((-2, -1)), reduction)


def _check_scale(hr: torch.Tensor, lr: torch.Tensor, factor: int):
    if hr.dim() < 2 or lr.dim() < 2 or hr.shape[:-2] != lr.shape[:-2]:
        raise ShapeError(f"incompatible shapes {tuple(hr.shape)} / {tuple(lr.shape)}")
    if hr.shape[-2] != factor * lr.shape[-2] or hr.shape[-1] != factor * lr.shape[-1]:
        raise ShapeError(
            f"expected high-res shape {factor}x low-res, got {tuple(hr.shape[-2:])} vs {tuple(lr.shape[-2:])}"
        )


def upsample_loss_U(y, y_lr, factor: int = SCALE, reduction: str = "mean") -> torch.Tensor:
    """MSE between a high-res image and its generated low-res version, upsampled."""
    y, y_lr = _as_tensor(y), _as_tensor(y_lr)
    _check_scale(y, y_lr, factor)
    return mse(y, nn_upsample_g(y_lr, factor), reduction)


def downsample_loss_D(x, x_sr, factor: int = SCALE, reduction: str = "mean") -> torch.Tensor:
    """MSE between a low-res image and the block average of its super-resolved output."""
    x, x_sr = _as_tensor(x), _as_tensor(x_sr)
    _check_scale(x_sr, x, factor)
    return mse(x, avg_downsample_f(x_sr, factor), reduction)


def mmsr_total(
    orig,
    x,
    x_sr,
    y,
    y_lr,
    w: LossWeights = LossWeights(),
    p: SSIMParams = SSIMParams(),
    factor: int = SCALE,
    reduction: str = "mean",
) -> LossBreakdown:
    """Base objective plus the four structure/intensity terms."""
    x, x_sr, y, y_lr = map(_as_tensor, (x, x_sr, y, y_lr))
    _check_scale(x_sr, x, factor)
    _check_scale(y, y_lr, factor)
    s_x = ssim_loss(x, avg_downsample_f(x_sr, factor), p, reduction)
    s_y = ssim_loss(y, nn_upsample_g(y_lr, factor), p, reduction)
    d_term = downsample_loss_D(x, x_sr, factor, reduction)
    u_term = upsample_loss_U(y, y_lr, factor, reduction)
    total = orig + w.lambda1 * s_x + w.lambda2 * s_y + w.lambda3 * d_term + w.lambda4 * u_term
    return LossBreakdown(total=total, orig=orig, s_x=s_x, s_y=s_y, d_term=d_term, u_term=u_term)

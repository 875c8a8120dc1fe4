"""Invertible flow layers, per-language stacks and exact densities.

Direction conventions used throughout this module:

* A *layer*'s ``forward`` maps base space toward data space; ``inverse``
  undoes it. For an affine coupling, ``forward`` is the expanding map
  ``y_b = z_b * exp(s(z_a)) + t(z_a)``.
* A :class:`FlowStack` stores its layers in base-to-data order, so the
  stack's ``forward`` (the direction used for likelihoods) runs the layer
  inverses in reverse order and maps a data-space latent to the base
  space, accumulating the log-determinant of that data-to-base Jacobian.
  ``inverse`` maps base-space vectors back to data space.

Both single vectors of shape ``(d,)`` and batches ``(B, d)`` are accepted;
log-determinants come back as a scalar or a ``(B,)`` tensor accordingly.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
from torch import Tensor

from .errors import ConfigurationError, NumericError, UsageError


def _as_batch(x: Tensor, dim: int, what: str) -> tuple[Tensor, bool]:
    if x.dim() == 1:
        if x.shape[0] != dim:
            raise ConfigurationError(
                f"{what}: expected vector of dimension {dim}, got {x.shape[0]}"
            )
        return x.unsqueeze(0), True
    if x.dim() == 2:
        if x.shape[1] != dim:
            raise ConfigurationError(
                f"{what}: expected batch of dimension {dim}, got {x.shape[1]}"
            )
        return x, False
    raise ConfigurationError(f"{what}: expected 1-D or 2-D input, got shape {tuple(x.shape)}")


def _unbatch(y: Tensor, log_det: Tensor, squeeze: bool) -> tuple[Tensor, Tensor]:
    if squeeze:
        return y.squeeze(0), log_det.squeeze(0)
    return y, log_det


class StandardNormal:
    """Zero-mean, identity-covariance base distribution."""

    def __init__(self, dim: int):
        self.dim = dim
        self._log_norm = 0.5 * dim * math.log(2.0 * math.pi)

    def log_prob(self, eps: Tensor) -> Tensor:
        eps, squeeze = _as_batch(eps, self.dim, "base log_prob")
        lp = -0.5 * (eps * eps).sum(dim=-1) - self._log_norm
        return lp.squeeze(0) if squeeze else lp

    def sample(self, n: int, generator: torch.Generator | None = None) -> Tensor:
        return torch.randn(n, self.dim, generator=generator)


class CouplingNet(nn.Module):
    """Shared tanh trunk with separate scale and shift heads.

    The heads are zero-initialized so a fresh coupling layer is the
    identity map; the scale output is bounded by ``scale_bound * tanh``.
    """

    def __init__(self, in_dim: int, out_dim: int, hidden: int, scale_bound: float,
                 dropout: float = 0.0):
        super().__init__()
        self.scale_bound = scale_bound
        self.trunk = nn.Sequential(
            nn.Linear(in_dim, hidden),
            nn.Tanh(),
            nn.Linear(hidden, hidden),
            nn.Tanh(),
            nn.Dropout(dropout),
        )
        self.scale_head = nn.Linear(hidden, out_dim)
        self.shift_head = nn.Linear(hidden, out_dim)
        nn.init.zeros_(self.scale_head.weight)
        nn.init.zeros_(self.scale_head.bias)
        nn.init.zeros_(self.shift_head.weight)
        nn.init.zeros_(self.shift_head.bias)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = self.trunk(x)
        s = self.scale_bound * torch.tanh(self.scale_head(h))
        t = self.shift_head(h)
        return s, t


class CouplingLayer(nn.Module):
    """Affine coupling over contiguous halves of the vector.

    With ``flip=False`` the first half passes through unchanged and
    conditions the affine map applied to the second half; ``flip=True``
    swaps the roles so stacked layers transform every dimension.
    """

    def __init__(self, dim: int, hidden: int = 64, flip: bool = False,
                 scale_bound: float = 2.0, dropout: float = 0.0):
        super().__init__()
        if dim % 2 != 0:
            raise ConfigurationError(f"coupling layers need an even dimension, got {dim}")
        self.dim = dim
        self.flip = flip
        self.net = CouplingNet(dim // 2, dim // 2, hidden, scale_bound, dropout)

    def _split(self, x: Tensor) -> tuple[Tensor, Tensor]:
        a, b = x[:, : self.dim // 2], x[:, self.dim // 2:]
        return (b, a) if self.flip else (a, b)

    def _join(self, a: Tensor, b: Tensor) -> Tensor:
        return torch.cat((b, a), dim=-1) if self.flip else torch.cat((a, b), dim=-1)

    def forward(self, z: Tensor) -> tuple[Tensor, Tensor]:
        z, squeeze = _as_batch(z, self.dim, "coupling forward")
        z_a, z_b = self._split(z)
        s, t = self.net(z_a)
        y_b = z_b * torch.exp(s) + t
        log_det = s.sum(dim=-1)
        return _unbatch(self._join(z_a, y_b), log_det, squeeze)

    def inverse(self, y: Tensor) -> tuple[Tensor, Tensor]:
        y, squeeze = _as_batch(y, self.dim, "coupling inverse")
        y_a, y_b = self._split(y)
        s, t = self.net(y_a)
        z_b = (y_b - t) * torch.exp(-s)
        log_det = -s.sum(dim=-1)
        return _unbatch(self._join(y_a, z_b), log_det, squeeze)


class ActNorm(nn.Module):
    """Per-dimension affine with optional data-dependent initialization.

    Forward is ``y = z * exp(log_scale) + bias``. When ``data_init`` is
    set, the first data-to-base pass in training mode sets the parameters
    so that batch's output is standardized.
    """

    def __init__(self, dim: int, data_init: bool = True):
        super().__init__()
        self.dim = dim
        self.log_scale = nn.Parameter(torch.zeros(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.register_buffer("initialized", torch.tensor(0 if data_init else 1,
                                                         dtype=torch.uint8))

    @torch.no_grad()
    def _initialize(self, data: Tensor) -> None:
        mean = data.mean(dim=0)
        std = data.std(dim=0, unbiased=False) + 1e-6
        self.bias.copy_(mean)
        self.log_scale.copy_(torch.log(std))
        self.initialized.fill_(1)

    def forward(self, z: Tensor) -> tuple[Tensor, Tensor]:
        z, squeeze = _as_batch(z, self.dim, "actnorm forward")
        y = z * torch.exp(self.log_scale) + self.bias
        log_det = self.log_scale.sum().expand(z.shape[0])
        return _unbatch(y, log_det, squeeze)

    def inverse(self, y: Tensor) -> tuple[Tensor, Tensor]:
        y, squeeze = _as_batch(y, self.dim, "actnorm inverse")
        if self.training and not bool(self.initialized) and y.shape[0] > 1:
            self._initialize(y)
        z = (y - self.bias) * torch.exp(-self.log_scale)
        log_det = (-self.log_scale.sum()).expand(y.shape[0])
        return _unbatch(z, log_det, squeeze)


class InvertibleLinear(nn.Module):
    """Dense invertible map stored in LU-factored form.

    ``W = P @ L @ (U + diag(sign * exp(log_diag)))`` with a fixed
    permutation ``P`` and fixed diagonal signs, so ``log|det W|`` is just
    ``log_diag.sum()`` and the inverse reduces to two triangular solves.
    Initialized to a random orthogonal matrix.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        w0 = torch.linalg.qr(torch.randn(dim, dim)).Q
        perm, lower, upper = torch.linalg.lu(w0)
        diag = torch.diagonal(upper)
        self.register_buffer("perm", perm)
        self.register_buffer("sign", torch.sign(diag))
        self.lower = nn.Parameter(lower.tril(-1))
        self.upper = nn.Parameter(upper.triu(1))
        self.log_diag = nn.Parameter(torch.log(diag.abs()))

    def _factors(self) -> tuple[Tensor, Tensor]:
        eye = torch.eye(self.dim, dtype=self.lower.dtype, device=self.lower.device)
        lower = self.lower.tril(-1) + eye
        upper = self.upper.triu(1) + torch.diag(self.sign * torch.exp(self.log_diag))
        return lower, upper

    def forward(self, z: Tensor) -> tuple[Tensor, Tensor]:
        z, squeeze = _as_batch(z, self.dim, "invertible linear forward")
        lower, upper = self._factors()
        w = self.perm @ lower @ upper
        y = z @ w.T
        log_det = self.log_diag.sum().expand(z.shape[0])
        return _unbatch(y, log_det, squeeze)

    def inverse(self, y: Tensor) -> tuple[Tensor, Tensor]:
        y, squeeze = _as_batch(y, self.dim, "invertible linear inverse")
        lower, upper = self._factors()
        u = self.perm.T @ y.T
        a = torch.linalg.solve_triangular(lower, u, upper=False, unitriangular=True)
        z = torch.linalg.solve_triangular(upper, a, upper=True).T
        log_det = (-self.log_diag.sum()).expand(y.shape[0])
        return _unbatch(z, log_det, squeeze)


class GlowLayer(nn.Module):
    """Actnorm, invertible linear mix and affine coupling, in that order.

    The stated order is the base-to-data ``forward``; the data-to-base
    pass therefore undoes the coupling first and the actnorm last, which
    is where the data-dependent actnorm statistics are collected.
    """

    def __init__(self, dim: int, hidden: int = 64, flip: bool = False,
                 scale_bound: float = 2.0, dropout: float = 0.0, data_init: bool = True):
        super().__init__()
        self.dim = dim
        self.actnorm = ActNorm(dim, data_init=data_init)
        self.linear = InvertibleLinear(dim)
        self.coupling = CouplingLayer(dim, hidden, flip, scale_bound, dropout)

    def forward(self, z: Tensor) -> tuple[Tensor, Tensor]:
        z, squeeze = _as_batch(z, self.dim, "glow forward")
        y, ld = self.actnorm(z)
        y, ld2 = self.linear(y)
        y, ld3 = self.coupling(y)
        return _unbatch(y, ld + ld2 + ld3, squeeze)

    def inverse(self, y: Tensor) -> tuple[Tensor, Tensor]:
        y, squeeze = _as_batch(y, self.dim, "glow inverse")
        z, ld = self.coupling.inverse(y)
        z, ld2 = self.linear.inverse(z)
        z, ld3 = self.actnorm.inverse(z)
        return _unbatch(z, ld + ld2 + ld3, squeeze)


class FlowStack(nn.Module):
    """Ordered invertible layers for one language, plus the base density.

    Layers are stored base-to-data, alternating which coupling half passes
    through. ``forward`` maps data-space latents to the base space (the
    likelihood direction); ``inverse`` maps base samples back to data
    space. The two log-determinants are exact negatives of each other at
    matched points.
    """

    def __init__(self, dim: int, num_layers: int, kind: str = "realnvp",
                 lang: str = "", hidden: int = 64, scale_bound: float = 2.0,
                 dropout: float = 0.0, data_init: bool = True):
        super().__init__()
        if num_layers < 1:
            raise ConfigurationError("a flow stack needs at least one layer")
        if kind not in ("realnvp", "glow"):
            raise ConfigurationError(f"unknown flow kind {kind!r}")
        self.dim = dim
        self.kind = kind
        self.lang = lang
        self.base = StandardNormal(dim)
        layers: list[nn.Module] = []
        for i in range(num_layers):
            flip = i % 2 == 1
            if kind == "realnvp":
                layers.append(CouplingLayer(dim, hidden, flip, scale_bound, dropout))
            else:
                layers.append(GlowLayer(dim, hidden, flip, scale_bound, dropout, data_init))
        self.layers = nn.ModuleList(layers)

    def _check_finite(self, x: Tensor, idx: int, direction: str) -> None:
        if not torch.isfinite(x).all():
            raise NumericError(
                f"flow stack ({self.kind}, lang={self.lang!r}): non-finite values "
                f"after layer {idx} in {direction} pass"
            )

    def forward(self, z: Tensor) -> tuple[Tensor, Tensor]:
        """Data to base: returns (eps, log-det of the data-to-base Jacobian)."""
        z, squeeze = _as_batch(z, self.dim, "stack forward")
        log_det = torch.zeros(z.shape[0], dtype=z.dtype, device=z.device)
        for idx in range(len(self.layers) - 1, -1, -1):
            z, ld = self.layers[idx].inverse(z)
            self._check_finite(z, idx, "data-to-base")
            log_det = log_det + ld
        return _unbatch(z, log_det, squeeze)

    def inverse(self, eps: Tensor) -> tuple[Tensor, Tensor]:
        """Base to data: returns (z, log-det of the base-to-data Jacobian)."""
        eps, squeeze = _as_batch(eps, self.dim, "stack inverse")
        log_det = torch.zeros(eps.shape[0], dtype=eps.dtype, device=eps.device)
        for idx, layer in enumerate(self.layers):
            eps, ld = layer(eps)
            self._check_finite(eps, idx, "base-to-data")
            log_det = log_det + ld
        return _unbatch(eps, log_det, squeeze)

    def log_prob(self, z: Tensor) -> Tensor:
        """Exact log-density of data-space latents under this stack."""
        eps, log_det = self.forward(z)
        lp = self.base.log_prob(eps) + log_det
        if not torch.isfinite(lp).all():
            raise NumericError(
                f"flow stack ({self.kind}, lang={self.lang!r}): non-finite log-density"
            )
        return lp

    def mle_loss(self, batch: Tensor) -> Tensor:
        """Negative mean log-density of a batch, the training objective."""
        if batch.dim() != 2:
            raise UsageError("mle_loss expects a batch of shape (n, dim)")
        if batch.shape[0] == 0:
            raise UsageError("mle_loss needs a non-empty batch")
        return -self.log_prob(batch).mean()


def transform_latent(src: FlowStack, tgt: FlowStack, z: Tensor) -> Tensor:
    """Map a source-language latent to the target language's latent space.

    Runs the source stack data-to-base and the target stack base-to-data,
    so both stacks must share the same dimension and base distribution.
    """
    if src.dim != tgt.dim:
        raise ConfigurationError(
            f"latent transform needs matching dimensions, got {src.dim} and {tgt.dim}"
        )
    eps, _ = src(z)
    out, _ = tgt.inverse(eps)
    return out

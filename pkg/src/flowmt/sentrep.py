"""Sentence-level latent construction and gated reinjection.

The latent for a sentence is built from the encoder states as
``z = W (maxpool(H) + meanpool(H) + h_0)`` where both pools run
elementwise over all states (the bos state ``h_0`` included) and ``W``
is a bias-free projection to the latent size. On the decoder side the
latent is fused back into each output state through a sigmoid gate, so
the result stays an elementwise convex combination of the decoder state
and the (projected) latent.
"""
from __future__ import annotations

import torch
import torch.nn as nn
from torch import Tensor

from .errors import ConfigurationError, UsageError


class LatentPooler(nn.Module):
    """Max+mean pooling plus the bos state, projected to the latent size."""

    def __init__(self, d_model: int, d_z: int):
        super().__init__()
        self.d_model = d_model
        self.d_z = d_z
        self.proj = nn.Linear(d_model, d_z, bias=False)

    def forward(self, states: Tensor, mask: Tensor | None = None) -> Tensor:
        """Pool encoder states into one latent vector per sentence.

        ``states`` is ``(S+1, d_model)`` for a single sentence or
        ``(B, S+1, d_model)`` for a batch; ``mask`` (same leading shape,
        True = real token) excludes padding from both pools. Position 0
        is the bos state and must always be valid.
        """
        squeeze = states.dim() == 2
        if squeeze:
            states = states.unsqueeze(0)
            if mask is not None:
                mask = mask.unsqueeze(0)
        if states.dim() != 3 or states.shape[-1] != self.d_model:
            raise UsageError(
                f"expected states of dimension {self.d_model}, got shape {tuple(states.shape)}"
            )
        if states.shape[1] == 0:
            raise UsageError("cannot pool an empty state sequence")
        if mask is None:
            maxpool = states.amax(dim=1)
            meanpool = states.mean(dim=1)
        else:
            valid = mask.unsqueeze(-1)
            neg = torch.finfo(states.dtype).min
            maxpool = states.masked_fill(~valid, neg).amax(dim=1)
            counts = valid.sum(dim=1).clamp(min=1)
            meanpool = (states * valid).sum(dim=1) / counts
        z = self.proj(maxpool + meanpool + states[:, 0])
        return z.squeeze(0) if squeeze else z


class GateFusion(nn.Module):
    """Sigmoid-gated blend of decoder states with the sentence latent.

    ``o = (1 - g) * s + g * z'`` with ``g = sigmoid(Linear([s; z]))``.
    When the latent size differs from the state size, ``z'`` is a
    bias-free projection of ``z``, zero-initialized so a fresh gate
    leaves the latent contribution at zero.
    """

    def __init__(self, d_out: int, d_z: int):
        super().__init__()
        self.d_out = d_out
        self.d_z = d_z
        self.gate = nn.Linear(d_out + d_z, d_out)
        # open-highway start: bias the gate low so fresh models pass the
        # decoder state through nearly untouched instead of halving it
        nn.init.zeros_(self.gate.weight)
        nn.init.constant_(self.gate.bias, -2.0)
        if d_z != d_out:
            self.latent_proj = nn.Linear(d_z, d_out, bias=False)
            nn.init.zeros_(self.latent_proj.weight)
        else:
            self.latent_proj = None

    def forward(self, s: Tensor, z: Tensor) -> Tensor:
        """Fuse ``z`` into ``s``; ``z`` broadcasts over s's time dimension.

        Accepts ``s`` of shape ``(..., d_out)`` with ``z`` either matching
        s's leading dimensions or missing the one time axis.
        """
        if s.shape[-1] != self.d_out or z.shape[-1] != self.d_z:
            raise ConfigurationError(
                f"gate fusion expects state dim {self.d_out} and latent dim "
                f"{self.d_z}, got {s.shape[-1]} and {z.shape[-1]}"
            )
        if z.dim() == s.dim() - 1:
            z = z.unsqueeze(-2).expand(*s.shape[:-1], self.d_z)
        elif z.dim() != s.dim():
            raise ConfigurationError(
                f"latent rank {z.dim()} incompatible with state rank {s.dim()}"
            )
        g = torch.sigmoid(self.gate(torch.cat((s, z), dim=-1)))
        z_out = self.latent_proj(z) if self.latent_proj is not None else z
        return (1.0 - g) * s + g * z_out

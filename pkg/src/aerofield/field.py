"""Positional encodings and the conditioned density/color MLPs.

MLP1 maps encoded position plus the fused conditioning vector to density
and a hidden state, with the full input re-injected at layer 1; MLP2 maps
encoded view direction plus the hidden state to RGB. Density goes through
softplus, color through a sigmoid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import FUSED_DIM, _init_module


class FieldError(ValueError):
    pass


@dataclass(frozen=True)
class EncodingConfig:
    l_pos: int = 10
    l_dir: int = 4
    include_input: bool = True

    def __post_init__(self):
        if self.l_pos < 1 or self.l_dir < 0:
            raise FieldError("need l_pos >= 1 and l_dir >= 0")

    def pos_dim(self, n: int = 3) -> int:
        return n * (1 if self.include_input else 0) + 2 * n * self.l_pos

    def dir_dim(self, n: int = 3) -> int:
        return n * (1 if self.include_input else 0) + 2 * n * self.l_dir


def gamma(x: torch.Tensor, l: int, include_input: bool = True) -> torch.Tensor:
    """Sinusoidal lifting: optionally x, then (sin, cos)(2^k pi x) for k < l.

    Works on any (..., n) tensor; output has n * (include_input + 2*l)
    channels, ordered by ascending frequency.
    """
    parts = [x] if include_input else []
    for k in range(l):
        arg = (2.0 ** k) * math.pi * x
        parts.append(torch.sin(arg))
        parts.append(torch.cos(arg))
    if not parts:
        return x[..., :0]
    return torch.cat(parts, dim=-1)


# initial density: softplus(bias) ~ 0.1 per unit length
DENSITY_BIAS = math.log(math.expm1(0.1))


@dataclass(frozen=True)
class FieldOutput:
    sigma: float
    hidden: np.ndarray
    rgb: np.ndarray

    def __post_init__(self):
        if self.sigma < 0:
            raise FieldError("density must be non-negative")
        rgb = np.asarray(self.rgb, dtype=np.float64).reshape(3)
        if rgb.min() < 0 or rgb.max() > 1:
            raise FieldError("rgb must lie in [0,1]")
        object.__setattr__(self, "hidden", np.asarray(self.hidden, dtype=np.float64))
        object.__setattr__(self, "rgb", rgb)


class FieldNetwork(nn.Module):
    """MLP1 (depth 4, width 64, skip at layer 1) + heads + MLP2 (1 layer).

    `fused_dim=0` drops the conditioning input entirely, reducing the model
    to an unconditioned radiance field.
    """

    def __init__(self, enc: EncodingConfig = EncodingConfig(),
                 fused_dim: int = FUSED_DIM, depth: int = 4, width: int = 64,
                 skip_layer: int = 1, seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.enc = enc
        self.fused_dim = fused_dim
        self.skip_layer = skip_layer
        in_dim = enc.pos_dim() + fused_dim
        layers = []
        for i in range(depth):
            d_in = in_dim if i == 0 else width
            if i == skip_layer:
                d_in += in_dim
            layers.append(nn.Linear(d_in, width))
        self.mlp1 = nn.ModuleList(layers)
        self.density_head = nn.Linear(width, 1)
        self.hidden_head = nn.Linear(width, width)
        self.mlp2 = nn.Linear(enc.dir_dim() + width, width)
        self.color_head = nn.Linear(width, 3)
        _init_module(self, seed)
        self.to(dtype)

    def forward(self, positions: torch.Tensor, directions: torch.Tensor,
                fused: torch.Tensor | None):
        """(P, 3) positions, (P, 3) unit directions, (P, fused_dim) fused.

        Returns (sigma (P,), hidden (P, width), rgb (P, 3)).
        """
        if not (torch.isfinite(positions).all() and torch.isfinite(directions).all()):
            raise FieldError("non-finite field inputs")
        gq = gamma(positions, self.enc.l_pos, self.enc.include_input)
        if self.fused_dim:
            if fused is None:
                raise FieldError("fused features required when fused_dim > 0")
            if not torch.isfinite(fused).all():
                raise FieldError("non-finite fused features")
            x_in = torch.cat([gq, fused], dim=-1)
        else:
            x_in = gq
        h = x_in
        for i, layer in enumerate(self.mlp1):
            if i == self.skip_layer and i > 0:
                h = torch.cat([h, x_in], dim=-1)
            h = F.relu(layer(h))
        sigma = F.softplus(self.density_head(h).squeeze(-1) + DENSITY_BIAS)
        hidden = self.hidden_head(h)
        gd = gamma(directions, self.enc.l_dir, self.enc.include_input)
        c = F.relu(self.mlp2(torch.cat([gd, hidden], dim=-1)))
        rgb = torch.sigmoid(self.color_head(c))
        return sigma, hidden, rgb


def eval_field(q, d, fused, params: FieldNetwork) -> FieldOutput:
    """Single-sample wrapper over FieldNetwork.forward."""
    dtype = next(params.parameters()).dtype
    qt = torch.as_tensor(np.asarray(q, dtype=np.float64), dtype=dtype).reshape(1, 3)
    dt = torch.as_tensor(np.asarray(d, dtype=np.float64), dtype=dtype).reshape(1, 3)
    ft = None
    if params.fused_dim:
        vec = fused.vector if hasattr(fused, "vector") else np.asarray(fused)
        ft = torch.as_tensor(np.asarray(vec, dtype=np.float64),
                             dtype=dtype).reshape(1, -1)
    with torch.no_grad():
        sigma, hidden, rgb = params(qt, dt, ft)
    return FieldOutput(sigma=float(sigma[0]), hidden=hidden[0].double().numpy(),
                       rgb=rgb[0].double().numpy())


def init_params(seed: int, enc: EncodingConfig = EncodingConfig(),
                fused_dim: int = FUSED_DIM, dtype=torch.float32) -> FieldNetwork:
    """Deterministic fan-in-scaled initialization; density bias per DENSITY_BIAS."""
    return FieldNetwork(enc=enc, fused_dim=fused_dim, seed=seed, dtype=dtype)

"""Latent-to-decoder adapters: frame stacking downsample followed by a
two-layer ReLU perceptron into the decoder embedding space."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

__all__ = ["AdapterParams", "init_adapter", "downsample", "adapt"]


@dataclass
class AdapterParams:
    """Downsample factor k plus linear (k*d -> E) and (E -> E) layers."""

    k: int
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{name}": getattr(self, name) for name in ("w1", "b1", "w2", "b2")}


def init_adapter(rng: np.random.Generator, k: int, latent: int, emb_dim: int) -> AdapterParams:
    if k < 1:
        raise ValueError("downsample factor k must be >= 1")
    fan_in = k * latent
    return AdapterParams(
        k=k,
        w1=dc.parameter(rng.standard_normal((fan_in, emb_dim)) / math.sqrt(fan_in)),
        b1=dc.parameter(np.zeros(emb_dim)),
        w2=dc.parameter(rng.standard_normal((emb_dim, emb_dim)) / math.sqrt(emb_dim)),
        b2=dc.parameter(np.zeros(emb_dim)),
    )


def downsample(z: Tensor, k: int) -> Tensor:
    """Stack consecutive groups of k frames along the feature axis:
    [T, d] -> [ceil(T/k), k*d], zero-padding the final partial group."""
    if z.ndim != 2:
        raise ValueError(f"expected [T, d] latents, got shape {z.shape}")
    if k < 1:
        raise ValueError("downsample factor k must be >= 1")
    t, d = z.shape
    groups = -(-t // k)
    pad = groups * k - t
    if pad:
        z = dc.concat([z, dc.zeros((pad, d))], axis=0)
    return dc.reshape(z, (groups, k * d))


def adapt(params: AdapterParams, z: Tensor) -> Tensor:
    """S = linear2(ReLU(linear1(downsample(Z))))."""
    h = dc.relu(dc.add(dc.matmul(downsample(z, params.k), params.w1), params.b1))
    return dc.add(dc.matmul(h, params.w2), params.b2)

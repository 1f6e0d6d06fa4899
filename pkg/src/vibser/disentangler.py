"""Feature disentanglement branches: learnable layer mixing, an encoder MLP,
and diagonal-Gaussian posterior heads with reparameterized sampling.

One independent :class:`BranchParams` instance exists per branch (content and
descriptor); the two share no parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

__all__ = [
    "BranchParams",
    "GaussianPosterior",
    "init_branch",
    "weighted_sum",
    "encode_posterior",
    "sample_latent",
    "branch_kl",
]


@dataclass
class BranchParams:
    """Per-branch parameters: softmax layer-mixing logits, a two-layer GELU
    encoder (D -> H -> H), and linear mu / log-sigma heads (H -> d)."""

    layer_logits: Tensor
    enc_w1: Tensor
    enc_b1: Tensor
    enc_w2: Tensor
    enc_b2: Tensor
    mu_w: Tensor
    mu_b: Tensor
    logsigma_w: Tensor
    logsigma_b: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{name}": getattr(self, name) for name in (
            "layer_logits", "enc_w1", "enc_b1", "enc_w2", "enc_b2",
            "mu_w", "mu_b", "logsigma_w", "logsigma_b")}

    @property
    def latent_dim(self) -> int:
        return self.mu_w.shape[1]


@dataclass
class GaussianPosterior:
    """Per-frame diagonal Gaussian: mu and sigma are both [T, d], sigma > 0."""

    mu: Tensor
    sigma: Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ValueError(f"mu/sigma shape mismatch: {self.mu.shape} vs {self.sigma.shape}")
        if np.any(self.sigma.data <= 0):
            raise ValueError("posterior sigma must be strictly positive")


def init_branch(rng: np.random.Generator, n_layers: int, in_dim: int,
                hidden: int, latent: int) -> BranchParams:
    """Layer logits start at zero (uniform mixing); encoder weights use scaled
    normal init; the posterior heads start near zero so mu ~ 0, sigma ~ 1."""
    def w(shape, scl):
        return dc.parameter(rng.standard_normal(shape) * scl)

    return BranchParams(
        layer_logits=dc.parameter(np.zeros(n_layers)),
        enc_w1=w((in_dim, hidden), 1.0 / np.sqrt(in_dim)),
        enc_b1=dc.parameter(np.zeros(hidden)),
        enc_w2=w((hidden, hidden), 1.0 / np.sqrt(hidden)),
        enc_b2=dc.parameter(np.zeros(hidden)),
        mu_w=w((hidden, latent), 0.1 / np.sqrt(hidden)),
        mu_b=dc.parameter(np.zeros(latent)),
        logsigma_w=w((hidden, latent), 0.01 / np.sqrt(hidden)),
        logsigma_b=dc.parameter(np.zeros(latent)),
    )


def weighted_sum(x: Tensor, layer_logits: Tensor) -> Tensor:
    """Softmax-weighted combination over the layer axis: [L, T, D] -> [T, D]."""
    if x.ndim != 3:
        raise ValueError(f"expected [L, T, D] features, got shape {x.shape}")
    n_layers = x.shape[0]
    if layer_logits.shape != (n_layers,):
        raise ValueError(
            f"layer_logits shape {layer_logits.shape} does not match {n_layers} layers")
    weights = dc.reshape(dc.softmax(layer_logits, axis=-1), (n_layers, 1, 1))
    return dc.reduce_sum(dc.mul(weights, x), axis=0)


def encode_posterior(branch: BranchParams, h: Tensor) -> GaussianPosterior:
    """Frame-wise encoder + heads: mu = mu_head(enc(h)), sigma = exp(logsigma)."""
    e = dc.add(dc.matmul(dc.gelu(dc.add(dc.matmul(h, branch.enc_w1), branch.enc_b1)),
                         branch.enc_w2), branch.enc_b2)
    mu = dc.add(dc.matmul(e, branch.mu_w), branch.mu_b)
    sigma = dc.exp(dc.add(dc.matmul(e, branch.logsigma_w), branch.logsigma_b))
    return GaussianPosterior(mu=mu, sigma=sigma)


def sample_latent(post: GaussianPosterior, mode: Literal["train", "infer"],
                  noise: np.ndarray | None = None) -> Tensor:
    """Train mode reparameterizes per frame; inference uses Z = mu exactly."""
    if mode == "infer":
        return post.mu
    if mode == "train":
        if noise is None:
            raise ValueError("train mode requires a noise array of shape [T, d]")
        return dc.reparameterize(post.mu, post.sigma, noise)
    raise ValueError(f"unknown sampling mode {mode!r}")


def branch_kl(post: GaussianPosterior) -> Tensor:
    """Mean over frames of the per-frame KL to the standard normal (each frame
    sums over the latent dims)."""
    n_frames = post.mu.shape[0]
    return dc.scale(dc.kl_to_standard_normal(post.mu, post.sigma), 1.0 / n_frames)

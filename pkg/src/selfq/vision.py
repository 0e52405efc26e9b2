"""Toy patch-embedding image encoder, EM prototype extractor and projector.

Pipeline order is fixed: ``encode_image -> em_cluster -> enhance_tokens -> project``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import INIT_STD, Block, LayerNorm, Linear, Module


class PipelineOrderError(RuntimeError):
    pass


@dataclass
class VisionConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    d_vision: int = 64
    n_layers: int = 2
    n_heads: int = 4
    K: int = 8
    T: int = 2
    d_model: int = 64

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.d_vision % self.n_heads:
            raise ValueError(f"d_vision {self.d_vision} not divisible by n_heads {self.n_heads}")
        if self.T < 1 or self.K < 1:
            raise ValueError("need T >= 1 and K >= 1")

    @property
    def n_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass
class ImageTokens:
    Z: Tensor
    enhanced: bool = False

    def __len__(self) -> int:
        return self.Z.shape[0]


class VisionEncoder(Module):
    def __init__(self, cfg: VisionConfig, rng: np.random.Generator):
        self.patch_embed = Linear(cfg.patch_dim, cfg.d_vision, rng)
        self.pos_embed = Tensor(rng.normal(0.0, INIT_STD, (cfg.n_tokens, cfg.d_vision)))
        self.blocks = [Block(cfg.d_vision, cfg.n_heads, rng) for _ in range(cfg.n_layers)]
        self.ln_post = LayerNorm(cfg.d_vision)
        self._cfg = cfg

    def patchify(self, pixels: np.ndarray) -> np.ndarray:
        cfg = self._cfg
        pixels = np.asarray(pixels, dtype=np.float64)
        want = (cfg.image_size, cfg.image_size, cfg.channels)
        if pixels.shape != want:
            raise ShapeError(f"image of shape {pixels.shape}, expected {want}")
        n, p = cfg.image_size // cfg.patch_size, cfg.patch_size
        grid = pixels.reshape(n, p, n, p, cfg.channels).transpose(0, 2, 1, 3, 4)
        return grid.reshape(n * n, cfg.patch_dim)

    def patch_embeddings(self, pixels: np.ndarray) -> Tensor:
        """Linear patch embedding, before positions and attention."""
        return self.patch_embed(Tensor(self.patchify(pixels)))

    def __call__(self, pixels: np.ndarray) -> Tensor:
        x = ad.add(self.patch_embeddings(pixels), self.pos_embed)
        for blk in self.blocks:
            x = blk(x)
        return self.ln_post(x)


class PrototypeBank(Module):
    """K learnable cluster centers and the q/k/v/z transforms around them."""

    def __init__(self, cfg: VisionConfig, rng: np.random.Generator):
        d = cfg.d_vision
        self.C = Tensor(rng.standard_normal((cfg.K, d)) / np.sqrt(d))
        self.q_proj = Linear(d, d, rng)
        self.k_proj = Linear(d, d, rng)
        self.k_norm = LayerNorm(d)
        self.v_proj = Linear(d, d, rng)
        self.v_norm = LayerNorm(d)
        self.z_proj = Linear(d, d, rng)
        self._T = cfg.T

    @property
    def K(self) -> int:
        return self.C.shape[0]

    @property
    def T(self) -> int:
        return self._T


class Projector(Module):
    """Two linear layers with a GELU between, vision width -> LM width."""

    def __init__(self, cfg: VisionConfig, rng: np.random.Generator):
        self.fc1 = Linear(cfg.d_vision, cfg.d_model, rng)
        self.fc2 = Linear(cfg.d_model, cfg.d_model, rng)


def encode_image(encoder: VisionEncoder, pixels: np.ndarray) -> ImageTokens:
    return ImageTokens(encoder(pixels), enhanced=False)


def em_cluster(bank: PrototypeBank, tokens: ImageTokens, T: int | None = None) -> tuple[Tensor, Tensor]:
    """Soft EM over image tokens.

    Each iteration: ``M = softmax_tokens(q(C) k(Z)^T)``, then ``C = M v(Z)``.
    The softmax runs over the token axis, so each prototype's row of ``M`` is a
    distribution over tokens and the M-step is a convex combination of values.
    Returns the last assignment map [K, L] and the refined centers [K, d].
    """
    if tokens.enhanced:
        raise PipelineOrderError("em_cluster expects raw (non-enhanced) image tokens")
    T = bank.T if T is None else T
    k = bank.k_norm(bank.k_proj(tokens.Z))
    v = bank.v_norm(bank.v_proj(tokens.Z))
    kt = ad.transpose(k)
    C = bank.C
    M = None
    for _ in range(T):
        M = ad.softmax(ad.matmul(bank.q_proj(C), kt), axis=1)
        C = ad.matmul(M, v)
    return M, C


def enhance_tokens(bank: PrototypeBank, tokens: ImageTokens, centers: Tensor) -> ImageTokens:
    """Residual redistribution of prototypes into every token.

    ``Z_i += z(1/K * sum_j cos(C_j, Z_i) * C_j)``; with a zero ``z`` this is an
    exact identity.
    """
    if tokens.enhanced:
        raise PipelineOrderError("tokens were already enhanced")
    K = centers.shape[0]
    sim = ad.cosine_rows(tokens.Z, centers)
    mixed = ad.scale(ad.matmul(sim, centers), 1.0 / K)
    return ImageTokens(ad.add(tokens.Z, bank.z_proj(mixed)), enhanced=True)


def project(projector: Projector, tokens: ImageTokens) -> Tensor:
    if not tokens.enhanced:
        raise PipelineOrderError("project expects enhanced tokens: run em_cluster and enhance_tokens first")
    return projector.fc2(ad.gelu(projector.fc1(tokens.Z)))

"""Generators and discriminators of the cloud-removal ensemble.

``GeneratorS1S2`` maps SAR plus the cloudy optical image and its cloud mask
to a de-clouded optical image through a long skip connection; a 3x3 head on
the learned residual regresses the cloud mask. ``GeneratorS2S1`` is a plain
ResNet encoder-decoder and both discriminators are spectrally normalized
PatchGANs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, ConvTranspose2d, InstanceNorm, Module, init_weights
from .tensor import DimensionError, Tensor

ATANH_CLAMP = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    ngf: int = 64
    ndf: int = 64
    n_blocks: int = 9
    n_layers: int = 3
    dropout: float = 0.5
    dropout_at_inference: bool = False
    init_std: float = 0.02


class ResBlock(Module):
    """conv-norm-relu-(dropout)-conv-norm plus identity skip."""

    def __init__(self, ch: int, dropout: float = 0.0):
        self.conv1 = Conv2d(ch, ch, 3, 1, 1)
        self.norm1 = InstanceNorm(ch)
        self.conv2 = Conv2d(ch, ch, 3, 1, 1)
        self.norm2 = InstanceNorm(ch)
        self.p = dropout

    def forward(self, x: Tensor, rng: np.random.Generator | None = None, dropout_on: bool = False) -> Tensor:
        h = T.relu(self.norm1(self.conv1(x)))
        if self.p and dropout_on:
            h = T.dropout(h, self.p, rng, training=True)
        return x + self.norm2(self.conv2(h))


def _check_spatial(*tensors: Tensor, multiple: int = 4) -> None:
    dims = {t.shape[2:] for t in tensors}
    if len(dims) != 1:
        raise DimensionError(f"inputs disagree on spatial dims: {sorted(dims)}")
    h, w = next(iter(dims))
    if h % multiple or w % multiple:
        raise DimensionError(f"spatial dims {h}x{w} must be divisible by {multiple}")


def atanh_clamped(x: np.ndarray) -> np.ndarray:
    lim = 1.0 - ATANH_CLAMP
    return np.arctanh(np.clip(x.astype(np.float64), -lim, lim)).astype(x.dtype)


class GeneratorS1S2(Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        g = cfg.ngf
        self.encoder = [Conv2d(7, g, 3, 1, 1), InstanceNorm(g),
                        Conv2d(g, 2 * g, 3, 2, 1), InstanceNorm(2 * g),
                        Conv2d(2 * g, 4 * g, 3, 2, 1), InstanceNorm(4 * g)]
        self.bottleneck = [ResBlock(4 * g, cfg.dropout) for _ in range(cfg.n_blocks)]
        self.decoder = [ConvTranspose2d(4 * g, 4 * g, 3, 2, 1, 1), InstanceNorm(4 * g),
                        ConvTranspose2d(4 * g, 2 * g, 3, 2, 1, 1), InstanceNorm(2 * g)]
        self.image_head = Conv2d(2 * g, 3, 3, 1, 1)
        self.mask_head = Conv2d(3, 1, 3, 1, 1)
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)

    def forward(self, s1: Tensor, s2_cloudy: Tensor, m: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (s2_hat, m_hat, s2_res)."""
        _check_spatial(s1, s2_cloudy, m)
        h = T.concat([s1, s2_cloudy, m], axis=1)
        for i in range(0, len(self.encoder), 2):
            h = T.relu(self.encoder[i + 1](self.encoder[i](h)))
        dropout_on = self.training or self.cfg.dropout_at_inference
        for block in self.bottleneck:
            h = block(h, self.rng, dropout_on)
        for i in range(0, len(self.decoder), 2):
            h = T.relu(self.decoder[i + 1](self.decoder[i](h)))
        s2_res = self.image_head(h)
        skip = Tensor(atanh_clamped(s2_cloudy.data))
        s2_hat = T.tanh(skip + s2_res)
        m_hat = T.sigmoid(self.mask_head(s2_res))
        return s2_hat, m_hat, s2_res


class GeneratorS2S1(Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        g = cfg.ngf
        self.stem = Conv2d(3, g, 7, 1, 3)
        self.stem_norm = InstanceNorm(g)
        self.down = [Conv2d(g, 2 * g, 3, 2, 1), InstanceNorm(2 * g),
                     Conv2d(2 * g, 4 * g, 3, 2, 1), InstanceNorm(4 * g)]
        self.blocks = [ResBlock(4 * g) for _ in range(cfg.n_blocks)]
        self.up = [ConvTranspose2d(4 * g, 2 * g, 3, 2, 1, 1), InstanceNorm(2 * g),
                   ConvTranspose2d(2 * g, g, 3, 2, 1, 1), InstanceNorm(g)]
        self.head = Conv2d(g, 3, 7, 1, 3)

    def forward(self, s2: Tensor) -> Tensor:
        _check_spatial(s2)
        h = T.relu(self.stem_norm(self.stem(s2)))
        for i in range(0, len(self.down), 2):
            h = T.relu(self.down[i + 1](self.down[i](h)))
        for block in self.blocks:
            h = block(h)
        for i in range(0, len(self.up), 2):
            h = T.relu(self.up[i + 1](self.up[i](h)))
        return T.tanh(self.head(h))


class Discriminator(Module):
    """PatchGAN with spectrally normalized 4x4 convs and leaky ReLU 0.2.

    ``conditional`` discriminators take the cloud mask as an extra channel.
    """

    def __init__(self, cfg: ModelConfig = ModelConfig(), conditional: bool = False):
        d = cfg.ndf
        in_ch = 4 if conditional else 3
        self.conditional = conditional
        self.convs = [Conv2d(in_ch, d, 4, 2, 1, spectral=True)]
        self.norms = []
        ch = d
        for i in range(1, cfg.n_layers):
            nxt = d * min(2 ** i, 8)
            self.convs.append(Conv2d(ch, nxt, 4, 2, 1, spectral=True))
            self.norms.append(InstanceNorm(nxt))
            ch = nxt
        nxt = d * min(2 ** cfg.n_layers, 8)
        self.convs.append(Conv2d(ch, nxt, 4, 1, 1, spectral=True))
        self.norms.append(InstanceNorm(nxt))
        self.convs.append(Conv2d(nxt, 1, 4, 1, 1, spectral=True))

    def forward(self, img: Tensor, cond: Tensor | None = None) -> Tensor:
        if self.conditional and cond is None:
            raise ValueError("conditional discriminator needs a cloud mask")
        if not self.conditional and cond is not None:
            raise ValueError("unconditional discriminator takes no cloud mask")
        h = T.concat([img, cond], axis=1) if cond is not None else img
        h = T.leaky_relu(self.convs[0](h), 0.2)
        for conv, norm in zip(self.convs[1:-1], self.norms):
            h = T.leaky_relu(norm(conv(h)), 0.2)
        return self.convs[-1](h)


def patch_map_size(size: int, n_layers: int = 3) -> int:
    for _ in range(n_layers):
        size = T.conv_output_size(size, 4, 2, 1)
    for _ in range(2):
        size = T.conv_output_size(size, 4, 1, 1)
    return size


class Ensemble(Module):
    """The four networks with stable dot-separated parameter names."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        self.g_s1s2 = GeneratorS1S2(cfg, seed=seed + 1)
        self.g_s2s1 = GeneratorS2S1(cfg)
        self.d_s1 = Discriminator(cfg, conditional=False)
        self.d_s2 = Discriminator(cfg, conditional=True)
        self.cfg = cfg
        init_weights(self, seed, cfg.init_std)

    def generator_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.g_s1s2.named_parameters("g_s1s2.")) + list(self.g_s2s1.named_parameters("g_s2s1."))


def as_batch(x: np.ndarray) -> Tensor:
    """(C, H, W) array -> (1, C, H, W) tensor."""
    return Tensor(np.asarray(x)[None])

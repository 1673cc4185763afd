"""Continuous latent codecs.

Any object with ``encode``, ``decode``, ``latent_channels`` and
``spatial_ratio`` plugs into the pipeline. The patch codecs here stand in
for a pretrained VAE: they map each p x p pixel patch linearly to a
latent vector, so an image ``[3, H, W]`` becomes ``[c, H/p, W/p]``.
Batched inputs ``[B, 3, H, W]`` are accepted everywhere.
"""

from __future__ import annotations

from typing import Protocol, runtime_checkable

import numpy as np

from .numerics import Tensor, backward, matmul, mse
from .numerics.optim import AdamW


@runtime_checkable
class LatentCodec(Protocol):
    latent_channels: int
    spatial_ratio: int

    def encode(self, image: np.ndarray) -> np.ndarray: ...

    def decode(self, latent: np.ndarray) -> np.ndarray: ...


def patchify(image: np.ndarray, p: int) -> np.ndarray:
    """``[..., 3, H, W]`` -> ``[..., H/p, W/p, 3*p*p]`` with (channel, row, col) packing."""
    *lead, ch, hh, ww = image.shape
    if hh % p or ww % p:
        raise ValueError(f"image size {hh}x{ww} not divisible by patch size {p}")
    x = image.reshape(*lead, ch, hh // p, p, ww // p, p)
    n = len(lead)
    x = x.transpose(*range(n), n + 1, n + 3, n, n + 2, n + 4)
    return x.reshape(*lead, hh // p, ww // p, ch * p * p)


def unpatchify(patches: np.ndarray, p: int, channels: int = 3) -> np.ndarray:
    *lead, h, w, _ = patches.shape
    n = len(lead)
    x = patches.reshape(*lead, h, w, channels, p, p)
    x = x.transpose(*range(n), n + 2, n, n + 3, n + 1, n + 4)
    return x.reshape(*lead, channels, h * p, w * p)


def _check_power_of_two(r: int):
    if r < 1 or r & (r - 1):
        raise ValueError(f"spatial ratio must be a positive power of two, got {r}")


class PatchCodec:
    """Fixed orthonormal linear patch codec (bias-free, exactly invertible).

    ``basis="identity"`` packs raw pixels (c = 3p^2); ``basis="orthogonal"``
    applies a seeded random rotation of the patch space.
    """

    def __init__(self, patch_size: int = 4, basis: str = "identity", seed: int = 0):
        _check_power_of_two(patch_size)
        self.patch_size = patch_size
        self.spatial_ratio = patch_size
        self.latent_channels = 3 * patch_size * patch_size
        self.basis = basis
        d = self.latent_channels
        if basis == "identity":
            self.matrix = np.eye(d)
        elif basis == "orthogonal":
            q, r = np.linalg.qr(np.random.default_rng(seed).standard_normal((d, d)))
            self.matrix = q * np.sign(np.diag(r))
        else:
            raise ValueError(f"unknown basis {basis!r}")

    def encode(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image)
        z = patchify(image, self.patch_size) @ self.matrix.astype(image.dtype)
        return np.moveaxis(z, -1, -3)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        latent = np.asarray(latent)
        if latent.shape[-3] != self.latent_channels:
            raise ValueError(f"expected {self.latent_channels} latent channels, got {latent.shape[-3]}")
        z = np.moveaxis(latent, -3, -1) @ self.matrix.T.astype(latent.dtype)
        return unpatchify(z, self.patch_size)

    def state(self) -> dict[str, np.ndarray]:
        return {"matrix": self.matrix}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.matrix = np.asarray(state["matrix"], dtype=np.float64)


class LearnedPatchCodec(PatchCodec):
    """Bias-free linear patch autoencoder trained by reconstruction MSE.

    ``channels`` may be smaller than 3p^2, in which case the codec is lossy.
    """

    def __init__(self, patch_size: int = 4, channels: int = 16, seed: int = 0):
        _check_power_of_two(patch_size)
        self.patch_size = patch_size
        self.spatial_ratio = patch_size
        self.latent_channels = channels
        self.basis = "learned"
        d = 3 * patch_size * patch_size
        rng = np.random.default_rng(seed)
        self.enc = rng.standard_normal((d, channels)) / np.sqrt(d)
        self.dec = self.enc.T.copy()

    def fit(self, images: np.ndarray, steps: int = 300, lr: float = 1e-2, seed: int = 0) -> list[float]:
        x = patchify(np.asarray(images, dtype=np.float64), self.patch_size)
        x = x.reshape(-1, x.shape[-1])
        enc = Tensor(self.enc, requires_grad=True)
        dec = Tensor(self.dec, requires_grad=True)
        opt = AdamW([("enc", enc), ("dec", dec)], lr=lr, weight_decay=0.0, betas=(0.9, 0.999))
        rng = np.random.default_rng(seed)
        history = []
        for _ in range(steps):
            batch = Tensor(x[rng.choice(len(x), size=min(256, len(x)), replace=False)])
            enc.grad = dec.grad = None
            loss = mse(matmul(matmul(batch, enc), dec), batch)
            backward(loss)
            opt.step()
            history.append(float(loss.data))
        self.enc, self.dec = enc.data, dec.data
        return history

    def encode(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image)
        return np.moveaxis(patchify(image, self.patch_size) @ self.enc.astype(image.dtype), -1, -3)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        latent = np.asarray(latent)
        z = np.moveaxis(latent, -3, -1) @ self.dec.astype(latent.dtype)
        return unpatchify(z, self.patch_size)

    def state(self) -> dict[str, np.ndarray]:
        return {"enc": self.enc, "dec": self.dec}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.enc = np.asarray(state["enc"], dtype=np.float64)
        self.dec = np.asarray(state["dec"], dtype=np.float64)


def make_codec(kind: str = "patch", patch_size: int = 4, basis: str = "identity",
               channels: int | None = None, seed: int = 0):
    if kind == "patch":
        return PatchCodec(patch_size, basis, seed)
    if kind == "learned_patch":
        return LearnedPatchCodec(patch_size, channels or 3 * patch_size * patch_size, seed)
    raise ValueError(f"unknown codec kind {kind!r}")


class ChannelNormalizer:
    """Per-channel standardization of latents, fitted on training latents."""

    def __init__(self, mean: np.ndarray | None = None, std: np.ndarray | None = None):
        self.mean = mean
        self.std = std

    @classmethod
    def identity(cls, channels: int) -> "ChannelNormalizer":
        return cls(np.zeros(channels), np.ones(channels))

    @classmethod
    def fit(cls, latents: np.ndarray, min_std: float = 1e-3) -> "ChannelNormalizer":
        axes = tuple(i for i in range(latents.ndim) if i != latents.ndim - 3)
        mean = latents.mean(axis=axes)
        std = np.maximum(latents.std(axis=axes), min_std)
        return cls(mean.astype(np.float64), std.astype(np.float64))

    def _b(self, v: np.ndarray, dtype):
        return v.astype(dtype)[:, None, None]

    def normalize(self, latent: np.ndarray) -> np.ndarray:
        return (latent - self._b(self.mean, latent.dtype)) / self._b(self.std, latent.dtype)

    def denormalize(self, latent: np.ndarray) -> np.ndarray:
        return latent * self._b(self.std, latent.dtype) + self._b(self.mean, latent.dtype)

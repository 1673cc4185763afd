"""The assembled generator: codec, latent normalizer, AR transformer, flow head."""

from __future__ import annotations

import numpy as np

from ..ar_transformer import ARTransformer
from ..flow_head import FlowHead, fm_loss
from ..pyramid import build_pyramid, down, resize_bilinear
from ..tokenizer import ChannelNormalizer, LearnedPatchCodec, make_codec
from .config import ModelConfig


class FlowARModel:
    def __init__(self, config: ModelConfig):
        problems = config.problems()
        if problems:
            raise ValueError("invalid model config: " + "; ".join(problems))
        self.config = config.resolved()
        cfg = self.config
        self.dtype = np.dtype(cfg.dtype)
        cc = cfg.codec
        self.codec = make_codec(cc.kind, cc.patch_size, cc.basis, cc.channels or None, cc.seed)
        self.normalizer = ChannelNormalizer.identity(self.codec.latent_channels)
        rng = np.random.default_rng(cfg.init_seed)
        self.ar = ARTransformer(cfg.ar, rng, self.dtype)
        self.head = FlowHead(cfg.flow, rng, self.dtype)

    # --- parameters -----------------------------------------------------------
    def named_parameters(self):
        yield from (("ar." + n, p) for n, p in self.ar.named_parameters())
        yield from (("flow." + n, p) for n, p in self.head.named_parameters())

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{n}": p.data for n, p in self.named_parameters()}
        out["norm/mean"] = self.normalizer.mean
        out["norm/std"] = self.normalizer.std
        for k, v in self.codec.state().items():
            out[f"codec/{k}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        for n, p in own.items():
            arr = arrays[f"param/{n}"]
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {n}: {arr.shape} vs {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)
        self.normalizer = ChannelNormalizer(np.array(arrays["norm/mean"]), np.array(arrays["norm/std"]))
        self.codec.load_state({k[len("codec/"):]: v for k, v in arrays.items() if k.startswith("codec/")})

    # --- data path --------------------------------------------------------------
    def prepare_codec(self, images: np.ndarray) -> None:
        """Fit the learned codec (if any) and the latent normalizer on training images."""
        if isinstance(self.codec, LearnedPatchCodec):
            self.codec.fit(images, steps=self.config.codec.fit_steps, seed=self.config.codec.seed)
        if self.config.normalize:
            self.normalizer = ChannelNormalizer.fit(self.codec.encode(np.asarray(images, dtype=np.float64)))

    def encode(self, images: np.ndarray) -> np.ndarray:
        z = self.codec.encode(np.asarray(images, dtype=np.float64))
        return self.normalizer.normalize(z).astype(self.dtype)

    def decode(self, latents: np.ndarray) -> np.ndarray:
        return self.codec.decode(self.normalizer.denormalize(np.asarray(latents, dtype=np.float64)))

    def pyramid(self, images: np.ndarray) -> list[np.ndarray]:
        """Normalized per-scale latents, coarsest first, ``[B, c, h_i, w_i]`` each."""
        cfg = self.config
        if cfg.pyramid_mode == "latent":
            return build_pyramid(self.encode(images), cfg.schedule, cfg.resample).scales
        size = cfg.image_size
        ratio = self.codec.spatial_ratio
        scales = []
        for s in cfg.schedule:
            px = s * ratio
            if px == size:
                small = images
            elif cfg.resample == "nearest":
                small = down(np.asarray(images, dtype=np.float64), size // px)
            else:
                small = resize_bilinear(np.asarray(images, dtype=np.float64), px, px)
            scales.append(self.encode(small))
        return scales

    def loss(self, class_ids, scales, ts, f0s):
        sems = self.ar.training_forward(class_ids, scales)
        cfg = self.config.flow
        return fm_loss(self.head, scales, sems, ts, f0s, cfg.target_mode, cfg.loss_reduction)

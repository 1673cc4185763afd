"""Configuration dataclasses for the model, training and sampling."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

from ..ar_transformer import ARConfig
from ..flow_head import FlowConfig
from ..pyramid import ScaleSchedule, schedule_problems


@dataclass
class CodecConfig:
    kind: str = "patch"  # patch | learned_patch
    patch_size: int = 4
    basis: str = "identity"  # identity | orthogonal (patch only)
    channels: int = 0  # learned_patch only; 0 means 3 * patch_size**2
    seed: int = 0
    fit_steps: int = 300

    @property
    def latent_channels(self) -> int:
        if self.kind == "learned_patch" and self.channels:
            return self.channels
        return 3 * self.patch_size**2


@dataclass
class ModelConfig:
    image_size: int = 16
    num_classes: int = 4
    schedule: tuple = (1, 2, 4)
    pyramid_mode: str = "latent"  # latent | image
    resample: str = "nearest"  # nearest (avg-pool/replicate) | bilinear
    normalize: bool = True
    dtype: str = "float32"
    init_seed: int = 0
    codec: CodecConfig = field(default_factory=CodecConfig)
    ar: ARConfig = field(default_factory=ARConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)

    def problems(self) -> list[str]:
        out = []
        sizes = tuple(self.schedule)
        out += schedule_problems(sizes)
        ratio = self.codec.patch_size
        if ratio < 1 or ratio & (ratio - 1):
            out.append(f"codec.patch_size must be a power of two, got {ratio}")
        elif self.image_size % ratio:
            out.append(f"image_size {self.image_size} not divisible by codec ratio {ratio}")
        elif sizes and self.image_size // ratio != sizes[-1]:
            out.append(f"finest scale {sizes[-1]} != image_size / ratio = {self.image_size // ratio}")
        if self.pyramid_mode not in ("latent", "image"):
            out.append(f"pyramid_mode must be latent or image, got {self.pyramid_mode!r}")
        if self.resample not in ("nearest", "bilinear"):
            out.append(f"resample must be nearest or bilinear, got {self.resample!r}")
        if self.dtype not in ("float32", "float64"):
            out.append(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.num_classes < 1:
            out.append(f"num_classes must be >= 1, got {self.num_classes}")
        return out

    def resolved(self) -> "ModelConfig":
        """Copy with the AR/flow sub-configs made consistent with the shared fields."""
        ScaleSchedule.of(self.schedule)
        c = self.codec.latent_channels
        ar = ARConfig(**{**asdict(self.ar), "schedule": tuple(self.schedule), "num_classes": self.num_classes,
                         "latent_channels": c, "resample": self.resample})
        flow = FlowConfig(**{**asdict(self.flow), "latent_channels": c, "cond_width": ar.width})
        return ModelConfig(**{**_shallow(self), "ar": ar, "flow": flow, "schedule": tuple(self.schedule)})


def _shallow(obj) -> dict:
    return {k: getattr(obj, k) for k in obj.__dataclass_fields__}


@dataclass
class TrainConfig:
    peak_lr: float = 3e-3
    min_lr: float = 1e-5
    warmup_epochs: float = 0.78125  # 100 steps on the 8192-image default dataset
    total_epochs: float = 15.625  # 2000 steps
    batch_size: int = 64
    label_dropout: float = 0.1
    grad_clip_norm: float = 1.0
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    seed: int = 0
    schedule: str = "cosine"
    checkpoint_every: int = 500
    log_every: int = 10
    total_steps: int = 0  # when > 0, overrides total_epochs


    def problems(self) -> list[str]:
        out = []
        if not 0 < self.min_lr <= self.peak_lr:
            out.append(f"need 0 < min_lr <= peak_lr, got min_lr={self.min_lr} peak_lr={self.peak_lr}")
        if not 0 <= self.label_dropout < 1:
            out.append(f"label_dropout must be in [0, 1), got {self.label_dropout}")
        if self.batch_size < 1:
            out.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.warmup_epochs < 0 or self.total_epochs <= 0 or self.warmup_epochs > self.total_epochs:
            out.append(f"need 0 <= warmup_epochs <= total_epochs, got {self.warmup_epochs}, {self.total_epochs}")
        if self.total_steps < 0:
            out.append(f"total_steps must be >= 0, got {self.total_steps}")
        if self.schedule != "cosine":
            out.append(f"only the cosine schedule is supported, got {self.schedule!r}")
        return out

    def steps(self, dataset_size: int) -> tuple[int, int, int]:
        """(steps_per_epoch, warmup_steps, total_steps) for a dataset of the given size."""
        per_epoch = max(dataset_size // min(self.batch_size, dataset_size), 1)
        total = self.total_steps or max(int(math.ceil(self.total_epochs * per_epoch)), 1)
        return per_epoch, min(int(round(self.warmup_epochs * per_epoch)), total), total


# values of the published ImageNet recipe; Adam betas and weight decay are not given there
FULL_SCALE_TRAIN = TrainConfig(peak_lr=2e-4, min_lr=1e-5, warmup_epochs=100, total_epochs=400, batch_size=1024,
                                label_dropout=0.1, grad_clip_norm=1.0)


@dataclass
class SampleConfig:
    euler_steps: int = 25
    cfg_scale: float = 1.0
    seed: int = 0
    class_id: int = 0

    def problems(self) -> list[str]:
        out = []
        if self.euler_steps < 1:
            out.append(f"euler_steps must be >= 1, got {self.euler_steps}")
        if self.cfg_scale < 0:
            out.append(f"cfg_scale must be >= 0, got {self.cfg_scale}")
        return out


@dataclass
class DataConfig:
    dir: str = ""
    count: int = 8192
    seed: int = 0
    eval_count: int = 512
    eval_seed: int = 1

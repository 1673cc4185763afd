"""Coarse-to-fine latent scale pyramids and the Down/Up resampling operators.

All functions act on the last two axes, so ``[c, h, w]`` and batched
``[B, c, h, w]`` arrays are both accepted. ``down`` is r x r average
pooling and ``up`` is nearest-neighbour replication; ``down(up(x, r), r)``
returns ``x`` exactly. Bilinear kernels are available for sensitivity runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class ScaleSchedule:
    """Square per-scale side lengths, coarsest first, e.g. (1, 2, 4, 8, 16)."""

    sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        object.__setattr__(self, "sizes", sizes)
        problems = schedule_problems(sizes)
        if problems:
            raise ValueError("; ".join(problems))

    @classmethod
    def of(cls, sizes: Sequence[int] | "ScaleSchedule") -> "ScaleSchedule":
        return sizes if isinstance(sizes, ScaleSchedule) else cls(tuple(sizes))

    @classmethod
    def doubling(cls, finest: int) -> "ScaleSchedule":
        sizes = [finest]
        while sizes[-1] > 1:
            sizes.append(sizes[-1] // 2)
        return cls(tuple(reversed(sizes)))

    def __len__(self):
        return len(self.sizes)

    def __iter__(self):
        return iter(self.sizes)

    def __getitem__(self, i):
        return self.sizes[i]

    @property
    def finest(self) -> int:
        return self.sizes[-1]

    def tokens(self, i: int) -> int:
        return self.sizes[i] ** 2

    def up_factor(self, i: int) -> int:
        """Upsampling ratio from scale ``i`` to scale ``i + 1``."""
        return self.sizes[i + 1] // self.sizes[i]

    def sequence_length(self) -> int:
        """Tokens in the teacher-forced AR input: class block + up(s^1..s^{n-1})."""
        return self.tokens(0) + sum(self.tokens(i) for i in range(1, len(self)))


def schedule_problems(sizes: Sequence[int]) -> list[str]:
    """Every reason ``sizes`` is not a legal schedule (empty list if legal)."""
    out = []
    if not sizes:
        return ["schedule is empty"]
    if any(s < 1 for s in sizes):
        out.append(f"schedule sizes must be positive: {list(sizes)}")
        return out
    bad_order = [(a, b) for a, b in zip(sizes, sizes[1:]) if b <= a]
    if bad_order:
        out.append(f"schedule must be strictly increasing, offending pairs {bad_order}")
    finest = sizes[-1]
    nondiv = [s for s in sizes if finest % s]
    if nondiv:
        out.append(f"sizes {nondiv} do not divide the finest size {finest}")
    nonchain = [(a, b) for a, b in zip(sizes, sizes[1:]) if b > a and b % a]
    if nonchain:
        out.append(f"consecutive sizes must divide each other, offending pairs {nonchain}")
    return out


def down(x: np.ndarray, r: int) -> np.ndarray:
    """Average-pool the last two axes by factor ``r``."""
    x = np.asarray(x)
    h, w = x.shape[-2:]
    if r < 1 or h % r or w % r:
        raise ValueError(f"down factor {r} does not divide spatial size {h}x{w}")
    if r == 1:
        return x
    return x.reshape(*x.shape[:-2], h // r, r, w // r, r).mean(axis=(-3, -1))


def up(x: np.ndarray, r: int) -> np.ndarray:
    """Nearest-neighbour upsampling of the last two axes by factor ``r``."""
    if r < 1:
        raise ValueError(f"up factor must be >= 1, got {r}")
    x = np.asarray(x)
    if r == 1:
        return x
    return np.repeat(np.repeat(x, r, axis=-2), r, axis=-1)


def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres, edge clamped
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def resize_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    x = np.asarray(x)
    h, w = x.shape[-2:]
    mh = _bilinear_matrix(h, out_h).astype(x.dtype)
    mw = _bilinear_matrix(w, out_w).astype(x.dtype)
    return np.matmul(np.matmul(mh, x), mw.T)


def resample(x: np.ndarray, size: int, kind: str = "nearest") -> np.ndarray:
    """Resize the last two axes to ``size x size`` with the configured kernel pair.

    ``nearest`` means avg-pool when shrinking and replication when growing.
    """
    h = x.shape[-1]
    if size == h:
        return x
    if kind == "bilinear":
        return resize_bilinear(x, size, size)
    if kind != "nearest":
        raise ValueError(f"unknown resample kind {kind!r}")
    if size < h:
        if h % size:
            raise ValueError(f"cannot pool {h} down to {size}")
        return down(x, h // size)
    if size % h:
        raise ValueError(f"cannot replicate {h} up to {size}")
    return up(x, size // h)


@dataclass
class LatentPyramid:
    """Per-scale token maps ``s^1..s^n``; ``scales[-1]`` is the source latent."""

    scales: list[np.ndarray]

    def __len__(self):
        return len(self.scales)

    def __getitem__(self, i):
        return self.scales[i]

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(s.shape[-1] for s in self.scales)


def build_pyramid(latent: np.ndarray, schedule, kind: str = "nearest") -> LatentPyramid:
    """``scales[i] = Down(F, finest / size_i)``; the finest scale is ``F`` itself."""
    schedule = ScaleSchedule.of(schedule)
    h, w = latent.shape[-2:]
    if h != w or h != schedule.finest:
        raise ValueError(f"latent is {h}x{w} but schedule finest size is {schedule.finest}")
    scales = []
    for s in schedule.sizes:
        if s == h:
            scales.append(latent)
        elif kind == "nearest":
            scales.append(down(latent, h // s))
        else:
            scales.append(resize_bilinear(latent, s, s))
    return LatentPyramid(scales)


def build_pyramid_from_image(image: np.ndarray, codec, schedule, mode: str = "latent",
                             kind: str = "nearest") -> LatentPyramid:
    """Scale sequence from an image.

    ``mode="latent"`` encodes once and pools the latent; ``mode="image"``
    pools the image to each scale's pixel size and encodes every copy.
    """
    schedule = ScaleSchedule.of(schedule)
    if mode == "latent":
        return build_pyramid(codec.encode(image), schedule, kind)
    if mode != "image":
        raise ValueError(f"unknown pyramid mode {mode!r}")
    size = image.shape[-1]
    ratio = codec.spatial_ratio
    if size != schedule.finest * ratio:
        raise ValueError(f"image size {size} does not match finest scale {schedule.finest} x ratio {ratio}")
    scales = []
    for s in schedule.sizes:
        px = s * ratio
        small = image if px == size else (down(image, size // px) if kind == "nearest"
                                          else resize_bilinear(image, px, px))
        scales.append(codec.encode(small))
    return LatentPyramid(scales)

"""Deterministic image corruption operators and their strength schedules.

All operators are pure functions on float arrays whose last two axes are
height and width (leading batch/channel axes are processed independently),
with pixel values in [0, 255].
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.ndimage import convolve1d

BRIGHTNESS_SCHEDULE = (0.75, 0.5, 0.75, 1.0, 1.25, 1.5, 1.25, 1.0)
BLUR_SCHEDULE_FULL = (7, 15, 29, 35, 43)   # presupposes person-crop-sized images
BLUR_SCHEDULE_DESK = (3, 5, 7, 9, 11)      # fits 32x32 desk-scale images
PIXELATE_SCHEDULE = (0.6, 0.5, 0.4, 0.3, 0.25)


class CorruptionKind(Enum):
    BRIGHTNESS = "brightness"
    GAUSSIAN_BLUR = "gaussian-blur"
    PIXELATE = "pixelate"

    @classmethod
    def parse(cls, name: str) -> "CorruptionKind":
        for member in cls:
            if member.value == name or member.name.lower() == name.lower():
                return member
        raise ValueError(f"unknown corruption kind {name!r}")


def apply_brightness(image: np.ndarray, s: float) -> np.ndarray:
    """Multiply every pixel by `s` and clip back into [0, 255]."""
    if s <= 0:
        raise ValueError("brightness factor must be positive")
    return np.clip(np.asarray(image, dtype=np.float32) * np.float32(s), 0.0, 255.0)


def gaussian_kernel1d(kernel_size: int) -> np.ndarray:
    """Normalized 1-D Gaussian taps with sigma tied to the kernel size by
    sigma = 0.3 * ((k - 1)/2 - 1) + 0.8."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError("kernel size must be a positive odd integer")
    sigma = 0.3 * ((kernel_size - 1) * 0.5 - 1.0) + 0.8
    half = (kernel_size - 1) // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def apply_gaussian_blur(image: np.ndarray, kernel_size: int) -> np.ndarray:
    """Separable Gaussian convolution with reflect padding (edge pixel not
    repeated). The kernel must not exceed the image extent."""
    image = np.asarray(image, dtype=np.float32)
    h, w = image.shape[-2], image.shape[-1]
    if kernel_size > min(h, w):
        raise ValueError(f"kernel size {kernel_size} exceeds image extent {min(h, w)}")
    kernel = gaussian_kernel1d(kernel_size)
    out = convolve1d(image.astype(np.float64), kernel, axis=-2, mode="mirror")
    out = convolve1d(out, kernel, axis=-1, mode="mirror")
    return out.astype(np.float32)


def apply_pixelate(image: np.ndarray, s: float) -> np.ndarray:
    """Box-filter downsample to round(s*H) x round(s*W), then blow back up
    with nearest-neighbour so the output is constant on each cell."""
    if not 0 < s <= 1:
        raise ValueError("pixelate scale must be in (0, 1]")
    image = np.asarray(image, dtype=np.float32)
    h, w = image.shape[-2], image.shape[-1]
    th, tw = int(round(s * h)), int(round(s * w))
    if th < 1 or tw < 1:
        raise ValueError(f"pixelate scale {s} collapses a {h}x{w} image to zero extent")

    small = _box_downsample(image, axis=-2, target=th)
    small = _box_downsample(small, axis=-1, target=tw)
    idx_h = (np.arange(h) * th) // h
    idx_w = (np.arange(w) * tw) // w
    out = np.take(np.take(small, idx_h, axis=-2), idx_w, axis=-1)
    return out.astype(np.float32)


def _box_downsample(a: np.ndarray, axis: int, target: int) -> np.ndarray:
    """Average over `target` contiguous integer cells along one axis; cell
    sizes differ by at most one pixel when the extent is not divisible."""
    extent = a.shape[axis]
    starts = (np.arange(target) * extent) // target
    sizes = np.diff(np.append(starts, extent))
    sums = np.add.reduceat(a.astype(np.float64), starts, axis=axis)
    shape = [1] * a.ndim
    shape[axis] = target
    return sums / sizes.reshape(shape)


@dataclass(frozen=True)
class CorruptionSpec:
    """A corruption kind plus the ordered strengths of its phases."""

    kind: CorruptionKind
    schedule: tuple[float, ...]

    def __post_init__(self):
        if not self.schedule:
            raise ValueError("corruption schedule is empty")
        if self.kind is CorruptionKind.BRIGHTNESS and any(s <= 0 for s in self.schedule):
            raise ValueError("brightness factors must be positive")
        if self.kind is CorruptionKind.GAUSSIAN_BLUR:
            if any(int(k) != k or int(k) < 1 or int(k) % 2 == 0 for k in self.schedule):
                raise ValueError("blur kernel sizes must be positive odd integers")
        if self.kind is CorruptionKind.PIXELATE and any(not 0 < s <= 1 for s in self.schedule):
            raise ValueError("pixelate scales must be in (0, 1]")

    @classmethod
    def default(cls, kind: CorruptionKind, desk_scale: bool = True) -> "CorruptionSpec":
        if kind is CorruptionKind.BRIGHTNESS:
            return cls(kind, BRIGHTNESS_SCHEDULE)
        if kind is CorruptionKind.GAUSSIAN_BLUR:
            return cls(kind, BLUR_SCHEDULE_DESK if desk_scale else BLUR_SCHEDULE_FULL)
        return cls(kind, PIXELATE_SCHEDULE)

    def apply(self, images: np.ndarray, strength: float) -> np.ndarray:
        if self.kind is CorruptionKind.BRIGHTNESS:
            return apply_brightness(images, strength)
        if self.kind is CorruptionKind.GAUSSIAN_BLUR:
            return apply_gaussian_blur(images, int(strength))
        return apply_pixelate(images, strength)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "schedule": list(self.schedule)}

    @classmethod
    def from_dict(cls, d: dict) -> "CorruptionSpec":
        return cls(CorruptionKind.parse(d["kind"]), tuple(d["schedule"]))

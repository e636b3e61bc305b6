"""
Stain Normalization Module
Few-Shot Slide Classification Pipeline

Reinhard color transfer: pixels are mapped RGB -> LMS -> log10 -> l-alpha-beta,
each channel is shifted and scaled to the target mean and standard deviation,
and the result is mapped back to 8-bit RGB. Pixel I/O uses binary PPM (P6).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml
from scipy import linalg

from .errors import DataFormatError

logger = logging.getLogger(__name__)

RGB_TO_LMS = np.array([
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
])
LMS_TO_RGB = linalg.inv(RGB_TO_LMS)

LMS_TO_LAB = np.diag([1 / np.sqrt(3), 1 / np.sqrt(6), 1 / np.sqrt(2)]) @ np.array([
    [1.0, 1.0, 1.0],
    [1.0, 1.0, -2.0],
    [1.0, -1.0, 0.0],
])
LAB_TO_LMS = np.array([
    [1.0, 1.0, 1.0],
    [1.0, 1.0, -1.0],
    [1.0, -2.0, 0.0],
]) @ np.diag([np.sqrt(3) / 3, np.sqrt(6) / 6, np.sqrt(2) / 2])

LMS_FLOOR = 1e-6
ZERO_STD = 1e-12
STAT_KEYS = ("l_mean", "alpha_mean", "beta_mean", "l_std", "alpha_std", "beta_std")


@dataclass(frozen=True)
class ChannelStats:
    """Mean and standard deviation of the l, alpha and beta channels."""

    means: tuple
    stds: tuple

    def __post_init__(self):
        means = tuple(float(v) for v in self.means)
        stds = tuple(float(v) for v in self.stds)
        if len(means) != 3 or len(stds) != 3:
            raise DataFormatError("channel stats need three means and three stds")
        if any(s < 0 for s in stds):
            raise DataFormatError(f"negative channel std in {stds}")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stds", stds)

    def as_dict(self):
        return dict(zip(STAT_KEYS, self.means + self.stds))

    @classmethod
    def from_dict(cls, values):
        unknown = set(values) - set(STAT_KEYS)
        missing = set(STAT_KEYS) - set(values)
        if unknown or missing:
            raise DataFormatError(
                f"stats file keys: missing {sorted(missing)}, unknown {sorted(unknown)}"
            )
        return cls(tuple(values[k] for k in STAT_KEYS[:3]), tuple(values[k] for k in STAT_KEYS[3:]))


def _check_image(image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataFormatError(f"expected an H x W x 3 RGB image, got shape {image.shape}")
    if image.shape[0] * image.shape[1] == 0:
        raise DataFormatError("image has zero pixels")
    return image


def rgb_to_lab(image):
    """8-bit RGB image -> (H, W, 3) l-alpha-beta array."""
    rgb = _check_image(image).astype(np.float64) / 255.0
    lms = np.maximum(rgb @ RGB_TO_LMS.T, LMS_FLOOR)
    return np.log10(lms) @ LMS_TO_LAB.T


def lab_to_rgb(lab):
    """l-alpha-beta array -> 8-bit RGB image, rounded and clamped to [0, 255]."""
    lms = np.power(10.0, np.asarray(lab) @ LAB_TO_LMS.T)
    rgb = lms @ LMS_TO_RGB.T * 255.0
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def compute_stats(image):
    """Per-channel mean and population std in l-alpha-beta space."""
    lab = rgb_to_lab(image).reshape(-1, 3)
    return ChannelStats(tuple(lab.mean(axis=0)), tuple(lab.std(axis=0)))


def normalize(image, target):
    """Match the image's l-alpha-beta statistics to ``target``.

    A channel whose source std is zero is only shifted.
    """
    lab = rgb_to_lab(image)
    flat = lab.reshape(-1, 3)
    src_mean, src_std = flat.mean(axis=0), flat.std(axis=0)
    tgt_mean, tgt_std = np.asarray(target.means), np.asarray(target.stds)
    scale = np.where(src_std > ZERO_STD, tgt_std / np.where(src_std > ZERO_STD, src_std, 1.0), 1.0)
    return lab_to_rgb((lab - src_mean) * scale + tgt_mean)


class ReinhardNormalizer:
    """A stain normalization object: fit on a target image, transform others."""

    def __init__(self, target_stats=None):
        self.target_stats = target_stats

    def fit(self, target):
        self.target_stats = compute_stats(target)
        return self

    def transform(self, image):
        if self.target_stats is None:
            raise DataFormatError("normalizer has no target stats; call fit first")
        return normalize(image, self.target_stats)


# ---------------------------------------------------------------------------
# Pixel and stats files
# ---------------------------------------------------------------------------

def _ppm_tokens(payload, count):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(payload) and payload[pos:pos + 1].isspace():
            pos += 1
        if pos < len(payload) and payload[pos:pos + 1] == b"#":
            while pos < len(payload) and payload[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(payload) and not payload[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError("truncated PPM header", offset=pos)
        tokens.append(payload[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_ppm(path):
    """Load a binary P6 PPM with maxval 255 as an (H, W, 3) uint8 array."""
    payload = Path(path).read_bytes()
    tokens, start = _ppm_tokens(payload, 4)
    if tokens[0] != b"P6":
        raise DataFormatError(f"{path}: bad magic {tokens[0]!r}", offset=0)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataFormatError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise DataFormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    expected = width * height * 3
    raster = payload[start:start + expected]
    if len(raster) < expected:
        raise DataFormatError(f"{path}: truncated raster", offset=len(payload))
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(path, image):
    """Write an (H, W, 3) uint8 array as a binary P6 PPM."""
    image = np.ascontiguousarray(image, dtype=np.uint8)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataFormatError(f"expected an H x W x 3 image, got shape {image.shape}")
    header = f"P6\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + image.tobytes())


def write_stats(path, stats):
    Path(path).write_text(yaml.safe_dump(stats.as_dict(), sort_keys=False), encoding="utf-8")


def read_stats(path):
    values = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if not isinstance(values, dict):
        raise DataFormatError(f"{path}: stats file must be a mapping of six numbers")
    return ChannelStats.from_dict(values)

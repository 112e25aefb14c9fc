"""Seeded image augmentations: the standard view pipeline and heavy policies.

Images are float32 arrays shaped ``(3, H, W)`` with values in ``[0, 1]``.
Every op is a pure function of ``(pixels, config, rng)``; replaying the same
``numpy.random.Generator`` state reproduces the output bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import kernels

MAX_MAGNITUDE = 30
GEOMETRIC_FILL = 0.5
MIN_CROPPABLE_SIDE = 2

RANDAUGMENT_OPS = (
    "identity",
    "auto_contrast",
    "equalize",
    "rotate",
    "solarize",
    "color",
    "posterize",
    "contrast",
    "brightness",
    "sharpness",
    "shear_x",
    "shear_y",
    "translate_x",
    "translate_y",
)
# UniformAugment draws from the same family minus the no-op.
UNIFORMAUGMENT_OPS = RANDAUGMENT_OPS[1:]
UNIFORMAUGMENT_SLOTS = 2
GEOMETRIC_OPS = ("rotate", "shear_x", "shear_y", "translate_x", "translate_y")
HEAVY_POLICIES = ("randaugment", "jigsaw", "uniformaugment")


class AugmentConfigError(ValueError):
    pass


@dataclass
class ImageSample:
    pixels: np.ndarray
    id: int = -1

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ValueError(f"expected a (3, H, W) image, got shape {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    def with_pixels(self, pixels: np.ndarray) -> "ImageSample":
        return ImageSample(pixels, self.id)


def _check_prob(name, p):
    if not 0.0 <= p <= 1.0:
        raise AugmentConfigError(f"{name}: probability {p} outside [0, 1]")


@dataclass(frozen=True)
class StandardAugmentConfig:
    crop_scale_range: tuple = (0.2, 1.0)
    crop_size: int = 32
    crop_ratio_range: tuple = (3 / 4, 4 / 3)
    hflip_prob: float = 0.5
    color_strengths: tuple = (0.4, 0.4, 0.4, 0.1)
    color_prob: float = 0.8
    grayscale_prob: float = 0.2
    blur_sigma_range: tuple = (0.1, 2.0)
    blur_prob: float = 0.5

    def validate(self):
        lo, hi = self.crop_scale_range
        if not (0 < lo <= 1 and 0 < hi <= 1 and lo <= hi):
            raise AugmentConfigError(
                f"crop_scale_range: need 0 < low <= high <= 1, got {self.crop_scale_range}")
        if self.crop_size < 1:
            raise AugmentConfigError(f"crop_size: must be positive, got {self.crop_size}")
        r0, r1 = self.crop_ratio_range
        if not 0 < r0 <= r1:
            raise AugmentConfigError(f"crop_ratio_range: invalid {self.crop_ratio_range}")
        for name in ("hflip_prob", "color_prob", "grayscale_prob", "blur_prob"):
            _check_prob(name, getattr(self, name))
        if len(self.color_strengths) != 4 or min(self.color_strengths) < 0:
            raise AugmentConfigError(
                f"color_strengths: need 4 non-negative values, got {self.color_strengths}")
        if self.color_strengths[3] > 0.5:
            raise AugmentConfigError("color_strengths: hue strength must be <= 0.5")
        s0, s1 = self.blur_sigma_range
        if not 0 < s0 <= s1:
            raise AugmentConfigError(f"blur_sigma_range: invalid {self.blur_sigma_range}")
        return self


@dataclass(frozen=True)
class RandAugmentConfig:
    num_ops: int = 2
    magnitude: float = 5
    policy_list: tuple = RANDAUGMENT_OPS

    def validate(self):
        if len(self.policy_list) != 14:
            raise AugmentConfigError(
                f"policy_list: expected 14 transforms, got {len(self.policy_list)}")
        unknown = set(self.policy_list) - set(_OPS)
        if unknown:
            raise AugmentConfigError(f"policy_list: unknown transforms {sorted(unknown)}")
        if self.num_ops < 1:
            raise AugmentConfigError(f"num_ops: must be >= 1, got {self.num_ops}")
        if not 0 <= self.magnitude <= MAX_MAGNITUDE:
            raise AugmentConfigError(f"magnitude: must lie in [0, 30], got {self.magnitude}")
        return self


@dataclass(frozen=True)
class JigsawConfig:
    grid_n: int = 4

    def validate(self):
        if self.grid_n < 2:
            raise AugmentConfigError(f"grid_n: must be >= 2, got {self.grid_n}")
        return self


@dataclass(frozen=True)
class HeavyAugmentConfig:
    """Mixture over heavy policies.

    ``prob`` is the chance that any heavy policy fires at all; with
    ``prob=0`` the heavy step is the identity (policy name ``"none"``).
    """

    mixture: tuple = (("randaugment", 0.9), ("jigsaw", 0.1))
    randaugment: RandAugmentConfig = field(default_factory=RandAugmentConfig)
    jigsaw: JigsawConfig = field(default_factory=JigsawConfig)
    prob: float = 1.0

    def validate(self):
        if not self.mixture:
            raise AugmentConfigError("mixture: must name at least one policy")
        for name, w in self.mixture:
            if name not in HEAVY_POLICIES:
                raise AugmentConfigError(
                    f"mixture: unknown policy {name!r} (expected one of {HEAVY_POLICIES})")
            if w < 0:
                raise AugmentConfigError(f"mixture: negative weight for {name!r}")
        total = sum(w for _, w in self.mixture)
        if abs(total - 1.0) > 1e-6:
            raise AugmentConfigError(f"mixture: weights must sum to 1, got {total}")
        _check_prob("prob", self.prob)
        self.randaugment.validate()
        self.jigsaw.validate()
        return self


# ---------------------------------------------------------------------------
# primitive pixel ops


def _grayscale(x):
    g = 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2]
    return g.astype(np.float32)


def _blend(img, degenerate, factor):
    out = degenerate + factor * (img - degenerate)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def adjust_brightness(x, factor):
    return _blend(x, np.zeros_like(x), factor)


def adjust_contrast(x, factor):
    mean = np.float32(_grayscale(x).mean())
    return _blend(x, np.full_like(x, mean), factor)


def adjust_saturation(x, factor):
    g = _grayscale(x)
    return _blend(x, np.broadcast_to(g, x.shape), factor)


def adjust_hue(x, shift):
    if shift == 0:
        return x.copy()
    return np.clip(kernels.shift_hue(np.ascontiguousarray(x), float(shift)), 0.0, 1.0)


def to_grayscale(x):
    g = _grayscale(x)
    return np.repeat(g[None], 3, axis=0)


def gaussian_taps(sigma, max_radius):
    radius = max(1, min(int(math.ceil(3.0 * sigma)), max_radius))
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (k / sigma) ** 2)
    return taps / taps.sum()


def gaussian_blur(x, sigma):
    max_radius = min(x.shape[1], x.shape[2]) - 1
    if max_radius < 1:
        return x.copy()
    return kernels.separable_filter(np.ascontiguousarray(x), gaussian_taps(sigma, max_radius))


def hflip(x):
    return np.ascontiguousarray(x[:, :, ::-1])


def resized_crop(x, top, left, h, w, size):
    """Crop ``(top, left, h, w)`` and bilinearly resize to ``size x size``."""
    sx = w / size
    sy = h / size
    matrix = np.array([[sx, 0.0, left + 0.5 * sx - 0.5],
                       [0.0, sy, top + 0.5 * sy - 0.5]])
    return kernels.warp_affine(np.ascontiguousarray(x), matrix, size, size, 0.0, True)


def resize(x, out_h, out_w):
    _, H, W = x.shape
    if (H, W) == (out_h, out_w):
        return x.copy()
    sx, sy = W / out_w, H / out_h
    matrix = np.array([[sx, 0.0, 0.5 * sx - 0.5], [0.0, sy, 0.5 * sy - 0.5]])
    return kernels.warp_affine(np.ascontiguousarray(x), matrix, out_h, out_w, 0.0, True)


def _affine_about_center(x, a, b, c, d, tx=0.0, ty=0.0):
    # output->input map: p_in = A (p_out - ctr) + ctr - t
    _, H, W = x.shape
    cx, cy = (W - 1) / 2.0, (H - 1) / 2.0
    matrix = np.array([[a, b, cx - a * cx - b * cy - tx],
                       [c, d, cy - c * cx - d * cy - ty]])
    out = kernels.warp_affine(np.ascontiguousarray(x), matrix, H, W, GEOMETRIC_FILL, False)
    return np.clip(out, 0.0, 1.0)


def rotate(x, degrees):
    """Counter-clockwise for positive ``degrees`` (PIL convention)."""
    t = math.radians(degrees)
    return _affine_about_center(x, math.cos(t), -math.sin(t), math.sin(t), math.cos(t))


def shear_x(x, s):
    return _affine_about_center(x, 1.0, s, 0.0, 1.0)


def shear_y(x, s):
    return _affine_about_center(x, 1.0, 0.0, s, 1.0)


def translate_x(x, frac):
    return _affine_about_center(x, 1.0, 0.0, 0.0, 1.0, tx=frac * x.shape[2])


def translate_y(x, frac):
    return _affine_about_center(x, 1.0, 0.0, 0.0, 1.0, ty=frac * x.shape[1])


def auto_contrast(x):
    lo = x.min(axis=(1, 2), keepdims=True)
    hi = x.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (x - lo) / safe, x)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _to_uint8(x):
    return np.clip(np.floor(x * 255.0 + 0.5), 0, 255).astype(np.uint8)


def equalize(x):
    q = _to_uint8(x)
    out = np.empty_like(x)
    for c in range(3):
        hist = np.bincount(q[c].ravel(), minlength=256)
        nonzero = hist[hist > 0]
        step = (nonzero.sum() - nonzero[-1]) // 255
        if step == 0:
            out[c] = x[c]
            continue
        lut = (np.concatenate([[0], np.cumsum(hist)[:-1]]) + step // 2) // step
        lut = np.clip(lut, 0, 255)
        out[c] = lut[q[c]] / 255.0
    return out


def solarize(x, threshold):
    """Invert pixels whose 8-bit level is at least ``threshold`` (0..256)."""
    return np.where(x * 255.0 >= threshold, 1.0 - x, x).astype(np.float32)


def posterize(x, bits):
    mask = np.uint8((0xFF << (8 - bits)) & 0xFF)
    return ((_to_uint8(x) & mask) / 255.0).astype(np.float32)


_SMOOTH = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float32) / 13.0


def adjust_sharpness(x, factor):
    _, H, W = x.shape
    if H < 3 or W < 3:
        return x.copy()
    degenerate = x.copy()
    acc = np.zeros((3, H - 2, W - 2), dtype=np.float32)
    for di in range(3):
        for dj in range(3):
            acc += _SMOOTH[di, dj] * x[:, di:di + H - 2, dj:dj + W - 2]
    degenerate[:, 1:-1, 1:-1] = acc
    return _blend(x, degenerate, factor)


def invert(x):
    return (1.0 - x).astype(np.float32)


# ---------------------------------------------------------------------------
# magnitude-parameterised transforms (canonical 0..30 scale)


def _signed(value, rng):
    return -value if rng.random() < 0.5 else value


def _enhance_factor(m, rng):
    return 1.0 + _signed(0.9 * m / MAX_MAGNITUDE, rng)


_OPS: dict[str, Callable] = {
    "identity": lambda x, m, rng: x.copy(),
    "auto_contrast": lambda x, m, rng: auto_contrast(x),
    "equalize": lambda x, m, rng: equalize(x),
    "rotate": lambda x, m, rng: rotate(x, _signed(30.0 * m / MAX_MAGNITUDE, rng)),
    "solarize": lambda x, m, rng: solarize(x, 256.0 * (1.0 - m / MAX_MAGNITUDE)),
    "color": lambda x, m, rng: adjust_saturation(x, _enhance_factor(m, rng)),
    "posterize": lambda x, m, rng: posterize(x, 8 - int(round(4.0 * m / MAX_MAGNITUDE))),
    "contrast": lambda x, m, rng: adjust_contrast(x, _enhance_factor(m, rng)),
    "brightness": lambda x, m, rng: adjust_brightness(x, _enhance_factor(m, rng)),
    "sharpness": lambda x, m, rng: adjust_sharpness(x, _enhance_factor(m, rng)),
    "shear_x": lambda x, m, rng: shear_x(x, _signed(0.3 * m / MAX_MAGNITUDE, rng)),
    "shear_y": lambda x, m, rng: shear_y(x, _signed(0.3 * m / MAX_MAGNITUDE, rng)),
    "translate_x": lambda x, m, rng: translate_x(x, _signed(0.45 * m / MAX_MAGNITUDE, rng)),
    "translate_y": lambda x, m, rng: translate_y(x, _signed(0.45 * m / MAX_MAGNITUDE, rng)),
    "invert": lambda x, m, rng: invert(x),
}


def apply_op(name: str, pixels: np.ndarray, magnitude: float, rng) -> np.ndarray:
    """Apply one named transform at ``magnitude`` on the 0..30 scale."""
    try:
        op = _OPS[name]
    except KeyError:
        raise AugmentConfigError(f"unknown transform {name!r}") from None
    return op(pixels, magnitude, rng)


# ---------------------------------------------------------------------------
# pipelines


def _crop_params(rng, H, W, scale, ratio):
    area = H * W
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= W and 0 < h <= H:
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            return top, left, h, w
    in_ratio = W / H
    if in_ratio < ratio[0]:
        w, h = W, int(round(W / ratio[0]))
    elif in_ratio > ratio[1]:
        h, w = H, int(round(H * ratio[1]))
    else:
        w, h = W, H
    return (H - h) // 2, (W - w) // 2, h, w


def apply_standard(image: ImageSample, cfg: StandardAugmentConfig, rng,
                   trace: Optional[list] = None) -> ImageSample:
    """crop-and-resize -> flip -> color jitter -> grayscale -> blur."""
    if min(image.height, image.width) < MIN_CROPPABLE_SIDE:
        raise ValueError(
            f"image {image.height}x{image.width} is smaller than the minimum "
            f"croppable side {MIN_CROPPABLE_SIDE}")
    x = image.pixels
    top, left, h, w = _crop_params(rng, image.height, image.width,
                                   cfg.crop_scale_range, cfg.crop_ratio_range)
    x = resized_crop(x, top, left, h, w, cfg.crop_size)
    _log(trace, "crop", (top, left, h, w))
    if rng.random() < cfg.hflip_prob:
        x = hflip(x)
        _log(trace, "hflip")
    if rng.random() < cfg.color_prob:
        b, c, s, hue = cfg.color_strengths
        fb = rng.uniform(max(0.0, 1 - b), 1 + b)
        fc = rng.uniform(max(0.0, 1 - c), 1 + c)
        fs = rng.uniform(max(0.0, 1 - s), 1 + s)
        fh = rng.uniform(-hue, hue)
        x = adjust_brightness(x, fb)
        x = adjust_contrast(x, fc)
        x = adjust_saturation(x, fs)
        x = adjust_hue(x, fh)
        _log(trace, "color", (fb, fc, fs, fh))
    if rng.random() < cfg.grayscale_prob:
        x = to_grayscale(x)
        _log(trace, "grayscale")
    if rng.random() < cfg.blur_prob:
        sigma = rng.uniform(*cfg.blur_sigma_range)
        x = gaussian_blur(x, sigma)
        _log(trace, "blur", sigma)
    return image.with_pixels(x)


def rand_augment(image: ImageSample, cfg: RandAugmentConfig, rng,
                 trace: Optional[list] = None) -> ImageSample:
    x = image.pixels
    picks = rng.integers(0, len(cfg.policy_list), size=cfg.num_ops)
    for k in picks:
        name = cfg.policy_list[int(k)]
        x = apply_op(name, x, cfg.magnitude, rng)
        _log(trace, name, cfg.magnitude)
    return image.with_pixels(x)


def tile_permute(pixels: np.ndarray, grid_n: int, permutation) -> np.ndarray:
    """Place input tile ``permutation[k]`` at output grid position ``k``."""
    C, H, W = pixels.shape
    th, tw = H // grid_n, W // grid_n
    tiles = pixels.reshape(C, grid_n, th, grid_n, tw).transpose(1, 3, 0, 2, 4)
    tiles = tiles.reshape(grid_n * grid_n, C, th, tw)[np.asarray(permutation)]
    out = tiles.reshape(grid_n, grid_n, C, th, tw).transpose(2, 0, 3, 1, 4)
    return np.ascontiguousarray(out.reshape(C, H, W))


def jigsaw(image: ImageSample, cfg: JigsawConfig, rng,
           trace: Optional[list] = None) -> ImageSample:
    n = cfg.grid_n
    perm = rng.permutation(n * n)
    x = image.pixels
    H, W = image.height, image.width
    if H % n or W % n:
        h2 = max(n, int(round(H / n)) * n)
        w2 = max(n, int(round(W / n)) * n)
        x = resize(tile_permute(resize(x, h2, w2), n, perm), H, W)
    else:
        x = tile_permute(x, n, perm)
    _log(trace, "jigsaw", perm.tolist())
    return image.with_pixels(x)


def uniform_augment(image: ImageSample, rng, trace: Optional[list] = None,
                    num_slots: int = UNIFORMAUGMENT_SLOTS) -> ImageSample:
    x = image.pixels
    for _ in range(num_slots):
        if rng.random() < 0.5:
            continue
        name = UNIFORMAUGMENT_OPS[int(rng.integers(0, len(UNIFORMAUGMENT_OPS)))]
        m = rng.uniform(0.0, MAX_MAGNITUDE)
        x = apply_op(name, x, m, rng)
        _log(trace, name, m)
    return image.with_pixels(x)


def apply_heavy(image: ImageSample, cfg: HeavyAugmentConfig, rng,
                trace: Optional[list] = None) -> tuple[ImageSample, str]:
    """Sample one policy from the mixture, apply it, and report its name."""
    if cfg.prob < 1.0 and rng.random() >= cfg.prob:
        return image.with_pixels(image.pixels.copy()), "none"
    names = [n for n, _ in cfg.mixture]
    weights = np.array([w for _, w in cfg.mixture], dtype=np.float64)
    name = names[int(rng.choice(len(names), p=weights / weights.sum()))]
    if name == "randaugment":
        out = rand_augment(image, cfg.randaugment, rng, trace)
    elif name == "jigsaw":
        out = jigsaw(image, cfg.jigsaw, rng, trace)
    else:
        out = uniform_augment(image, rng, trace)
    return out, name


def _log(trace, name, params=None):
    if trace is not None:
        trace.append((name, params))

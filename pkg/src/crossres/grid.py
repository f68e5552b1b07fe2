"""Raster containers, resampling operators, and seeded noise sources.

Images are float64 numpy arrays in channel-major ``(channels, height,
width)`` layout; every module in this package passes them around as plain
arrays. All randomness flows through :class:`SeededRng`, a PCG64-backed
generator whose Gaussian draws use the Box-Muller transform so that a
stream is reproducible bit-for-bit from its seed.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Type alias used in signatures throughout the package: (C, H, W) float64.
ImageGrid = np.ndarray


def new_grid(channels: int, height: int, width: int) -> ImageGrid:
    return np.zeros((channels, height, width), dtype=np.float64)


def validate_grid(x: np.ndarray, name: str = "grid") -> ImageGrid:
    """Check the (C, H, W) layout and finiteness contract."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"{name}: expected (channels, height, width), got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name}: contains non-finite entries")
    return x


@dataclass
class SeededRng:
    """Deterministic random source: PCG64 stream + Box-Muller Gaussians.

    Identical seeds produce identical streams on every platform. Derived
    streams (``derive``) hash the parent seed with a purpose label, which
    is how one root seed fans out to per-sample / per-step generators.
    """

    seed: int
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._gen = np.random.Generator(np.random.PCG64(int(self.seed)))

    def derive(self, label: str) -> "SeededRng":
        digest = hashlib.sha256(f"{self.seed}:{label}".encode()).digest()
        return SeededRng(int.from_bytes(digest[:8], "little"))

    def uniform(self, lo: float = 0.0, hi: float = 1.0, size=None):
        return self._gen.uniform(lo, hi, size=size)

    def integers(self, lo: int, hi: int, size=None):
        return self._gen.integers(lo, hi, size=size)

    def choice_index(self, weights: np.ndarray) -> int:
        w = np.asarray(weights, dtype=np.float64)
        cdf = np.cumsum(w / w.sum())
        return int(np.searchsorted(cdf, self._gen.random(), side="right"))

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return np.asarray(self._gen.choice(n, size=size, replace=replace), dtype=np.int64)

    def normal(self, shape) -> np.ndarray:
        """Standard normal array via Box-Muller on PCG64 uniforms."""
        if np.isscalar(shape):
            shape = (int(shape),)
        n = int(np.prod(shape)) if len(shape) else 1
        m = (n + 1) // 2
        # random() is [0, 1); reflect to (0, 1] so log() stays finite
        u1 = 1.0 - self._gen.random(m)
        u2 = self._gen.random(m)
        radius = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([radius * np.cos(theta), radius * np.sin(theta)])
        return z[:n].reshape(shape)

    def normal_grid(self, channels: int, height: int, width: int) -> ImageGrid:
        return self.normal((channels, height, width))


def gaussian_noise(shape: tuple[int, int, int], rng: SeededRng) -> ImageGrid:
    """I.i.d. standard normal grid; a pure function of (shape, rng state)."""
    c, h, w = shape
    if c <= 0 or h <= 0 or w <= 0:
        raise ValueError(f"invalid grid shape {shape}")
    return rng.normal_grid(c, h, w)


def _axis_taps(src: int, dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel-center bilinear taps for one axis (align-corners OFF).

    Returns (lo index, hi index, hi weight); indices are clamped to the
    source range so edges replicate.
    """
    coords = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    lo = np.floor(coords).astype(np.int64)
    w_hi = coords - lo
    lo_c = np.clip(lo, 0, src - 1)
    hi_c = np.clip(lo + 1, 0, src - 1)
    return lo_c, hi_c, w_hi


def bilinear_upsample(x: ImageGrid, target_h: int, target_w: int) -> ImageGrid:
    """Per-channel bilinear interpolation to (target_h, target_w).

    Half-pixel-center convention, which preserves the mean under integer
    scale factors. This is a linear operator; `bilinear_upsample_t` is its
    exact transpose (the gradient-propagation contract).
    """
    x = validate_grid(x, "bilinear_upsample input")
    _, h, w = x.shape
    if target_h < h or target_w < w:
        raise ValueError(f"target ({target_h},{target_w}) smaller than source ({h},{w})")
    y0, y1, wy = _axis_taps(h, target_h)
    x0, x1, wx = _axis_taps(w, target_w)
    top = x[:, y0][:, :, x0] * (1 - wx) + x[:, y0][:, :, x1] * wx
    bot = x[:, y1][:, :, x0] * (1 - wx) + x[:, y1][:, :, x1] * wx
    return top * (1 - wy)[None, :, None] + bot * wy[None, :, None]


def bilinear_upsample_t(y: ImageGrid, source_h: int, source_w: int) -> ImageGrid:
    """Transpose of `bilinear_upsample` back onto a (source_h, source_w) grid."""
    y = np.asarray(y, dtype=np.float64)
    c, th, tw = y.shape
    y0, y1, wy = _axis_taps(source_h, th)
    x0, x1, wx = _axis_taps(source_w, tw)
    out = np.zeros((c, source_h, source_w), dtype=np.float64)
    for rows, rw in ((y0, 1 - wy), (y1, wy)):
        for cols, cw in ((x0, 1 - wx), (x1, wx)):
            contrib = y * rw[None, :, None] * cw[None, None, :]
            np.add.at(out, (slice(None), rows[:, None], cols[None, :]), contrib)
    return out


def area_downsample(x: ImageGrid, factor: int) -> ImageGrid:
    """Each output pixel is the mean of its factor x factor block."""
    x = validate_grid(x, "area_downsample input")
    if factor < 1:
        raise ValueError("factor must be >= 1")
    c, h, w = x.shape
    if h % factor or w % factor:
        raise ValueError(f"size ({h},{w}) not divisible by factor {factor}")
    return x.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))


def write_pgm(path, image: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> None:
    """Binary PGM (P5) of a single-channel image, affinely mapped from [lo, hi].

    The declared range goes into a sidecar text header next to the image.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[0] != 1:
            raise ValueError("write_pgm expects a single channel")
        img = img[0]
    _write_netpbm(path, img[None], b"P5", lo, hi)


def write_ppm(path, image: ImageGrid, lo: float = 0.0, hi: float = 1.0) -> None:
    """Binary PPM (P6) of a 3-channel image."""
    img = validate_grid(image, "write_ppm input")
    if img.shape[0] != 3:
        raise ValueError("write_ppm expects 3 channels")
    _write_netpbm(path, img, b"P6", lo, hi)


def _write_netpbm(path, img: np.ndarray, magic: bytes, lo: float, hi: float) -> None:
    if hi <= lo:
        raise ValueError("need hi > lo for the value mapping")
    _, h, w = img.shape
    scaled = np.clip((img - lo) / (hi - lo), 0.0, 1.0)
    bytes_img = np.round(scaled * 255.0).astype(np.uint8)
    # interleave channels for P6; P5 is single-plane
    payload = bytes_img.transpose(1, 2, 0).tobytes()
    path = Path(path)
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(payload)
    with open(path.with_suffix(path.suffix + ".range.txt"), "w") as f:
        f.write(f"lo = {lo!r}\nhi = {hi!r}\n")

"""Images, the PNM codec, patch grids, degradations and augmentations.

All random operations are pure functions of their inputs and an integer seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError, ParseError, VocabularyError
from .font import GLYPH_H, GLYPH_W, GLYPHS

MAX_BLUR_KERNEL = 15
TASKS = ("mask", "blur", "noise")


@dataclass(eq=False)
class Image:
    """``H x W x C`` raster of 8-bit pixels (C is 1 or 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise DimensionError(f"image must be HxWx1 or HxWx3, got shape {px.shape}")
        self.pixels = np.ascontiguousarray(px, dtype=np.uint8)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def shape(self):
        return self.pixels.shape

    def to_float(self, dtype=np.float32) -> np.ndarray:
        return self.pixels.astype(dtype) / np.asarray(255, dtype=dtype)

    @classmethod
    def from_float(cls, arr) -> "Image":
        """Clamp to [0, 1], scale to 255 and round to nearest."""
        arr = np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0)
        return cls(np.floor(arr * 255.0 + 0.5).astype(np.uint8))

    def __eq__(self, other):
        return isinstance(other, Image) and self.pixels.shape == other.pixels.shape and \
            bool(np.array_equal(self.pixels, other.pixels))

    @classmethod
    def blank(cls, height, width, channels=1, value=255) -> "Image":
        return cls(np.full((height, width, channels), value, dtype=np.uint8))


# ---------------------------------------------------------------------------
# PNM codec
# ---------------------------------------------------------------------------

_WS = b" \t\n\r\x0b\x0c"


def load_pnm(data: bytes) -> Image:
    """Decode binary PGM (P5) or PPM (P6) with maxval 255."""
    data = bytes(data)
    if len(data) < 2 or data[:2] not in (b"P5", b"P6"):
        raise ParseError("bad magic, expected P5 or P6", 0)
    channels = 1 if data[:2] == b"P5" else 3
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and (data[pos] in _WS or data[pos] == ord("#")):
            if data[pos] == ord("#"):
                while pos < len(data) and data[pos] not in b"\r\n":
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < len(data) and data[pos] not in _WS and data[pos] != ord("#"):
            pos += 1
        token = data[start:pos]
        if not token:
            raise ParseError("header truncated", start)
        if not token.isdigit():
            raise ParseError(f"expected an integer header field, got {token[:16]!r}", start)
        fields.append((int(token), start))
    (width, woff), (height, hoff), (maxval, moff) = fields
    if width <= 0:
        raise ParseError("width must be positive", woff)
    if height <= 0:
        raise ParseError("height must be positive", hoff)
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval}, only 255", moff)
    if pos >= len(data) or data[pos] not in _WS:
        raise ParseError("missing whitespace after maxval", pos)
    pos += 1
    need = width * height * channels
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise ParseError(f"pixel payload truncated: need {need} bytes, have {len(payload)}", pos + len(payload))
    px = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return Image(px.copy())


def save_pnm(img: Image) -> bytes:
    magic = b"P5" if img.channels == 1 else b"P6"
    header = magic + f"\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.pixels.tobytes()


def read_image(path) -> Image:
    with open(path, "rb") as fh:
        return load_pnm(fh.read())


def write_image(path, img: Image):
    with open(path, "wb") as fh:
        fh.write(save_pnm(img))


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class PatchGrid:
    """Row-major grid of flattened square patches, each ``p*p*C`` long."""

    patch_size: int
    rows: int
    cols: int
    channels: int
    patches: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.rows * self.cols

    def copy(self) -> "PatchGrid":
        return PatchGrid(self.patch_size, self.rows, self.cols, self.channels, self.patches.copy())


def _check_tiling(h, w, p):
    if p <= 0:
        raise DimensionError(f"patch size must be positive, got {p}")
    if h % p:
        raise DimensionError(f"image height {h} is not divisible by patch size {p}")
    if w % p:
        raise DimensionError(f"image width {w} is not divisible by patch size {p}")


def patchify(arr: np.ndarray, p: int) -> np.ndarray:
    """``[..., H, W, C] -> [..., N, p*p*C]`` in row-major grid order."""
    *lead, h, w, c = arr.shape
    _check_tiling(h, w, p)
    r, k = h // p, w // p
    x = arr.reshape(*lead, r, p, k, p, c)
    nl = len(lead)
    x = np.moveaxis(x, nl + 2, nl + 1)  # [..., r, k, p, p, c]
    return x.reshape(*lead, r * k, p * p * c)


def unpatchify(patches: np.ndarray, p: int, rows: int, cols: int, channels: int) -> np.ndarray:
    *lead, n, d = patches.shape
    if n != rows * cols or d != p * p * channels:
        raise DimensionError(f"patch array {patches.shape} does not fit a {rows}x{cols} grid of {p}x{p}x{channels}")
    nl = len(lead)
    x = patches.reshape(*lead, rows, cols, p, p, channels)
    x = np.moveaxis(x, nl + 1, nl + 2)  # [..., r, p, k, p, c]
    return x.reshape(*lead, rows * p, cols * p, channels)


def to_patches(img: Image, patch_size: int) -> PatchGrid:
    _check_tiling(img.height, img.width, patch_size)
    return PatchGrid(patch_size, img.height // patch_size, img.width // patch_size, img.channels,
                     patchify(img.pixels, patch_size))


def from_patches(grid: PatchGrid) -> Image:
    return Image(unpatchify(grid.patches, grid.patch_size, grid.rows, grid.cols, grid.channels))


# ---------------------------------------------------------------------------
# degradations
# ---------------------------------------------------------------------------

@dataclass
class DegradationSpec:
    kind: str
    mask_ratio: float = 0.75
    blur_kernel_range: tuple = (1, MAX_BLUR_KERNEL)
    noise_alpha_range: tuple = (0.2, 0.5)
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ConfigError(f"unknown degradation kind {self.kind!r}; expected one of {TASKS}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must be in (0, 1), got {self.mask_ratio}")
        lo, hi = self.blur_kernel_range
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad blur kernel range {self.blur_kernel_range}")
        a0, a1 = self.noise_alpha_range
        if not (0.0 <= a0 <= a1 <= 1.0):
            raise ConfigError(f"bad noise alpha range {self.noise_alpha_range}")


def mask_count(n: int, ratio: float) -> int:
    # guard against 0.29 * 100 == 28.999999999999996
    return int(math.floor(round(ratio * n, 9)))


def select_masked(n: int, ratio: float, seed: int) -> np.ndarray:
    """Boolean mask with exactly ``floor(ratio * n)`` entries set.

    Positions are the prefix of a seeded Fisher-Yates shuffle.
    """
    k = mask_count(n, ratio)
    rng = np.random.default_rng(seed)
    perm = np.arange(n)
    for i in range(k):
        j = int(rng.integers(i, n))
        perm[i], perm[j] = perm[j], perm[i]
    mask = np.zeros(n, dtype=bool)
    mask[perm[:k]] = True
    return mask


def degrade_mask(grid: PatchGrid, ratio: float = 0.75, seed: int = 0):
    """Zero a uniformly chosen ``floor(ratio * N)`` subset of patches."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"mask ratio must be in (0, 1), got {ratio}")
    mask = select_masked(grid.n, ratio, seed)
    out = grid.copy()
    out.patches[mask] = 0
    return out, mask


def blur_kernel_size(kernel_range, seed: int) -> int:
    lo, hi = kernel_range
    k = int(np.random.default_rng(seed).integers(lo, hi + 1))
    if k % 2 == 0:
        k += 1
    return min(k, MAX_BLUR_KERNEL)


def box_blur(img: Image, k: int) -> Image:
    """Mean filter of odd size ``k`` with clamp-to-edge borders, rounded half up."""
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"box kernel size must be odd and positive, got {k}")
    if k == 1:
        return Image(img.pixels.copy())
    r = k // 2
    padded = np.pad(img.pixels.astype(np.int64), ((r, r), (r, r), (0, 0)), mode="edge")
    s = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1, img.channels), dtype=np.int64)
    s[1:, 1:] = padded.cumsum(0).cumsum(1)
    h, w = img.height, img.width
    win = s[k:k + h, k:k + w] - s[:h, k:k + w] - s[k:k + h, :w] + s[:h, :w]
    area = k * k
    return Image(((2 * win + area) // (2 * area)).astype(np.uint8))


def degrade_blur(img: Image, kernel_range=(1, MAX_BLUR_KERNEL), seed: int = 0) -> Image:
    return box_blur(img, blur_kernel_size(kernel_range, seed))


def _match_channels(bg: np.ndarray, channels: int) -> np.ndarray:
    if bg.shape[2] == channels:
        return bg
    if channels == 3:
        return np.repeat(bg, 3, axis=2)
    return np.floor(luma(bg) + 0.5).astype(np.uint8)[:, :, None]


def fit_background(background: Image, height: int, width: int, channels: int, rng) -> np.ndarray:
    """Nearest-neighbour upscale if too small, then a seeded crop to ``height x width``."""
    bg = _match_channels(background.pixels, channels)
    bh, bw = bg.shape[:2]
    if bh < height or bw < width:
        f = max(height / bh, width / bw)
        nh, nw = max(height, math.ceil(bh * f)), max(width, math.ceil(bw * f))
        ys = (np.arange(nh) * bh // nh).clip(0, bh - 1)
        xs = (np.arange(nw) * bw // nw).clip(0, bw - 1)
        bg = bg[ys][:, xs]
        bh, bw = nh, nw
    y0 = int(rng.integers(0, bh - height + 1))
    x0 = int(rng.integers(0, bw - width + 1))
    return bg[y0:y0 + height, x0:x0 + width]


def blend(img: Image, background: np.ndarray, alpha: float) -> Image:
    out = (1.0 - alpha) * img.pixels.astype(np.float64) + alpha * np.asarray(background, dtype=np.float64)
    return Image(np.floor(out + 0.5).clip(0, 255).astype(np.uint8))


def degrade_noise(img: Image, background, alpha_range=(0.2, 0.5), seed: int = 0) -> Image:
    """Blend ``img`` with a background document: ``(1 - a) * img + a * bg``.

    ``background`` is one image or a pool; one is picked with the seed.
    """
    pool = [background] if isinstance(background, Image) else list(background)
    if not pool:
        raise ConfigError("noise degradation needs at least one background image")
    rng = np.random.default_rng(seed)
    bg = pool[int(rng.integers(0, len(pool)))] if len(pool) > 1 else pool[0]
    alpha = float(rng.uniform(alpha_range[0], alpha_range[1])) if alpha_range[1] > alpha_range[0] \
        else float(alpha_range[0])
    fitted = fit_background(bg, img.height, img.width, img.channels, rng)
    return blend(img, fitted, alpha)


def degrade(img: Image, spec: DegradationSpec, patch_size: int = 8, backgrounds=None):
    """Apply one pretext degradation; returns ``(image, mask_or_None)``."""
    if spec.kind == "mask":
        grid, mask = degrade_mask(to_patches(img, patch_size), spec.mask_ratio, spec.rng_seed)
        return from_patches(grid), mask
    if spec.kind == "blur":
        return degrade_blur(img, spec.blur_kernel_range, spec.rng_seed), None
    if backgrounds is None:
        backgrounds = document_textures(img.height, img.width, img.channels)
    return degrade_noise(img, backgrounds, spec.noise_alpha_range, spec.rng_seed), None


# ---------------------------------------------------------------------------
# geometric / photometric augmentation
# ---------------------------------------------------------------------------

def luma(px: np.ndarray) -> np.ndarray:
    px = px.astype(np.float64)
    if px.shape[2] == 1:
        return px[:, :, 0]
    return 0.299 * px[:, :, 0] + 0.587 * px[:, :, 1] + 0.114 * px[:, :, 2]


def bilinear_sample(px: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``px`` (HxWxC) at real coordinates with clamp-to-edge."""
    h, w = px.shape[:2]
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[..., None]
    wx = (xs - x0)[..., None]
    f = px.astype(np.float64)
    top = f[y0, x0] * (1 - wx) + f[y0, x1] * wx
    bot = f[y1, x0] * (1 - wx) + f[y1, x1] * wx
    return top * (1 - wy) + bot * wy


def warp_affine(img: Image, matrix: np.ndarray) -> Image:
    """Resample with ``matrix`` (2x3) mapping output ``(x, y, 1)`` to input coordinates."""
    h, w = img.height, img.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = matrix[0, 0] * xx + matrix[0, 1] * yy + matrix[0, 2]
    sy = matrix[1, 0] * xx + matrix[1, 1] * yy + matrix[1, 2]
    out = bilinear_sample(img.pixels, sy, sx)
    return Image(np.floor(out + 0.5).clip(0, 255).astype(np.uint8))


@dataclass
class AugmentConfig:
    """Upper bounds on each augmentation's magnitude.

    Each transform is applied independently with probability ``p`` and a
    magnitude drawn uniformly from ``[-max, max]``.
    """

    p: float = 0.5
    noise_std: float = 6.0        # pixel units
    shear: float = 0.25           # horizontal shear factor
    rotation_deg: float = 3.0
    scale: float = 0.08           # relative zoom
    crop: float = 0.08            # max fraction removed per side, never cutting ink

    @classmethod
    def zero(cls) -> "AugmentConfig":
        return cls(p=1.0, noise_std=0.0, shear=0.0, rotation_deg=0.0, scale=0.0, crop=0.0)


def _ink_bbox(img: Image, thresh=128):
    ink = luma(img.pixels) < thresh
    if not ink.any():
        return None
    ys, xs = np.nonzero(ink)
    return ys.min(), ys.max(), xs.min(), xs.max()


def augment(img: Image, seed: int, config: AugmentConfig | None = None) -> Image:
    """Seeded random subset of noise, shear, rotation, scale and crop-resize.

    Geometric parts are composed into one affine warp about the image centre;
    output dimensions equal input dimensions.
    """
    cfg = config or AugmentConfig()
    rng = np.random.default_rng(seed)
    h, w = img.height, img.width
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    # every draw happens unconditionally so the stream layout is fixed
    use = rng.random(5) < cfg.p
    shear = rng.uniform(-1, 1) * cfg.shear
    theta = math.radians(rng.uniform(-1, 1) * cfg.rotation_deg)
    zoom = 1.0 + rng.uniform(-1, 1) * cfg.scale
    crop_frac = rng.uniform(0, 1, size=4) * cfg.crop
    noise_seed = int(rng.integers(0, 2**63))

    # output -> input mapping, in centred coordinates
    m = np.eye(3)
    if use[0] and shear:
        m = m @ np.array([[1, shear, 0], [0, 1, 0], [0, 0, 1]])
    if use[1] and theta:
        c, s = math.cos(theta), math.sin(theta)
        m = m @ np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    if use[2] and zoom != 1.0:
        m = m @ np.diag([1 / zoom, 1 / zoom, 1])
    if use[3] and crop_frac.any():
        box = _ink_bbox(img)
        top, bottom = crop_frac[0] * h, crop_frac[1] * h
        left, right = crop_frac[2] * w, crop_frac[3] * w
        if box is not None:
            y0, y1, x0, x1 = box
            top, bottom = min(top, y0), min(bottom, h - 1 - y1)
            left, right = min(left, x0), min(right, w - 1 - x1)
        sy = (h - top - bottom) / h
        sx = (w - left - right) / w
        oy = (top - bottom) / 2.0
        ox = (left - right) / 2.0
        m = np.array([[sx, 0, ox], [0, sy, oy], [0, 0, 1]]) @ m
    out = img
    if not np.array_equal(m, np.eye(3)):
        to_c = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]])
        from_c = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1]])
        out = warp_affine(img, (from_c @ m @ to_c)[:2])
    if use[4] and cfg.noise_std > 0:
        noise = np.random.default_rng(noise_seed).normal(0.0, cfg.noise_std, size=out.pixels.shape)
        out = Image(np.floor(out.pixels + noise + 0.5).clip(0, 255).astype(np.uint8))
    return out


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

def text_scale(text: str, height: int, width: int) -> int:
    """Largest integer glyph magnification that fits ``text`` with a margin."""
    if not text:
        return 1
    n = len(text)
    s_h = int(height * 0.7) // GLYPH_H
    s_w = (width - 2) // (n * (GLYPH_W + 1) - 1)
    return min(s_h, s_w)


def render_synthetic_word(text: str, height: int = 64, width: int = 256, channels: int = 1):
    """Render ``text`` in black on white with the embedded font, centred."""
    unknown = sorted(set(ch for ch in text if ch not in GLYPHS))
    if unknown:
        raise VocabularyError(f"characters not in the embedded font: {''.join(unknown)!r}")
    img = np.full((height, width), 255, dtype=np.uint8)
    if text:
        s = text_scale(text, height, width)
        if s < 1:
            raise DimensionError(f"text {text!r} does not fit a {height}x{width} image")
        tw = (len(text) * (GLYPH_W + 1) - 1) * s
        th = GLYPH_H * s
        y0 = (height - th) // 2
        x0 = (width - tw) // 2
        for i, ch in enumerate(text):
            g = np.array(GLYPHS[ch], dtype=bool).repeat(s, 0).repeat(s, 1)
            gx = x0 + i * (GLYPH_W + 1) * s
            img[y0:y0 + th, gx:gx + GLYPH_W * s][g] = 0
    px = img[:, :, None]
    if channels == 3:
        px = np.repeat(px, 3, axis=2)
    return Image(px), text


_TEXTURE_WORDS = ("lorem", "ipsum", "dolor", "amet", "charta", "folio", "verso", "recto", "scribe", "codex")


def document_textures(height: int, width: int, channels: int = 1, count: int = 4, seed: int = 7) -> list[Image]:
    """Procedural stand-ins for scanned document backgrounds.

    Each is a tinted, unevenly lit page carrying faint mirrored text, in the
    manner of show-through from the reverse side.
    """
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        yy, xx = np.mgrid[0:height, 0:width] / max(height, width)
        gy, gx = rng.uniform(-1, 1, size=2)
        base = rng.uniform(120, 200) + 50 * (gy * yy + gx * xx)
        blobs = np.zeros_like(base)
        for _ in range(3):
            by, bx, r = rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.1, 0.4)
            blobs -= rng.uniform(20, 60) * np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * r * r))
        page = base + blobs
        word = " ".join(rng.choice(_TEXTURE_WORDS, size=2))
        line_h = min(height, max(8, height // 2))
        while word and text_scale(word, line_h, width) < 1:
            word = word[:-1]
        ghost = np.zeros((height, width))
        if word.strip():
            ink, _ = render_synthetic_word(word, line_h, width)
            ghost[:line_h] = (255 - ink.pixels[:, ::-1, 0].astype(np.float64)) / 255.0
        shift = int(rng.integers(0, height))
        ghost = np.roll(ghost, shift, axis=0)
        page = page - rng.uniform(40, 90) * ghost + rng.normal(0, 4, size=page.shape)
        px = np.floor(page + 0.5).clip(0, 255).astype(np.uint8)[:, :, None]
        if channels == 3:
            tint = rng.uniform(0.85, 1.0, size=3)
            px = np.floor(px * tint + 0.5).clip(0, 255).astype(np.uint8)
        out.append(Image(px))
    return out


def images_to_batch(images: Sequence[Image], dtype=np.float32) -> np.ndarray:
    """Stack images into a ``[B, H, W, C]`` float array in [0, 1]."""
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DimensionError(f"images in a batch must share dimensions, got {sorted(shapes)}")
    return np.stack([im.to_float(dtype) for im in images])

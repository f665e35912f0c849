"""Deterministic grayscale image pipeline.

Images are plain numpy arrays of shape (H, W), dtype uint8. All intensity
rounding is round-half-up (floor(x + 0.5)), never banker's rounding, so
outputs are reproducible across platforms.
"""

import io
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DecodeError, EmptyCrop, EmptyImage, SpecError, TooSmall

EMBED_INPUT_SIZE = 96

DEFAULT_SHARPEN_K = 1.0
DEFAULT_CLAHE_GRID = (8, 8)
DEFAULT_CLAHE_CLIP = 2.0


@dataclass(frozen=True)
class PreprocessParams:
    """Enhancement knobs applied before embedding; a trained model records
    the values it saw so serving can reproduce them exactly."""
    sharpen_k: float = DEFAULT_SHARPEN_K
    clahe_grid_x: int = DEFAULT_CLAHE_GRID[0]
    clahe_grid_y: int = DEFAULT_CLAHE_GRID[1]
    clahe_clip: float = DEFAULT_CLAHE_CLIP

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise SpecError(f"unknown preprocess keys: {sorted(extra)}")
        return cls(**d)


def round_half_up(values):
    return np.floor(np.asarray(values, dtype=np.float64) + 0.5)


def _as_gray(img):
    img = np.asarray(img)
    if img.ndim != 2:
        raise SpecError(f"expected 2-D grayscale array, got shape {img.shape}")
    if img.size == 0:
        raise EmptyImage("zero-sized image")
    if img.dtype != np.uint8:
        raise SpecError(f"expected uint8 pixels, got {img.dtype}")
    return img


def to_grayscale(rgb):
    """Convert 8-bit RGB (H, W, 3) to gray via round(0.299R + 0.587G + 0.114B)."""
    rgb = np.asarray(rgb)
    if rgb.size == 0:
        raise EmptyImage("zero-sized image")
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise SpecError(f"expected uint8 RGB of shape (H, W, 3), got {rgb.shape} {rgb.dtype}")
    luma = (0.299 * rgb[..., 0].astype(np.float64)
            + 0.587 * rgb[..., 1].astype(np.float64)
            + 0.114 * rgb[..., 2].astype(np.float64))
    return np.clip(round_half_up(luma), 0, 255).astype(np.uint8)


def decode_image(data):
    """Decode PNG/JPEG bytes into a grayscale image."""
    try:
        with Image.open(io.BytesIO(data)) as im:
            rgb = np.asarray(im.convert("RGB"))
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DecodeError(f"cannot decode image: {exc}") from None
    return to_grayscale(rgb)


def load_image(path):
    with open(path, "rb") as fh:
        return decode_image(fh.read())


def save_image(img, path):
    Image.fromarray(_as_gray(img), mode="L").save(path)


def sharpen(img, k=DEFAULT_SHARPEN_K):
    """Edge-enhance with the 3x3 kernel [[0,-1,0],[-1,5,-1],[0,-1,0]].

    The kernel response s is blended as out = img + k * (s - img), so k=0 is
    the identity and k=1 is the plain kernel response. Borders replicate.
    """
    img = _as_gray(img)
    if img.shape[0] < 3 or img.shape[1] < 3:
        raise TooSmall(f"sharpen needs at least 3x3, got {img.shape}")
    if not np.isfinite(k) or k < 0:
        raise SpecError(f"sharpen weight must be finite and >= 0, got {k}")
    f = img.astype(np.float64)
    p = np.pad(f, 1, mode="edge")
    s = (5.0 * p[1:-1, 1:-1]
         - p[:-2, 1:-1] - p[2:, 1:-1] - p[1:-1, :-2] - p[1:-1, 2:])
    out = f + k * (s - f)
    return np.clip(round_half_up(out), 0, 255).astype(np.uint8)


def _tile_bounds(length, grid):
    # Ceiling partition: tiles of size ceil(length/grid); a degenerate tail
    # (possible when grid does not divide length evenly) is dropped.
    size = -(-length // grid)
    starts = list(range(0, length, size))
    return [(s, min(s + size, length)) for s in starts]


def clip_ceiling(clip_factor, tile_pixels):
    return max(1, int(np.floor(clip_factor * tile_pixels / 256.0 + 0.5)))


def clip_histogram(hist, ceiling):
    """Truncate bins at the ceiling and spread the excess uniformly.

    The remainder (excess mod 256) goes one count each to the lowest bins,
    so the total count is preserved exactly.
    """
    hist = np.asarray(hist, dtype=np.int64).copy()
    excess = int(np.maximum(hist - ceiling, 0).sum())
    hist = np.minimum(hist, ceiling)
    share, residual = divmod(excess, 256)
    hist += share
    hist[:residual] += 1
    return hist


def _tile_lut(tile, clip_factor):
    hist = np.bincount(tile.ravel(), minlength=256)
    npix = tile.size
    hist = clip_histogram(hist, clip_ceiling(clip_factor, npix))
    cdf = np.cumsum(hist)
    return np.floor(255.0 * cdf / npix + 0.5).astype(np.int64)


def _axis_weights(length, centers):
    """Per-pixel (lower tile, upper tile, fraction) along one axis."""
    coords = np.arange(length, dtype=np.float64)
    t0 = np.searchsorted(centers, coords, side="right") - 1
    t0 = np.clip(t0, 0, len(centers) - 1)
    t1 = np.minimum(t0 + 1, len(centers) - 1)
    frac = np.zeros(length, dtype=np.float64)
    interior = t1 > t0
    frac[interior] = (coords[interior] - centers[t0[interior]]) \
        / (centers[t1[interior]] - centers[t0[interior]])
    # Pixels left of the first center collapse onto tile 0 with weight 0.
    left = coords < centers[0]
    t0[left] = 0
    t1[left] = 0
    frac[left] = 0.0
    return t0, t1, frac


def clahe(img, grid_x=DEFAULT_CLAHE_GRID[0], grid_y=DEFAULT_CLAHE_GRID[1],
          clip_factor=DEFAULT_CLAHE_CLIP):
    """Contrast-limited adaptive histogram equalization.

    Per tile a 256-bin histogram is clipped at max(1, round(clip_factor *
    tile_pixels / 256)); the excess is spread uniformly over all bins with the
    remainder going one count each to the lowest bins. Tile equalization maps
    v -> round(255 * cdf(v) / tile_pixels) and each output pixel bilinearly
    blends the mappings of the four nearest tile centers (edge pixels
    replicate the outermost tiles).
    """
    img = _as_gray(img)
    h, w = img.shape
    if grid_x < 1 or grid_y < 1:
        raise SpecError(f"tile grid must be positive, got {grid_x}x{grid_y}")
    if clip_factor < 1.0:
        raise SpecError(f"clip factor must be >= 1, got {clip_factor}")
    if w < grid_x or h < grid_y:
        raise SpecError(f"grid {grid_x}x{grid_y} larger than image {w}x{h}")
    row_tiles = _tile_bounds(h, grid_y)
    col_tiles = _tile_bounds(w, grid_x)
    luts = np.empty((len(row_tiles), len(col_tiles), 256), dtype=np.int64)
    for i, (r0, r1) in enumerate(row_tiles):
        for j, (c0, c1) in enumerate(col_tiles):
            luts[i, j] = _tile_lut(img[r0:r1, c0:c1], clip_factor)
    cy = np.array([(r0 + r1 - 1) / 2.0 for r0, r1 in row_tiles])
    cx = np.array([(c0 + c1 - 1) / 2.0 for c0, c1 in col_tiles])
    ty0, ty1, wy = _axis_weights(h, cy)
    tx0, tx1, wx = _axis_weights(w, cx)

    a = luts[ty0[:, None], tx0[None, :], img]
    b = luts[ty0[:, None], tx1[None, :], img]
    c = luts[ty1[:, None], tx0[None, :], img]
    d = luts[ty1[:, None], tx1[None, :], img]
    wy = wy[:, None]
    wx = wx[None, :]
    val = (1.0 - wy) * ((1.0 - wx) * a + wx * b) \
        + wy * ((1.0 - wx) * c + wx * d)
    return np.clip(round_half_up(val), 0, 255).astype(np.uint8)


def resize_bilinear(img, width, height):
    """Resize with half-pixel-center bilinear sampling."""
    img = _as_gray(img)
    if width < 1 or height < 1:
        raise SpecError(f"target size must be >= 1x1, got {width}x{height}")
    h, w = img.shape
    if (width, height) == (w, h):
        return img.copy()
    f = img.astype(np.float64)
    sx = np.clip((np.arange(width) + 0.5) * (w / width) - 0.5, 0.0, w - 1.0)
    sy = np.clip((np.arange(height) + 0.5) * (h / height) - 0.5, 0.0, h - 1.0)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[None, :]
    fy = (sy - y0)[:, None]
    a = f[y0[:, None], x0[None, :]]
    b = f[y0[:, None], x1[None, :]]
    c = f[y1[:, None], x0[None, :]]
    d = f[y1[:, None], x1[None, :]]
    val = (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * c + fx * d)
    return np.clip(round_half_up(val), 0, 255).astype(np.uint8)


def crop(img, x0, y0, x1, y1):
    """Extract [y0:y1, x0:x1], clamping to bounds; empty intersection errors."""
    img = _as_gray(img)
    h, w = img.shape
    cx0 = max(0, int(x0))
    cy0 = max(0, int(y0))
    cx1 = min(w, int(x1))
    cy1 = min(h, int(y1))
    if cx1 <= cx0 or cy1 <= cy0:
        raise EmptyCrop(f"crop ({x0},{y0})..({x1},{y1}) misses image {w}x{h}")
    return img[cy0:cy1, cx0:cx1].copy()


def preprocess(img, out_size=EMBED_INPUT_SIZE, params=None):
    """Sharpen, equalize, then resize to the embedding input resolution."""
    params = params or PreprocessParams()
    img = sharpen(img, params.sharpen_k)
    img = clahe(img, params.clahe_grid_x, params.clahe_grid_y,
                params.clahe_clip)
    return resize_bilinear(img, out_size, out_size)

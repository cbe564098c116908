"""Raster carriers, image I/O, binarization and synthetic test fixtures.

Intensities follow the scanned-page convention: 0 is black ink, 255 is white
background. Binary images use ``True`` for black (foreground) pixels.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import FixtureError, ImageLoadError

GRAY_LEVELS = 256

FIXTURE_KINDS = (
    "filled_square",
    "hline",
    "point",
    "sierpinski_carpet",
    "sierpinski_triangle",
    "gaussian_blob",
    "random_text_like",
)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GrayImage:
    """8-bit grayscale raster, row-major ``(height, width)``."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValueError(f"expected a 2-D array, got shape {data.shape}")
        if data.shape[0] < 2 or data.shape[1] < 2:
            raise ValueError(f"image must be at least 2x2, got {data.shape[1]}x{data.shape[0]}")
        if data.dtype != np.uint8:
            if data.size and (data.min() < 0 or data.max() > 255):
                raise ValueError("intensities must lie in [0, 255]")
            data = data.astype(np.uint8)
        object.__setattr__(self, "data", _frozen(data))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def side(self) -> int:
        """M, the side used for scale limits: min(width, height)."""
        return min(self.data.shape)

    gray_levels = GRAY_LEVELS

    def __eq__(self, other: object) -> bool:
        return isinstance(other, GrayImage) and np.array_equal(self.data, other.data)

    def __hash__(self) -> int:
        return hash((self.data.shape, self.data.tobytes()))


@dataclass(frozen=True, eq=False)
class BinaryImage:
    """Bit raster, ``True`` = black/foreground."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=bool)
        if data.ndim != 2:
            raise ValueError(f"expected a 2-D array, got shape {data.shape}")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def side(self) -> int:
        return min(self.data.shape)

    @property
    def black_count(self) -> int:
        return int(np.count_nonzero(self.data))

    def __eq__(self, other: object) -> bool:
        return isinstance(other, BinaryImage) and np.array_equal(self.data, other.data)

    def __hash__(self) -> int:
        return hash((self.data.shape, self.data.tobytes()))


PathLike = Union[str, Path]


def load_image(path: PathLike) -> GrayImage:
    """Read a binary PGM (P5, maxval 255) or an 8-bit PNG as grayscale.

    Color PNGs are reduced with rounded luma ``0.299 R + 0.587 G + 0.114 B``.
    """
    path = Path(path)
    try:
        with path.open("rb") as fh:
            head = fh.read(2)
            fh.seek(0)
            with Image.open(fh) as im:
                im.load()
                fmt = im.format
                mode = im.mode
                if fmt == "PPM":
                    if head != b"P5":
                        raise ImageLoadError(f"{path}: only binary P5 PGM is supported")
                elif fmt != "PNG":
                    raise ImageLoadError(f"{path}: unsupported format {fmt}")
                if mode in ("L", "RGB"):
                    arr = np.asarray(im)
                elif mode == "LA":
                    arr = np.asarray(im.convert("L"))
                elif mode in ("RGBA", "P", "PA"):
                    arr = np.asarray(im.convert("RGB"))
                elif mode == "1":
                    arr = np.asarray(im.convert("L"))
                else:
                    raise ImageLoadError(f"{path}: unsupported pixel mode {mode}")
    except FileNotFoundError as exc:
        raise ImageLoadError(f"{path}: no such file") from exc
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageLoadError(f"{path}: unreadable image ({exc})") from exc

    if arr.ndim == 3:
        rgb = arr[..., :3].astype(np.float64)
        arr = np.rint(0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2])
        arr = np.clip(arr, 0, 255).astype(np.uint8)
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ImageLoadError(f"{path}: zero-dimension image")
    try:
        return GrayImage(arr)
    except ValueError as exc:
        raise ImageLoadError(f"{path}: {exc}") from exc


def save_pgm(img: GrayImage, path: PathLike) -> None:
    """Write a binary P5 PGM (used for fixtures and ``--dump-pgm``)."""
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.data.tobytes())


def otsu_threshold(img: GrayImage) -> int:
    """Otsu threshold ``t`` such that a pixel is black iff intensity < t.

    Maximizes the between-class variance over the 256-bin histogram. When
    several splits tie (empty bins between modes), the middle of the tied
    range is used. A constant image returns its own value (all white).
    """
    hist = np.bincount(img.data.ravel(), minlength=GRAY_LEVELS).astype(np.float64)
    total = hist.sum()
    levels = np.arange(GRAY_LEVELS, dtype=np.float64)
    w0 = np.cumsum(hist)
    w1 = total - w0
    mu_cum = np.cumsum(hist * levels)
    mu_total = mu_cum[-1]
    valid = (w0 > 0) & (w1 > 0)
    if not valid.any():
        return int(img.data.flat[0])
    between = np.zeros(GRAY_LEVELS)
    # split after level k: class 0 holds levels <= k
    between[valid] = (mu_total * w0[valid] - total * mu_cum[valid]) ** 2 / (w0[valid] * w1[valid])
    best = between.max()
    ties = np.flatnonzero(valid & (between >= best * (1 - 1e-12)))
    return int(ties[0] + ties[-1]) // 2 + 1


def binarize(img: GrayImage, method: str | int = "otsu") -> BinaryImage:
    """Threshold to a bitmap; black iff intensity < threshold.

    ``method`` is ``"otsu"``, an integer threshold in ``[0, 256]``, or a
    string of the form ``"fixed:T"``.
    """
    threshold = parse_binarization(method)
    if threshold is None:
        threshold = otsu_threshold(img)
    return BinaryImage(img.data < threshold)


def parse_binarization(method: str | int) -> int | None:
    """Return the fixed threshold encoded by ``method``, or None for Otsu."""
    if isinstance(method, (int, np.integer)):
        t = int(method)
    elif method == "otsu":
        return None
    elif isinstance(method, str) and method.startswith("fixed:"):
        try:
            t = int(method.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad fixed threshold in {method!r}") from None
    else:
        raise ValueError(f"unknown binarization method {method!r}")
    if not 0 <= t <= GRAY_LEVELS:
        raise ValueError(f"fixed threshold must be in [0, 256], got {t}")
    return t


def binarization_name(method: str | int) -> str:
    t = parse_binarization(method)
    return "otsu" if t is None else f"fixed:{t}"


# -- fixtures -----------------------------------------------------------------

def make_fixture(
    kind: str,
    side: int,
    *,
    depth: int | None = None,
    sigma: float | None = None,
    seed: int | None = None,
) -> GrayImage:
    """Deterministic analytic raster, black shape on white background.

    ``sierpinski_carpet`` needs ``side`` to be a multiple of ``3**depth`` and
    ``sierpinski_triangle`` a multiple of ``2**depth``; ``gaussian_blob``
    takes ``sigma`` and ``random_text_like`` takes ``seed``.
    """
    if side < 8:
        raise FixtureError(f"fixture side must be >= 8, got {side}")
    white = np.full((side, side), 255, dtype=np.uint8)

    if kind == "filled_square":
        return GrayImage(np.zeros((side, side), dtype=np.uint8))
    if kind == "hline":
        white[side // 2, :] = 0
        return GrayImage(white)
    if kind == "point":
        white[side // 2, side // 2] = 0
        return GrayImage(white)
    if kind == "sierpinski_carpet":
        depth = _require_depth(depth)
        cells = 3**depth
        if side % cells:
            raise FixtureError(f"carpet depth {depth} needs side divisible by {cells}, got {side}")
        idx = np.arange(cells)
        hole = np.zeros((cells, cells), dtype=bool)
        for _ in range(depth):
            hole |= ((idx[:, None] % 3) == 1) & ((idx[None, :] % 3) == 1)
            idx = idx // 3
        black = np.kron(~hole, np.ones((side // cells, side // cells), dtype=bool))
        return GrayImage(np.where(black, 0, 255).astype(np.uint8))
    if kind == "sierpinski_triangle":
        depth = _require_depth(depth)
        cells = 2**depth
        if side % cells:
            raise FixtureError(f"triangle depth {depth} needs side divisible by {cells}, got {side}")
        r = np.arange(cells)[:, None]
        c = np.arange(cells)[None, :]
        black = (r & c) == 0
        black = np.kron(black, np.ones((side // cells, side // cells), dtype=bool))
        return GrayImage(np.where(black, 0, 255).astype(np.uint8))
    if kind == "gaussian_blob":
        if sigma is None or sigma <= 0:
            raise FixtureError("gaussian_blob needs sigma > 0")
        center = side // 2
        yy, xx = np.mgrid[0:side, 0:side]
        d2 = (yy - center) ** 2 + (xx - center) ** 2
        arr = 255.0 * (1.0 - np.exp(-d2 / (2.0 * sigma * sigma)))
        return GrayImage(np.rint(arr).astype(np.uint8))
    if kind == "random_text_like":
        return GrayImage(text_page(side, 0 if seed is None else seed))
    raise FixtureError(f"unknown fixture kind {kind!r}; expected one of {', '.join(FIXTURE_KINDS)}")


def _require_depth(depth: int | None) -> int:
    if depth is None or depth < 0:
        raise FixtureError("fractal fixtures need depth >= 0")
    return depth


_INK = 25
_BACKGROUND = 235


def text_page(side: int, seed: int) -> np.ndarray:
    """Lines of pseudo-words built from random strokes, like a printed page."""
    rng = np.random.default_rng(seed)
    page = np.full((side, side), _BACKGROUND, dtype=np.uint8)
    margin = max(2, side // 12)
    x_height = max(4, int(round(side * rng.uniform(0.026, 0.036))))
    glyph_w = max(3, int(round(x_height * 0.75)))
    stroke = max(1, int(round(x_height / 6)))
    line_pitch = int(round(x_height * 2.4))

    y = margin + x_height
    while y + x_height + margin <= side:
        x = margin + int(rng.integers(0, 2 * glyph_w))
        while True:
            n_glyphs = int(rng.integers(2, 9))
            word_w = n_glyphs * (glyph_w + stroke)
            if x + word_w > side - margin:
                break
            for _ in range(n_glyphs):
                draw_glyph(page, rng, y, x, x_height, glyph_w, stroke)
                x += glyph_w + stroke
            x += int(round(glyph_w * rng.uniform(0.9, 1.6)))
        y += line_pitch
    return page


def draw_glyph(page: np.ndarray, rng: np.random.Generator, top: int, left: int,
                h: int, w: int, t: int) -> None:
    yy, xx = np.mgrid[0:h, 0:w]
    ink = np.zeros((h, w), dtype=bool)
    n_strokes = int(rng.integers(2, 4))
    for _ in range(n_strokes):
        kind = int(rng.integers(0, 6))
        if kind == 0:  # vertical stem
            c = int(rng.choice([0, (w - t) // 2, w - t]))
            ink[:, c:c + t] = True
        elif kind == 1:  # horizontal bar
            r = int(rng.choice([0, (h - t) // 2, h - t]))
            ink[r:r + t, :] = True
        elif kind == 2:  # bowl
            cy, cx = (h - 1) / 2, (w - 1) / 2
            rad = np.hypot((yy - cy) / (h / 2), (xx - cx) / (w / 2))
            ink |= (rad <= 1.0) & (rad >= 1.0 - 2.2 * t / min(h, w))
        elif kind == 3:  # diagonal
            slope = w / h
            if rng.integers(0, 2):
                ink |= np.abs(xx - yy * slope) < t
            else:
                ink |= np.abs((w - 1 - xx) - yy * slope) < t
        elif kind == 4:  # dot
            r0, c0 = int(rng.integers(0, h - t + 1)), int(rng.integers(0, w - t + 1))
            ink[r0:r0 + t + 1, c0:c0 + t + 1] = True
        else:  # half arc
            cy, cx = (h - 1) / 2, (w - 1) / 2
            rad = np.hypot((yy - cy) / (h / 2), (xx - cx) / (w / 2))
            side_mask = xx >= cx if rng.integers(0, 2) else xx <= cx
            ink |= (rad <= 1.0) & (rad >= 1.0 - 2.2 * t / min(h, w)) & side_mask
    region = page[top:top + h, left:left + w]
    region[ink[: region.shape[0], : region.shape[1]]] = _INK
    # ascender or descender on some glyphs
    if rng.random() < 0.3:
        c = left + int(rng.choice([0, w - t]))
        if rng.random() < 0.5:
            page[max(0, top - h // 2):top, c:c + t] = _INK
        else:
            page[top + h:top + h + h // 2, c:c + t] = _INK

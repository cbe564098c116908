"""SIFT keypoints and descriptors, plus brute-force descriptor matching.

Follows Lowe's detector: a Gaussian pyramid over octaves, difference-of-
Gaussian layers, 26-neighbour extrema, quadratic refinement, contrast and
edge rejection, gradient-histogram orientations and 4x4x8 descriptors.

Intensities are mapped to [0, 1] first so the contrast threshold does not
depend on the bit depth. Octaves are produced by 2x2 block averaging, which
keeps the pyramid exactly equivariant under 90 degree rotations of
even-sized images. A pixel ``(col, row)`` of octave ``o`` sits at image
coordinate ``(col + 0.5) * 2**o - 0.5``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy import ndimage

from .raster import GrayImage

DESCRIPTOR_LENGTH = 128
_GRID = 4  # spatial cells per side
_ORI_BINS = 8
_SAMPLES = 16  # descriptor samples per side
_CLAMP = 0.2
_ORI_HIST_BINS = 36
_ORI_PEAK_RATIO = 0.8
_ORI_WINDOW = 1.5
_MAX_REFINE_STEPS = 5
MIN_IMAGE_SIDE = 16


@dataclass(frozen=True)
class ScaleSpaceConfig:
    octaves: int | None = None  # None = floor(log2(min(w, h))) - 3
    intervals_per_octave: int = 3
    base_sigma: float = 1.6
    assumed_input_blur: float = 0.5
    upsample_first_octave: bool = False

    def __post_init__(self) -> None:
        if self.intervals_per_octave < 1:
            raise ValueError("intervals_per_octave must be >= 1")
        if self.base_sigma <= self.assumed_input_blur:
            raise ValueError("base_sigma must exceed assumed_input_blur")
        if self.octaves is not None and self.octaves < 1:
            raise ValueError("octaves must be >= 1")

    def octave_count(self, width: int, height: int) -> int:
        if self.octaves is not None:
            n = self.octaves
        else:
            n = int(math.floor(math.log2(min(width, height)))) - 3
            if self.upsample_first_octave:
                n += 1
        return max(1, n)


@dataclass(frozen=True)
class DetectThresholds:
    contrast: float = 0.03
    edge_ratio: float = 10.0


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    sigma: float
    orientation: float
    response: float = 0.0
    octave: int = field(default=0, compare=False)


@dataclass(frozen=True, eq=False)
class KeypointSet:
    """Keypoints and their descriptors, row ``i`` of ``descriptors`` belongs
    to ``keypoints[i]``."""

    image_id: int | str
    keypoints: tuple[Keypoint, ...]
    descriptors: np.ndarray

    def __post_init__(self) -> None:
        desc = np.asarray(self.descriptors, dtype=np.float64).reshape(-1, DESCRIPTOR_LENGTH)
        if len(desc) != len(self.keypoints):
            raise ValueError(f"{len(self.keypoints)} keypoints but {len(desc)} descriptors")
        desc = np.ascontiguousarray(desc)
        desc.setflags(write=False)
        object.__setattr__(self, "keypoints", tuple(self.keypoints))
        object.__setattr__(self, "descriptors", desc)

    def __len__(self) -> int:
        return len(self.keypoints)

    @classmethod
    def empty(cls, image_id: int | str = 0) -> "KeypointSet":
        return cls(image_id, (), np.zeros((0, DESCRIPTOR_LENGTH)))

    def geometry(self) -> np.ndarray:
        """``(n, 4)`` array of ``x, y, sigma, orientation``."""
        return np.array([[k.x, k.y, k.sigma, k.orientation] for k in self.keypoints],
                        dtype=np.float64).reshape(-1, 4)


# -- scale space --------------------------------------------------------------

@dataclass
class Octave:
    index: int
    gaussians: np.ndarray  # (intervals + 3, h, w)
    dogs: np.ndarray  # (intervals + 2, h, w)
    factor: float  # image pixels per octave pixel

    def to_image(self, col: float, row: float) -> tuple[float, float]:
        return (col + 0.5) * self.factor - 0.5, (row + 0.5) * self.factor - 0.5


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    v = img[:h, :w]
    return 0.25 * (v[0::2, 0::2] + v[1::2, 0::2] + v[0::2, 1::2] + v[1::2, 1::2])


def _upsample(img: np.ndarray) -> np.ndarray:
    return ndimage.zoom(img, 2, order=1, mode="nearest", grid_mode=True)


def build_scale_space(img: GrayImage, cfg: ScaleSpaceConfig = ScaleSpaceConfig()) -> list[Octave]:
    """Gaussian and DoG stacks for every octave."""
    base = img.data.astype(np.float64) / 255.0
    blur = cfg.assumed_input_blur
    factor = 1.0
    if cfg.upsample_first_octave:
        base = _upsample(base)
        blur *= 2.0
        factor = 0.5
    s = cfg.intervals_per_octave
    k = 2.0 ** (1.0 / s)
    sigma0 = cfg.base_sigma
    base = ndimage.gaussian_filter(base, math.sqrt(max(sigma0**2 - blur**2, 0.01)))
    totals = [sigma0 * k**i for i in range(s + 3)]
    increments = [math.sqrt(totals[i] ** 2 - totals[i - 1] ** 2) for i in range(1, s + 3)]

    octaves = []
    for o in range(cfg.octave_count(img.width, img.height)):
        if min(base.shape) < 4:
            break
        stack = [base]
        for inc in increments:
            stack.append(ndimage.gaussian_filter(stack[-1], inc))
        gauss = np.stack(stack)
        octaves.append(Octave(o, gauss, gauss[1:] - gauss[:-1], factor))
        base = _downsample(gauss[s])
        factor *= 2.0
    return octaves


def image_gradients(layer: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference ``(d/dx, d/dy)``; edges use the replicated pixel."""
    padded = np.pad(np.asarray(layer, dtype=np.float64), 1, mode="edge")
    gx = 0.5 * (padded[1:-1, 2:] - padded[1:-1, :-2])
    gy = 0.5 * (padded[2:, 1:-1] - padded[:-2, 1:-1])
    return gx, gy


# -- detection ----------------------------------------------------------------

def _candidates(dogs: np.ndarray, floor: float) -> np.ndarray:
    fp = np.ones((3, 3, 3), dtype=bool)
    fp[1, 1, 1] = False
    hi = ndimage.maximum_filter(dogs, footprint=fp, mode="nearest")
    lo = ndimage.minimum_filter(dogs, footprint=fp, mode="nearest")
    ext = ((dogs > hi) | (dogs < lo)) & (np.abs(dogs) >= floor)
    ext[0] = ext[-1] = False
    ext[:, [0, -1], :] = False
    ext[:, :, [0, -1]] = False
    return np.argwhere(ext)  # rows of (layer, row, col), lexicographic


def _derivatives(d: np.ndarray, l: int, r: int, c: int) -> tuple[np.ndarray, np.ndarray]:
    v = d[l, r, c]
    g = np.array([
        0.5 * (d[l, r, c + 1] - d[l, r, c - 1]),
        0.5 * (d[l, r + 1, c] - d[l, r - 1, c]),
        0.5 * (d[l + 1, r, c] - d[l - 1, r, c]),
    ])
    dxx = d[l, r, c + 1] - 2 * v + d[l, r, c - 1]
    dyy = d[l, r + 1, c] - 2 * v + d[l, r - 1, c]
    dss = d[l + 1, r, c] - 2 * v + d[l - 1, r, c]
    dxy = 0.25 * (d[l, r + 1, c + 1] - d[l, r + 1, c - 1] - d[l, r - 1, c + 1] + d[l, r - 1, c - 1])
    dxs = 0.25 * (d[l + 1, r, c + 1] - d[l + 1, r, c - 1] - d[l - 1, r, c + 1] + d[l - 1, r, c - 1])
    dys = 0.25 * (d[l + 1, r + 1, c] - d[l + 1, r - 1, c] - d[l - 1, r + 1, c] + d[l - 1, r - 1, c])
    hess = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
    return g, hess


@dataclass(frozen=True)
class _Extremum:
    layer: int
    row: int
    col: int
    offset: tuple[float, float, float]  # (dx, dy, ds)
    value: float


def _refine(dogs: np.ndarray, l: int, r: int, c: int,
            th: DetectThresholds) -> _Extremum | None:
    n_layers, h, w = dogs.shape
    for _ in range(_MAX_REFINE_STEPS):
        g, hess = _derivatives(dogs, l, r, c)
        try:
            off = -np.linalg.solve(hess, g)
        except np.linalg.LinAlgError:
            return None
        if np.all(np.abs(off) < 0.5):
            break
        c += int(round(off[0]))
        r += int(round(off[1]))
        l += int(round(off[2]))
        if not (1 <= l <= n_layers - 2 and 1 <= r <= h - 2 and 1 <= c <= w - 2):
            return None
    else:
        return None
    value = float(dogs[l, r, c] + 0.5 * g @ off)
    if abs(value) < th.contrast:
        return None
    dxx, dyy, dxy = hess[0, 0], hess[1, 1], hess[0, 1]
    det = dxx * dyy - dxy * dxy
    tr = dxx + dyy
    if det <= 0 or tr * tr / det >= (th.edge_ratio + 1) ** 2 / th.edge_ratio:
        return None
    return _Extremum(l, r, c, (float(off[0]), float(off[1]), float(off[2])), value)


def _orientations(gx: np.ndarray, gy: np.ndarray, row: int, col: int,
                  sigma_oct: float) -> list[float]:
    """Dominant gradient directions around ``(row, col)``."""
    sw = _ORI_WINDOW * sigma_oct
    rad = int(round(3 * sw))
    h, w = gx.shape
    r0, r1 = max(0, row - rad), min(h, row + rad + 1)
    c0, c1 = max(0, col - rad), min(w, col + rad + 1)
    px = gx[r0:r1, c0:c1]
    py = gy[r0:r1, c0:c1]
    yy, xx = np.mgrid[r0 - row:r1 - row, c0 - col:c1 - col]
    inside = xx * xx + yy * yy <= rad * rad
    weight = np.exp(-(xx * xx + yy * yy) / (2 * sw * sw)) * np.hypot(px, py) * inside
    ang = np.mod(np.arctan2(py, px), 2 * np.pi)
    pos = ang * (_ORI_HIST_BINS / (2 * np.pi))
    i0 = np.floor(pos).astype(np.int64)
    frac = pos - i0
    hist = np.bincount((i0 % _ORI_HIST_BINS).ravel(), (weight * (1 - frac)).ravel(),
                       minlength=_ORI_HIST_BINS)
    hist += np.bincount(((i0 + 1) % _ORI_HIST_BINS).ravel(), (weight * frac).ravel(),
                        minlength=_ORI_HIST_BINS)
    # circular [1 4 6 4 1] smoothing
    hist = (6 * hist + 4 * (np.roll(hist, 1) + np.roll(hist, -1))
            + np.roll(hist, 2) + np.roll(hist, -2)) / 16.0
    peak = hist.max()
    if peak <= 0:
        return []
    left, right = np.roll(hist, 1), np.roll(hist, -1)
    out = []
    for i in np.flatnonzero((hist > left) & (hist > right) & (hist >= _ORI_PEAK_RATIO * peak)):
        denom = left[i] - 2 * hist[i] + right[i]
        shift = 0.5 * (left[i] - right[i]) / denom if denom != 0 else 0.0
        theta = ((i + shift) % _ORI_HIST_BINS) * (2 * np.pi / _ORI_HIST_BINS)
        if theta >= 2 * np.pi:
            theta = 0.0
        out.append(float(theta))
    return sorted(out)


def _raw_descriptors(gx: np.ndarray, gy: np.ndarray, xs: np.ndarray, ys: np.ndarray,
                     sigmas: np.ndarray, thetas: np.ndarray) -> np.ndarray:
    """Unnormalized 4x4x8 histograms for keypoints in gradient-image pixels."""
    n = len(xs)
    h, w = gx.shape
    spacing = 3.0 * sigmas / (_SAMPLES / _GRID)  # a cell spans 3 sigma
    idx = np.arange(_SAMPLES) - (_SAMPLES - 1) / 2.0
    vv, uu = np.meshgrid(idx, idx, indexing="ij")  # v: rows, u: columns of the patch
    uu = uu.ravel()
    vv = vv.ravel()
    cos = np.cos(thetas)[:, None]
    sin = np.sin(thetas)[:, None]
    u = uu[None, :] * spacing[:, None]
    v = vv[None, :] * spacing[:, None]
    px = xs[:, None] + cos * u - sin * v
    py = ys[:, None] + sin * u + cos * v

    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    fx = px - x0
    fy = py - y0
    valid = (px >= 0) & (py >= 0) & (px <= w - 1) & (py <= h - 1)
    x0c = np.clip(x0, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)

    def bilinear(img: np.ndarray) -> np.ndarray:
        return ((1 - fy) * ((1 - fx) * img[y0c, x0c] + fx * img[y0c, x1c])
                + fy * ((1 - fx) * img[y1c, x0c] + fx * img[y1c, x1c]))

    sx = bilinear(gx)
    sy = bilinear(gy)
    mag = np.hypot(sx, sy) * valid
    rel = np.mod(np.arctan2(sy, sx) - thetas[:, None], 2 * np.pi)
    half_width = _SAMPLES / 2.0
    weight = np.exp(-(uu**2 + vv**2) / (2 * half_width**2))[None, :]
    mag = mag * weight

    # continuous cell / orientation coordinates, bin centers at integers
    cu = (uu + (_SAMPLES - 1) / 2.0 + 0.5) / (_SAMPLES / _GRID) - 0.5
    cv = (vv + (_SAMPLES - 1) / 2.0 + 0.5) / (_SAMPLES / _GRID) - 0.5
    co = rel * (_ORI_BINS / (2 * np.pi))
    iu = np.floor(cu).astype(np.int64)
    iv = np.floor(cv).astype(np.int64)
    io = np.floor(co).astype(np.int64)
    du = cu - iu
    dv = cv - iv
    do = co - io

    size = (_GRID + 2) * (_GRID + 2) * _ORI_BINS
    hist = np.zeros((n, size))
    rows = np.repeat(np.arange(n), uu.size).reshape(n, -1) * size
    for a in (0, 1):
        wv = dv if a else 1 - dv
        for b in (0, 1):
            wu = du if b else 1 - du
            for c in (0, 1):
                wo = do if c else 1 - do
                flat = (((iv + a + 1)[None, :] * (_GRID + 2) + (iu + b + 1)[None, :]) * _ORI_BINS
                        + (io + c) % _ORI_BINS)
                contrib = mag * (wv * wu)[None, :] * wo
                hist += np.bincount((rows + flat).ravel(), contrib.ravel(),
                                    minlength=n * size).reshape(n, size)
    hist = hist.reshape(n, _GRID + 2, _GRID + 2, _ORI_BINS)[:, 1:-1, 1:-1, :]
    return hist.reshape(n, DESCRIPTOR_LENGTH)


def normalize_descriptor(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
    """Unit-normalize, clamp components at 0.2, renormalize.

    Returns ``(clamped, final)`` or None for an all-zero histogram.
    """
    raw = np.asarray(raw, dtype=np.float64)
    norm = np.linalg.norm(raw)
    if norm <= 0:
        return None
    clamped = np.minimum(raw / norm, _CLAMP)
    return clamped, clamped / np.linalg.norm(clamped)


def descriptor(gx: np.ndarray, gy: np.ndarray, kp: Keypoint) -> np.ndarray | None:
    """128-component descriptor for ``kp`` given in the gradient images' pixels.

    The 16x16 sample grid is scaled by ``kp.sigma`` and rotated by
    ``kp.orientation``; samples off the image contribute nothing. Returns
    None when the clipped window carries no gradient at all.
    """
    raw = _raw_descriptors(gx, gy, np.array([kp.x]), np.array([kp.y]),
                           np.array([kp.sigma]), np.array([kp.orientation]))[0]
    res = normalize_descriptor(raw)
    return None if res is None else res[1]


def detect(img: GrayImage, cfg: ScaleSpaceConfig = ScaleSpaceConfig(),
           thresholds: DetectThresholds = DetectThresholds(),
           image_id: int | str = 0) -> KeypointSet:
    """Detect and describe SIFT keypoints.

    Output order is stable: octave, row, column, then orientation.
    A constant image yields an empty set.
    """
    if img.width < MIN_IMAGE_SIDE or img.height < MIN_IMAGE_SIDE:
        raise ValueError(f"image must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}")
    s = cfg.intervals_per_octave
    keypoints: list[Keypoint] = []
    descs: list[np.ndarray] = []
    for octave in build_scale_space(img, cfg):
        seen = set()
        found: list[_Extremum] = []
        for l, r, c in _candidates(octave.dogs, 0.5 * thresholds.contrast):
            ext = _refine(octave.dogs, int(l), int(r), int(c), thresholds)
            if ext is None or (ext.layer, ext.row, ext.col) in seen:
                continue
            seen.add((ext.layer, ext.row, ext.col))
            found.append(ext)

        grads: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        batch: dict[int, list[tuple[Keypoint, float, float, float, float, tuple]]] = {}
        for ext in found:
            scale_pos = ext.layer + ext.offset[2]
            sigma_oct = cfg.base_sigma * 2.0 ** (scale_pos / s)
            g_idx = int(min(max(round(scale_pos), 0), octave.gaussians.shape[0] - 1))
            if g_idx not in grads:
                grads[g_idx] = image_gradients(octave.gaussians[g_idx])
            gx, gy = grads[g_idx]
            xo = ext.col + ext.offset[0]
            yo = ext.row + ext.offset[1]
            x, y = octave.to_image(xo, yo)
            x = min(max(x, 0.0), img.width - 1.0)
            y = min(max(y, 0.0), img.height - 1.0)
            for theta in _orientations(gx, gy, ext.row, ext.col, sigma_oct):
                kp = Keypoint(x, y, sigma_oct * octave.factor, theta, ext.value, octave.index)
                sort_key = (ext.row, ext.col, theta)
                batch.setdefault(g_idx, []).append((kp, xo, yo, sigma_oct, theta, sort_key))

        described: list[tuple[tuple, Keypoint, np.ndarray]] = []
        for g_idx, items in batch.items():
            gx, gy = grads[g_idx]
            raw = _raw_descriptors(gx, gy,
                                   np.array([t[1] for t in items]), np.array([t[2] for t in items]),
                                   np.array([t[3] for t in items]), np.array([t[4] for t in items]))
            for item, vec in zip(items, raw):
                res = normalize_descriptor(vec)
                if res is not None:
                    described.append((item[5], item[0], res[1]))
        described.sort(key=lambda t: t[0])
        for _, kp, vec in described:
            keypoints.append(kp)
            descs.append(vec)
    desc_arr = np.array(descs) if descs else np.zeros((0, DESCRIPTOR_LENGTH))
    return KeypointSet(image_id, tuple(keypoints), desc_arr)


# -- matching -----------------------------------------------------------------

@dataclass(frozen=True)
class MatchRule:
    """Acceptance rule: Lowe ratio test or an absolute distance ceiling."""

    kind: Literal["ratio", "absolute"] = "ratio"
    value: float = 0.8

    def __post_init__(self) -> None:
        if self.kind not in ("ratio", "absolute"):
            raise ValueError(f"unknown match rule {self.kind!r}")
        if self.value <= 0:
            raise ValueError("match threshold must be positive")

    @classmethod
    def ratio(cls, rho: float = 0.8) -> "MatchRule":
        return cls("ratio", rho)

    @classmethod
    def absolute(cls, d_max: float) -> "MatchRule":
        return cls("absolute", d_max)


DEFAULT_RULE = MatchRule()
_CHUNK = 1024


def _as_descriptors(x: KeypointSet | np.ndarray) -> np.ndarray:
    if isinstance(x, KeypointSet):
        return x.descriptors
    return np.asarray(x, dtype=np.float64).reshape(-1, DESCRIPTOR_LENGTH)


def match(a: KeypointSet | np.ndarray, b: KeypointSet | np.ndarray,
          rule: MatchRule = DEFAULT_RULE) -> list[tuple[int, int, float]]:
    """Directed matches ``a -> b`` by exhaustive Euclidean nearest neighbour.

    Under the ratio rule a pair is kept iff ``d1 < rho * d2``; when ``b`` has
    a single descriptor the ratio is undefined and nothing is kept. Under the
    absolute rule the nearest neighbour is kept iff ``d1 < d_max``.
    """
    da = _as_descriptors(a)
    db = _as_descriptors(b)
    if len(da) == 0 or len(db) == 0:
        return []
    if rule.kind == "ratio" and len(db) < 2:
        return []
    nb = np.einsum("ij,ij->i", db, db)
    out = []
    for start in range(0, len(da), _CHUNK):
        chunk = da[start:start + _CHUNK]
        na = np.einsum("ij,ij->i", chunk, chunk)
        d2 = np.maximum(na[:, None] + nb[None, :] - 2.0 * chunk @ db.T, 0.0)
        if len(db) >= 2:
            part = np.argpartition(d2, 1, axis=1)[:, :2]
            first = np.take_along_axis(d2, part, axis=1)
            swap = first[:, 1] < first[:, 0]
            nn = np.where(swap, part[:, 1], part[:, 0])
            d1 = np.sqrt(np.minimum(first[:, 0], first[:, 1]))
            second = np.sqrt(np.maximum(first[:, 0], first[:, 1]))
        else:
            nn = np.zeros(len(chunk), dtype=np.int64)
            d1 = np.sqrt(d2[:, 0])
            second = np.full(len(chunk), np.inf)
        if rule.kind == "ratio":
            keep = d1 < rule.value * second
        else:
            keep = d1 < rule.value
        for i in np.flatnonzero(keep):
            j = int(nn[i])
            out.append((start + int(i), j, float(np.linalg.norm(chunk[i] - db[j]))))
    return out


def match_count(a: KeypointSet | np.ndarray, b: KeypointSet | np.ndarray,
                rule: MatchRule = DEFAULT_RULE) -> int:
    return len(match(a, b, rule))


def format_keypoints(kps: KeypointSet) -> str:
    """One line per keypoint: ``x y sigma orientation`` then 128 values."""
    lines = []
    for kp, vec in zip(kps.keypoints, kps.descriptors):
        head = f"{kp.x:.6f} {kp.y:.6f} {kp.sigma:.6f} {kp.orientation:.6f}"
        lines.append(head + " " + " ".join(f"{v:.6f}" for v in vec))
    return "\n".join(lines) + ("\n" if lines else "")


def parse_keypoints(text: str, image_id: int | str = 0) -> KeypointSet:
    """Inverse of :func:`format_keypoints`."""
    kps = []
    descs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = line.split()
        if len(vals) != 4 + DESCRIPTOR_LENGTH:
            raise ValueError(f"line {lineno}: expected {4 + DESCRIPTOR_LENGTH} values, got {len(vals)}")
        nums = [float(v) for v in vals]
        kps.append(Keypoint(*nums[:4]))
        descs.append(nums[4:])
    return KeypointSet(image_id, tuple(kps),
                       np.array(descs) if descs else np.zeros((0, DESCRIPTOR_LENGTH)))


def nearest_keypoints(points: Sequence[tuple[float, float]], kps: KeypointSet) -> np.ndarray:
    """Distance from every query point to the closest keypoint location."""
    if not len(kps):
        return np.full(len(points), np.inf)
    geo = kps.geometry()[:, :2]
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    d = np.hypot(pts[:, None, 0] - geo[None, :, 0], pts[:, None, 1] - geo[None, :, 1])
    return d.min(axis=1)

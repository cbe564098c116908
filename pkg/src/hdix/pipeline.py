"""Two-stage index and query engine.

Stage 1 keeps the index entries whose fractal dimension lies within
``theta`` of the query's; stage 2 ranks the survivors by the symmetric SIFT
match count ``M``. The index persists to a little-endian binary file
(magic ``HDIX``); see :func:`serialize_index` for the layout.
"""

from __future__ import annotations

import json
import logging
import math
import os
import struct
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Hashable, Iterable, Mapping, Sequence, TypeVar

import numpy as np

from . import INDEX_FORMAT_VERSION
from .errors import HdixError, IndexFormatError
from .fractal import DEFAULT_DILATION_ORDERS, METHOD_ALIASES, FractalSignature, estimate
from .raster import GrayImage, binarization_name, binarize, load_image
from .sift import (DEFAULT_RULE, DESCRIPTOR_LENGTH, DetectThresholds, Keypoint, KeypointSet,
                   MatchRule, ScaleSpaceConfig, detect, match_count)
from .similarity import ClassScore, assign_class, class_score, symmetric_similarity

log = logging.getLogger(__name__)

MAGIC = b"HDIX"
METHOD_TAGS = {"box_counting": 0, "dbc": 1, "cdb": 2, "dilation": 3}
TAG_METHODS = {v: k for k, v in METHOD_TAGS.items()}

T = TypeVar("T")
R = TypeVar("R")


def thread_count() -> int:
    """Worker count from ``HDIX_THREADS`` (0 or unset = one per CPU)."""
    raw = os.environ.get("HDIX_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def _parallel_map(fn: Callable[[T], R], items: Sequence[T], threads: int | None = None) -> list[R]:
    threads = thread_count() if threads is None else threads
    if threads <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))


# -- configuration ------------------------------------------------------------

@dataclass(frozen=True)
class EstimatorConfig:
    """Which fractal signatures to store per image; the first one feeds the filter."""

    signatures: tuple[tuple[str, int], ...] = (("cdb", 20),)
    tau: int = 1
    binarization: str = "otsu"
    dilation_orders: tuple[int, ...] = DEFAULT_DILATION_ORDERS

    def __post_init__(self) -> None:
        if not self.signatures:
            raise ValueError("at least one fractal signature must be configured")
        norm = []
        for method, param in self.signatures:
            name = METHOD_ALIASES.get(method)
            if name is None:
                raise ValueError(f"unknown fractal method {method!r}")
            if name == "dilation":
                param = max(self.dilation_orders)
            norm.append((name, int(param)))
        object.__setattr__(self, "signatures", tuple(norm))
        object.__setattr__(self, "binarization", binarization_name(self.binarization))
        object.__setattr__(self, "dilation_orders", tuple(int(k) for k in self.dilation_orders))

    @property
    def default_selector(self) -> tuple[str, int]:
        return self.signatures[0]

    def to_text(self) -> str:
        sigs = ",".join(f"{m}:{p}" for m, p in self.signatures)
        orders = ",".join(str(k) for k in self.dilation_orders)
        return (f"signatures={sigs}\ntau={self.tau}\nbinarization={self.binarization}\n"
                f"dilation_orders={orders}")

    @classmethod
    def from_text(cls, text: str) -> "EstimatorConfig":
        kv = _parse_kv(text)
        try:
            sigs = tuple((m, int(p)) for m, p in (s.split(":") for s in kv["signatures"].split(",")))
            return cls(sigs, int(kv["tau"]), kv["binarization"],
                       tuple(int(k) for k in kv["dilation_orders"].split(",")))
        except (KeyError, ValueError) as exc:
            raise IndexFormatError(f"bad estimator config: {exc}") from exc


def sift_config_text(cfg: ScaleSpaceConfig, th: DetectThresholds) -> str:
    octaves = "auto" if cfg.octaves is None else str(cfg.octaves)
    return (f"octaves={octaves}\nintervals={cfg.intervals_per_octave}\n"
            f"base_sigma={cfg.base_sigma!r}\nassumed_blur={cfg.assumed_input_blur!r}\n"
            f"upsample={int(cfg.upsample_first_octave)}\ncontrast={th.contrast!r}\n"
            f"edge_ratio={th.edge_ratio!r}")


def parse_sift_config(text: str) -> tuple[ScaleSpaceConfig, DetectThresholds]:
    kv = _parse_kv(text)
    try:
        octaves = None if kv["octaves"] == "auto" else int(kv["octaves"])
        cfg = ScaleSpaceConfig(octaves, int(kv["intervals"]), float(kv["base_sigma"]),
                               float(kv["assumed_blur"]), bool(int(kv["upsample"])))
        return cfg, DetectThresholds(float(kv["contrast"]), float(kv["edge_ratio"]))
    except (KeyError, ValueError) as exc:
        raise IndexFormatError(f"bad sift config: {exc}") from exc


def _parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise IndexFormatError(f"config line without '=': {line!r}")
        out[key.strip()] = value.strip()
    return out


def compute_signatures(gray: GrayImage, cfg: EstimatorConfig) -> tuple[FractalSignature, ...]:
    """All configured signatures of one image, in configuration order."""
    needs_binary = any(m != "dbc" for m, _ in cfg.signatures)
    bin_img = binarize(gray, cfg.binarization) if needs_binary else None
    return tuple(estimate(m, gray, bin_img, max_box=p, tau=cfg.tau, orders=cfg.dilation_orders)
                 for m, p in cfg.signatures)


# -- index --------------------------------------------------------------------

@dataclass(frozen=True)
class IndexEntry:
    id: int
    path: str
    label: str | None
    fractal: tuple[FractalSignature, ...]
    keypoints: KeypointSet | None = None

    def signature(self, selector: tuple[str, int]) -> FractalSignature:
        for sig in self.fractal:
            if sig.key == selector:
                return sig
        raise KeyError(f"entry {self.id} has no {selector[0]}:{selector[1]} signature")


@dataclass
class Index:
    estimator: EstimatorConfig
    scale_space: ScaleSpaceConfig
    thresholds: DetectThresholds
    entries: list[IndexEntry]
    version: int = INDEX_FORMAT_VERSION
    warnings: list[str] = field(default_factory=list, compare=False)
    _dims: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.entries)

    def dimensions(self, selector: tuple[str, int] | None = None) -> np.ndarray:
        """Cached array of every entry's dimension for one signature."""
        selector = selector or self.estimator.default_selector
        if selector not in self._dims:
            self._dims[selector] = np.array([e.signature(selector).dimension for e in self.entries],
                                            dtype=np.float64)
        return self._dims[selector]

    def ids(self) -> np.ndarray:
        if "ids" not in self._dims:
            self._dims["ids"] = np.array([e.id for e in self.entries], dtype=np.int64)
        return self._dims["ids"]

    def entry(self, image_id: int) -> IndexEntry:
        if "by_id" not in self._dims:
            self._dims["by_id"] = {e.id: e for e in self.entries}
        return self._dims["by_id"][image_id]

    def labels(self) -> list[str]:
        return sorted({e.label for e in self.entries if e.label is not None})


def build_index(paths: Iterable[str | Path], labels: Mapping[str, str] | None = None,
                estimator: EstimatorConfig = EstimatorConfig(),
                scale_space: ScaleSpaceConfig = ScaleSpaceConfig(),
                thresholds: DetectThresholds = DetectThresholds(),
                cache_descriptors: bool = True, threads: int | None = None) -> Index:
    """Compute signatures (and optionally keypoints) for every readable image.

    Paths are processed in sorted order and numbered from 0. Unreadable or
    degenerate images are skipped with a warning; an index with no entries
    is an error. ``labels`` may be keyed by path or by file name.
    """
    labels = labels or {}
    ordered = sorted({str(p) for p in paths})

    def work(path: str):
        try:
            gray = load_image(path)
            sigs = compute_signatures(gray, estimator)
            kps = detect(gray, scale_space, thresholds) if cache_descriptors else None
        except (HdixError, ValueError) as exc:
            return path, exc
        return path, (sigs, kps)

    entries: list[IndexEntry] = []
    warnings: list[str] = []
    for path, res in _parallel_map(work, ordered, threads):
        if isinstance(res, Exception):
            msg = f"skipped {path}: {res}"
            log.warning(msg)
            warnings.append(msg)
            continue
        sigs, kps = res
        image_id = len(entries)
        label = labels.get(path, labels.get(Path(path).name))
        if kps is not None:
            kps = _f32_keypoints(kps, image_id)
        entries.append(IndexEntry(image_id, path, label or None, sigs, kps))
    if not entries:
        raise HdixError("no readable images: index would be empty")
    return Index(estimator, scale_space, thresholds, entries, warnings=warnings)


def _f32_keypoints(kps: KeypointSet, image_id: int) -> KeypointSet:
    """Round keypoints to the on-disk float32 precision so a saved index and
    the in-memory one rank identically."""
    geo = kps.geometry().astype(np.float32).astype(np.float64)
    pts = tuple(Keypoint(float(x), float(y), float(s), float(o)) for x, y, s, o in geo)
    return KeypointSet(image_id, pts, kps.descriptors.astype(np.float32).astype(np.float64))


# -- persistence ----------------------------------------------------------------

def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def serialize_index(index: Index) -> bytes:
    """Binary image of the index.

    Layout (little-endian): ``"HDIX"``, u16 version, u32 entry count,
    estimator config and SIFT config as u32-length-prefixed UTF-8
    ``key=value`` text; then per entry: u32 id, path, label (length 0 means
    no label), u8 signature count, per signature u8 method tag, u16 param,
    f64 D, f64 fit_r2; u8 descriptor-cache flag and, if set, u32 keypoint
    count followed by 132 f32 per keypoint (x, y, sigma, orientation,
    128 descriptor components).
    """
    out = [MAGIC, struct.pack("<HI", index.version, len(index.entries)),
           _pack_str(index.estimator.to_text()),
           _pack_str(sift_config_text(index.scale_space, index.thresholds))]
    for e in index.entries:
        out.append(struct.pack("<I", e.id))
        out.append(_pack_str(e.path))
        out.append(_pack_str(e.label or ""))
        out.append(struct.pack("<B", len(e.fractal)))
        for sig in e.fractal:
            out.append(struct.pack("<BHdd", METHOD_TAGS[sig.method], sig.param,
                                   sig.dimension, sig.fit_r2))
        if e.keypoints is None:
            out.append(struct.pack("<B", 0))
        else:
            kps = e.keypoints
            out.append(struct.pack("<BI", 1, len(kps)))
            block = np.hstack([kps.geometry(), kps.descriptors]).astype("<f4")
            out.append(block.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise IndexFormatError("truncated index file")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise IndexFormatError("invalid UTF-8 in index file") from exc


def parse_index(data: bytes) -> Index:
    rd = _Reader(data)
    if rd.take(4) != MAGIC:
        raise IndexFormatError("not an HDIX index (bad magic)")
    version, count = rd.unpack("<HI")
    if version != INDEX_FORMAT_VERSION:
        raise IndexFormatError(f"unsupported index version {version} "
                               f"(this build reads version {INDEX_FORMAT_VERSION})")
    estimator = EstimatorConfig.from_text(rd.string())
    scale_space, thresholds = parse_sift_config(rd.string())
    entries = []
    for _ in range(count):
        (image_id,) = rd.unpack("<I")
        path = rd.string()
        label = rd.string() or None
        (n_sig,) = rd.unpack("<B")
        sigs = []
        for _ in range(n_sig):
            tag, param, dim, r2 = rd.unpack("<BHdd")
            if tag not in TAG_METHODS:
                raise IndexFormatError(f"unknown signature method tag {tag}")
            sigs.append(FractalSignature(TAG_METHODS[tag], param, dim, r2,
                                         tau=estimator.tau if tag == METHOD_TAGS["cdb"] else None))
        (flag,) = rd.unpack("<B")
        kps = None
        if flag:
            (n_kp,) = rd.unpack("<I")
            width = 4 + DESCRIPTOR_LENGTH
            block = np.frombuffer(rd.take(4 * width * n_kp), dtype="<f4").reshape(n_kp, width)
            block = block.astype(np.float64)
            pts = tuple(Keypoint(float(x), float(y), float(s), float(o)) for x, y, s, o in block[:, :4])
            kps = KeypointSet(image_id, pts, block[:, 4:])
        entries.append(IndexEntry(image_id, path, label, tuple(sigs), kps))
    if rd.pos != len(data):
        raise IndexFormatError("trailing bytes after last index entry")
    return Index(estimator, scale_space, thresholds, entries, version=version)


def save_index(index: Index, path: str | Path) -> None:
    """Write atomically: a temp file in the same directory, then rename."""
    path = Path(path)
    data = serialize_index(index)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_index(path: str | Path) -> Index:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IndexFormatError(f"{path}: cannot read index ({exc})") from exc
    return parse_index(data)


# -- querying -----------------------------------------------------------------

@dataclass(frozen=True)
class FilterConfig:
    theta: float = 0.5
    selector: tuple[str, int] | None = None  # None = the index's default signature
    max_survivors: int | None = None  # benchmarking aid, no cap by default

    def __post_init__(self) -> None:
        if not self.theta >= 0:
            raise ValueError("theta must be >= 0")


@dataclass(frozen=True)
class RankedHit:
    id: int
    path: str
    M: float
    m_qi: int
    m_iq: int


@dataclass(frozen=True)
class QueryResult:
    ranking: tuple[RankedHit, ...]
    survivors_count: int
    rejected_count: int
    filter_ms: float = field(default=0.0, compare=False)
    rank_ms: float = field(default=0.0, compare=False)

    def ids(self) -> list[int]:
        return [h.id for h in self.ranking]


def filter_stage(d_query: float, index: Index, cfg: FilterConfig = FilterConfig()) -> list[int]:
    """Ids of entries with ``|D_query - D_i| <= theta``, in index order."""
    dims = index.dimensions(cfg.selector)
    diff = np.abs(dims - d_query)
    keep = diff <= cfg.theta
    if cfg.max_survivors is not None and np.count_nonzero(keep) > cfg.max_survivors:
        order = np.argsort(np.where(keep, diff, np.inf), kind="stable")[:cfg.max_survivors]
        keep = np.zeros_like(keep)
        keep[order] = True
    return index.ids()[keep].tolist()


def entry_keypoints(entry: IndexEntry, index: Index) -> KeypointSet:
    """Cached keypoints, or recomputed from the source image when absent."""
    if entry.keypoints is not None:
        return entry.keypoints
    return detect(load_image(entry.path), index.scale_space, index.thresholds, image_id=entry.id)


def rank_stage(query_kps: KeypointSet, survivors: Sequence[int], index: Index,
               rule: MatchRule = DEFAULT_RULE, threads: int | None = None) -> list[RankedHit]:
    """Rank survivors by ``M`` (descending), ties by ascending id."""

    def score(image_id: int) -> RankedHit:
        entry = index.entry(image_id)
        kps = entry_keypoints(entry, index)
        m_qi = match_count(query_kps, kps, rule)
        m_iq = match_count(kps, query_kps, rule)
        return RankedHit(entry.id, entry.path, symmetric_similarity(m_qi, m_iq), m_qi, m_iq)

    hits = _parallel_map(score, list(survivors), threads)
    hits.sort(key=lambda h: (-h.M, h.id))
    return hits


def _query_image(query: str | Path | GrayImage) -> GrayImage:
    return query if isinstance(query, GrayImage) else load_image(query)


def query_signature(gray: GrayImage, index: Index, selector: tuple[str, int] | None = None) -> FractalSignature:
    method, param = selector or index.estimator.default_selector
    cfg = index.estimator
    bin_img = None if method == "dbc" else binarize(gray, cfg.binarization)
    return estimate(method, gray, bin_img, max_box=param, tau=cfg.tau, orders=cfg.dilation_orders)


def query(query: str | Path | GrayImage, index: Index, cfg: FilterConfig = FilterConfig(),
          rule: MatchRule = DEFAULT_RULE, threads: int | None = None) -> QueryResult:
    """Filter by fractal dimension, then rank survivors by SIFT similarity.

    ``filter_ms`` covers the query signature plus filtering, ``rank_ms`` the
    query keypoints plus matching. No keypoints are computed when nothing
    survives the filter.
    """
    gray = _query_image(query)
    t0 = time.perf_counter()
    if math.isinf(cfg.theta):
        survivors = index.ids().tolist()
    else:
        d_q = query_signature(gray, index, cfg.selector).dimension
        survivors = filter_stage(d_q, index, cfg)
    t1 = time.perf_counter()
    hits: list[RankedHit] = []
    if survivors:
        q_kps = detect(gray, index.scale_space, index.thresholds, image_id="query")
        hits = rank_stage(q_kps, survivors, index, rule, threads)
    t2 = time.perf_counter()
    return QueryResult(tuple(hits), len(survivors), len(index) - len(survivors),
                       (t1 - t0) * 1e3, (t2 - t1) * 1e3)


@dataclass(frozen=True)
class Classification:
    class_id: Hashable | None  # None = no class
    scores: tuple[ClassScore, ...]
    result: QueryResult


def classify(query_img: str | Path | GrayImage, index: Index, cfg: FilterConfig = FilterConfig(),
             rule: MatchRule = DEFAULT_RULE, threads: int | None = None) -> Classification:
    """Assign the query to the labelled class with the largest ``S``.

    Members removed by the fractal filter contribute nothing, so a class
    rejected entirely scores 0. All-zero scores yield no class.
    """
    labels = index.labels()
    if not labels:
        raise HdixError("index has no labelled entries")
    res = query(query_img, index, cfg, rule, threads)
    by_id = {h.id: h.M for h in res.ranking}
    scores = []
    for label in labels:
        members = [e for e in index.entries if e.label == label]
        score = class_score(label, (by_id.get(e.id, 0.0) for e in members))
        scores.append(ClassScore(label, len(members), score.S))
    return Classification(assign_class(scores), tuple(scores), res)


# -- output -------------------------------------------------------------------

def format_query_result(res: QueryResult, as_json: bool = False) -> str:
    """Tab-separated ranking after a ``# survivors=.. rejected=..`` line, or
    JSON lines (a header object, then one object per hit)."""
    if as_json:
        lines = [json.dumps({"survivors": res.survivors_count, "rejected": res.rejected_count,
                             "filter_ms": res.filter_ms, "rank_ms": res.rank_ms})]
        for rank, h in enumerate(res.ranking, 1):
            lines.append(json.dumps({"rank": rank, "id": h.id, "path": h.path, "M": h.M,
                                     "m_qi": h.m_qi, "m_iq": h.m_iq}))
    else:
        lines = [f"# survivors={res.survivors_count} rejected={res.rejected_count}"]
        for rank, h in enumerate(res.ranking, 1):
            lines.append(f"{rank}\t{h.id}\t{h.path}\t{h.M:.4f}\t{h.m_qi}\t{h.m_iq}")
    return "\n".join(lines) + "\n"


def parse_labels(text: str) -> dict[str, str]:
    """``path-or-filename<TAB>label`` lines; blank lines and ``#`` comments skipped."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 2 or not parts[1].strip():
            raise ValueError(f"labels line {lineno}: expected '<file>\\t<label>'")
        out[parts[0].strip()] = parts[1].strip()
    return out

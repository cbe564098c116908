"""Timing harness: hybrid retrieval versus SIFT-only and fractal-only.

All three modes reuse the same precomputed query features, so the reported
times are pure matching/ranking costs per query.
"""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .pipeline import FilterConfig, Index, filter_stage, query_signature, rank_stage
from .raster import GrayImage, draw_glyph, text_page, load_image, save_pgm
from .sift import DEFAULT_RULE, MatchRule, detect

CORPUS_KINDS = ("sparse", "page", "figure")


def corpus_image(kind: str, side: int, seed: int) -> GrayImage:
    """Synthetic page of one of three families with well separated fractal
    dimensions: scattered marks, running text, and large filled figures
    with a caption."""
    rng = np.random.default_rng(seed)
    if kind == "page":
        return GrayImage(text_page(side, seed))
    page = np.full((side, side), 235, dtype=np.uint8)
    h = max(6, side // 14)
    w = max(4, int(h * 0.75))
    t = max(1, h // 6)
    if kind == "sparse":
        for _ in range(int(rng.integers(3, 6))):
            top = int(rng.integers(h, side - 2 * h))
            left = int(rng.integers(2, side - 2 * w))
            draw_glyph(page, rng, top, left, h, w, t)
        return GrayImage(page)
    if kind == "figure":
        yy, xx = np.mgrid[0:side, 0:side]
        for _ in range(int(rng.integers(2, 4))):
            cy, cx = rng.uniform(0.25, 0.75, size=2) * side
            ry, rx = rng.uniform(0.15, 0.3, size=2) * side
            if rng.integers(0, 2):
                mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
            else:
                mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
            page[mask] = int(rng.integers(15, 60))
        left = 4
        for _ in range(int(rng.integers(3, 7))):
            if left + w >= side - 4:
                break
            draw_glyph(page, rng, side - h - 4, left, h, w, t)
            left += w + t
        return GrayImage(page)
    raise ValueError(f"unknown corpus kind {kind!r}")


def write_corpus(directory: str | Path, n: int, side: int = 128, seed: int = 0,
                 kinds: Sequence[str] = CORPUS_KINDS) -> list[Path]:
    """Write ``n`` PGM pages cycling through ``kinds``; returns their paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n):
        kind = kinds[i % len(kinds)]
        p = directory / f"{kind}_{i:04d}.pgm"
        save_pgm(corpus_image(kind, side, seed * 100003 + i), p)
        paths.append(p)
    return paths


@dataclass
class ModeStats:
    name: str
    times_ms: list[float] = field(default_factory=list)
    survivor_rates: list[float] = field(default_factory=list)
    top1_agree: list[bool] = field(default_factory=list)
    consistent: list[bool] = field(default_factory=list)

    @property
    def mean_ms(self) -> float:
        return statistics.fmean(self.times_ms) if self.times_ms else 0.0

    @property
    def survivor_rate(self) -> float:
        return statistics.fmean(self.survivor_rates) if self.survivor_rates else 0.0

    @property
    def top1_agreement(self) -> float:
        return statistics.fmean(self.top1_agree) if self.top1_agree else 0.0


@dataclass
class BenchReport:
    n_queries: int
    index_size: int
    modes: list[ModeStats]
    rankings: dict[str, list[list[int]]] = field(default_factory=dict, repr=False)

    def mode(self, name: str) -> ModeStats:
        for m in self.modes:
            if m.name == name:
                return m
        raise KeyError(name)

    def format(self) -> str:
        lines = [f"# queries={self.n_queries} index_size={self.index_size}",
                 "mode\tmean_ms\tsurvivor_rate\ttop1_agreement\tconsistent"]
        for m in self.modes:
            cons = f"{statistics.fmean(m.consistent):.4f}" if m.consistent else "-"
            lines.append(f"{m.name}\t{m.mean_ms:.4f}\t{m.survivor_rate:.4f}\t"
                         f"{m.top1_agreement:.4f}\t{cons}")
        return "\n".join(lines) + "\n"


def _theta_name(theta: float) -> str:
    return "hybrid(theta=inf)" if math.isinf(theta) else f"hybrid(theta={theta:g})"


def bench(index: Index, queries: Sequence[str | Path | GrayImage], thetas: Sequence[float],
          rule: MatchRule = DEFAULT_RULE, threads: int | None = 1, repeats: int = 1) -> BenchReport:
    """Mean per-query ranking time for each mode.

    Rows: one hybrid row per theta, ``sift-only`` (every entry ranked by M)
    and ``fractal-only`` (every entry ranked by |dD|). Agreement columns
    compare each row's top hit, and its ranking restricted to its own
    survivors, with the SIFT-only ranking.
    """
    feats = []
    for q in queries:
        gray = q if isinstance(q, GrayImage) else load_image(q)
        feats.append((query_signature(gray, index).dimension,
                      detect(gray, index.scale_space, index.thresholds, image_id="query")))
    all_ids = index.ids().tolist()
    dims = index.dimensions()

    sift_stats = ModeStats("sift-only")
    sift_rankings = []
    for d_q, kps in feats:
        best = math.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            hits = rank_stage(kps, all_ids, index, rule, threads)
            best = min(best, time.perf_counter() - t0)
        sift_stats.times_ms.append(best * 1e3)
        sift_stats.survivor_rates.append(1.0)
        ranking = [h.id for h in hits]
        sift_rankings.append(ranking)
        sift_stats.top1_agree.append(True)
        sift_stats.consistent.append(True)

    modes = []
    rankings: dict[str, list[list[int]]] = {"sift-only": sift_rankings}
    for theta in thetas:
        stats = ModeStats(_theta_name(theta))
        rankings[stats.name] = []
        cfg = FilterConfig(theta=theta)
        for (d_q, kps), ref in zip(feats, sift_rankings):
            best = math.inf
            for _ in range(repeats):
                t0 = time.perf_counter()
                survivors = filter_stage(d_q, index, cfg)
                hits = rank_stage(kps, survivors, index, rule, threads) if survivors else []
                best = min(best, time.perf_counter() - t0)
            stats.times_ms.append(best * 1e3)
            stats.survivor_rates.append(len(survivors) / len(index))
            ranking = [h.id for h in hits]
            rankings[stats.name].append(ranking)
            stats.top1_agree.append(bool(ranking) and ranking[0] == ref[0])
            kept = set(survivors)
            stats.consistent.append(ranking == [i for i in ref if i in kept])
        modes.append(stats)

    frac_stats = ModeStats("fractal-only")
    for (d_q, _), ref in zip(feats, sift_rankings):
        best = math.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            order = np.lexsort((index.ids(), np.abs(dims - d_q)))
            ranking = index.ids()[order].tolist()
            best = min(best, time.perf_counter() - t0)
        frac_stats.times_ms.append(best * 1e3)
        frac_stats.survivor_rates.append(1.0)
        frac_stats.top1_agree.append(ranking[0] == ref[0])
    modes.extend([sift_stats, frac_stats])
    return BenchReport(len(feats), len(index), modes, rankings)

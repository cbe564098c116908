"""``hdix`` command line.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable or
degenerate input, bad index file).
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from typing import Sequence, TextIO

from . import INDEX_FORMAT_VERSION, __version__
from .bench import bench
from .errors import HdixError
from .fractal import DEFAULT_DILATION_ORDERS, estimate
from .pipeline import (EstimatorConfig, FilterConfig, build_index, classify, format_query_result,
                       load_index, parse_labels, query, save_index)
from .raster import FIXTURE_KINDS, GrayImage, binarize, load_image, make_fixture, save_pgm
from .sift import (DetectThresholds, KeypointSet, MatchRule, ScaleSpaceConfig, detect,
                   format_keypoints, match_count, parse_keypoints)
from .similarity import symmetric_similarity

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
IMAGE_SUFFIXES = (".pgm", ".png")
KEYPOINT_SUFFIXES = (".key", ".sift", ".txt")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _theta(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid theta {text!r}") from None
    if math.isnan(value) or value < 0:
        raise argparse.ArgumentTypeError("theta must be >= 0 or 'inf'")
    return value


def _theta_list(text: str) -> list[float]:
    return [_theta(t) for t in text.split(",") if t.strip()]


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _signature_list(text: str) -> tuple[tuple[str, int], ...]:
    out = []
    for item in text.split(","):
        method, _, param = item.partition(":")
        try:
            out.append((method.strip(), int(param)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected method:param, got {item!r}") from None
    return tuple(out)


def _add_rule_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--ratio", type=float, default=0.8, help="Lowe ratio threshold (default 0.8)")
    g.add_argument("--absolute", type=float, metavar="D_MAX",
                   help="accept the nearest neighbour iff its distance is below D_MAX")


def _rule(args: argparse.Namespace) -> MatchRule:
    if args.absolute is not None:
        return MatchRule.absolute(args.absolute)
    return MatchRule.ratio(args.ratio)


def _add_sift_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--upsample", action="store_true", help="double the image before octave 0")
    p.add_argument("--contrast", type=float, default=0.03, help="DoG contrast threshold on [0,1]")
    p.add_argument("--edge-ratio", type=float, default=10.0, help="principal curvature ratio limit")


def _sift_cfg(args: argparse.Namespace) -> tuple[ScaleSpaceConfig, DetectThresholds]:
    return (ScaleSpaceConfig(upsample_first_octave=args.upsample),
            DetectThresholds(args.contrast, args.edge_ratio))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hdix", description="Fractal-filtered SIFT retrieval of document images.")
    parser.add_argument("--version", action="version",
                        version=f"hdix {__version__} (index format version {INDEX_FORMAT_VERSION})")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("fd", help="estimate the fractal dimension of an image")
    p.add_argument("image")
    p.add_argument("--method", choices=["box", "dbc", "cdb", "dilation"], default="cdb")
    p.add_argument("--max-box", type=int, default=20, help="largest box side (box/cdb/dbc)")
    p.add_argument("--tau", type=int, default=1, help="cdb density floor, black pixels per box")
    p.add_argument("--orders", type=_int_list, default=DEFAULT_DILATION_ORDERS,
                   help="dilation radii, comma separated (default 5,10,15,20,30)")
    p.add_argument("--binarize", default="fixed:128", help="otsu or fixed:T (default fixed:128)")
    p.add_argument("--dump-pgm", metavar="PATH", help="write the binarized image as PGM")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("sift", help="dump SIFT keypoints and descriptors")
    p.add_argument("image")
    p.add_argument("--out", help="write to a file instead of stdout")
    _add_sift_flags(p)

    p = sub.add_parser("match", help="directed and symmetric match counts of two images")
    p.add_argument("a", help="image (.pgm/.png) or keypoint dump (.key)")
    p.add_argument("b")
    _add_rule_flags(p)
    _add_sift_flags(p)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("index", help="build or inspect an index file")
    isub = p.add_subparsers(dest="index_command", metavar="ACTION", parser_class=_Parser)
    isub.required = True
    b = isub.add_parser("build", help="index every PGM/PNG in a directory")
    b.add_argument("directory")
    b.add_argument("--out", required=True)
    b.add_argument("--labels", help="TSV of <file>\\t<label>")
    b.add_argument("--no-cache", action="store_true", help="store signatures only")
    b.add_argument("--signatures", type=_signature_list, default=(("cdb", 20),),
                   help="method:param list, first feeds the filter (default cdb:20)")
    b.add_argument("--tau", type=int, default=1)
    b.add_argument("--binarize", default="otsu")
    _add_sift_flags(b)
    i = isub.add_parser("info", help="summarize an index file")
    i.add_argument("file")

    p = sub.add_parser("query", help="rank indexed images against a query image")
    p.add_argument("image")
    p.add_argument("--index", required=True)
    p.add_argument("--theta", type=_theta, default=0.5, help="fractal distance threshold or 'inf'")
    p.add_argument("--max-survivors", type=int, help="cap stage-1 survivors (benchmarking)")
    p.add_argument("--json", action="store_true")
    _add_rule_flags(p)

    p = sub.add_parser("classify", help="assign a query image to a labelled class")
    p.add_argument("image")
    p.add_argument("--index", required=True)
    p.add_argument("--theta", type=_theta, default=0.5)
    p.add_argument("--json", action="store_true")
    _add_rule_flags(p)

    p = sub.add_parser("bench", help="time hybrid, SIFT-only and fractal-only retrieval")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True, help="directory of query images")
    p.add_argument("--thetas", type=_theta_list, default=[0.3, 0.5, 1.0, math.inf])
    p.add_argument("--repeats", type=int, default=1)
    _add_rule_flags(p)

    p = sub.add_parser("fixture", help="write a synthetic test image")
    p.add_argument("kind", choices=FIXTURE_KINDS)
    p.add_argument("--side", type=int, required=True)
    p.add_argument("--depth", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    return parser


def _list_images(directory: str) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise HdixError(f"{directory}: not a directory")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _load_features(path: str, args: argparse.Namespace, image_id: str) -> KeypointSet:
    if Path(path).suffix.lower() in KEYPOINT_SUFFIXES:
        try:
            return parse_keypoints(Path(path).read_text(), image_id)
        except OSError as exc:
            raise HdixError(f"{path}: {exc}") from exc
    cfg, th = _sift_cfg(args)
    return detect(load_image(path), cfg, th, image_id=image_id)


def _cmd_fd(args: argparse.Namespace, out: TextIO) -> int:
    gray = load_image(args.image)
    bin_img = None if args.method == "dbc" else binarize(gray, args.binarize)
    if args.dump_pgm and bin_img is not None:
        save_pgm(GrayImage((~bin_img.data).astype("uint8") * 255), args.dump_pgm)
    sig = estimate(args.method, gray, bin_img, max_box=args.max_box, tau=args.tau, orders=args.orders)
    if args.json:
        out.write(json.dumps({
            "method": sig.method, "param": sig.param, "tau": sig.tau, "D": sig.dimension,
            "fit_r2": sig.fit_r2, "poor_fit": sig.poor_fit,
            "samples": [{"s": p.s, "r": p.r, "N": p.count} for p in sig.samples],
        }) + "\n")
        return EXIT_OK
    tau = f" tau={sig.tau}" if sig.tau is not None else ""
    out.write(f"method={sig.method} param={sig.param}{tau}\n")
    out.write(f"D={sig.dimension:.4f}\nfit_r2={sig.fit_r2:.4f}\n")
    if sig.poor_fit:
        out.write("# warning: fit_r2 below 0.9\n")
    out.write("# s\tr\tN\n")
    for p in sig.samples:
        out.write(f"{p.s:g}\t{p.r:.4f}\t{p.count:.4f}\n")
    return EXIT_OK


def _cmd_sift(args: argparse.Namespace, out: TextIO) -> int:
    cfg, th = _sift_cfg(args)
    text = format_keypoints(detect(load_image(args.image), cfg, th))
    if args.out:
        Path(args.out).write_text(text)
    else:
        out.write(text)
    return EXIT_OK


def _cmd_match(args: argparse.Namespace, out: TextIO) -> int:
    a = _load_features(args.a, args, "a")
    b = _load_features(args.b, args, "b")
    rule = _rule(args)
    m_ab = match_count(a, b, rule)
    m_ba = match_count(b, a, rule)
    sim = symmetric_similarity(m_ab, m_ba)
    if args.json:
        out.write(json.dumps({"m_ab": m_ab, "m_ba": m_ba, "M": sim}) + "\n")
    else:
        out.write(f"m_ab={m_ab}\nm_ba={m_ba}\nM={sim:.4f}\n")
    return EXIT_OK


def _cmd_index(args: argparse.Namespace, out: TextIO, err: TextIO) -> int:
    if args.index_command == "info":
        idx = load_index(args.file)
        est = idx.estimator
        out.write(f"version={idx.version}\nentries={len(idx)}\n")
        out.write(f"signatures={','.join(f'{m}:{p}' for m, p in est.signatures)}\n")
        out.write(f"tau={est.tau}\nbinarization={est.binarization}\n")
        cached = sum(e.keypoints is not None for e in idx.entries)
        out.write(f"cached_descriptors={cached}\nlabels={','.join(idx.labels())}\n")
        sel = est.default_selector
        for e in idx.entries:
            kp = len(e.keypoints) if e.keypoints is not None else "-"
            out.write(f"{e.id}\t{e.path}\t{e.label or '-'}\t"
                      f"{e.signature(sel).dimension:.4f}\t{kp}\n")
        return EXIT_OK

    labels = None
    if args.labels:
        try:
            labels = parse_labels(Path(args.labels).read_text())
        except OSError as exc:
            raise HdixError(f"{args.labels}: {exc}") from exc
    cfg, th = _sift_cfg(args)
    estimator = EstimatorConfig(args.signatures, args.tau, args.binarize)
    idx = build_index(_list_images(args.directory), labels, estimator, cfg, th,
                      cache_descriptors=not args.no_cache)
    for w in idx.warnings:
        err.write(f"warning: {w}\n")
    save_index(idx, args.out)
    out.write(f"indexed {len(idx)} images into {args.out} ({len(idx.warnings)} skipped)\n")
    return EXIT_OK


def _cmd_query(args: argparse.Namespace, out: TextIO) -> int:
    idx = load_index(args.index)
    res = query(args.image, idx, FilterConfig(args.theta, max_survivors=args.max_survivors), _rule(args))
    out.write(format_query_result(res, args.json))
    return EXIT_OK


def _cmd_classify(args: argparse.Namespace, out: TextIO) -> int:
    idx = load_index(args.index)
    res = classify(args.image, idx, FilterConfig(args.theta), _rule(args))
    if args.json:
        out.write(json.dumps({"class": res.class_id,
                              "scores": {s.class_id: s.S for s in res.scores},
                              "survivors": res.result.survivors_count,
                              "rejected": res.result.rejected_count}) + "\n")
        return EXIT_OK
    out.write(f"class={res.class_id if res.class_id is not None else 'none'}\n")
    for s in res.scores:
        out.write(f"S[{s.class_id}]={s.S:.4f}\tn={s.n}\n")
    return EXIT_OK


def _cmd_bench(args: argparse.Namespace, out: TextIO) -> int:
    idx = load_index(args.index)
    queries = _list_images(args.queries)
    if not queries:
        raise HdixError(f"{args.queries}: no query images")
    report = bench(idx, queries, args.thetas, _rule(args), repeats=args.repeats)
    out.write(report.format())
    return EXIT_OK


def _cmd_fixture(args: argparse.Namespace, out: TextIO) -> int:
    img = make_fixture(args.kind, args.side, depth=args.depth, sigma=args.sigma, seed=args.seed)
    save_pgm(img, args.out)
    out.write(f"wrote {args.kind} {args.side}x{args.side} to {args.out}\n")
    return EXIT_OK


def run(argv: Sequence[str] | None = None, out: TextIO | None = None,
        err: TextIO | None = None) -> int:
    """Parse ``argv`` and execute; returns the exit code."""
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "fd":
            return _cmd_fd(args, out)
        if args.command == "sift":
            return _cmd_sift(args, out)
        if args.command == "match":
            return _cmd_match(args, out)
        if args.command == "index":
            return _cmd_index(args, out, err)
        if args.command == "query":
            return _cmd_query(args, out)
        if args.command == "classify":
            return _cmd_classify(args, out)
        if args.command == "bench":
            return _cmd_bench(args, out)
        if args.command == "fixture":
            return _cmd_fixture(args, out)
    except (HdixError, ValueError) as exc:
        err.write(f"hdix {args.command}: {exc}\n")
        return EXIT_DATA
    parser.print_usage(err)
    return EXIT_USAGE


def main() -> None:
    sys.exit(run())

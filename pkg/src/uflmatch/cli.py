"""Command-line interface: ``uflmatch {learn-dict,match,eval,transfer,synth}``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import formats
from .dictionary import METHODS, learn_dictionary, load_dictionary, save_dictionary
from .encode import SCHEMES, EncoderConfig
from .evaluate import BoundingBox, iou, loc_err, lt_acc, transfer_labels, warp_image
from .formats import FormatError, atomic_write
from .matching import FlowField, MatchParams, MatchResult, match
from .preprocess import (
    DEFAULT_WHITENING_EPSILON,
    apply_whitening,
    extract_random_patches,
    fit_whitening,
    load_image,
    normalize_patches,
)
from .synth import KINDS, make_pair

log = logging.getLogger("uflmatch")

IMAGE_SUFFIXES = {".png", ".pgm", ".ppm"}
PATCH_MS_WARN = 5_000.0
PIXEL_MS_WARN = 30_000.0
CSV_HEADER = ["pair", "lt_acc", "iou", "loc_err", "ms_patch", "ms_pixel"]


class CommandError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    encoder: EncoderConfig
    params: MatchParams
    dict_path: Path
    seed: int = 0
    pixel_refine: bool = False
    report_path: Path | None = None


@dataclass(frozen=True)
class PairEntry:
    name: str
    test: Path
    exemplar: Path
    exemplar_labels: Path | None = None
    test_labels: Path | None = None
    test_box: BoundingBox | None = None
    exemplar_box: BoundingBox | None = None


def threads() -> int:
    raw = os.environ.get("UFL_THREADS")
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise CommandError(f"UFL_THREADS must be an integer, got {raw!r}") from None


def _box(text: str) -> BoundingBox:
    try:
        return BoundingBox.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _pair_of_ints(text: str) -> tuple[int, int]:
    parts = text.split(",")
    try:
        if len(parts) == 1:
            return int(parts[0]), int(parts[0])
        if len(parts) == 2:
            return int(parts[0]), int(parts[1])
    except ValueError:
        pass
    raise argparse.ArgumentTypeError(f"expected N or A,B, got {text!r}")


def _add_match_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dict", required=True, type=Path, help="UFLDICT dictionary file")
    p.add_argument("--alpha", type=float, default=0.02, help="smoothness weight")
    p.add_argument("--gamma", type=float, default=0.5, help="smoothness truncation")
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="data truncation (default: estimated per pair)")
    p.add_argument("--pixel-patch", type=int, default=None,
                   help="pixel patch width (default: from the dictionary)")
    p.add_argument("--pool", type=int, default=7, help="max-pooling tile width")
    p.add_argument("--levels", type=int, default=3, help="grid-cell pyramid levels")
    p.add_argument("--bp-iters", type=int, default=20)
    p.add_argument("--stride", type=int, default=1, help="translation grid step in patches")
    p.add_argument("--radius", type=int, default=None,
                   help="pixel-layer search radius (default: pool width)")
    p.add_argument("--scheme", choices=SCHEMES, default="KT")
    p.add_argument("--beta", type=float, default=1.0, help="SA smoothing factor")
    p.add_argument("--k", type=int, default=10, help="OMP sparsity")
    p.add_argument("--pixel", action="store_true", help="run pixel-layer refinement")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--box", type=_box, action="append", default=[],
                   help="x,y,w,h; first for the test image, second (optional) for the exemplar")


def _run_config(args) -> tuple[RunConfig, object]:
    if not args.dict.is_file():
        raise CommandError(f"dictionary not found: {args.dict}")
    dictionary = load_dictionary(args.dict)
    width = dictionary.patch_width
    if args.pixel_patch is not None and args.pixel_patch != width:
        raise CommandError(
            f"--pixel-patch {args.pixel_patch} does not match the dictionary's {width}"
        )
    try:
        encoder = EncoderConfig(
            scheme=args.scheme,
            beta=args.beta,
            k=min(args.k, dictionary.size),
            pixel_patch_width=width,
            pool_width=args.pool,
        )
        params = MatchParams(
            alpha=args.alpha,
            gamma=args.gamma,
            lam=args.lam,
            bp_iters=args.bp_iters,
            levels=args.levels,
            candidate_stride=args.stride,
            pixel_radius=args.radius,
            seed=args.seed,
        )
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    cfg = RunConfig(
        encoder=encoder,
        params=params,
        dict_path=args.dict,
        seed=args.seed,
        pixel_refine=args.pixel,
        report_path=getattr(args, "report", None),
    )
    return cfg, dictionary


def _boxes(boxes: list[BoundingBox]):
    if len(boxes) > 2:
        raise CommandError("--box may be given at most twice")
    if not boxes:
        return None, None
    return boxes[0], boxes[-1]


def _image_files(image_dir: Path) -> list[Path]:
    if not image_dir.is_dir():
        raise CommandError(f"not a directory: {image_dir}")
    files = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise CommandError(f"no PNG/PGM/PPM images in {image_dir}")
    return files


def cmd_learn_dict(args) -> int:
    images = [load_image(p) for p in _image_files(args.image_dir)]
    if args.patches < args.dict_size:
        raise CommandError(
            f"need at least --dict-size={args.dict_size} patches, got --patches={args.patches}"
        )
    patches = extract_random_patches(images, args.patches, args.pixel_patch, args.seed)
    patches = normalize_patches(patches, copy=False)
    whitening = fit_whitening(patches, args.epsilon)
    patches = apply_whitening(whitening, patches)
    d = learn_dictionary(
        patches, args.dict_size, args.method, args.seed, whitening, iters=args.iters, k=args.sparsity
    )
    save_dictionary(d, args.out)
    objective = d.objective[-1] if d.objective else float("nan")
    print(f"patches={patches.shape[0]}")
    print(f"objective={objective!r}")
    return 0


def _emit_report(lines: dict, path: Path | None) -> None:
    text = "".join(f"{k}={v}\n" for k, v in lines.items())
    sys.stdout.write(text)
    if path is not None:
        with atomic_write(path, "w") as fh:
            fh.write(text)


def _dense_flow(result: MatchResult, pool: int, shape: tuple[int, int]) -> FlowField:
    """Pixel flow for label transfer: refined if available, else the upsampled patch flow."""
    if result.pixel_flow is not None:
        return result.pixel_flow
    rows, cols = result.patch_flow.u.shape
    py = np.minimum(np.arange(shape[0]) // pool, rows - 1)
    px = np.minimum(np.arange(shape[1]) // pool, cols - 1)
    u = result.patch_flow.u[py[:, None], px[None, :]] * pool
    v = result.patch_flow.v[py[:, None], px[None, :]] * pool
    return FlowField("pixel", u, v, np.zeros(shape))


def cmd_match(args) -> int:
    cfg, dictionary = _run_config(args)
    box_t, box_e = _boxes(args.box)
    test = load_image(args.test)
    exemplar = load_image(args.exemplar)
    try:
        result = match(test, exemplar, dictionary, cfg.encoder, cfg.params, pixel=cfg.pixel_refine)
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    report = result.report()
    if box_t is not None:
        flow = _dense_flow(result, cfg.encoder.pool_width, test.shape)
        report["loc_err"] = loc_err(flow, box_t, box_e)
    out = args.out
    formats.write_flow(out / "patch_flow.uflf", result.patch_flow.u, result.patch_flow.v, "patch")
    if result.pixel_flow is not None:
        formats.write_flow(
            out / "pixel_flow.uflf", result.pixel_flow.u, result.pixel_flow.v, "pixel"
        )
    _emit_report(report, cfg.report_path)
    return 0


def _manifest_path(base: Path, value) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def load_manifest(path: Path) -> list[PairEntry]:
    """Read a JSON manifest: a list (or ``{"pairs": [...]}``) of pair objects.

    Keys: ``test``, ``exemplar`` (required), ``name``, ``test_labels``,
    ``exemplar_labels``, ``test_box``, ``exemplar_box`` (``[x, y, w, h]``).
    Relative paths resolve against the manifest's directory.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CommandError(f"cannot read manifest {path}: {exc}") from None
    items = doc.get("pairs") if isinstance(doc, dict) else doc
    if not isinstance(items, list) or not items:
        raise CommandError(f"manifest {path} lists no pairs")
    base = Path(path).parent
    entries = []
    for i, item in enumerate(items):
        if not isinstance(item, dict) or "test" not in item or "exemplar" not in item:
            raise CommandError(f"manifest entry {i} needs 'test' and 'exemplar'")
        boxes = {}
        for key in ("test_box", "exemplar_box"):
            if item.get(key) is not None:
                boxes[key] = BoundingBox(*(int(x) for x in item[key]))
        entry = PairEntry(
            name=str(item.get("name", i)),
            test=_manifest_path(base, item["test"]),
            exemplar=_manifest_path(base, item["exemplar"]),
            exemplar_labels=_manifest_path(base, item.get("exemplar_labels")),
            test_labels=_manifest_path(base, item.get("test_labels")),
            **boxes,
        )
        for p in (entry.test, entry.exemplar, entry.exemplar_labels, entry.test_labels):
            if p is not None and not p.is_file():
                raise CommandError(f"manifest entry {entry.name}: missing file {p}")
        entries.append(entry)
    return entries


def _eval_pair(entry: PairEntry, cfg: RunConfig, dictionary, iou_class: int, boxes):
    test = load_image(entry.test)
    exemplar = load_image(entry.exemplar)
    result = match(test, exemplar, dictionary, cfg.encoder, cfg.params, pixel=cfg.pixel_refine)
    flow = _dense_flow(result, cfg.encoder.pool_width, test.shape)
    ms = result.timings_ms
    row = {
        "pair": entry.name,
        "ms_patch": sum(ms.get(k, 0.0) for k in ("encode", "pool", "grid", "patch")),
        "ms_pixel": ms.get("pixel", 0.0),
        "lt_acc": None,
        "iou": None,
        "loc_err": None,
        "energy": result.energy,
    }
    pair_labels = None
    if entry.exemplar_labels is not None and entry.test_labels is not None:
        out = transfer_labels(flow, formats.load_labels(entry.exemplar_labels))
        truth = formats.load_labels(entry.test_labels)
        if truth.shape != test.shape:
            raise CommandError(f"pair {entry.name}: test labels do not match image size")
        pair_labels = (out, truth)
        if np.any(truth > 0):
            row["lt_acc"] = lt_acc([pair_labels])
        row["iou"] = iou(out, truth, iou_class)
    box_t = entry.test_box or boxes[0]
    box_e = entry.exemplar_box or boxes[1] or box_t
    if box_t is not None:
        row["loc_err"] = loc_err(flow, box_t, box_e)
    if row["ms_patch"] > PATCH_MS_WARN:
        log.warning("pair %s: patch-level match took %.0f ms", entry.name, row["ms_patch"])
    if row["ms_pixel"] > PIXEL_MS_WARN:
        log.warning("pair %s: pixel refinement took %.0f ms", entry.name, row["ms_pixel"])
    return row, pair_labels


def _fmt(value) -> str:
    return "" if value is None else repr(float(value)) if not isinstance(value, str) else value


def cmd_eval(args) -> int:
    entries = load_manifest(args.manifest)
    cfg, dictionary = _run_config(args)
    boxes = _boxes(args.box)
    workers = min(threads(), len(entries))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(_eval_pair, e, cfg, dictionary, args.iou_class, boxes) for e in entries
        ]
        results = [f.result() for f in futures]

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row, _ in results:
        writer.writerow([_fmt(row[k]) for k in CSV_HEADER])
    if args.out is not None:
        with atomic_write(args.out, "w") as fh:
            fh.write(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())

    labeled = [labels for _, labels in results if labels is not None and np.any(labels[1] > 0)]
    summary = {"pairs": len(results)}
    if labeled:
        summary["lt_acc"] = lt_acc(labeled)
    for key in ("iou", "loc_err", "ms_patch", "ms_pixel"):
        vals = [row[key] for row, _ in results if row[key] is not None]
        if vals:
            summary[f"mean_{key}"] = float(np.mean(vals))
    stream = sys.stderr if args.out is None else sys.stdout
    stream.write("".join(f"{k}={v}\n" for k, v in summary.items()))
    return 0


def cmd_transfer(args) -> int:
    u, v, granularity = formats.read_flow(args.flow)
    if granularity != "pixel":
        raise CommandError("label transfer needs a pixel-granularity flow file")
    flow = FlowField("pixel", u, v, np.zeros(u.shape))
    ex_labels = formats.load_labels(args.labels)
    out = transfer_labels(flow, ex_labels)
    warped = None
    if args.image is not None:
        warped = warp_image(flow, load_image(args.image))
    if args.truth is not None:
        truth = formats.load_labels(args.truth)
        if truth.shape != out.shape:
            raise CommandError("truth labels do not match the flow size")
        report = {"iou": iou(out, truth, args.iou_class)}
        if np.any(truth > 0):
            report["lt_acc"] = lt_acc([(out, truth)])
    else:
        report = {}
    formats.save_labels(args.out, out)
    if warped is not None:
        out_img = args.warp_out or args.out.with_name(args.out.stem + "_warped.pgm")
        formats.save_image(out_img, warped)
    for k, val in report.items():
        print(f"{k}={val}")
    return 0


def cmd_synth(args) -> int:
    pair = make_pair(args.kind, args.size[::-1], args.seed, args.shift)
    out = args.out
    formats.save_image(out / "test.pgm", pair.test)
    formats.save_image(out / "exemplar.pgm", pair.exemplar)
    formats.save_labels(out / "test_labels.pgm", pair.test_labels)
    formats.save_labels(out / "exemplar_labels.pgm", pair.exemplar_labels)
    formats.write_flow(out / "gt_flow.uflf", pair.flow_u, pair.flow_v, "pixel")
    manifest = [{
        "name": out.name or "pair",
        "test": "test.pgm",
        "exemplar": "exemplar.pgm",
        "test_labels": "test_labels.pgm",
        "exemplar_labels": "exemplar_labels.pgm",
    }]
    with atomic_write(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    print(f"kind={args.kind}")
    print(f"shift={args.shift[0]},{args.shift[1]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uflmatch", description="Dense image correspondence with learned patch features."
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("learn-dict", help="learn a dictionary from a directory of images")
    p.add_argument("image_dir", type=Path)
    p.add_argument("--dict-size", type=int, default=100, help="number of codewords M")
    p.add_argument("--patches", type=int, default=1_000_000, help="number of training patches N")
    p.add_argument("--method", choices=METHODS, default="kmeans")
    p.add_argument("--pixel-patch", type=int, default=11, help="patch width")
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--sparsity", type=int, default=10, help="K-SVD sparsity k")
    p.add_argument("--epsilon", type=float, default=DEFAULT_WHITENING_EPSILON)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_learn_dict)

    p = sub.add_parser("match", help="match a test image against an exemplar")
    p.add_argument("test", type=Path)
    p.add_argument("exemplar", type=Path)
    _add_match_flags(p)
    p.add_argument("--out", type=Path, required=True, help="output directory for flow files")
    p.add_argument("--report", type=Path, default=None, help="also write the report here")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", help="match and score every pair of a manifest")
    p.add_argument("manifest", type=Path)
    _add_match_flags(p)
    p.add_argument("--iou-class", type=int, default=1)
    p.add_argument("--out", type=Path, default=None, help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("transfer", help="transfer exemplar labels through a pixel flow")
    p.add_argument("flow", type=Path)
    p.add_argument("labels", type=Path, help="exemplar label map (P5)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--truth", type=Path, default=None, help="test label map to score against")
    p.add_argument("--iou-class", type=int, default=1)
    p.add_argument("--image", type=Path, default=None, help="exemplar image to warp")
    p.add_argument("--warp-out", type=Path, default=None)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("synth", help="generate a synthetic pair with ground truth")
    p.add_argument("kind", help=f"one of: {', '.join(KINDS)}")
    p.add_argument("--size", type=_pair_of_ints, default=(64, 64), help="W,H or N")
    p.add_argument("--shift", type=_pair_of_ints, default=(0, 0), help="dx,dy in pixels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (CommandError, FormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

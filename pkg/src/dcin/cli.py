"""Command line front end: ``dcin index build | normalize | predict-eval | augment | loss``.

Exit status is 0 when every item succeeded, 1 when some per-image work failed,
and 2 for usage, configuration or input errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .augmentation import AugmentConfig, make_cqg_pair
from .cqg_loss import LossWeights, cqg_loss
from .errors import DcinError, EvaluationError
from .imageio import (
    iter_image_files,
    parse_size,
    read_label_mask,
    read_prob_mask,
    read_rgb,
    write_label_mask,
    write_png,
)
from .pipeline import (
    STRATEGIES,
    CommandPredictor,
    FileLookupPredictor,
    Strategy,
    evaluate_dataset,
    normalize,
    predict,
)
from .reference_index import (
    DEFAULT_BINS,
    build_index,
    check_bins,
    load_index,
    read_embeddings,
    save_index,
)

log = logging.getLogger("dcin")

EXIT_OK, EXIT_FAILURES, EXIT_ERROR = 0, 1, 2


def _default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("DCIN_JOBS", "1")))
    except ValueError:
        return 1


def _size(text: str) -> tuple[int, int]:
    try:
        return parse_size(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _bins(text: str) -> int:
    try:
        return check_bins(int(text))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _lambdas(text: str) -> LossWeights:
    try:
        values = [float(v) for v in text.split(",")]
        if len(values) != 3:
            raise ValueError
        return LossWeights(*values)
    except (ValueError, DcinError):
        raise argparse.ArgumentTypeError(f"expected three non-negative reals a,b,c, got {text!r}") from None


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _pmap(fn, items, jobs):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _list_inputs(directory: str) -> list[tuple[str, Path]]:
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"input directory not found: {root}")
    return [(p.relative_to(root).as_posix(), p) for p in iter_image_files(root)]


def _strategy(args, index) -> Strategy:
    if args.strategy != "fixed":
        return Strategy(args.strategy)
    if not args.reference:
        raise DcinError("--strategy fixed requires --reference (image path or index id)")
    ref = Path(args.reference)
    if ref.is_file():
        return Strategy("fixed", read_rgb(ref, resize=args.resize))
    return Strategy("fixed", args.reference)


def _test_embeddings(args, strategy: Strategy):
    if not strategy.needs_embedding:
        return {}
    if not args.embeddings:
        raise DcinError(f"--strategy {strategy.kind} requires --embeddings")
    return read_embeddings(args.embeddings)


def _stem(image_id: str) -> str:
    return str(Path(image_id).with_suffix(""))


# -- commands -----------------------------------------------------------------


def cmd_index_build(args) -> int:
    eligible = None
    if args.gris_ids:
        eligible = [line.strip() for line in Path(args.gris_ids).read_text().splitlines() if line.strip()]
    index = build_index(
        args.images,
        args.bins,
        embeddings=args.embeddings,
        gris_eligible=eligible,
        jobs=args.jobs,
        resize=args.resize,
    )
    save_index(index, args.out)
    print(f"entries: {len(index)}")
    print(f"global_reference_id: {index.global_reference_id}")
    print(f"embedding_matched: {index.embedding_count}")
    return EXIT_OK


def cmd_normalize(args) -> int:
    index = load_index(args.index) if args.index else None
    strategy = _strategy(args, index)
    if strategy.kind in ("global", "local", "ensemble") and index is None:
        raise DcinError(f"--strategy {strategy.kind} requires --index")
    embeddings = _test_embeddings(args, strategy)
    inputs = _list_inputs(args.input)
    out = Path(args.out)

    def one(item) -> str | None:
        image_id, path = item
        try:
            image = read_rgb(path, resize=args.resize)
            views = normalize(image, strategy, index, embeddings.get(image_id) if embeddings else None)
            stem = _stem(image_id)
            if strategy.kind == "ensemble":
                write_png(out / f"{stem}.global.png", views[0])
                write_png(out / f"{stem}.local.png", views[1])
            else:
                write_png(out / f"{stem}.png", views[0])
        except (DcinError, OSError, ValueError) as exc:
            log.error("%s: %s", image_id, exc)
            return image_id
        return None

    failed = [f for f in _pmap(one, inputs, args.jobs) if f is not None]
    print(f"normalized: {len(inputs) - len(failed)} failed: {len(failed)}")
    return EXIT_FAILURES if failed else EXIT_OK


def _find_gt(gt_dir: Path, image_id: str) -> Path | None:
    stem = _stem(image_id)
    for suffix in (".png",):
        p = gt_dir / f"{stem}{suffix}"
        if p.is_file():
            return p
    return None


def cmd_predict_eval(args) -> int:
    index = load_index(args.index) if args.index else None
    strategy = _strategy(args, index)
    if strategy.kind in ("global", "local", "ensemble") and index is None:
        raise DcinError(f"--strategy {strategy.kind} requires --index")
    embeddings = _test_embeddings(args, strategy)
    if args.predictor:
        predictor = CommandPredictor(args.predictor, args.classes, args.timeout)
    else:
        predictor = FileLookupPredictor(args.predictor_masks, args.classes)

    inputs = _list_inputs(args.input)
    gt_dir = Path(args.gt)
    missing = [i for i, _ in inputs if _find_gt(gt_dir, i) is None]
    if missing:
        raise EvaluationError(f"missing ground truth for {missing}")

    def one(item):
        image_id, path = item
        try:
            image = read_rgb(path, resize=args.resize)
            emb = embeddings.get(image_id) if embeddings else None
            _, labels = predict(image, strategy, predictor, index, emb, image_id)
            return image_id, labels, None
        except (DcinError, OSError, ValueError) as exc:
            log.error("%s: %s", image_id, exc)
            return image_id, None, str(exc)

    results = _pmap(one, inputs, args.jobs)
    predictions = {i: labels for i, labels, err in results if err is None}
    failures = [{"id": i, "error": err} for i, _, err in results if err is not None]
    ground_truths = {i: read_label_mask(_find_gt(gt_dir, i), resize=args.resize) for i in predictions}

    report = {"strategy": strategy.kind}
    if predictions:
        report.update(evaluate_dataset(predictions, ground_truths).to_dict())
    else:
        report.update({"per_image": [], "mean_dice": None, "per_class": {}})
    report["failures"] = failures
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    Path(args.report).write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")
    mean = report["mean_dice"]
    print(f"mean_dice: {'n/a' if mean is None else f'{mean:.4f}'} images: {len(predictions)} failed: {len(failures)}")
    return EXIT_FAILURES if failures else EXIT_OK


def cmd_augment(args) -> int:
    config = AugmentConfig.from_file(args.config) if args.config else AugmentConfig()
    image = read_rgb(args.image)
    mask = read_label_mask(args.mask)
    pair = make_cqg_pair(image, mask, args.seed, config)
    out = Path(args.out)
    write_png(out / "x1.png", pair.x1)
    write_png(out / "x2.png", pair.x2)
    write_label_mask(out / "y.png", pair.y)
    record = {
        "seed": args.seed,
        "geometric": pair.geometric.to_dict(),
        "photometric": pair.photometric.to_dict(),
    }
    (out / "params.json").write_text(json.dumps(record, indent=1) + "\n", encoding="utf-8")
    print(f"wrote {out / 'x1.png'}, {out / 'x2.png'}, {out / 'y.png'}, {out / 'params.json'}")
    return EXIT_OK


def cmd_loss(args) -> int:
    gt = read_label_mask(args.gt)
    pred1 = read_prob_mask(args.pred1)
    pred2 = read_prob_mask(args.pred2)
    breakdown = cqg_loss(pred1, pred2, gt, args.lambdas)
    for name in ("dice1", "ce1", "dice2", "ce2", "mse", "total"):
        print(f"{name}: {getattr(breakdown, name):.12g}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcin", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    index = sub.add_parser("index", help="reference index lifecycle")
    index_sub = index.add_subparsers(dest="index_command", required=True)
    build = index_sub.add_parser("build", help="index a source image corpus")
    build.add_argument("images", help="source corpus directory")
    build.add_argument("--bins", type=_bins, default=DEFAULT_BINS, help="histogram bins per channel (default 8)")
    build.add_argument("--embeddings", help="JSON-lines embedding file for the corpus")
    build.add_argument("--gris-ids", help="file listing ids eligible as global reference (default: all)")
    build.add_argument("--out", required=True, help="index file to write")
    build.set_defaults(func=cmd_index_build)

    norm = sub.add_parser("normalize", help="color-normalize a directory of test images")
    _add_strategy_args(norm)
    norm.add_argument("--input", required=True, help="test image directory")
    norm.add_argument("--out", required=True, help="output directory (PNG)")
    norm.set_defaults(func=cmd_normalize)

    pe = sub.add_parser("predict-eval", help="normalize, predict, and score against ground truth")
    _add_strategy_args(pe)
    source = pe.add_mutually_exclusive_group(required=True)
    source.add_argument("--predictor", help="command run as: CMD INPUT_PNG OUTPUT_DCM")
    source.add_argument("--predictor-masks", help="directory of precomputed DCM1 masks by image id")
    pe.add_argument("--classes", type=_positive_int, help="expected class count (default: any)")
    pe.add_argument("--timeout", type=float, default=60.0, help="seconds per predictor call (default 60)")
    pe.add_argument("--input", required=True, help="test image directory")
    pe.add_argument("--gt", required=True, help="ground-truth label mask directory (PNG)")
    pe.add_argument("--report", required=True, help="JSON report path")
    pe.set_defaults(func=cmd_predict_eval)

    aug = sub.add_parser("augment", help="generate one CQG training pair")
    aug.add_argument("--image", required=True)
    aug.add_argument("--mask", required=True, help="label mask PNG")
    aug.add_argument("--seed", type=int, required=True)
    aug.add_argument("--config", help="augmentation config JSON (partial overrides of defaults)")
    aug.add_argument("--out", required=True, help="output directory")
    aug.set_defaults(func=cmd_augment)

    loss = sub.add_parser("loss", help="evaluate the CQG loss on mask files")
    loss.add_argument("--gt", required=True, help="ground-truth label mask PNG")
    loss.add_argument("--pred1", required=True, help="DCM1 mask for the geometric view")
    loss.add_argument("--pred2", required=True, help="DCM1 mask for the geometric+photometric view")
    loss.add_argument("--lambdas", type=_lambdas, default=LossWeights(), help="weights a,b,c (default 0.3,0.7,1.0)")
    loss.set_defaults(func=cmd_loss)

    for p in (build, norm, pe):
        p.add_argument("--jobs", type=_positive_int, default=_default_jobs(), help="parallel workers (env DCIN_JOBS)")
        p.add_argument("--resize", type=_size, help="resize inputs to WIDTHxHEIGHT, e.g. 768x512")
    return parser


def _add_strategy_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--index", help="reference index file")
    p.add_argument("--strategy", choices=STRATEGIES, default="ensemble")
    p.add_argument("--reference", help="fixed strategy: reference image path or index id")
    p.add_argument("--embeddings", help="JSON-lines embeddings for the test images")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (DcinError, OSError, ValueError) as exc:
        print(f"dcin: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

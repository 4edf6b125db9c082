"""Test-time color normalization, prediction ensembling and Dice evaluation."""
from __future__ import annotations

import logging
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Union

import numpy as np

from .colorspace import ChannelStats, as_rgb, image_stats, reinhard_transfer
from .cqg_loss import dice_per_class, dice_score
from .errors import DataError, EvaluationError, PredictionError, UsageError
from .imageio import decode_prob_mask, write_png
from .reference_index import ReferenceIndex, select_local_reference

log = logging.getLogger(__name__)

STRATEGIES = ("none", "global", "local", "ensemble", "fixed")
PROB_SUM_TOL = 1e-6


@dataclass(frozen=True)
class Strategy:
    """How test images pick their normalization reference.

    ``reference`` is only used by ``fixed``: an index entry id, an RGB image
    array, or precomputed ChannelStats. ``none`` skips normalization and
    exists so the un-normalized baseline runs through the same harness.
    """

    kind: str
    reference: Union[str, np.ndarray, ChannelStats, None] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.kind not in STRATEGIES:
            raise UsageError(f"unknown strategy {self.kind!r}; choose from {STRATEGIES}")
        if self.kind == "fixed" and self.reference is None:
            raise UsageError("fixed strategy requires a reference")

    @property
    def needs_embedding(self) -> bool:
        return self.kind in ("local", "ensemble")


def _fixed_stats(reference, index: ReferenceIndex | None) -> ChannelStats:
    if isinstance(reference, ChannelStats):
        return reference
    if isinstance(reference, str):
        if index is None or reference not in index:
            raise UsageError(f"fixed reference {reference!r} not found in index")
        return index.get(reference).lab_stats
    return image_stats(as_rgb(reference))


def _local_stats(index: ReferenceIndex, test_embedding) -> ChannelStats:
    if test_embedding is None:
        raise UsageError("local normalization needs a test embedding")
    return index.get(select_local_reference(test_embedding, index)).lab_stats


def _global_stats(index: ReferenceIndex) -> ChannelStats:
    if index is None or len(index) == 0:
        raise UsageError("global normalization needs a non-empty index")
    return index.global_reference().lab_stats


def normalize(
    test: np.ndarray,
    strategy: Strategy,
    index: ReferenceIndex | None = None,
    test_embedding: np.ndarray | None = None,
) -> list[np.ndarray]:
    """Color-normalize ``test``; ensemble yields [global, local], others one image."""
    test = as_rgb(test)
    kind = strategy.kind
    if kind == "none":
        return [test.copy()]
    if kind == "fixed":
        return [reinhard_transfer(test, _fixed_stats(strategy.reference, index))]
    if index is None or len(index) == 0:
        raise UsageError(f"{kind} normalization needs a non-empty index")
    if kind == "global":
        return [reinhard_transfer(test, _global_stats(index))]
    if kind == "local":
        return [reinhard_transfer(test, _local_stats(index, test_embedding))]
    local = _local_stats(index, test_embedding)
    return [reinhard_transfer(test, _global_stats(index)), reinhard_transfer(test, local)]


# -- predictors ---------------------------------------------------------------


class Predictor(Protocol):
    """Maps an RGB image to an (H, W, C) probability mask.

    ``image_id`` identifies the test image, with ``#global``/``#local``
    appended for the two ensemble views. Lookup-style predictors use it.
    ``classes`` may be None to accept any class count.
    """

    classes: int | None

    def __call__(self, image: np.ndarray, image_id: str) -> np.ndarray: ...


class ConstantPredictor:
    """Returns the same per-pixel class distribution everywhere."""

    def __init__(self, probabilities):
        self.probabilities = np.asarray(probabilities, dtype=np.float64)
        self.classes = self.probabilities.shape[-1]

    def __call__(self, image: np.ndarray, image_id: str = "") -> np.ndarray:
        h, w = np.asarray(image).shape[:2]
        if self.probabilities.ndim == 1:
            return np.broadcast_to(self.probabilities, (h, w, self.classes)).copy()
        return self.probabilities.copy()


class FileLookupPredictor:
    """Reads precomputed DCM1 masks: ``<dir>/<id stem>.<tag>.dcm`` or ``<dir>/<id stem>.dcm``."""

    def __init__(self, directory: str | Path, classes: int | None = None):
        self.directory = Path(directory)
        self.classes = classes

    def candidates(self, image_id: str) -> list[Path]:
        base, _, tag = image_id.partition("#")
        stem = str(Path(base).with_suffix(""))
        paths = [self.directory / f"{stem}.dcm"]
        if tag:
            paths.insert(0, self.directory / f"{stem}.{tag}.dcm")
        return paths

    def __call__(self, image: np.ndarray, image_id: str) -> np.ndarray:
        for path in self.candidates(image_id):
            if path.is_file():
                try:
                    return decode_prob_mask(path.read_bytes(), str(path))
                except DataError as exc:
                    raise PredictionError(f"{image_id}: {exc}") from None
        raise PredictionError(f"{image_id}: no precomputed mask in {self.directory}")


class CommandPredictor:
    """Runs ``<cmd> <input-image-path> <output-mask-path>`` per image."""

    def __init__(self, command: str, classes: int | None = None, timeout: float = 60.0):
        self.argv = shlex.split(command)
        if not self.argv:
            raise UsageError("empty predictor command")
        self.classes = classes
        self.timeout = timeout

    def __call__(self, image: np.ndarray, image_id: str) -> np.ndarray:
        with tempfile.TemporaryDirectory(prefix="dcin-") as tmp:
            src = Path(tmp) / "input.png"
            dst = Path(tmp) / "output.dcm"
            write_png(src, image)
            try:
                proc = subprocess.run(
                    [*self.argv, str(src), str(dst)],
                    capture_output=True,
                    timeout=self.timeout,
                    check=False,
                )
            except subprocess.TimeoutExpired:
                raise PredictionError(f"{image_id}: predictor timed out after {self.timeout}s") from None
            except OSError as exc:
                raise PredictionError(f"{image_id}: cannot run predictor ({exc})") from None
            if proc.returncode != 0:
                err = proc.stderr.decode(errors="replace").strip()[-500:]
                raise PredictionError(f"{image_id}: predictor exited {proc.returncode}: {err}")
            if not dst.is_file():
                raise PredictionError(f"{image_id}: predictor wrote no mask")
            try:
                return decode_prob_mask(dst.read_bytes(), image_id)
            except DataError as exc:
                raise PredictionError(str(exc)) from None


def check_prob_mask(
    probs: np.ndarray, shape: tuple[int, int], classes: int | None, image_id: str
) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 3 or probs.shape[:2] != tuple(shape) or probs.shape[2] < 2:
        raise PredictionError(f"{image_id}: predictor returned shape {probs.shape} for image {shape}")
    if classes is not None and probs.shape[2] != classes:
        raise PredictionError(f"{image_id}: predictor returned {probs.shape[2]} classes, expected {classes}")
    if np.any(probs < 0) or np.any(probs > 1) or np.any(np.abs(probs.sum(axis=2) - 1) > PROB_SUM_TOL):
        raise PredictionError(f"{image_id}: predictor output is not a valid probability mask")
    return probs


def _run(predictor: Predictor, image: np.ndarray, image_id: str) -> np.ndarray:
    try:
        probs = predictor(image, image_id)
    except PredictionError:
        raise
    except Exception as exc:
        raise PredictionError(f"{image_id}: predictor failed ({exc})") from exc
    return check_prob_mask(probs, image.shape[:2], predictor.classes, image_id)


def ensemble_predict(
    test: np.ndarray,
    index: ReferenceIndex,
    test_embedding: np.ndarray,
    predictor: Predictor,
    image_id: str = "image",
) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-wise mean of the predictions on the global- and local-normalized views.

    Returns the mean probability mask and its argmax labels (ties go to the
    lowest class index).
    """
    global_img, local_img = normalize(test, Strategy("ensemble"), index, test_embedding)
    p_global = _run(predictor, global_img, f"{image_id}#global")
    p_local = _run(predictor, local_img, f"{image_id}#local")
    mean = (p_global + p_local) / 2.0
    return mean, np.argmax(mean, axis=2)


def predict(
    test: np.ndarray,
    strategy: Strategy,
    predictor: Predictor,
    index: ReferenceIndex | None = None,
    test_embedding: np.ndarray | None = None,
    image_id: str = "image",
) -> tuple[np.ndarray, np.ndarray]:
    """Normalize with ``strategy`` then predict; returns (probabilities, labels)."""
    if strategy.kind == "ensemble":
        return ensemble_predict(test, index, test_embedding, predictor, image_id)
    (view,) = normalize(test, strategy, index, test_embedding)
    probs = _run(predictor, view, image_id)
    return probs, np.argmax(probs, axis=2)


# -- evaluation ---------------------------------------------------------------


@dataclass
class EvaluationReport:
    per_image: list[tuple[str, float]]
    mean_dice: float
    per_class: dict[int, float]

    def to_dict(self) -> dict:
        return {
            "per_image": [{"id": i, "dice": d} for i, d in self.per_image],
            "mean_dice": self.mean_dice,
            "per_class": {str(c): v for c, v in self.per_class.items()},
        }


def evaluate_dataset(
    predictions: Mapping[str, np.ndarray], ground_truths: Mapping[str, np.ndarray]
) -> EvaluationReport:
    """Per-image Dice, its dataset mean, and per-class means over images where the class occurs."""
    missing_gt = sorted(set(predictions) - set(ground_truths))
    missing_pred = sorted(set(ground_truths) - set(predictions))
    if missing_gt or missing_pred:
        raise EvaluationError(
            f"unmatched ids: no ground truth for {missing_gt}, no prediction for {missing_pred}"
        )
    if not predictions:
        raise EvaluationError("nothing to evaluate")
    per_image = []
    class_scores: dict[int, list[float]] = {}
    for image_id in sorted(predictions):
        pred, gt = np.asarray(predictions[image_id]), np.asarray(ground_truths[image_id])
        if pred.shape != gt.shape:
            raise EvaluationError(f"{image_id}: prediction {pred.shape} vs ground truth {gt.shape}")
        per_image.append((image_id, dice_score(pred, gt)))
        for c, s in dice_per_class(pred, gt).items():
            class_scores.setdefault(c, []).append(s)
    mean = float(np.mean([d for _, d in per_image]))
    per_class = {c: float(np.mean(v)) for c, v in sorted(class_scores.items())}
    return EvaluationReport(per_image, mean, per_class)

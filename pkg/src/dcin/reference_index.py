"""Source-corpus reference index.

Holds one entry per source image (color histogram, l-alpha-beta statistics and
an optional unit-length embedding) and answers the two reference queries:

* global: the histogram medoid, i.e. the entry whose histogram has the smallest
  mean Euclidean distance to every other eligible histogram;
* local: the entry whose embedding has the highest cosine similarity with a
  query embedding.

Ties in either query go to the lexicographically smallest id, so results do not
depend on entry order.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from scipy.spatial.distance import cdist

from .colorspace import ChannelStats, image_stats
from .errors import ConfigurationError, DataError, IndexLoadError, UsageError
from .imageio import iter_image_files, read_rgb

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
DEFAULT_BINS = 8
HIST_SUM_TOL = 1e-9
UNIT_NORM_TOL = 1e-6
# Scores closer than this count as tied; the smallest id wins.
TIE_TOL = 1e-12
# Rows per cdist block when computing the medoid.
_BLOCK_ROWS = 1024


def check_bins(bins_per_channel: int) -> int:
    b = int(bins_per_channel)
    if b != bins_per_channel or not 2 <= b <= 256 or 256 % b:
        raise ConfigurationError(
            f"bins_per_channel must be in [2, 256] and divide 256, got {bins_per_channel!r}"
        )
    return b


def compute_histogram(image: np.ndarray, bins_per_channel: int = DEFAULT_BINS) -> np.ndarray:
    """Concatenated R|G|B histogram normalized jointly to sum 1.

    Sample ``v`` falls into bin ``floor(v * b / 256)``. The result has
    ``3 * b`` entries.
    """
    b = check_bins(bins_per_channel)
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise UsageError(f"expected a uint8 (H, W, 3) image, got {img.dtype} {img.shape}")
    idx = img.reshape(-1, 3).astype(np.intp) * b // 256
    idx += np.arange(3) * b
    counts = np.bincount(idx.ravel(), minlength=3 * b).astype(np.float64)
    return counts / counts.sum()


def histogram_distance(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise UsageError(f"histogram length mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def unit_normalize(vector: Iterable[float], name: str = "embedding") -> np.ndarray:
    v = np.asarray(vector, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DataError(f"{name}: embedding must be a non-empty 1-D vector")
    if not np.all(np.isfinite(v)):
        raise DataError(f"{name}: embedding has non-finite values")
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise DataError(f"{name}: zero-norm embedding")
    return v / norm


@dataclass
class IndexEntry:
    id: str
    histogram: np.ndarray
    lab_stats: ChannelStats
    embedding: np.ndarray | None = None
    gris_eligible: bool = True

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, IndexEntry):
            return NotImplemented
        if (self.embedding is None) != (other.embedding is None):
            return False
        return (
            self.id == other.id
            and self.gris_eligible == other.gris_eligible
            and self.lab_stats == other.lab_stats
            and np.array_equal(self.histogram, other.histogram)
            and (self.embedding is None or np.array_equal(self.embedding, other.embedding))
        )


@dataclass
class ReferenceIndex:
    bins_per_channel: int
    entries: list[IndexEntry] = field(default_factory=list)
    global_reference_id: str | None = None
    format_version: int = FORMAT_VERSION

    def __post_init__(self) -> None:
        check_bins(self.bins_per_channel)
        seen: set[str] = set()
        for e in self.entries:
            if e.id in seen:
                raise UsageError(f"duplicate index id {e.id!r}")
            seen.add(e.id)
        self._by_id = {e.id: e for e in self.entries}

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, entry_id: object) -> bool:
        return entry_id in self._by_id

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ReferenceIndex):
            return NotImplemented
        return (
            self.format_version == other.format_version
            and self.bins_per_channel == other.bins_per_channel
            and self.global_reference_id == other.global_reference_id
            and self.entries == other.entries
        )

    def get(self, entry_id: str) -> IndexEntry:
        try:
            return self._by_id[entry_id]
        except KeyError:
            raise UsageError(f"no index entry with id {entry_id!r}") from None

    @property
    def embedding_count(self) -> int:
        return sum(e.embedding is not None for e in self.entries)

    def global_reference(self) -> IndexEntry:
        """Cached global reference entry, computing it on first use."""
        if self.global_reference_id is None:
            select_global_reference(self)
        return self.get(self.global_reference_id)


def _argmin_by_id(ids: list[str], scores: np.ndarray) -> str:
    best = scores.min()
    tied = [i for i, s in zip(ids, scores) if s <= best + TIE_TOL]
    return min(tied)


def mean_pairwise_distances(histograms: np.ndarray) -> np.ndarray:
    """Mean Euclidean distance from each row to all rows (self included)."""
    h = np.asarray(histograms, dtype=np.float64)
    n = h.shape[0]
    out = np.empty(n)
    for start in range(0, n, _BLOCK_ROWS):
        block = cdist(h[start : start + _BLOCK_ROWS], h, metric="euclidean")
        out[start : start + _BLOCK_ROWS] = block.sum(axis=1) / n
    return out


def select_global_reference(index: ReferenceIndex) -> str:
    """Histogram medoid over GRIS-eligible entries; cached on the index."""
    eligible = sorted((e for e in index.entries if e.gris_eligible), key=lambda e: e.id)
    if not eligible:
        raise UsageError("cannot select a global reference from an empty index")
    lengths = {e.histogram.shape for e in eligible}
    if len(lengths) != 1:
        raise UsageError(f"non-uniform histogram lengths in index: {sorted(lengths)}")
    ids = [e.id for e in eligible]
    scores = mean_pairwise_distances(np.stack([e.histogram for e in eligible]))
    chosen = _argmin_by_id(ids, scores)
    index.global_reference_id = chosen
    return chosen


def select_local_reference(test_embedding: np.ndarray, index: ReferenceIndex) -> str:
    """Entry with the highest cosine similarity to ``test_embedding``."""
    with_emb = sorted((e for e in index.entries if e.embedding is not None), key=lambda e: e.id)
    if not with_emb:
        raise UsageError("no embeddings in index; local reference selection unavailable")
    query = unit_normalize(test_embedding, "query")
    matrix = np.stack([e.embedding for e in with_emb])
    if matrix.shape[1] != query.shape[0]:
        raise UsageError(
            f"embedding dimension mismatch: query has {query.shape[0]}, index has {matrix.shape[1]}"
        )
    sims = matrix @ query
    return _argmin_by_id([e.id for e in with_emb], -sims)


# -- construction -------------------------------------------------------------


def make_entry(
    entry_id: str,
    image: np.ndarray,
    bins_per_channel: int = DEFAULT_BINS,
    embedding: np.ndarray | None = None,
    gris_eligible: bool = True,
) -> IndexEntry:
    return IndexEntry(
        id=entry_id,
        histogram=compute_histogram(image, bins_per_channel),
        lab_stats=image_stats(image),
        embedding=None if embedding is None else unit_normalize(embedding, entry_id),
        gris_eligible=gris_eligible,
    )


def read_embeddings(path: str | Path) -> dict[str, np.ndarray]:
    """Read a JSON-lines embedding file into ``{id: unit vector}``.

    Each non-blank line is ``{"id": ..., "vector": [...]}``.
    """
    out: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                entry_id = rec["id"]
                vector = rec["vector"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed embedding line ({exc})") from None
            if not isinstance(entry_id, str):
                raise DataError(f"{path}:{lineno}: embedding id must be a string")
            if entry_id in out:
                raise UsageError(f"{path}:{lineno}: duplicate embedding id {entry_id!r}")
            try:
                out[entry_id] = unit_normalize(vector, entry_id)
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return out


def build_index_from_images(
    images: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]],
    bins_per_channel: int = DEFAULT_BINS,
    embeddings: Mapping[str, np.ndarray] | None = None,
    gris_eligible: Iterable[str] | None = None,
    jobs: int = 1,
) -> ReferenceIndex:
    """Index in-memory images; ``gris_eligible`` restricts the medoid candidates."""
    b = check_bins(bins_per_channel)
    items = list(images.items() if isinstance(images, Mapping) else images)
    embeddings = embeddings or {}
    eligible = None if gris_eligible is None else set(gris_eligible)

    def one(item: tuple[str, np.ndarray]) -> IndexEntry:
        entry_id, image = item
        return make_entry(
            entry_id,
            image,
            b,
            embeddings.get(entry_id),
            eligible is None or entry_id in eligible,
        )

    entries = _map(one, items, jobs)
    index = ReferenceIndex(b, sorted(entries, key=lambda e: e.id))
    _report_unmatched(index, embeddings)
    if any(e.gris_eligible for e in index.entries):
        select_global_reference(index)
    return index


def build_index(
    image_source: str | Path,
    bins_per_channel: int = DEFAULT_BINS,
    embeddings: str | Path | Mapping[str, np.ndarray] | None = None,
    gris_eligible: Iterable[str] | None = None,
    jobs: int = 1,
    resize: tuple[int, int] | None = None,
) -> ReferenceIndex:
    """Index every decodable image below ``image_source``.

    Entry ids are the image paths relative to ``image_source`` (POSIX form).
    """
    b = check_bins(bins_per_channel)
    root = Path(image_source)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus directory not found: {root}")
    files = iter_image_files(root)
    if not files:
        raise FileNotFoundError(f"no images found under {root}")
    if embeddings is None:
        emb: Mapping[str, np.ndarray] = {}
    elif isinstance(embeddings, Mapping):
        emb = embeddings
    else:
        emb = read_embeddings(embeddings)

    def load(path: Path) -> tuple[str, np.ndarray]:
        return path.relative_to(root).as_posix(), read_rgb(path, resize=resize)

    images = _map(load, files, jobs)
    return build_index_from_images(images, b, emb, gris_eligible, jobs)


def _report_unmatched(index: ReferenceIndex, embeddings: Mapping[str, np.ndarray]) -> None:
    if not embeddings:
        return
    extra = sorted(set(embeddings) - set(index._by_id))
    missing = [e.id for e in index.entries if e.embedding is None]
    if extra:
        log.warning("%d embedding id(s) not in corpus, e.g. %s", len(extra), extra[:5])
    if missing:
        log.warning("%d corpus image(s) without an embedding, e.g. %s", len(missing), missing[:5])
    dims = {e.embedding.shape[0] for e in index.entries if e.embedding is not None}
    if len(dims) > 1:
        raise DataError(f"inconsistent embedding dimensions: {sorted(dims)}")


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# -- persistence --------------------------------------------------------------


def index_to_dict(index: ReferenceIndex) -> dict:
    return {
        "format_version": index.format_version,
        "bins_per_channel": index.bins_per_channel,
        "global_reference_id": index.global_reference_id,
        "entries": [
            {
                "id": e.id,
                "gris_eligible": e.gris_eligible,
                "histogram": [float(v) for v in e.histogram],
                "lab_mean": list(e.lab_stats.mean),
                "lab_std": list(e.lab_stats.std),
                "embedding": None if e.embedding is None else [float(v) for v in e.embedding],
            }
            for e in index.entries
        ],
    }


def save_index(index: ReferenceIndex, destination: str | Path) -> None:
    # json writes floats with repr(), i.e. round-trip exact (17 significant digits)
    text = json.dumps(index_to_dict(index), indent=1, allow_nan=False)
    Path(destination).write_text(text + "\n", encoding="utf-8")


def _real_list(value, n: int | None, what: str) -> np.ndarray:
    if not isinstance(value, list) or (n is not None and len(value) != n):
        raise IndexLoadError(f"{what}: expected a list of {n if n is not None else 'some'} numbers")
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise IndexLoadError(f"{what}: non-numeric value")
    arr = np.array(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise IndexLoadError(f"{what}: non-finite value")
    return arr


def index_from_dict(doc: object) -> ReferenceIndex:
    if not isinstance(doc, dict):
        raise IndexLoadError("index document must be a JSON object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise IndexLoadError(f"unsupported format_version {version!r} (expected {FORMAT_VERSION})")
    try:
        b = check_bins(doc.get("bins_per_channel"))
    except (ConfigurationError, TypeError):
        raise IndexLoadError(f"invalid bins_per_channel {doc.get('bins_per_channel')!r}") from None
    raw_entries = doc.get("entries")
    if not isinstance(raw_entries, list):
        raise IndexLoadError("'entries' must be a list")

    entries = []
    dim = None
    for i, raw in enumerate(raw_entries):
        if not isinstance(raw, dict) or not isinstance(raw.get("id"), str):
            raise IndexLoadError(f"entry #{i}: missing or non-string id")
        where = f"entry {raw['id']!r}"
        hist = _real_list(raw.get("histogram"), 3 * b, f"{where} histogram")
        if np.any(hist < 0) or abs(hist.sum() - 1.0) > HIST_SUM_TOL:
            raise IndexLoadError(f"{where} histogram: must be non-negative and sum to 1")
        mean = _real_list(raw.get("lab_mean"), 3, f"{where} lab_mean")
        std = _real_list(raw.get("lab_std"), 3, f"{where} lab_std")
        if np.any(std < 0):
            raise IndexLoadError(f"{where} lab_std: negative value")
        emb = raw.get("embedding")
        if emb is not None:
            emb = _real_list(emb, None, f"{where} embedding")
            if emb.size == 0 or abs(np.linalg.norm(emb) - 1.0) > UNIT_NORM_TOL:
                raise IndexLoadError(f"{where} embedding: not unit length")
            if dim is not None and emb.size != dim:
                raise IndexLoadError(f"{where} embedding: dimension {emb.size} != {dim}")
            dim = emb.size
        eligible = raw.get("gris_eligible", True)
        if not isinstance(eligible, bool):
            raise IndexLoadError(f"{where} gris_eligible: must be a boolean")
        entries.append(
            IndexEntry(raw["id"], hist, ChannelStats(tuple(mean), tuple(std)), emb, eligible)
        )

    try:
        index = ReferenceIndex(b, entries, None, version)
    except UsageError as exc:
        raise IndexLoadError(str(exc)) from None
    gid = doc.get("global_reference_id")
    if gid is not None:
        if not isinstance(gid, str) or gid not in index:
            raise IndexLoadError(f"global_reference_id {gid!r} names no entry")
        index.global_reference_id = gid
    return index


def load_index(source: str | Path) -> ReferenceIndex:
    try:
        text = Path(source).read_text(encoding="utf-8")
        doc = json.loads(text)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IndexLoadError(f"{source}: malformed index file ({exc})") from None
    return index_from_dict(doc)


def with_entries(index: ReferenceIndex, entries: list[IndexEntry]) -> ReferenceIndex:
    """Copy of ``index`` holding ``entries``; the cached global id is dropped."""
    return replace(index, entries=list(entries), global_reference_id=None)


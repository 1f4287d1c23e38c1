"""COCO annotation handling, anchor clustering and a synthetic small-object set."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

SMALL_OBJECT_MAX_AREA = 32 * 32


class CocoParseError(ValueError):
    """Malformed COCO document; the message names the offending JSON path."""


@dataclass(frozen=True)
class Annotation:
    image_id: int
    category_id: int
    bbox: tuple[float, float, float, float]
    id: Optional[int] = None
    raw: dict = field(default_factory=dict, compare=False, repr=False, hash=False)

    @property
    def area(self) -> float:
        return self.bbox[2] * self.bbox[3]

    @property
    def width(self) -> float:
        return self.bbox[2]

    @property
    def height(self) -> float:
        return self.bbox[3]


@dataclass(frozen=True)
class ImageRecord:
    id: int
    width: Optional[int] = None
    height: Optional[int] = None
    raw: dict = field(default_factory=dict, compare=False, repr=False, hash=False)


@dataclass
class CocoDataset:
    images: list[ImageRecord]
    annotations: list[Annotation]
    categories: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def _require(obj: Any, key: str, where: str):
    if not isinstance(obj, dict):
        raise CocoParseError(f"{where}: expected an object, got {type(obj).__name__}")
    if key not in obj:
        raise CocoParseError(f"{where}: missing required key '{key}'")
    return obj[key]


def _number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise CocoParseError(f"{where}: expected a number, got {value!r}")
    return value


def parse_coco_dict(doc: Any, source: str = "<document>") -> CocoDataset:
    images_raw = _require(doc, "images", source)
    anns_raw = _require(doc, "annotations", source)
    cats = _require(doc, "categories", source)
    for key, val in (("images", images_raw), ("annotations", anns_raw), ("categories", cats)):
        if not isinstance(val, list):
            raise CocoParseError(f"{source}: $.{key} must be an array")

    images = []
    for k, im in enumerate(images_raw):
        where = f"{source}: $.images[{k}]"
        iid = int(_number(_require(im, "id", where), f"{where}.id"))
        images.append(ImageRecord(iid, im.get("width"), im.get("height"), raw=im))
    extents = {im.id: (im.width, im.height) for im in images}

    annotations = []
    for k, a in enumerate(anns_raw):
        where = f"{source}: $.annotations[{k}]"
        bbox = _require(a, "bbox", where)
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise CocoParseError(f"{where}.bbox: expected [x, y, w, h]")
        x, y, w, h = (float(_number(v, f"{where}.bbox[{j}]")) for j, v in enumerate(bbox))
        if w <= 0 or h <= 0:
            raise CocoParseError(f"{where}.bbox: width and height must be positive, got {w}x{h}")
        image_id = int(_number(_require(a, "image_id", where), f"{where}.image_id"))
        W, H = extents.get(image_id, (None, None))
        if W is not None and H is not None and (x < 0 or y < 0 or x + w > W + 1e-6 or y + h > H + 1e-6):
            raise CocoParseError(f"{where}.bbox: box {bbox} outside image {image_id} ({W}x{H})")
        annotations.append(
            Annotation(
                image_id=image_id,
                category_id=int(_number(_require(a, "category_id", where), f"{where}.category_id")),
                bbox=(x, y, w, h),
                id=a.get("id"),
                raw=a,
            )
        )
    extra = {k: v for k, v in doc.items() if k not in ("images", "annotations", "categories")}
    return CocoDataset(images, annotations, list(cats), extra)


def parse_coco(path) -> CocoDataset:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CocoParseError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return parse_coco_dict(doc, str(path))


def filter_small(annotations: Iterable[Annotation], max_area: float = SMALL_OBJECT_MAX_AREA) -> list[Annotation]:
    """Keep boxes with area strictly below ``max_area``."""
    return [a for a in annotations if a.area < max_area]


def filter_dataset(ds: CocoDataset, max_area: float = SMALL_OBJECT_MAX_AREA) -> CocoDataset:
    """Small-object subset; images left without annotations are dropped."""
    kept = filter_small(ds.annotations, max_area)
    ids = {a.image_id for a in kept}
    return CocoDataset([im for im in ds.images if im.id in ids], kept, ds.categories, ds.extra)


def to_coco_dict(ds: CocoDataset) -> dict:
    doc = dict(ds.extra)
    doc["images"] = [im.raw or {"id": im.id, "width": im.width, "height": im.height} for im in ds.images]
    anns = []
    for a in ds.annotations:
        rec = dict(a.raw) if a.raw else {"image_id": a.image_id, "category_id": a.category_id}
        if a.id is not None:
            rec["id"] = a.id
        rec["bbox"] = list(a.bbox)
        rec["area"] = a.area
        anns.append(rec)
    doc["annotations"] = anns
    doc["categories"] = ds.categories
    return doc


def annotation_key(a: Annotation) -> tuple:
    return (a.image_id, a.category_id, a.bbox)


# -- anchor clustering ------------------------------------------------------------


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    wcss_history: list[float]
    degenerate: bool


@dataclass
class AnchorSet:
    scales: list[float]
    ratios: list[float]
    degenerate: bool = False
    scale_wcss: list[float] = field(default_factory=list)
    ratio_wcss: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"scales": self.scales, "ratios": self.ratios, "degenerate": self.degenerate}


def kmeans_1d(values: Sequence[float], k: int, max_iter: int = 100, seed: int = 0) -> KMeansResult:
    """Lloyd's iterations on scalars, started at spread quantiles of the distinct values.

    The quantile start is already deterministic, so ``seed`` has no effect on
    the result; it is kept so callers can record it.  Empty clusters keep their
    previous centroid.  ``wcss_history[j]`` is the within-cluster sum of squares
    after the j-th assignment step.
    """
    x = np.sort(np.asarray(values, dtype=np.float64))
    if x.size < k:
        raise ValueError(f"need at least {k} points to form {k} clusters, got {x.size}")
    uniq = np.unique(x)
    degenerate = uniq.size < k
    if degenerate:
        centroids = np.quantile(x, (np.arange(k) + 0.5) / k, method="inverted_cdf")
    else:
        centroids = np.quantile(uniq, (np.arange(k) + 0.5) / k, method="inverted_cdf")

    history: list[float] = []
    labels = np.full(x.size, -1)
    for _ in range(max_iter):
        new_labels = np.abs(x[:, None] - centroids[None, :]).argmin(axis=1)
        history.append(float(((x - centroids[new_labels]) ** 2).sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = x[labels == j]
            if members.size:
                centroids[j] = members.mean()
    order = np.argsort(centroids, kind="stable")
    remap = np.empty_like(order)
    remap[order] = np.arange(k)
    return KMeansResult(centroids[order], remap[labels], history, bool(degenerate))


def cluster_anchors(annotations: Sequence[Annotation], n_scales: int = 4, n_ratios: int = 3, seed: int = 0) -> AnchorSet:
    """Independent 1-d k-means on sqrt(w*h) and on w/h."""
    if len(annotations) < max(n_scales, n_ratios):
        raise ValueError(f"need at least {max(n_scales, n_ratios)} annotations, got {len(annotations)}")
    sides = [math.sqrt(a.area) for a in annotations]
    ratios = [a.width / a.height for a in annotations]
    s = kmeans_1d(sides, n_scales, seed=seed)
    r = kmeans_1d(ratios, n_ratios, seed=seed)
    return AnchorSet(
        scales=[float(v) for v in s.centroids],
        ratios=[float(v) for v in r.centroids],
        degenerate=s.degenerate or r.degenerate,
        scale_wcss=s.wcss_history,
        ratio_wcss=r.wcss_history,
    )


# -- size distribution ---------------------------------------------------------


def size_histogram(annotations: Iterable[Annotation], bin_width: float = 4.0, max_size: float = 32.0) -> list[tuple[float, float, int]]:
    """Rows ``(w_bin_start, h_bin_start, count)`` over a full grid up to ``max_size``.

    Sizes at or beyond ``max_size`` land in the last bin.
    """
    nbins = max(1, int(math.ceil(max_size / bin_width)))
    counts = Counter()
    for a in annotations:
        i = min(int(a.width // bin_width), nbins - 1)
        j = min(int(a.height // bin_width), nbins - 1)
        counts[i, j] += 1
    return [(i * bin_width, j * bin_width, counts[i, j]) for i in range(nbins) for j in range(nbins)]


# -- synthetic small-object images --------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    n_images: int = 1000
    image_size: int = 64
    max_obj_size: int = 8
    n_classes: int = 3
    objects_per_image: int = 1
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_images < 0 or self.objects_per_image < 0 or self.n_classes < 1:
            raise ValueError("n_images, objects_per_image must be >= 0 and n_classes >= 1")
        if self.image_size % 16:
            raise ValueError(f"image_size must be divisible by 16, got {self.image_size}")
        if not 2 <= self.max_obj_size <= self.image_size // 8:
            raise ValueError(f"max_obj_size must lie in [2, image_size/8], got {self.max_obj_size}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


@dataclass(frozen=True)
class Target:
    cx: float
    cy: float
    size: int
    cls: int


@dataclass
class SyntheticSample:
    image: np.ndarray  # (3, H, W)
    targets: list[Target]
    image_id: int


def class_palette(n_classes: int) -> np.ndarray:
    """Per-class RGB base intensity; neighbouring classes share hues so pattern matters."""
    hues = np.array([[0.9, 0.35, 0.3], [0.3, 0.85, 0.4], [0.35, 0.4, 0.9]])
    return np.array([hues[(k // 2) % 3] for k in range(n_classes)])


def class_pattern(cls: int, size: int) -> np.ndarray:
    """(size, size) intensity modulation: solid, stripes or checkerboard by class."""
    yy, xx = np.mgrid[:size, :size]
    kind = cls % 3
    if kind == 0:
        return np.ones((size, size))
    if kind == 1:
        return np.where(xx % 2 == 0, 1.0, 0.35)
    return np.where((xx + yy) % 2 == 0, 1.0, 0.35)


def _render_object(image: np.ndarray, x0: int, y0: int, size: int, cls: int, circle: bool, palette: np.ndarray) -> None:
    mask = np.ones((size, size), bool)
    if circle:
        yy, xx = np.mgrid[:size, :size]
        r = size / 2
        mask = (xx + 0.5 - r) ** 2 + (yy + 0.5 - r) ** 2 <= r * r
    pat = class_pattern(cls, size)
    for ch in range(3):
        region = image[ch, y0:y0 + size, x0:x0 + size]
        region[mask] = (palette[cls, ch] * pat)[mask]


def generate_synthetic(config: SyntheticConfig) -> list[SyntheticSample]:
    """Uniform-noise background with filled squares/circles of per-class patterns.

    Each image uses its own generator seeded from ``(seed, index)``.
    """
    palette = class_palette(config.n_classes)
    half_width = math.sqrt(3.0) * config.noise_std
    s = config.image_size
    out = []
    for idx in range(config.n_images):
        rng = np.random.default_rng([config.seed, idx])
        image = 0.5 + rng.uniform(-half_width, half_width, size=(3, s, s))
        targets = []
        for _ in range(config.objects_per_image):
            size = int(rng.integers(max(2, config.max_obj_size // 2), config.max_obj_size + 1))
            cls = int(rng.integers(config.n_classes))
            circle = bool(rng.integers(2))
            x0 = int(rng.integers(0, s - size + 1))
            y0 = int(rng.integers(0, s - size + 1))
            _render_object(image, x0, y0, size, cls, circle, palette)
            targets.append(Target(x0 + size / 2, y0 + size / 2, size, cls))
        out.append(SyntheticSample(image, targets, idx))
    return out

"""Dataset records, file formats, and the synthetic scene generator.

Annotations travel as line-delimited JSON, one image per line, with a
JSON sidecar naming object categories and predicates by index.  Detector
features travel in the binary "VRF1" format, one float32 vector per
detection in annotation order.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, FormatError, ValidationError
from .seeding import substream

Array = np.ndarray


# ---------------------------------------------------------------------------
# record types


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box, corners in pixels, origin top-left, y grows down."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        for name in ("x_min", "y_min", "x_max", "y_max"):
            value = float(getattr(self, name))
            object.__setattr__(self, name, value)
            if not math.isfinite(value):
                raise ValidationError(f"bbox field {name} is not finite: {value}")
            if value < 0:
                raise ValidationError(f"bbox field {name} is negative: {value}")
        if self.x_min > self.x_max:
            raise ValidationError(f"bbox has x_min {self.x_min} > x_max {self.x_max}")
        if self.y_min > self.y_max:
            raise ValidationError(f"bbox has y_min {self.y_min} > y_max {self.y_max}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def union(self, other: "BoundingBox") -> "BoundingBox":
        return BoundingBox(
            min(self.x_min, other.x_min),
            min(self.y_min, other.y_min),
            max(self.x_max, other.x_max),
            max(self.y_max, other.y_max),
        )

    def strictly_inside(self, other: "BoundingBox") -> bool:
        return (
            self.x_min > other.x_min
            and self.y_min > other.y_min
            and self.x_max < other.x_max
            and self.y_max < other.y_max
        )

    def overlaps(self, other: "BoundingBox") -> bool:
        return (
            min(self.x_max, other.x_max) > max(self.x_min, other.x_min)
            and min(self.y_max, other.y_max) > max(self.y_min, other.y_min)
        )

    def normalized_geometry(self, width: float, height: float) -> Array:
        """Scale-free 5-vector: corners over image extent plus area share."""
        return np.array(
            [
                self.x_min / width,
                self.y_min / height,
                self.x_max / width,
                self.y_max / height,
                self.area / (width * height),
            ],
            dtype=np.float64,
        )

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass
class Detection:
    """One detected object: box, category, detector confidence, feature."""

    bbox: BoundingBox
    category_id: int
    confidence: float
    feature: Array | None = None

    def __post_init__(self):
        self.category_id = int(self.category_id)
        self.confidence = float(self.confidence)
        if self.category_id < 0:
            raise ValidationError(f"detection category_id is negative: {self.category_id}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"detection confidence {self.confidence} outside [0, 1]")
        if self.feature is not None:
            self.feature = np.asarray(self.feature, dtype=np.float64)
            if self.feature.ndim != 1:
                raise ValidationError(f"detection feature must be a vector, got {self.feature.shape}")


@dataclass
class RelationshipInstance:
    """A ground-truth (subject, predicate, object) triple within one image."""

    subject: Detection
    object: Detection
    predicate_id: int
    subject_index: int
    object_index: int

    def __post_init__(self):
        if self.predicate_id < 0:
            raise ValidationError(f"relationship predicate_id is negative: {self.predicate_id}")
        if self.subject_index == self.object_index:
            raise ValidationError("relationship subject and object are the same detection")

    @property
    def triplet_type(self) -> tuple[int, int, int]:
        return (self.subject.category_id, self.predicate_id, self.object.category_id)


@dataclass
class ImageRecord:
    """All detections and ground-truth relationships for one image."""

    image_id: str
    width: float
    height: float
    detections: list[Detection]
    relationships: list[RelationshipInstance]

    def __post_init__(self):
        self.width = float(self.width)
        self.height = float(self.height)

    def validate(self, vocab: "DatasetVocab | None" = None, feature_dim: int | None = None) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"image {self.image_id}: width/height must be positive")
        for i, det in enumerate(self.detections):
            box = det.bbox
            if box.x_max > self.width or box.y_max > self.height:
                raise ValidationError(
                    f"image {self.image_id}: detection {i} bbox exceeds image bounds"
                )
            if vocab is not None and det.category_id >= len(vocab.object_names):
                raise ValidationError(
                    f"image {self.image_id}: detection {i} category_id "
                    f"{det.category_id} >= {len(vocab.object_names)} categories"
                )
            if feature_dim is not None:
                if det.feature is None or det.feature.shape != (feature_dim,):
                    raise ValidationError(
                        f"image {self.image_id}: detection {i} feature does not have dim {feature_dim}"
                    )
        n = len(self.detections)
        for i, rel in enumerate(self.relationships):
            if not (0 <= rel.subject_index < n):
                raise ValidationError(f"image {self.image_id}: relationship {i} sub_idx out of range")
            if not (0 <= rel.object_index < n):
                raise ValidationError(f"image {self.image_id}: relationship {i} obj_idx out of range")
            if vocab is not None and rel.predicate_id >= len(vocab.predicate_names):
                raise ValidationError(
                    f"image {self.image_id}: relationship {i} pred_id "
                    f"{rel.predicate_id} >= {len(vocab.predicate_names)} predicates"
                )


@dataclass
class DatasetSplit:
    """Train/test partition plus the relationships unseen at training time."""

    train: list[ImageRecord]
    test: list[ImageRecord]
    zero_shot_test: list[tuple[str, RelationshipInstance]]


@dataclass
class DatasetVocab:
    """Index-aligned names for object categories and predicates."""

    object_names: list[str]
    predicate_names: list[str]

    @property
    def num_objects(self) -> int:
        return len(self.object_names)

    @property
    def num_predicates(self) -> int:
        return len(self.predicate_names)

    def save(self, path) -> None:
        payload = {"objects": self.object_names, "predicates": self.predicate_names}
        _write_text_atomic(path, json.dumps(payload, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetVocab":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                payload = json.load(fh)
            return cls(object_names=list(payload["objects"]), predicate_names=list(payload["predicates"]))
        except (json.JSONDecodeError, KeyError, TypeError) as err:
            raise FormatError(f"{path}: not a valid vocabulary sidecar ({err})") from err


def _write_text_atomic(path, text: str) -> None:
    path = str(path)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_bytes_atomic(path, blob: bytes) -> None:
    path = str(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# annotation files (line-delimited JSON)


def record_to_dict(record: ImageRecord) -> dict:
    return {
        "image_id": record.image_id,
        "width": record.width,
        "height": record.height,
        "objects": [
            {
                "category_id": det.category_id,
                "bbox": det.bbox.as_list(),
                "confidence": det.confidence,
            }
            for det in record.detections
        ],
        "relationships": [
            {"sub_idx": rel.subject_index, "pred_id": rel.predicate_id, "obj_idx": rel.object_index}
            for rel in record.relationships
        ],
    }


def record_from_dict(payload: Mapping, where: str) -> ImageRecord:
    try:
        detections = [
            Detection(
                bbox=BoundingBox(*[float(v) for v in obj["bbox"]]),
                category_id=int(obj["category_id"]),
                confidence=float(obj["confidence"]),
            )
            for obj in payload["objects"]
        ]
        relationships = []
        for rel in payload["relationships"]:
            sub_idx = int(rel["sub_idx"])
            obj_idx = int(rel["obj_idx"])
            if not (0 <= sub_idx < len(detections)):
                raise ValidationError(f"{where}: relationship field sub_idx {sub_idx} out of range")
            if not (0 <= obj_idx < len(detections)):
                raise ValidationError(f"{where}: relationship field obj_idx {obj_idx} out of range")
            relationships.append(
                RelationshipInstance(
                    subject=detections[sub_idx],
                    object=detections[obj_idx],
                    predicate_id=int(rel["pred_id"]),
                    subject_index=sub_idx,
                    object_index=obj_idx,
                )
            )
        record = ImageRecord(
            image_id=str(payload["image_id"]),
            width=float(payload["width"]),
            height=float(payload["height"]),
            detections=detections,
            relationships=relationships,
        )
    except KeyError as err:
        raise FormatError(f"{where}: missing key {err}") from None
    except (TypeError, ValueError) as err:
        raise FormatError(f"{where}: malformed value ({err})") from None
    except ValidationError as err:
        raise ValidationError(f"{where}: {err}") from None
    return record


def load_annotations(path, vocab: DatasetVocab | None = None) -> list[ImageRecord]:
    """Read one ImageRecord per line; errors carry the line number."""
    records: list[ImageRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{path} record {len(records)} (line {lineno})"
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as err:
                raise FormatError(f"{where}: invalid JSON at column {err.colno}") from None
            record = record_from_dict(payload, where)
            try:
                record.validate(vocab)
            except ValidationError as err:
                raise ValidationError(f"{where}: {err}") from None
            records.append(record)
    return records


def save_annotations(path, records: Sequence[ImageRecord]) -> None:
    lines = [json.dumps(record_to_dict(r), sort_keys=True) for r in records]
    _write_text_atomic(path, "\n".join(lines) + ("\n" if lines else ""))


# ---------------------------------------------------------------------------
# feature files ("VRF1")
#
# magic "VRF1" | u32 dim | per image: u32 id_len | id utf-8 | u32 count |
# count * dim float32 little-endian

FEATURE_MAGIC = b"VRF1"


def save_features(path, features: Mapping[str, Array], dim: int) -> None:
    blob = bytearray()
    blob += FEATURE_MAGIC
    blob += struct.pack("<I", dim)
    for image_id, vectors in features.items():
        arr = np.asarray(vectors, dtype="<f4")
        if arr.ndim == 1:
            arr = arr.reshape(0, dim) if arr.size == 0 else arr.reshape(1, -1)
        if arr.shape[1:] != (dim,):
            raise ContractError(f"feature block for {image_id} has dim {arr.shape[1:]}, expected ({dim},)")
        encoded = image_id.encode("utf-8")
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<I", arr.shape[0])
        blob += np.ascontiguousarray(arr).tobytes()
    _write_bytes_atomic(path, bytes(blob))


def load_features(path, expected_dim: int) -> dict[str, Array]:
    """Read image_id -> (count, dim) float64 feature matrix."""
    path = str(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"{path}: truncated at byte {pos}, needed {n} more")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    if take(4) != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic, expected {FEATURE_MAGIC!r}")
    (dim,) = struct.unpack("<I", take(4))
    if dim != expected_dim:
        raise ConfigurationError(f"{path}: feature dim {dim} does not match configured {expected_dim}")
    out: dict[str, Array] = {}
    while pos < len(raw):
        (id_len,) = struct.unpack("<I", take(4))
        image_id = take(id_len).decode("utf-8")
        (count,) = struct.unpack("<I", take(4))
        payload = take(4 * count * dim)
        vectors = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(count, dim)
        out[image_id] = vectors
    return out


def attach_features(records: Sequence[ImageRecord], features: Mapping[str, Array], dim: int) -> None:
    """Pair feature rows with detections by image id and position."""
    for record in records:
        block = features.get(record.image_id)
        if block is None:
            raise ValidationError(f"image {record.image_id}: no feature block in feature file")
        if len(block) != len(record.detections):
            raise ValidationError(
                f"image {record.image_id}: {len(block)} feature rows for "
                f"{len(record.detections)} detections"
            )
        for det, row in zip(record.detections, block):
            if row.shape != (dim,):
                raise ValidationError(f"image {record.image_id}: feature row has shape {row.shape}")
            det.feature = np.asarray(row, dtype=np.float64)


# ---------------------------------------------------------------------------
# import of externally annotated data
#
# Source layout: filename -> list of {predicate, subject: {category, bbox},
# object: {category, bbox}} with bbox given as (y_min, y_max, x_min, x_max).


def convert_external_annotations(
    raw: Mapping[str, Sequence[Mapping]],
    vocab: DatasetVocab,
    image_sizes: Mapping[str, tuple[float, float]] | None = None,
) -> list[ImageRecord]:
    """Convert the (y_min, y_max, x_min, x_max) interchange layout.

    Detections are deduplicated by (category, box); relationships then
    reference them by index.  When an image's size is not supplied the
    box hull is used as the extent.
    """
    records: list[ImageRecord] = []
    for image_id in sorted(raw):
        triples = raw[image_id]
        seen: dict[tuple, int] = {}
        detections: list[Detection] = []
        pending: list[tuple[int, int, int]] = []

        def intern(entry: Mapping) -> int:
            y0, y1, x0, x1 = (float(v) for v in entry["bbox"])
            box = BoundingBox(x0, y0, x1, y1)
            key = (int(entry["category"]), box.x_min, box.y_min, box.x_max, box.y_max)
            if key not in seen:
                seen[key] = len(detections)
                detections.append(Detection(bbox=box, category_id=int(entry["category"]), confidence=1.0))
            return seen[key]

        for triple in triples:
            sub_idx = intern(triple["subject"])
            obj_idx = intern(triple["object"])
            pending.append((sub_idx, int(triple["predicate"]), obj_idx))
        if image_sizes is not None and image_id in image_sizes:
            width, height = image_sizes[image_id]
        else:
            width = max((d.bbox.x_max for d in detections), default=1.0)
            height = max((d.bbox.y_max for d in detections), default=1.0)
        relationships = [
            RelationshipInstance(
                subject=detections[s],
                object=detections[o],
                predicate_id=p,
                subject_index=s,
                object_index=o,
            )
            for s, p, o in pending
            if s != o
        ]
        record = ImageRecord(
            image_id=image_id,
            width=float(width),
            height=float(height),
            detections=detections,
            relationships=relationships,
        )
        record.validate(vocab)
        records.append(record)
    return records


# ---------------------------------------------------------------------------
# zero-shot split


def triplet_types(records: Sequence[ImageRecord]) -> set[tuple[int, int, int]]:
    return {rel.triplet_type for record in records for rel in record.relationships}


def make_zero_shot_split(train: Sequence[ImageRecord], test: Sequence[ImageRecord]) -> DatasetSplit:
    """Mark every test relationship whose triplet type never occurs in train."""
    seen = triplet_types(train)
    zero_shot = [
        (record.image_id, rel)
        for record in test
        for rel in record.relationships
        if rel.triplet_type not in seen
    ]
    return DatasetSplit(train=list(train), test=list(test), zero_shot_test=zero_shot)


# ---------------------------------------------------------------------------
# predicate frequency baseline


class ConditionedPredicateFrequency:
    """Empirical predicate distributions keyed by (sub, obj) category pair."""

    def __init__(self, table: dict[tuple[int, int], Array], fallback: Array):
        self.table = table
        self.fallback = fallback

    def lookup(self, sub_category: int, obj_category: int) -> Array:
        dist = self.table.get((sub_category, obj_category))
        if dist is not None:
            return dist
        if self.fallback is not None:
            return self.fallback
        n = len(next(iter(self.table.values())))
        return np.full(n, 1.0 / n)


def predicate_frequency(
    records: Sequence[ImageRecord],
    num_predicates: int,
    by_category_pair: bool = False,
):
    """Empirical predicate distribution of a training split.

    Unconditioned: a single length-num_predicates simplex vector.
    Conditioned: per (sub-category, obj-category) distributions that fall
    back to the unconditioned distribution for unseen pairs.
    """
    total = np.zeros(num_predicates, dtype=np.float64)
    pair_counts: dict[tuple[int, int], Array] = {}
    n_instances = 0
    for record in records:
        for rel in record.relationships:
            if rel.predicate_id >= num_predicates:
                raise ContractError(
                    f"predicate id {rel.predicate_id} >= num_predicates {num_predicates}"
                )
            total[rel.predicate_id] += 1.0
            n_instances += 1
            if by_category_pair:
                key = (rel.subject.category_id, rel.object.category_id)
                if key not in pair_counts:
                    pair_counts[key] = np.zeros(num_predicates, dtype=np.float64)
                pair_counts[key][rel.predicate_id] += 1.0
    if n_instances == 0:
        raise ContractError("predicate_frequency needs at least one relationship")
    unconditioned = total / total.sum()
    if not by_category_pair:
        return unconditioned
    table = {key: counts / counts.sum() for key, counts in pair_counts.items()}
    return ConditionedPredicateFrequency(table, unconditioned)


# ---------------------------------------------------------------------------
# synthetic scenes
#
# Predicates are pure functions of box geometry plus one context rule, so
# an annotation can always be re-derived from the record itself.

SYNTHETIC_PREDICATES = (
    "above",
    "below",
    "left of",
    "right of",
    "inside",
    "contains",
    "near",
    "wears",
)

CENTER_MARGIN_FRACTION = 0.05
NEAR_FRACTION = 0.2

_BASE_CATEGORY_NAMES = (
    "person",
    "hat",
    "dog",
    "car",
    "tree",
    "table",
    "chair",
    "ball",
    "bird",
    "house",
    "cup",
    "book",
    # multiword names past this point so larger vocabularies mix
    # one- and two-token labels and sequence layouts vary
    "traffic light",
    "coffee cup",
    "street sign",
    "fire truck",
    "park bench",
    "flower pot",
    "stop sign",
    "trash can",
    "phone booth",
    "picnic table",
    "flag pole",
    "bus stop",
)


def synthetic_category_names(count: int) -> list[str]:
    names = list(_BASE_CATEGORY_NAMES[:count])
    names += [f"thing{i}" for i in range(len(names), count)]
    return names


def synthetic_vocab(num_categories: int) -> DatasetVocab:
    return DatasetVocab(
        object_names=synthetic_category_names(num_categories),
        predicate_names=list(SYNTHETIC_PREDICATES),
    )


def spatial_predicates(
    sub: Detection,
    obj: Detection,
    width: float,
    height: float,
    object_names: Sequence[str],
) -> list[int]:
    """All predicate ids that hold for the ordered pair, by the fixed rules.

    Direction tests compare box centers with a margin; "near" compares
    center distance against a fraction of the short image side; "inside"
    and "contains" require strict box containment.  One context rule:
    an overlapping person above a hat "wears" it instead.
    """
    margin = CENTER_MARGIN_FRACTION * min(width, height)
    sx, sy = sub.bbox.center
    ox, oy = obj.bbox.center
    fired: list[str] = []
    if sy < oy - margin:
        fired.append("above")
    if sy > oy + margin:
        fired.append("below")
    if sx < ox - margin:
        fired.append("left of")
    if sx > ox + margin:
        fired.append("right of")
    if sub.bbox.strictly_inside(obj.bbox):
        fired.append("inside")
    if obj.bbox.strictly_inside(sub.bbox):
        fired.append("contains")
    if math.hypot(sx - ox, sy - oy) < NEAR_FRACTION * min(width, height):
        fired.append("near")
    if (
        "above" in fired
        and object_names[sub.category_id] == "person"
        and object_names[obj.category_id] == "hat"
        and sub.bbox.overlaps(obj.bbox)
    ):
        fired[fired.index("above")] = "wears"
    index = {name: i for i, name in enumerate(SYNTHETIC_PREDICATES)}
    return sorted(index[name] for name in fired)


@dataclass
class SyntheticConfig:
    """Knobs for the generated corpus; all randomness comes from seed."""

    num_images: int
    num_categories: int
    seed: int
    width: float = 256.0
    height: float = 256.0
    min_objects: int = 6
    max_objects: int = 8
    pairs_per_image: int = 20
    feature_dim: int = 32
    feature_noise: float = 0.05
    train_fraction: float = 0.8
    person_hat_rate: float = 0.15
    nesting_rate: float = 0.2

    def __post_init__(self):
        if self.num_categories < 4:
            raise ConfigurationError(f"num_categories must be >= 4, got {self.num_categories}")
        if self.num_images < 2:
            raise ConfigurationError(f"num_images must be >= 2, got {self.num_images}")
        if self.min_objects < 2 or self.max_objects < self.min_objects:
            raise ConfigurationError("need min_objects >= 2 and max_objects >= min_objects")
        if self.feature_dim < 5 + self.num_categories:
            raise ConfigurationError(
                f"feature_dim {self.feature_dim} < 5 + num_categories {self.num_categories}"
            )
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigurationError("train_fraction must lie strictly between 0 and 1")
        if self.width <= 0 or self.height <= 0:
            raise ConfigurationError("width and height must be positive")


def _random_box(rng: np.random.Generator, width: float, height: float) -> BoundingBox:
    w = rng.uniform(0.08, 0.45) * width
    h = rng.uniform(0.08, 0.45) * height
    x0 = rng.uniform(0.0, width - w)
    y0 = rng.uniform(0.0, height - h)
    return BoundingBox(x0, y0, x0 + w, y0 + h)


def _box_inside(rng: np.random.Generator, outer: BoundingBox) -> BoundingBox:
    # strict containment with a small guaranteed gap on every side
    gap_x = 0.05 * outer.width
    gap_y = 0.05 * outer.height
    w = rng.uniform(0.2, 0.6) * (outer.width - 2 * gap_x)
    h = rng.uniform(0.2, 0.6) * (outer.height - 2 * gap_y)
    x0 = rng.uniform(outer.x_min + gap_x, outer.x_max - gap_x - w)
    y0 = rng.uniform(outer.y_min + gap_y, outer.y_max - gap_y - h)
    return BoundingBox(x0, y0, x0 + w, y0 + h)


def _synthetic_feature(
    det: Detection, config: SyntheticConfig, rng: np.random.Generator
) -> Array:
    geometry = det.bbox.normalized_geometry(config.width, config.height)
    one_hot = np.zeros(config.num_categories, dtype=np.float64)
    one_hot[det.category_id] = 1.0
    core = np.concatenate([geometry, one_hot])
    core = core + rng.normal(0.0, config.feature_noise, size=core.size)
    padded = np.zeros(config.feature_dim, dtype=np.float64)
    padded[: core.size] = core
    # rounding through float32 keeps in-memory data identical to a file round trip
    return padded.astype(np.float32).astype(np.float64)


def _generate_image(
    index: int, config: SyntheticConfig, names: Sequence[str], rng: np.random.Generator
) -> ImageRecord:
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    categories = rng.integers(0, config.num_categories, size=n)
    boxes = [_random_box(rng, config.width, config.height) for _ in range(n)]

    if rng.random() < config.nesting_rate and n >= 2:
        outer = int(rng.integers(0, n))
        inner = int(rng.integers(0, n - 1))
        if inner >= outer:
            inner += 1
        boxes[inner] = _box_inside(rng, boxes[outer])

    forced_pair: tuple[int, int] | None = None
    if rng.random() < config.person_hat_rate and n >= 2:
        person = int(rng.integers(0, n))
        hat = int(rng.integers(0, n - 1))
        if hat >= person:
            hat += 1
        categories[person] = 0
        categories[hat] = 1
        # hat box overlapping the person, its center pushed lower so that
        # the person's center sits above it by more than the margin
        pbox = boxes[person]
        margin = CENTER_MARGIN_FRACTION * min(config.width, config.height)
        hw = max(4.0, 0.5 * pbox.width)
        hh = max(4.0, 0.5 * pbox.height)
        cx, cy = pbox.center
        hx0 = min(max(cx - hw / 2, 0.0), config.width - hw)
        hy0 = min(cy + margin * 1.5, config.height - hh)
        boxes[hat] = BoundingBox(hx0, hy0, hx0 + hw, hy0 + hh)
        if boxes[hat].overlaps(pbox):
            forced_pair = (person, hat)

    detections = [
        Detection(
            bbox=boxes[i],
            category_id=int(categories[i]),
            confidence=float(rng.uniform(0.7, 1.0)),
        )
        for i in range(n)
    ]
    for det in detections:
        det.feature = _synthetic_feature(det, config, rng)

    all_pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    take = min(config.pairs_per_image, len(all_pairs))
    chosen_idx = rng.choice(len(all_pairs), size=take, replace=False)
    chosen = {all_pairs[t] for t in chosen_idx}
    if forced_pair is not None:
        chosen.add(forced_pair)

    relationships = []
    for sub_idx, obj_idx in sorted(chosen):
        fired = spatial_predicates(
            detections[sub_idx], detections[obj_idx], config.width, config.height, names
        )
        for pred_id in fired:
            relationships.append(
                RelationshipInstance(
                    subject=detections[sub_idx],
                    object=detections[obj_idx],
                    predicate_id=pred_id,
                    subject_index=sub_idx,
                    object_index=obj_idx,
                )
            )
    return ImageRecord(
        image_id=f"synthetic-{index:05d}",
        width=config.width,
        height=config.height,
        detections=detections,
        relationships=relationships,
    )


def generate_synthetic(config: SyntheticConfig) -> DatasetSplit:
    """Deterministic corpus of random scenes labeled by the fixed rules."""
    names = synthetic_category_names(config.num_categories)
    rng = substream(config.seed, "data")
    records = [_generate_image(i, config, names, rng) for i in range(config.num_images)]
    n_train = max(1, min(config.num_images - 1, round(config.train_fraction * config.num_images)))
    return make_zero_shot_split(records[:n_train], records[n_train:])

"""Synthetic proposal benchmark and the line-delimited dataset/detection files.

Every object has a small "part" strip along its top edge. Proposals that sit
mostly on a part get an amplified class signal, so an instance classifier is
drawn to the part rather than the whole object.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import Box, Detection, box_areas
from .midn import ImageSample

DATASET_FORMAT = "boicr-dataset"
DATASET_VERSION = 1

_TRAIN, _TEST, _PROTO = 1, 2, 0


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    num_classes: int = 5
    images_train: int = 200
    images_test: int = 100
    min_objects: int = 1
    max_objects: int = 3
    width: float = 100.0
    height: float = 100.0
    part_signal_gain: float = 3.0
    proposals_per_object: int = 8
    background_proposals: int = 12
    feature_noise_sigma: float = 0.3
    feature_dim: int = 32
    part_fraction: float = 0.3  # height share of the part strip
    jitter: float = 0.08  # proposal jitter, relative to box size
    part_shared_norm: float = 3.0  # appearance common to every class's part
    part_class_norm: float = 1.0
    body_norm: float = 2.0
    extent_proposals: int = 0  # per object: top-anchored boxes between part and whole
    context_proposals: int = 4  # per object: object-sized boxes shifted partly off the object
    part_gain_spread: float = 0.8  # per-object gain is part_signal_gain * exp(U(-spread, spread))
    rng_seed: int = 0

    def __post_init__(self):
        counts = [self.num_classes, self.images_train, self.images_test, self.min_objects,
                  self.proposals_per_object, self.background_proposals, self.feature_dim]
        if min(counts) < 1 or self.max_objects < self.min_objects:
            raise ValueError(f"invalid scene counts in {self}")
        if self.part_signal_gain <= 0 or min(self.feature_noise_sigma, self.jitter, self.part_gain_spread) < 0:
            raise ValueError("gain must be positive and noise/jitter/spread non-negative")


def prototype_components(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Part and body components (each C x D_raw) of the class prototypes.

    The part component mixes one direction shared by all classes with a
    class-specific one; the body component is purely class-specific. All
    directions are orthonormal when 2C + 1 <= D_raw.
    """
    rng = np.random.default_rng([spec.rng_seed, _PROTO])
    n = 2 * spec.num_classes + 1
    g = rng.normal(size=(spec.feature_dim, n))
    if n <= spec.feature_dim:
        dirs = np.linalg.qr(g)[0].T
    else:
        dirs = (g / np.linalg.norm(g, axis=0)).T
    c = spec.num_classes
    part = spec.part_shared_norm * dirs[2 * c] + spec.part_class_norm * dirs[:c]
    body = spec.body_norm * dirs[c:2 * c]
    return part, body


def class_prototypes(spec: SceneSpec) -> np.ndarray:
    """C x D_raw descriptor of a tight, noise-free whole-object proposal."""
    part, body = prototype_components(spec)
    return part + body


def part_box(full: np.ndarray, part_fraction: float) -> np.ndarray:
    x1, y1, x2, y2 = full
    return np.array([x1, y1, x2, y1 + part_fraction * (y2 - y1)])


def body_box(full: np.ndarray, part_fraction: float) -> np.ndarray:
    x1, y1, x2, y2 = full
    return np.array([x1, y1 + part_fraction * (y2 - y1), x2, y2])


def _intersection(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise intersection areas, [N, M]."""
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    return wh[..., 0] * wh[..., 1]


def overlap_fraction(proposals: np.ndarray, objects: np.ndarray) -> np.ndarray:
    """Share of each proposal's area lying on each object box, [N, M] in [0, 1]."""
    inter = _intersection(proposals, objects)
    area = box_areas(proposals)[:, None]
    out = np.zeros_like(inter)
    np.divide(inter, area, out=out, where=area > 0)
    return np.clip(out, 0.0, 1.0)


def coverage(proposals: np.ndarray, regions: np.ndarray) -> np.ndarray:
    """Share of each region's area inside each proposal, [N, M] in [0, 1]."""
    inter = _intersection(proposals, regions)
    area = box_areas(regions)[None, :]
    out = np.zeros_like(inter)
    np.divide(inter, area, out=out, where=area > 0)
    return np.clip(out, 0.0, 1.0)


def proposal_features(
    proposals: np.ndarray,
    object_boxes: np.ndarray,
    object_classes: Sequence[int],
    components: tuple[np.ndarray, np.ndarray],
    part_signal_gain: float | np.ndarray,
    part_fraction: float,
    noise_sigma: float,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Raw descriptor of each proposal.

    For every object: ``overlap_fraction * (g * part_cov * part_c + body_cov * body_c)``
    where ``part_cov``/``body_cov`` are the shares of the object's part strip and
    remaining body covered by the proposal, and ``g`` is ``part_signal_gain``
    when at least half the proposal lies on the part (1 otherwise); it may be a
    scalar or one value per object. A tight
    whole-object box therefore sees exactly ``part_c + body_c``. Isotropic
    Gaussian noise is added last.
    """
    part_dirs, body_dirs = components
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    feats = np.zeros((len(proposals), part_dirs.shape[1]))
    if len(object_boxes):
        objects = np.asarray(object_boxes, dtype=np.float64).reshape(-1, 4)
        classes = np.asarray(object_classes)
        parts = np.array([part_box(o, part_fraction) for o in objects])
        bodies = np.array([body_box(o, part_fraction) for o in objects])
        frac = overlap_fraction(proposals, objects)
        on_part = overlap_fraction(proposals, parts) >= 0.5
        gain = np.where(on_part, np.broadcast_to(part_signal_gain, (len(objects),)), 1.0)
        feats += (frac * gain * coverage(proposals, parts)) @ part_dirs[classes]
        feats += (frac * coverage(proposals, bodies)) @ body_dirs[classes]
    if noise_sigma > 0:
        if rng is None:
            raise ValueError("noise requires an rng")
        feats += rng.normal(0.0, noise_sigma, size=feats.shape)
    return feats


def _clip_box(b: np.ndarray, spec: SceneSpec, min_size: float = 1.0) -> np.ndarray:
    x1, y1, x2, y2 = b
    x1 = min(max(x1, 0.0), spec.width - min_size)
    y1 = min(max(y1, 0.0), spec.height - min_size)
    x2 = min(max(x2, x1 + min_size), spec.width)
    y2 = min(max(y2, y1 + min_size), spec.height)
    return np.array([x1, y1, x2, y2])


def _jittered(base: np.ndarray, n: int, spec: SceneSpec, rng: np.random.Generator) -> list[np.ndarray]:
    w, h = base[2] - base[0], base[3] - base[1]
    scale = spec.jitter * np.array([w, h, w, h])
    return [_clip_box(base + rng.normal(size=4) * scale, spec) for _ in range(n)]


def generate_image(spec: SceneSpec, components: tuple[np.ndarray, np.ndarray], image_id: str, rng: np.random.Generator) -> ImageSample:
    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    classes, boxes = [], []
    for _ in range(n_obj):
        c = int(rng.integers(spec.num_classes))
        w = rng.uniform(0.25, 0.6) * spec.width
        h = rng.uniform(0.25, 0.6) * spec.height
        x1 = rng.uniform(0.0, spec.width - w)
        y1 = rng.uniform(0.0, spec.height - h)
        classes.append(c)
        boxes.append(np.array([x1, y1, x1 + w, y1 + h]))

    proposals = []
    n_ext = min(spec.extent_proposals, spec.proposals_per_object)
    n_full = (spec.proposals_per_object - n_ext) // 2
    n_part = spec.proposals_per_object - n_ext - n_full
    for b in boxes:
        proposals += _jittered(b, n_full, spec, rng)
        proposals += _jittered(part_box(b, spec.part_fraction), n_part, spec, rng)
        for _ in range(n_ext):
            f = rng.uniform(spec.part_fraction, 1.0)
            proposals += _jittered(part_box(b, f), 1, spec, rng)
        for _ in range(spec.context_proposals):
            w, h = b[2] - b[0], b[3] - b[1]
            shift = rng.uniform(0.3, 0.7) * np.array([w, h]) * rng.choice([-1.0, 1.0], size=2)
            shift *= rng.permutation([1.0, rng.uniform(0.0, 1.0)])
            proposals.append(_clip_box(b + np.concatenate([shift, shift]), spec))
    for _ in range(spec.background_proposals):
        w = rng.uniform(0.1, 0.5) * spec.width
        h = rng.uniform(0.1, 0.5) * spec.height
        x1 = rng.uniform(0.0, spec.width - w)
        y1 = rng.uniform(0.0, spec.height - h)
        proposals.append(np.array([x1, y1, x1 + w, y1 + h]))
    proposals = np.array(proposals)
    order = rng.permutation(len(proposals))
    proposals = proposals[order]

    gain = np.full(n_obj, spec.part_signal_gain)
    if spec.part_gain_spread > 0:
        gain *= np.exp(rng.uniform(-spec.part_gain_spread, spec.part_gain_spread, size=n_obj))
    feats = proposal_features(proposals, np.array(boxes), classes, components, gain,
                              spec.part_fraction, spec.feature_noise_sigma, rng)
    labels = np.zeros(spec.num_classes, dtype=np.int64)
    labels[classes] = 1
    gt = [(c + 1, Box(*map(float, b))) for c, b in zip(classes, boxes)]
    return ImageSample(image_id=image_id, labels=labels, proposals=proposals, features=feats, gt=gt)


def generate(spec: SceneSpec) -> tuple[list[ImageSample], list[ImageSample]]:
    """Train and test splits; each image draws from its own seeded stream."""
    protos = prototype_components(spec)
    train = [generate_image(spec, protos, f"train_{i:05d}", np.random.default_rng([spec.rng_seed, _TRAIN, i]))
             for i in range(spec.images_train)]
    test = [generate_image(spec, protos, f"test_{i:05d}", np.random.default_rng([spec.rng_seed, _TEST, i]))
            for i in range(spec.images_test)]
    return train, test


# -- files -------------------------------------------------------------------------


def _sample_record(s: ImageSample) -> dict:
    rec = {
        "image_id": s.image_id,
        "labels": [int(c) + 1 for c in np.flatnonzero(s.labels)],
        "proposals": s.proposals.tolist(),
        "features": s.features.tolist(),
    }
    if s.gt is not None:
        rec["gt"] = [{"class": int(c), "box": list(b.as_tuple())} for c, b in s.gt]
    return rec


def dumps_dataset(samples: Sequence[ImageSample], num_classes: int, feature_dim: int) -> str:
    header = {"format": DATASET_FORMAT, "version": DATASET_VERSION,
              "num_classes": num_classes, "feature_dim": feature_dim}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(_sample_record(s), sort_keys=True) for s in samples]
    return "\n".join(lines) + "\n"


def save_dataset(path: str | Path, samples: Sequence[ImageSample], num_classes: int, feature_dim: int) -> None:
    Path(path).write_text(dumps_dataset(samples, num_classes, feature_dim))


def _field(rec: dict, name: str, lineno: int, required: bool = True):
    if name not in rec:
        if required:
            raise DatasetFormatError(f"line {lineno}: missing field {name!r}")
        return None
    return rec[name]


def _parse_sample(rec: dict, lineno: int, num_classes: int, feature_dim: int) -> ImageSample:
    image_id = _field(rec, "image_id", lineno)
    if not isinstance(image_id, str):
        raise DatasetFormatError(f"line {lineno}: field 'image_id' must be a string")
    labels = np.zeros(num_classes, dtype=np.int64)
    for c in _field(rec, "labels", lineno):
        if not isinstance(c, int) or not 1 <= c <= num_classes:
            raise DatasetFormatError(f"line {lineno}: field 'labels' has invalid class id {c!r}")
        labels[c - 1] = 1
    try:
        proposals = np.array(_field(rec, "proposals", lineno), dtype=np.float64).reshape(-1, 4)
    except (ValueError, TypeError) as exc:
        raise DatasetFormatError(f"line {lineno}: field 'proposals' is not a list of 4-number boxes") from exc
    try:
        features = np.array(_field(rec, "features", lineno), dtype=np.float64).reshape(len(proposals), feature_dim)
    except (ValueError, TypeError) as exc:
        raise DatasetFormatError(
            f"line {lineno}: field 'features' must be {len(proposals)} rows of {feature_dim} numbers") from exc
    gt = None
    raw_gt = _field(rec, "gt", lineno, required=False)
    if raw_gt is not None:
        gt = []
        for g in raw_gt:
            try:
                gt.append((int(g["class"]), Box(*map(float, g["box"]))))
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(f"line {lineno}: field 'gt' has a malformed entry {g!r}") from exc
    return ImageSample(image_id=image_id, labels=labels, proposals=proposals, features=features, gt=gt)


def loads_dataset(text: str) -> tuple[list[ImageSample], dict]:
    lines = text.splitlines()
    if not lines:
        raise DatasetFormatError("line 1: missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"line 1: header is not JSON ({exc.msg})") from exc
    if header.get("format") != DATASET_FORMAT:
        raise DatasetFormatError(f"line 1: field 'format' is {header.get('format')!r}, expected {DATASET_FORMAT!r}")
    num_classes, feature_dim = int(header["num_classes"]), int(header["feature_dim"])
    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"line {lineno}: not valid JSON ({exc.msg})") from exc
        samples.append(_parse_sample(rec, lineno, num_classes, feature_dim))
    return samples, header


def load_dataset(path: str | Path) -> tuple[list[ImageSample], dict]:
    return loads_dataset(Path(path).read_text())


def spec_dict(spec: SceneSpec) -> dict:
    return asdict(spec)


def dumps_detections(per_image: Iterable[tuple[str, Sequence[Detection]]]) -> str:
    lines = []
    for image_id, dets in per_image:
        for d in dets:
            lines.append(json.dumps({"image_id": image_id, "class": d.class_id,
                                     "box": list(d.box.as_tuple()), "score": d.score}, sort_keys=True))
    return "".join(line + "\n" for line in lines)


def loads_detections(text: str) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            det = Detection(Box(*map(float, rec["box"])), int(rec["class"]), float(rec["score"]))
            out.setdefault(rec["image_id"], []).append(det)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"line {lineno}: malformed detection record ({exc})") from exc
    return out

"""Annotation schema, dataset I/O, preprocessing, and the synthetic generator.

Annotations are line-delimited JSON, one record per image:

    {"image": "scenes/scene_00012.png", "width": 128, "height": 128,
     "points": [[x, y], ...], "boxes": [[x1, y1, x2, y2], ...],
     "category": "disc_small"}

Split files list one image identifier (the record's ``image`` value) per
line. A dataset directory holds ``annotations.jsonl``, the rasters, split
files, and a ``manifest.json`` recording the generator config and seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .imageops import bilinear_resize, to_float, to_uint8

MAX_BOXES = 3


class AnnotationError(ValueError):
    """Raised when a record or sample violates the schema invariants."""


@dataclass
class AnnotatedImage:
    """One annotated sample: dot labels plus 1-3 exemplar boxes."""

    image_path: str
    width: int
    height: int
    points: list[list[float]]
    boxes: list[list[float]]
    category: str

    def validate(self) -> None:
        ident = self.image_path
        if not self.category:
            raise AnnotationError(f"{ident}: empty category")
        if not (1 <= len(self.boxes) <= MAX_BOXES):
            raise AnnotationError(f"{ident}: box count {len(self.boxes)} outside [1, {MAX_BOXES}]")
        for p in self.points:
            if not (0 <= p[0] < self.width and 0 <= p[1] < self.height):
                raise AnnotationError(f"{ident}: point {p} out of bounds {self.width}x{self.height}")
        for b in self.boxes:
            if not (0 <= b[0] < b[2] <= self.width and 0 <= b[1] < b[3] <= self.height):
                raise AnnotationError(f"{ident}: box {b} out of bounds {self.width}x{self.height}")

    def to_record(self) -> dict:
        return {
            "image": self.image_path,
            "width": self.width,
            "height": self.height,
            "points": [[float(x), float(y)] for x, y in self.points],
            "boxes": [[float(v) for v in b] for b in self.boxes],
            "category": self.category,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "AnnotatedImage":
        try:
            ann = cls(
                image_path=rec["image"],
                width=int(rec["width"]),
                height=int(rec["height"]),
                points=[[float(x), float(y)] for x, y in rec["points"]],
                boxes=[[float(v) for v in b] for b in rec["boxes"]],
                category=rec["category"],
            )
        except (KeyError, TypeError, ValueError) as e:
            raise AnnotationError(f"{rec.get('image', '<unknown>')}: malformed record ({e})")
        ann.validate()
        return ann


@dataclass
class Sample:
    """In-memory sample: raster plus annotations, ready for the model.

    ``exemplar_source`` keeps the frame the boxes refer to; cropping keeps the
    original frame there so exemplar pixel content never depends on crop
    placement.
    """

    image: np.ndarray  # float64 [H, W, 3] in [0, 1]
    points: np.ndarray  # [n, 2] of (x, y)
    boxes: list[tuple[float, float, float, float]]
    category: str
    exemplar_source: Optional[np.ndarray] = None

    @property
    def exemplar_image(self) -> np.ndarray:
        return self.image if self.exemplar_source is None else self.exemplar_source


# -- dataset I/O ---------------------------------------------------------------


def write_annotations(records: list[AnnotatedImage], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_record()) + "\n")


def read_annotations(path: str | Path) -> list[AnnotatedImage]:
    path = Path(path)
    if not path.exists():
        raise AnnotationError(f"{path}: annotation file missing")
    out = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise AnnotationError(f"{path}:{ln}: invalid JSON ({e})")
            out.append(AnnotatedImage.from_record(rec))
    return out


def load_dataset(root: str | Path, split_file: str | Path) -> list[AnnotatedImage]:
    """Annotations for the identifiers listed in ``split_file``, validated.

    Relative split names resolve against the dataset root first.
    """
    root = Path(root)
    split_path = Path(split_file)
    if not split_path.is_absolute() and (root / split_file).exists():
        split_path = root / split_file
    if not split_path.exists():
        raise AnnotationError(f"{split_path}: split file missing")
    wanted = [ln.strip() for ln in split_path.read_text().splitlines() if ln.strip()]
    by_id = {a.image_path: a for a in read_annotations(root / "annotations.jsonl")}
    missing = [w for w in wanted if w not in by_id]
    if missing:
        raise AnnotationError(f"split lists unknown identifiers: {missing[:4]}")
    return [by_id[w] for w in wanted]


def load_sample(root: str | Path, ann: AnnotatedImage) -> Sample:
    img_path = Path(root) / ann.image_path
    if not img_path.exists():
        raise AnnotationError(f"{ann.image_path}: raster missing under {root}")
    with Image.open(img_path) as im:
        raster = to_float(np.asarray(im.convert("RGB")))
    return Sample(
        image=raster,
        points=np.asarray(ann.points, dtype=np.float64).reshape(-1, 2),
        boxes=[tuple(b) for b in ann.boxes],
        category=ann.category,
    )


# -- preprocessing ----------------------------------------------------------------


def resize_shortest_side(sample: Sample, target: int = 384) -> Sample:
    """Isotropic rescale so min(height, width) == target; labels follow."""
    h, w = sample.image.shape[:2]
    short = min(h, w)
    if short == target:
        return sample
    f = target / short
    nh, nw = (target, int(round(w * f))) if h <= w else (int(round(h * f)), target)
    img = bilinear_resize(sample.image, nh, nw)
    return Sample(
        image=img,
        points=sample.points * f,
        boxes=[(b[0] * f, b[1] * f, b[2] * f, b[3] * f) for b in sample.boxes],
        category=sample.category,
    )


def crop_training_patch(sample: Sample, size: int, rng: np.random.Generator) -> Sample:
    """Uniform random size x size crop; dots translate, exemplar content stays.

    The pre-crop frame is retained as ``exemplar_source`` so exemplar patches
    are always cut from the full image regardless of crop placement.
    """
    h, w = sample.image.shape[:2]
    if h < size or w < size:
        raise ValueError(f"sample {h}x{w} smaller than crop size {size}")
    y0 = int(rng.integers(0, h - size + 1))
    x0 = int(rng.integers(0, w - size + 1))
    pts = sample.points
    if len(pts):
        keep = (
            (pts[:, 0] >= x0)
            & (pts[:, 0] < x0 + size)
            & (pts[:, 1] >= y0)
            & (pts[:, 1] < y0 + size)
        )
        pts = pts[keep] - np.array([x0, y0], dtype=np.float64)
    return Sample(
        image=sample.image[y0 : y0 + size, x0 : x0 + size].copy(),
        points=pts.copy(),
        boxes=list(sample.boxes),
        category=sample.category,
        exemplar_source=sample.exemplar_image,
    )


# -- synthetic scenes ----------------------------------------------------------------

FAMILIES = ("disc", "ellipse", "cluster", "ring")


@dataclass
class SynthConfig:
    """Recipe for one synthetic scene category."""

    category: str = "disc_small"
    width: int = 128
    height: int = 128
    family: str = "disc"
    count_range: tuple[int, int] = (4, 20)
    radius_range: tuple[float, float] = (4.0, 9.0)
    distractor_family: str = "ring"
    distractor_count_range: tuple[int, int] = (0, 3)
    distractor_radius_range: Optional[tuple[float, float]] = None  # None: radius_range
    base_color: tuple[float, float, float] = (0.85, 0.25, 0.2)
    color_jitter: float = 0.08
    # None makes distractors target-coloured (pure size decoys)
    distractor_color: Optional[tuple[float, float, float]] = (0.45, 0.45, 0.5)
    background: tuple[float, float, float] = (0.12, 0.14, 0.1)
    background_noise: float = 0.03
    max_overlap: float = 0.15
    margin: float = 0.0  # extra keep-out from the borders, px; negative lets
    # targets clip the canvas edge (centres always stay >= 2 px inside)
    seed: int = 0

    def __post_init__(self):
        if self.radius_range[0] <= 0 or self.radius_range[1] < self.radius_range[0]:
            raise ValueError(f"bad radius range {self.radius_range}")
        if self.count_range[0] < 0 or self.count_range[1] < self.count_range[0]:
            raise ValueError(f"bad count range {self.count_range}")
        if self.family not in FAMILIES or self.distractor_family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}")

    def to_dict(self) -> dict:
        return asdict(self)


def _paint_shape(img, cx, cy, rx, ry, color, family, rng):
    """Anti-aliased shape stamp; returns the tight (x1, y1, x2, y2) extent."""
    h, w = img.shape[:2]
    if family == "cluster":
        # glob count scales with the cluster radius while glob size stays
        # near-constant (for rx >= 15), so a window smaller than the cluster
        # sees interchangeable globs and cannot tell how much of an instance
        # (or of which instance) it is looking at
        ext = 0.0
        n_globs = int(np.clip(round((rx / 12.0) ** 1.5 * rng.uniform(0.75, 1.3)), 2, 10))
        for gi in range(n_globs):
            ang = rng.uniform(0, 2 * np.pi)
            dist = rng.uniform(0.25, 0.75) * rx if gi else rng.uniform(0.0, 0.3) * rx
            dx, dy = dist * np.cos(ang), dist * np.sin(ang)
            rr = rng.uniform(9.0, 14.0) if rx >= 15 else rx * rng.uniform(0.45, 0.7)
            _paint_shape(img, cx + dx, cy + dy, rr, rr, color, "disc", rng)
            ext = max(ext, abs(dx) + rr, abs(dy) + rr)
        rx = ry = ext
    else:
        x0, x1 = max(0, int(cx - rx - 2)), min(w, int(cx + rx + 3))
        y0, y1 = max(0, int(cy - ry - 2)), min(h, int(cy + ry + 3))
        ys = np.arange(y0, y1, dtype=np.float64)[:, None]
        xs = np.arange(x0, x1, dtype=np.float64)[None, :]
        d = np.sqrt(((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2) * min(rx, ry)
        if family == "ring":
            cov = np.clip(min(rx, ry) - d + 0.5, 0.0, 1.0) - np.clip(
                0.55 * min(rx, ry) - d + 0.5, 0.0, 1.0
            )
        else:
            cov = np.clip(min(rx, ry) - d + 0.5, 0.0, 1.0)
        region = img[y0:y1, x0:x1]
        region += cov[:, :, None] * (np.asarray(color)[None, None, :] - region)
    return (
        max(0.0, cx - rx),
        max(0.0, cy - ry),
        min(float(w), cx + rx),
        min(float(h), cy + ry),
    )


def synth_scene(config: SynthConfig) -> tuple[Sample, AnnotatedImage]:
    """Deterministic synthetic scene: targets, distractors, exact annotations."""
    if config.count_range[1] < 1:
        raise ValueError(f"count range {config.count_range} can never draw a positive count")
    rng = np.random.default_rng(config.seed)
    h, w = config.height, config.width
    n = 0
    while n == 0:  # empty scenes are regenerated
        n = int(rng.integers(config.count_range[0], config.count_range[1] + 1))

    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = np.asarray(config.background)[None, None, :]
    img += rng.uniform(-config.background_noise, config.background_noise, size=(h, w, 1))

    placed: list[tuple[float, float, float]] = []  # (cx, cy, radius)
    extents: list[tuple] = []
    lo, hi = config.radius_range
    for _ in range(n):
        r = rng.uniform(lo, hi)
        ok = None
        for _try in range(200):
            m = max(2.0, r + 1.0 + config.margin)
            if w - m <= m or h - m <= m:
                break
            cx = rng.uniform(m, w - m)
            cy = rng.uniform(m, h - m)
            if all(
                np.hypot(cx - px, cy - py) >= (r + pr) * (1.0 - config.max_overlap)
                for px, py, pr in placed
            ):
                ok = (cx, cy)
                break
        if ok is None:
            continue  # keep however many targets fit; points stay exact
        cx, cy = ok
        ry = r if config.family != "ellipse" else r * rng.uniform(0.55, 0.8)
        color = np.clip(
            np.asarray(config.base_color) + rng.uniform(-1, 1, 3) * config.color_jitter, 0, 1
        )
        ext = _paint_shape(img, cx, cy, r, ry, color, config.family, rng)
        placed.append((cx, cy, r))
        extents.append(ext)

    nd = int(rng.integers(config.distractor_count_range[0], config.distractor_count_range[1] + 1))
    dlo, dhi = config.distractor_radius_range or (lo, hi)
    dcolor = config.distractor_color if config.distractor_color is not None else config.base_color
    for _ in range(nd):
        r = rng.uniform(dlo, dhi)
        cx = rng.uniform(r + 1, w - r - 1)
        cy = rng.uniform(r + 1, h - r - 1)
        if any(np.hypot(cx - px, cy - py) < (r + pr) for px, py, pr in placed):
            continue  # distractors never overlap targets
        _paint_shape(img, cx, cy, r, r, dcolor, config.distractor_family, rng)

    img = np.clip(img, 0.0, 1.0)
    points = np.array([[cx, cy] for cx, cy, _ in placed], dtype=np.float64)
    n_boxes = min(MAX_BOXES, len(placed))
    idx = rng.choice(len(placed), size=n_boxes, replace=False)
    boxes = [extents[i] for i in idx]
    sample = Sample(image=img, points=points, boxes=[tuple(b) for b in boxes], category=config.category)
    ann = AnnotatedImage(
        image_path="",  # filled by the dataset writer
        width=w,
        height=h,
        points=[[float(x), float(y)] for x, y in points],
        boxes=[[float(v) for v in b] for b in boxes],
        category=config.category,
    )
    return sample, ann


def build_synthetic_dataset(
    out_dir: str | Path,
    categories: list[SynthConfig],
    n_scenes: int,
    seed: int,
) -> list[AnnotatedImage]:
    """Render ``n_scenes`` scenes (categories round-robin), write the dataset."""
    if n_scenes < 1:
        raise ValueError(f"n_scenes must be >= 1, got {n_scenes}")
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n_scenes):
        cat = categories[i % len(categories)]
        scene_seed = int(np.random.default_rng([seed, i]).integers(0, 2**31 - 1))
        sample, ann = synth_scene(replace(cat, seed=scene_seed))
        name = f"scenes/scene_{i:05d}.png"
        Image.fromarray(to_uint8(sample.image), mode="RGB").save(out / name, format="PNG")
        ann.image_path = name
        ann.validate()
        records.append(ann)
    write_annotations(records, out / "annotations.jsonl")
    manifest = {
        "seed": seed,
        "n_scenes": n_scenes,
        "categories": [c.to_dict() for c in categories],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return records


def make_splits(
    records: list[AnnotatedImage],
    ratios: tuple[float, ...],
    seed: int,
    names: tuple[str, ...] = ("train", "val"),
    category_disjoint: bool = False,
) -> dict[str, list[str]]:
    """Partition records into named splits; optionally category-disjoint."""
    if len(ratios) != len(names):
        raise ValueError("one ratio per split name required")
    rng = np.random.default_rng(seed)
    splits: dict[str, list[str]] = {n: [] for n in names}
    if category_disjoint:
        cats = sorted({r.category for r in records})
        if len(cats) < len(names):
            raise ValueError(
                f"cannot split {len(cats)} categories into {len(names)} disjoint parts"
            )
        order = list(rng.permutation(cats))
        # allocate category counts by ratio, at least one each
        counts = [max(1, int(round(len(cats) * f))) for f in ratios]
        while sum(counts) > len(cats):
            counts[int(np.argmax(counts))] -= 1
        while sum(counts) < len(cats):
            counts[int(np.argmax(ratios))] += 1
        pos = 0
        for name, c in zip(names, counts):
            chosen = set(order[pos : pos + c])
            pos += c
            splits[name] = [r.image_path for r in records if r.category in chosen]
    else:
        order = rng.permutation(len(records))
        bounds = np.cumsum([int(round(len(records) * f)) for f in ratios])
        bounds[-1] = len(records)
        start = 0
        for name, end in zip(names, bounds):
            splits[name] = [records[i].image_path for i in order[start:end]]
            start = end
    return splits


def write_splits(splits: dict[str, list[str]], out_dir: str | Path) -> None:
    out = Path(out_dir)
    for name, ids in splits.items():
        (out / f"{name}.txt").write_text("".join(i + "\n" for i in ids))

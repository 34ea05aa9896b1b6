"""Synthetic shapes-world dataset, class splits and episode sampling.

Each class is a (shape family, texture family) pair.  Colours are drawn
per instance, so a class can only be recognised from geometry and texture.
Class ids are laid out as a Latin square over the four splits: every split
holds out one class of each shape family, each with a different texture,
so the training classes still cover every shape and every texture.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

IGNORE_INDEX = 255
NUM_SPLITS = 4

SHAPES = ("circle", "square", "triangle", "cross", "diamond", "ring", "hexagon", "star")
TEXTURES = ("solid", "hstripes", "checker", "dots")

MIN_FG_FRACTION = 0.05
MAX_FG_FRACTION = 0.5


class DataError(ValueError):
    """Invalid generator configuration or unsatisfiable sampling request."""


@dataclass(frozen=True)
class GenConfig:
    num_classes: int = 16
    images_per_class: int = 50
    image_size: int = 64
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < NUM_SPLITS or self.num_classes % NUM_SPLITS:
            raise DataError(f"num_classes={self.num_classes} must be a positive multiple of {NUM_SPLITS}")
        if self.num_classes // NUM_SPLITS > len(SHAPES):
            raise DataError(f"num_classes={self.num_classes} exceeds {NUM_SPLITS * len(SHAPES)} supported classes")
        if self.image_size < 16 or self.image_size % 8:
            raise DataError(f"image_size={self.image_size} must be a multiple of 8 and at least 16")
        if self.images_per_class < 1:
            raise DataError("images_per_class must be >= 1")


@dataclass
class ImageSample:
    image: np.ndarray  # float32 [3, H, W] in [0, 1]
    label_map: np.ndarray  # uint8 [H, W], 0 = background
    class_ids_present: frozenset
    sample_id: int = -1


@dataclass(frozen=True)
class SplitConfig:
    split_index: int
    train_classes: tuple
    test_classes: tuple


@dataclass
class Episode:
    supports: list  # [(image [3,H,W], binary mask [H,W])] * k
    query_image: np.ndarray
    query_mask: np.ndarray
    target_class: int
    support_ids: tuple = ()
    query_id: int = -1
    support_labels: list = field(default_factory=list)
    query_label: np.ndarray | None = None

    @property
    def shots(self) -> int:
        return len(self.supports)


class ShapesDataset(list):
    """A list of :class:`ImageSample` with a per-class index."""

    def __init__(self, samples: Sequence[ImageSample] = (), config: GenConfig | None = None):
        super().__init__(samples)
        self.config = config
        self.by_class: dict[int, list[int]] = {}
        for i, s in enumerate(self):
            for c in s.class_ids_present:
                self.by_class.setdefault(int(c), []).append(i)


def class_family(class_id: int, num_classes: int) -> tuple[int, int]:
    """Return the (shape, texture) family indices of a 1-based class id."""
    per_split = num_classes // NUM_SPLITS
    q, j = divmod(class_id - 1, per_split)
    return j, (j + q) % len(TEXTURES)


def _shape_mask(shape: str, yy, xx, cy, cx, r, angle) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if shape == "circle":
        return dx**2 + dy**2 <= r**2
    if shape == "square":
        return (np.abs(u) <= 0.8 * r) & (np.abs(v) <= 0.8 * r)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if shape == "ring":
        d2 = dx**2 + dy**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if shape == "cross":
        arm = 0.33 * r
        return ((np.abs(u) <= arm) & (np.abs(v) <= r)) | ((np.abs(v) <= arm) & (np.abs(u) <= r))
    if shape == "triangle":
        # upright, so horizontal flips keep the class geometry
        return (dy <= 0.5 * r) & (dy >= -r + 2 * np.abs(dx) * 0.75)
    if shape == "hexagon":
        ax, ay = np.abs(dx), np.abs(dy)
        return (ay <= 0.866 * r) & (0.866 * ax + 0.5 * ay <= 0.866 * r)
    if shape == "star":
        theta = np.arctan2(dy, dx) - angle
        rad = r * (0.55 + 0.45 * np.cos(5 * theta) ** 2)
        return dx**2 + dy**2 <= rad**2
    raise DataError(f"unknown shape {shape!r}")


def _texture(texture: str, yy, xx, rng: np.random.Generator) -> np.ndarray:
    """Binary pattern selecting the secondary colour."""
    period = int(rng.integers(4, 7))
    oy, ox = rng.integers(0, period, size=2)
    if texture == "solid":
        return np.zeros(yy.shape, dtype=bool)
    if texture == "hstripes":
        return ((yy + oy) // (period // 2)) % 2 == 1
    if texture == "checker":
        half = max(period // 2, 2)
        return (((yy + oy) // half) + ((xx + ox) // half)) % 2 == 1
    if texture == "dots":
        return ((yy + oy) % period < 2) & ((xx + ox) % period < 2)
    raise DataError(f"unknown texture {texture!r}")


def _distinct_colour(rng: np.random.Generator, avoid: np.ndarray, min_dist: float = 0.45) -> np.ndarray:
    for _ in range(64):
        col = rng.uniform(0.0, 1.0, size=3)
        if np.linalg.norm(col - avoid) >= min_dist:
            return col
    return 1.0 - avoid


def _render_sample(rng: np.random.Generator, class_id: int, num_classes: int, size: int):
    shape_idx, tex_idx = class_family(class_id, num_classes)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    bg = rng.uniform(0.15, 0.85, size=3)
    img = np.broadcast_to(bg[:, None, None], (3, size, size)).copy()
    img += rng.normal(0.0, 0.04, size=img.shape)

    # clutter: thin line segments and specks, never a class shape
    for _ in range(int(rng.integers(2, 6))):
        col = rng.uniform(0, 1, size=3)
        y0, x0, y1, x1 = rng.uniform(0, size - 1, size=4)
        n = int(max(abs(y1 - y0), abs(x1 - x0))) + 1
        ys = np.round(np.linspace(y0, y1, n)).astype(int)
        xs = np.round(np.linspace(x0, x1, n)).astype(int)
        img[:, ys, xs] = col[:, None]
    for _ in range(int(rng.integers(3, 9))):
        y, x = rng.integers(0, size - 1, size=2)
        img[:, y : y + 2, x : x + 2] = rng.uniform(0, 1, size=3)[:, None, None]

    area = size * size
    while True:
        r = rng.uniform(0.16, 0.36) * size
        cy, cx = rng.uniform(r, size - 1 - r, size=2)
        angle = rng.uniform(0, np.pi / 2)
        mask = _shape_mask(SHAPES[shape_idx], yy, xx, cy, cx, r, angle)
        frac = mask.sum() / area
        if MIN_FG_FRACTION <= frac <= MAX_FG_FRACTION:
            break

    primary = _distinct_colour(rng, bg)
    secondary = _distinct_colour(rng, primary, 0.35)
    pattern = _texture(TEXTURES[tex_idx], yy.astype(int), xx.astype(int), rng)
    obj = np.where(pattern[None], secondary[:, None, None], primary[:, None, None])
    obj = obj + rng.normal(0.0, 0.03, size=obj.shape)
    img = np.where(mask[None], obj, img)

    label = np.where(mask, class_id, 0).astype(np.uint8)
    return np.clip(img, 0.0, 1.0).astype(np.float32), label


def generate_dataset(config: GenConfig) -> ShapesDataset:
    """Render ``images_per_class`` samples for each class, class-major order.

    Output is a pure function of ``config``.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    samples = []
    for class_id in range(1, config.num_classes + 1):
        for _ in range(config.images_per_class):
            image, label = _render_sample(rng, class_id, config.num_classes, config.image_size)
            samples.append(ImageSample(image, label, frozenset({class_id}), sample_id=len(samples)))
    return ShapesDataset(samples, config)


def make_splits(num_classes: int, split_index: int) -> SplitConfig:
    if not 0 <= split_index < NUM_SPLITS:
        raise DataError(f"split_index must be in 0..{NUM_SPLITS - 1}, got {split_index}")
    if num_classes < NUM_SPLITS or num_classes % NUM_SPLITS:
        raise DataError(f"num_classes={num_classes} must be a positive multiple of {NUM_SPLITS}")
    per = num_classes // NUM_SPLITS
    test = tuple(range(split_index * per + 1, (split_index + 1) * per + 1))
    train = tuple(c for c in range(1, num_classes + 1) if c not in test)
    return SplitConfig(split_index, train, test)


def binarize_mask(label_map: np.ndarray, class_id: int) -> np.ndarray:
    return (np.asarray(label_map) == class_id).astype(np.uint8)


def sample_episode(
    dataset: Sequence[ImageSample],
    split: SplitConfig,
    phase: str,
    k: int,
    rng: np.random.Generator,
    target_class: int | None = None,
) -> Episode:
    """Draw one k-shot episode for a uniformly chosen class of ``phase``.

    Support and query images are distinct samples of the same class.
    """
    if phase not in ("train", "test"):
        raise DataError(f"phase must be 'train' or 'test', got {phase!r}")
    if k < 1:
        raise DataError("k must be >= 1")
    classes = split.train_classes if phase == "train" else split.test_classes
    by_class = getattr(dataset, "by_class", None)
    if by_class is None:
        by_class = ShapesDataset(dataset).by_class
    if target_class is None:
        target_class = int(classes[rng.integers(len(classes))])
    elif target_class not in classes:
        raise DataError(f"class {target_class} is not a {phase} class of split {split.split_index}")
    pool = by_class.get(target_class, [])
    if len(pool) < k + 1:
        raise DataError(f"class {target_class} has {len(pool)} images, need at least {k + 1}")
    picks = rng.choice(len(pool), size=k + 1, replace=False)
    ids = [pool[i] for i in picks]
    support_samples = [dataset[i] for i in ids[:k]]
    query = dataset[ids[k]]
    supports = [(s.image, binarize_mask(s.label_map, target_class)) for s in support_samples]
    return Episode(
        supports=supports,
        query_image=query.image,
        query_mask=binarize_mask(query.label_map, target_class),
        target_class=target_class,
        support_ids=tuple(ids[:k]),
        query_id=ids[k],
        support_labels=[s.label_map for s in support_samples],
        query_label=query.label_map,
    )


def weaken_annotation(mask: np.ndarray, mode: str, rng: np.random.Generator) -> np.ndarray:
    """Turn a dense binary mask into a scribble or a filled bounding box."""
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise DataError("cannot weaken an empty mask")
    labels, n = ndimage.label(mask)
    if mode == "bbox":
        comp = int(rng.integers(1, n + 1))
        ys, xs = np.nonzero(labels == comp)
        out = np.zeros(mask.shape, dtype=np.uint8)
        out[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1] = 1
        return out
    if mode == "scribble":
        return _scribble(mask, labels, n, rng)
    raise DataError(f"unknown annotation mode {mode!r}")


_STEPS = ((-1, 0), (1, 0), (0, -1), (0, 1))


def _scribble(mask, labels, n, rng) -> np.ndarray:
    sizes = ndimage.sum(mask, labels, index=np.arange(1, n + 1))
    comp = labels == (int(np.argmax(sizes)) + 1)
    total_fg = int(mask.sum())
    length = max(10, int(round(0.05 * total_fg)))
    cells = np.argwhere(comp)
    y, x = cells[rng.integers(len(cells))]
    path = [(int(y), int(x))]
    visited = {path[0]}
    heading = _STEPS[int(rng.integers(4))]
    h, w = mask.shape
    for _ in range(length - 1):
        options = []
        for dy, dx in _STEPS:
            ny, nx = path[-1][0] + dy, path[-1][1] + dx
            if 0 <= ny < h and 0 <= nx < w and comp[ny, nx]:
                options.append((dy, dx))
        if not options:
            break
        fresh = [o for o in options if (path[-1][0] + o[0], path[-1][1] + o[1]) not in visited]
        pool = fresh or options
        # keep heading with probability 0.7 so the walk looks like a stroke
        if heading in pool and rng.random() < 0.7:
            step = heading
        else:
            step = pool[int(rng.integers(len(pool)))]
        heading = step
        nxt = (path[-1][0] + step[0], path[-1][1] + step[1])
        path.append(nxt)
        visited.add(nxt)

    budget = max(1, int(0.2 * total_fg))
    structure = ndimage.generate_binary_structure(2, 1)
    for end in range(len(path), 0, -1):
        line = np.zeros(mask.shape, dtype=bool)
        ys, xs = zip(*path[:end])
        line[list(ys), list(xs)] = True
        out = ndimage.binary_dilation(line, structure=structure) & comp
        if out.sum() <= budget or end == 1:
            if out.sum() > budget:
                out = line
            return out.astype(np.uint8)
    raise AssertionError("unreachable")


# -- persistence -------------------------------------------------------------

MANIFEST = "manifest.json"


def save_dataset(dataset: ShapesDataset, root: str | Path) -> Path:
    """Write PNG images, PNG label maps and a JSON manifest under ``root``."""
    from PIL import Image

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in dataset:
        name = f"{s.sample_id:05d}.png"
        rgb = np.round(np.transpose(s.image, (1, 2, 0)) * 255).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(root / "images" / name)
        Image.fromarray(s.label_map.astype(np.uint8), mode="L").save(root / "labels" / name)
        entries.append(
            {
                "id": s.sample_id,
                "image": f"images/{name}",
                "label": f"labels/{name}",
                "classes": sorted(int(c) for c in s.class_ids_present),
                "sha256": hashlib.sha256(rgb.tobytes() + s.label_map.tobytes()).hexdigest(),
            }
        )
    cfg = dataset.config
    num_classes = cfg.num_classes if cfg else max(max(e["classes"]) for e in entries)
    manifest = {
        "format": "oneshotseg-shapes/1",
        "generator": vars(cfg) if cfg else None,
        "classes": [
            {"id": c, "shape": SHAPES[class_family(c, num_classes)[0]], "texture": TEXTURES[class_family(c, num_classes)[1]]}
            for c in range(1, num_classes + 1)
        ],
        "ignore_index": IGNORE_INDEX,
        "samples": entries,
    }
    path = root / MANIFEST
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_dataset(root: str | Path) -> ShapesDataset:
    """Read a dataset written by :func:`save_dataset`.

    Images come back quantised to 8 bits.
    """
    from PIL import Image

    root = Path(root)
    try:
        manifest = json.loads((root / MANIFEST).read_text())
    except FileNotFoundError as exc:
        raise DataError(f"no {MANIFEST} in {root}") from exc
    samples = []
    for e in manifest["samples"]:
        rgb = np.asarray(Image.open(root / e["image"]).convert("RGB"), dtype=np.float32) / 255.0
        label = np.asarray(Image.open(root / e["label"]), dtype=np.uint8)
        samples.append(ImageSample(np.ascontiguousarray(rgb.transpose(2, 0, 1)), label, frozenset(e["classes"]), e["id"]))
    gen = manifest.get("generator")
    return ShapesDataset(samples, GenConfig(**gen) if gen else None)

"""Synthetic referential environment: ambiguous scenes of colored, sized,
categorized boxes standing in for images.

Scenes are generated by seeded rejection sampling and always satisfy two
invariants: at least one category appears twice (so the category name alone
never identifies the target) and no two objects overlap with IoU above 0.5.
Generation is a pure function of (seed, config).
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import BBox, iou

MIN_OBJECT_AREA = 0.0004  # a 2% x 2% box
MAX_PAIRWISE_IOU = 0.5
SIDE_RANGE = (0.18, 0.6)


@dataclass(frozen=True)
class SceneConfig:
    grid_size: int = 8
    max_objects: int = 6
    n_categories: int = 8
    n_colors: int = 6
    n_sizes: int = 3
    max_attempts: int = 500

    @property
    def n_channels(self) -> int:
        return self.n_categories + self.n_colors + self.n_sizes

    def to_dict(self) -> dict:
        return {
            "grid_size": self.grid_size,
            "max_objects": self.max_objects,
            "n_categories": self.n_categories,
            "n_colors": self.n_colors,
            "n_sizes": self.n_sizes,
            "max_attempts": self.max_attempts,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(**{k: int(v) for k, v in d.items()})


@dataclass(frozen=True)
class SceneObject:
    category: int
    color: int
    size_class: int
    bbox: BBox

    def __post_init__(self) -> None:
        if self.bbox.area < MIN_OBJECT_AREA:
            raise ValueError(f"object box too small: area={self.bbox.area}")


@dataclass(frozen=True)
class Scene:
    scene_id: int
    objects: tuple[SceneObject, ...]
    rng_seed: int

    def validate(self, cfg: SceneConfig) -> None:
        if not (2 <= len(self.objects) <= cfg.max_objects):
            raise ValueError(f"scene {self.scene_id}: bad object count")
        counts = Counter(o.category for o in self.objects)
        if max(counts.values()) < 2:
            raise ValueError(f"scene {self.scene_id}: no ambiguous category")
        for i, a in enumerate(self.objects):
            for b in self.objects[i + 1 :]:
                if iou(a.bbox, b.bbox) > MAX_PAIRWISE_IOU:
                    raise ValueError(f"scene {self.scene_id}: overlapping objects")

    def ambiguous_indices(self) -> list[int]:
        counts = Counter(o.category for o in self.objects)
        return [i for i, o in enumerate(self.objects) if counts[o.category] >= 2]


@dataclass(frozen=True)
class ReferentTriplet:
    scene_id: int
    target: BBox
    category: int


@dataclass(frozen=True)
class TrainingUnit:
    scene: Scene
    triplet: ReferentTriplet
    features: np.ndarray = field(compare=False, repr=False, default=None)


def size_band(size_class: int, n_sizes: int) -> tuple[float, float]:
    """Side-length range for a size class, linear bands over SIDE_RANGE."""
    lo, hi = SIDE_RANGE
    step = (hi - lo) / n_sizes
    return (lo + size_class * step, lo + (size_class + 1) * step)


def _sample_object(rng: np.random.Generator, cfg: SceneConfig, category: int) -> SceneObject:
    size_class = int(rng.integers(cfg.n_sizes))
    s_lo, s_hi = size_band(size_class, cfg.n_sizes)
    w = float(rng.uniform(s_lo, s_hi))
    h = float(rng.uniform(s_lo, s_hi))
    x0 = float(rng.uniform(0.0, 1.0 - w))
    y0 = float(rng.uniform(0.0, 1.0 - h))
    color = int(rng.integers(cfg.n_colors))
    return SceneObject(category, color, size_class, BBox(x0, y0, x0 + w, y0 + h))


def generate_scene(seed: int, cfg: SceneConfig, scene_id: int | None = None) -> Scene:
    """Rejection-sample a scene satisfying the ambiguity and overlap rules.

    Identical (seed, cfg) always produce an identical scene. Raises
    RuntimeError if cfg.max_attempts scene attempts are exhausted, which
    signals an infeasible configuration.
    """
    rng = np.random.default_rng(seed)
    sid = seed if scene_id is None else scene_id
    for _ in range(cfg.max_attempts):
        n = int(rng.integers(2, cfg.max_objects + 1))
        dup = int(rng.integers(cfg.n_categories))
        cats = [dup, dup] + [int(rng.integers(cfg.n_categories)) for _ in range(n - 2)]
        cats = [cats[i] for i in rng.permutation(n)]

        placed: list[SceneObject] = []
        ok = True
        for cat in cats:
            obj = None
            for _ in range(50):
                cand = _sample_object(rng, cfg, cat)
                if all(iou(cand.bbox, p.bbox) <= MAX_PAIRWISE_IOU for p in placed):
                    obj = cand
                    break
            if obj is None:
                ok = False
                break
            placed.append(obj)
        if not ok:
            continue

        scene = Scene(sid, tuple(placed), rng_seed=seed)
        scene.validate(cfg)
        return scene
    raise RuntimeError(
        f"could not generate a valid scene in {cfg.max_attempts} attempts; "
        "the scene config is likely infeasible"
    )


def encode_scene(scene: Scene, cfg: SceneConfig) -> np.ndarray:
    """Deterministic grid encoding: a (G, G, F) array where F stacks the
    category, color and size one-hot channels of whichever object owns each
    cell. A cell belongs to an object when the cell center lies inside its
    box; overlaps are resolved by painting larger objects first, so the
    smallest containing object wins. Cell (i, j) covers the point
    ((j+0.5)/G, (i+0.5)/G) with x left-to-right and y top-to-bottom.
    """
    g = cfg.grid_size
    feats = np.zeros((g, g, cfg.n_channels), dtype=np.float64)
    centers = (np.arange(g) + 0.5) / g
    owner = np.full((g, g), -1, dtype=np.int64)

    areas = np.array([o.bbox.area for o in scene.objects])
    paint_order = np.argsort(-areas, kind="stable")
    for idx in paint_order:
        o = scene.objects[idx]
        cols = (centers >= o.bbox.x_min) & (centers <= o.bbox.x_max)
        rows = (centers >= o.bbox.y_min) & (centers <= o.bbox.y_max)
        owner[np.ix_(rows, cols)] = idx

    for idx, o in enumerate(scene.objects):
        mask = owner == idx
        feats[mask, o.category] = 1.0
        feats[mask, cfg.n_categories + o.color] = 1.0
        feats[mask, cfg.n_categories + cfg.n_colors + o.size_class] = 1.0
    return feats


def pool_features(feats: np.ndarray, pooled_size: int) -> np.ndarray:
    """Average-pool a (G, G, F) grid down to (pooled, pooled, F), flattened."""
    g = feats.shape[0]
    if g % pooled_size != 0:
        raise ValueError(f"grid {g} not divisible by pooled size {pooled_size}")
    k = g // pooled_size
    blocks = feats.reshape(pooled_size, k, pooled_size, k, feats.shape[2])
    return blocks.mean(axis=(1, 3)).ravel()


def _unit_seed(seed: int, scene_id: int, salt: int) -> int:
    ss = np.random.SeedSequence(entropy=[seed, scene_id, salt])
    return int(ss.generate_state(1, np.uint64)[0])


def make_dataset(
    seed: int, n: int, cfg: SceneConfig, id_offset: int = 0
) -> list[TrainingUnit]:
    """Deterministically build n training units. The referent is drawn
    uniformly among objects whose category appears at least twice, so a
    category word alone can never pin down the target."""
    if n < 1:
        raise ValueError("n must be >= 1")
    units = []
    for i in range(n):
        sid = id_offset + i
        scene = generate_scene(_unit_seed(seed, sid, 0), cfg, scene_id=sid)
        pick_rng = np.random.default_rng(_unit_seed(seed, sid, 1))
        candidates = scene.ambiguous_indices()
        target_idx = int(candidates[pick_rng.integers(len(candidates))])
        target = scene.objects[target_idx]
        triplet = ReferentTriplet(sid, target.bbox, target.category)
        units.append(TrainingUnit(scene, triplet, encode_scene(scene, cfg)))
    return units


def make_splits(
    seed: int, n_train: int, n_heldout: int, cfg: SceneConfig
) -> tuple[list[TrainingUnit], list[TrainingUnit]]:
    """Train and held-out splits with disjoint scene ids."""
    train = make_dataset(seed, n_train, cfg, id_offset=0)
    heldout = make_dataset(seed, n_heldout, cfg, id_offset=n_train)
    return train, heldout


# -- line-delimited persistence ---------------------------------------------


def _unit_to_record(u: TrainingUnit) -> dict:
    return {
        "scene_id": u.scene.scene_id,
        "rng_seed": u.scene.rng_seed,
        "objects": [
            {
                "category": o.category,
                "color": o.color,
                "size_class": o.size_class,
                "bbox": list(o.bbox.as_tuple()),
            }
            for o in u.scene.objects
        ],
        "target": list(u.triplet.target.as_tuple()),
        "category": u.triplet.category,
    }


def _unit_from_record(rec: dict, cfg: SceneConfig) -> TrainingUnit:
    objects = tuple(
        SceneObject(
            int(o["category"]),
            int(o["color"]),
            int(o["size_class"]),
            BBox(*o["bbox"]),
        )
        for o in rec["objects"]
    )
    scene = Scene(int(rec["scene_id"]), objects, int(rec["rng_seed"]))
    scene.validate(cfg)
    triplet = ReferentTriplet(scene.scene_id, BBox(*rec["target"]), int(rec["category"]))
    return TrainingUnit(scene, triplet, encode_scene(scene, cfg))


def save_units(units: list[TrainingUnit], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for u in units:
            f.write(json.dumps(_unit_to_record(u)) + "\n")


def load_units(path: str | Path, cfg: SceneConfig) -> list[TrainingUnit]:
    units = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                units.append(_unit_from_record(json.loads(line), cfg))
    return units

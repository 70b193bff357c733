"""Deterministic synthetic shape scenes, prompt samplers and dataset I/O."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .container import ContainerError, read_tensor, write_tensor
from .model import PointPrompt

SHAPES = ("disk", "square", "triangle", "cross", "ring")
PROMPT_MODES = ("interior", "edge", "mixed", "partial_instances")
INTERIOR_MARGIN = 2

# one colour per class slot in "distinct" mode; "ambiguous" paints everything AMBIGUOUS_COLOR
PALETTE = (
    (0.90, 0.25, 0.20),
    (0.20, 0.70, 0.30),
    (0.25, 0.35, 0.90),
    (0.90, 0.80, 0.20),
    (0.75, 0.30, 0.80),
    (0.20, 0.80, 0.85),
)
AMBIGUOUS_COLOR = (0.85, 0.75, 0.30)
MAX_ATTEMPTS = 1000
# every instance must be able to host this many interior prompt points
MIN_INTERIOR = 8


class SceneError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    classes: tuple[str, ...]
    instances_per_class: tuple[int, int] = (1, 2)
    image_size: int = 64
    palette_mode: str = "distinct"
    radius: tuple[float, float] = (6.0, 9.0)
    classes_per_scene: int | None = None
    shapes: dict | None = None
    gap: int = 2

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "instances_per_class", tuple(self.instances_per_class))
        object.__setattr__(self, "radius", tuple(float(r) for r in self.radius))
        if len(self.classes) < 2:
            raise SceneError("a scene spec needs at least two classes")
        if len(set(self.classes)) != len(self.classes):
            raise SceneError("duplicate class names in scene spec")
        lo, hi = self.instances_per_class
        if not 0 <= lo <= hi or hi < 1:
            raise SceneError(f"bad instances_per_class range {self.instances_per_class}")
        if self.palette_mode not in ("distinct", "ambiguous"):
            raise SceneError(f"palette_mode must be 'distinct' or 'ambiguous', got {self.palette_mode!r}")
        if not 2.0 <= self.radius[0] <= self.radius[1]:
            raise SceneError(f"bad radius range {self.radius}")
        if self.palette_mode == "distinct" and len(self.classes) > len(PALETTE):
            raise SceneError(f"distinct palette supports at most {len(PALETTE)} classes")
        kinds = [self.shape_of(c) for c in self.classes]
        if len(set(kinds)) != len(kinds):
            raise SceneError("each class needs its own shape kind")
        if self.classes_per_scene is not None and not 1 <= self.classes_per_scene <= len(self.classes):
            raise SceneError(f"classes_per_scene must be in [1, {len(self.classes)}]")

    def shape_of(self, cls: str) -> str:
        kind = (self.shapes or {}).get(cls, cls)
        if kind not in SHAPES:
            raise SceneError(f"class {cls!r} has no shape kind; choose from {SHAPES} or give a 'shapes' mapping")
        return kind

    def to_dict(self) -> dict:
        d = {
            "classes": list(self.classes),
            "instances_per_class": list(self.instances_per_class),
            "image_size": self.image_size,
            "palette_mode": self.palette_mode,
            "radius": list(self.radius),
            "gap": self.gap,
        }
        if self.classes_per_scene is not None:
            d["classes_per_scene"] = self.classes_per_scene
        if self.shapes:
            d["shapes"] = dict(self.shapes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {"classes", "instances_per_class", "image_size", "palette_mode", "radius",
                 "classes_per_scene", "shapes", "gap"}
        unknown = set(d) - known
        if unknown:
            raise SceneError(f"unknown scene spec fields: {sorted(unknown)}")
        if "classes" not in d:
            raise SceneError("scene spec needs 'classes'")
        return cls(**d)


@dataclass
class Instance:
    class_name: str
    mask: np.ndarray  # bool [S, S]


@dataclass
class Scene:
    image: np.ndarray  # float32 [S, S, 3] in [0, 1]
    instances: list[Instance]
    seed: int
    spec: SceneSpec | None = None

    @property
    def size(self) -> int:
        return self.image.shape[0]

    def class_mask(self, cls: str) -> np.ndarray:
        m = np.zeros(self.image.shape[:2], dtype=bool)
        for inst in self.instances:
            if inst.class_name == cls:
                m |= inst.mask
        return m

    def classes_present(self) -> list[str]:
        seen = []
        for inst in self.instances:
            if inst.class_name not in seen:
                seen.append(inst.class_name)
        return seen


@dataclass
class Sample:
    scene: Scene
    target_class: str
    prompts: list[PointPrompt]
    prompt_mode: str = "interior"
    gt_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.gt_mask is None:
            self.gt_mask = self.scene.class_mask(self.target_class)

    @property
    def image(self) -> np.ndarray:
        return self.scene.image

    def prompted_instances(self) -> list[int]:
        """Indices (into scene.instances) of target instances that hold at least one point."""
        hits = []
        for i, inst in enumerate(self.scene.instances):
            if inst.class_name == self.target_class and any(inst.mask[p.y, p.x] for p in self.prompts):
                hits.append(i)
        return hits


@dataclass
class Dataset:
    scenes: list[Scene]
    samples: list[Sample]

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def scene_seeds(self) -> set[int]:
        return {s.seed for s in self.scenes}

    def classes(self) -> list[str]:
        out: list[str] = []
        for s in self.samples:
            if s.target_class not in out:
                out.append(s.target_class)
        return out


# ----------------------------------------------------------------------------
# rasterisation


def rasterize(kind: str, cx: float, cy: float, r: float, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size]
    dx = xs + 0.5 - cx
    dy = ys + 0.5 - cy
    if kind == "disk":
        m = dx * dx + dy * dy <= r * r
    elif kind == "square":
        s = 0.85 * r
        m = (np.abs(dx) <= s) & (np.abs(dy) <= s)
    elif kind == "triangle":
        top, bottom = -r, 0.8 * r
        frac = (dy - top) / (bottom - top)
        m = (dy >= top) & (dy <= bottom) & (np.abs(dx) <= frac * r)
    elif kind == "cross":
        arm = 0.45 * r
        m = ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    elif kind == "ring":
        d2 = dx * dx + dy * dy
        m = (d2 <= r * r) & (d2 >= (0.4 * r) ** 2)
    else:
        raise SceneError(f"unknown shape kind {kind!r}")
    return m


def generate_scene(spec: SceneSpec | dict, seed: int) -> Scene:
    """Draw one scene. Pure in (spec, seed)."""
    if isinstance(spec, dict):
        spec = SceneSpec.from_dict(spec)
    rng = np.random.default_rng(seed)
    S = spec.image_size
    classes = list(spec.classes)
    if spec.classes_per_scene is not None:
        pick = rng.choice(len(classes), size=spec.classes_per_scene, replace=False)
        classes = [classes[i] for i in sorted(pick)]
    lo, hi = spec.instances_per_class
    plan = [(c, int(rng.integers(lo, hi + 1))) for c in classes]

    occupied = np.zeros((S, S), dtype=bool)
    struct = np.ones((2 * spec.gap + 1, 2 * spec.gap + 1), dtype=bool)
    instances: list[Instance] = []
    attempts = 0
    for cls, n in plan:
        kind = spec.shape_of(cls)
        for _ in range(n):
            while True:
                attempts += 1
                if attempts > MAX_ATTEMPTS:
                    raise SceneError(
                        f"could not place all instances after {MAX_ATTEMPTS} attempts (seed {seed}); "
                        "use fewer instances per class or a smaller radius range"
                    )
                r = float(rng.uniform(*spec.radius))
                margin = r + 1.0
                if S - 2 * margin <= 0:
                    raise SceneError(f"radius {r:.1f} does not fit a {S}px image")
                cx = float(rng.uniform(margin, S - margin))
                cy = float(rng.uniform(margin, S - margin))
                m = rasterize(kind, cx, cy, r, S)
                if m.sum() < 4 or interior_pixels(m).sum() < MIN_INTERIOR:
                    continue
                if not (ndimage.binary_dilation(m, structure=struct) & occupied).any():
                    break
            occupied |= m
            instances.append(Instance(cls, m))

    image = np.full((S, S, 3), 0.1) + rng.uniform(0.0, 0.1, size=(S, S, 3))
    for inst in instances:
        if spec.palette_mode == "ambiguous":
            color = AMBIGUOUS_COLOR
        else:
            color = PALETTE[spec.classes.index(inst.class_name)]
        image[inst.mask] = color
    return Scene(image.astype(np.float32), instances, seed, spec)


# ----------------------------------------------------------------------------
# prompts


def boundary_distance(mask: np.ndarray) -> np.ndarray:
    """Euclidean distance of each mask pixel to the nearest outside pixel (image border counts as outside)."""
    padded = np.pad(mask, 1, constant_values=False)
    return ndimage.distance_transform_edt(padded)[1:-1, 1:-1]


def interior_pixels(mask: np.ndarray, margin: int = INTERIOR_MARGIN) -> np.ndarray:
    # boundary pixels sit at distance 1; `margin` further layers are excluded
    return mask & (boundary_distance(mask) > margin)


def edge_pixels(mask: np.ndarray) -> np.ndarray:
    """Mask pixels within 1 px of the boundary layer."""
    return mask & (boundary_distance(mask) <= 2.0)


def _draw(eligible: np.ndarray, k: int, rng: np.random.Generator, what: str) -> list[PointPrompt]:
    ys, xs = np.nonzero(eligible)
    if k > len(ys):
        raise SceneError(f"asked for {k} {what} points but only {len(ys)} pixels are eligible")
    idx = rng.choice(len(ys), size=k, replace=False)
    return [PointPrompt(int(xs[i]), int(ys[i])) for i in sorted(idx)]


def sample_prompts(scene: Scene, target_class: str, k: int = 5, mode: str = "interior",
                   seed: int = 0) -> list[PointPrompt]:
    if mode not in PROMPT_MODES:
        raise SceneError(f"prompt mode must be one of {PROMPT_MODES}, got {mode!r}")
    if k < 1:
        raise SceneError("k must be at least 1")
    target = scene.class_mask(target_class)
    if not target.any():
        raise SceneError(f"scene {scene.seed} has no pixels of class {target_class!r}")
    rng = np.random.default_rng(seed)
    if mode == "interior":
        return _draw(interior_pixels(target), k, rng, "interior")
    if mode == "edge":
        return _draw(edge_pixels(target), k, rng, "edge")
    if mode == "mixed":
        n_edge = k // 2
        inner = _draw(interior_pixels(target), k - n_edge, rng, "interior")
        return inner + (_draw(edge_pixels(target), n_edge, rng, "edge") if n_edge else [])
    members = [inst.mask for inst in scene.instances if inst.class_name == target_class]
    if len(members) < 2:
        raise SceneError(f"partial_instances needs at least 2 instances of {target_class!r}, found {len(members)}")
    n_pick = int(rng.integers(1, len(members)))
    chosen = rng.choice(len(members), size=n_pick, replace=False)
    eligible = np.zeros_like(target)
    for i in chosen:
        eligible |= interior_pixels(members[i])
    return _draw(eligible, k, rng, "interior")


def prompt_predicate(mask: np.ndarray, point: PointPrompt, mode: str) -> bool:
    """Geometric check used by tests: does ``point`` obey ``mode`` w.r.t. ``mask``?"""
    if not mask[point.y, point.x]:
        return False
    dist = boundary_distance(mask)[point.y, point.x]
    if mode in ("interior", "partial_instances"):
        return dist > INTERIOR_MARGIN
    if mode == "edge":
        return dist <= 2.0
    return True


# ----------------------------------------------------------------------------
# datasets


def scene_seeds(seed: int, count: int) -> list[int]:
    """Per-scene seeds; different dataset seeds give disjoint sets for count < 100000."""
    return [seed * 100_000 + i for i in range(count)]


def make_samples(scene: Scene, k: int = 5, mode: str = "interior") -> list[Sample]:
    """One sample per class present in the scene.

    In ``partial_instances`` mode a class with a single instance falls back to
    interior prompts (and is recorded as such).
    """
    out = []
    for ci, cls in enumerate(scene.classes_present()):
        m = mode
        if m == "partial_instances" and sum(i.class_name == cls for i in scene.instances) < 2:
            m = "interior"
        pts = sample_prompts(scene, cls, k, m, seed=scene.seed * 31 + ci)
        out.append(Sample(scene, cls, pts, m))
    return out


def generate_dataset(spec: SceneSpec | dict, count: int, seed: int = 0, k: int = 5,
                     mode: str = "interior") -> Dataset:
    if isinstance(spec, dict):
        spec = SceneSpec.from_dict(spec)
    scenes = [generate_scene(spec, s) for s in scene_seeds(seed, count)]
    samples = [smp for sc in scenes for smp in make_samples(sc, k, mode)]
    return Dataset(scenes, samples)


def write_dataset(ds: Dataset, directory) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    index = {id(sc): i for i, sc in enumerate(ds.scenes)}
    by_scene: dict[int, list[Sample]] = {i: [] for i in range(len(ds.scenes))}
    for smp in ds.samples:
        by_scene[index[id(smp.scene)]].append(smp)
    lines = []
    for i, sc in enumerate(ds.scenes):
        image_file = f"images/scene_{i:05d}.ptx"
        write_tensor(directory / image_file, sc.image)
        inst_records = []
        for j, inst in enumerate(sc.instances):
            mask_file = f"masks/scene_{i:05d}_{j:02d}.ptx"
            write_tensor(directory / mask_file, inst.mask.astype(np.float32))
            inst_records.append({"class": inst.class_name, "mask_file": mask_file})
        rec = {
            "seed": sc.seed,
            "image_file": image_file,
            "instances": inst_records,
            "samples": [
                {"class": s.target_class, "prompt_mode": s.prompt_mode, "points": [[p.x, p.y] for p in s.prompts]}
                for s in by_scene[i]
            ],
        }
        if sc.spec is not None:
            rec["spec"] = sc.spec.to_dict()
        lines.append(json.dumps(rec, sort_keys=True))
    (directory / "scenes.jsonl").write_text("\n".join(lines) + "\n")
    return directory


def read_dataset(directory) -> Dataset:
    directory = Path(directory)
    path = directory / "scenes.jsonl"
    if not path.is_file():
        raise DatasetError(f"no scenes.jsonl in {directory}")
    scenes, samples = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            image = read_tensor(directory / rec["image_file"])
            instances = [
                Instance(ir["class"], read_tensor(directory / ir["mask_file"]) > 0.5) for ir in rec["instances"]
            ]
            spec = SceneSpec.from_dict(rec["spec"]) if "spec" in rec else None
            sc = Scene(image, instances, int(rec["seed"]), spec)
            for sr in rec["samples"]:
                pts = [PointPrompt(int(x), int(y)) for x, y in sr["points"]]
                samples.append(Sample(sc, sr["class"], pts, sr.get("prompt_mode", "interior")))
        except ContainerError:
            raise
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}:{lineno}: malformed scene record ({exc})") from exc
        scenes.append(sc)
    if not scenes:
        raise DatasetError(f"{path}: empty dataset")
    return Dataset(scenes, samples)


def class_counts(ds: Dataset) -> dict[str, int]:
    counts: dict[str, int] = {}
    for sc in ds.scenes:
        for inst in sc.instances:
            counts[inst.class_name] = counts.get(inst.class_name, 0) + 1
    return dict(sorted(counts.items()))


def color_threshold_best_iou(scene: Scene, cls: str, thresholds: Iterable[float] | None = None) -> float:
    """Best IoU a colour-threshold (class-blind) segmenter reaches for ``cls``.

    Thresholds the per-pixel channel mean; both polarities are tried.
    """
    from .evalsuite import iou

    lum = scene.image.mean(axis=2)
    gt = scene.class_mask(cls)
    ths = np.unique(lum) if thresholds is None else np.asarray(list(thresholds))
    best = 0.0
    for th in ths:
        for pred in (lum >= th, lum < th):
            best = max(best, iou(pred, gt))
    return best


def benchmark_spec(palette_mode: str = "ambiguous") -> SceneSpec:
    """Scene family used by the directional text-vs-no-text experiments."""
    return SceneSpec(classes=("square", "ring", "cross"), instances_per_class=(2, 2),
                     image_size=64, palette_mode=palette_mode, radius=(7.0, 9.0), classes_per_scene=2)


def default_classes() -> Sequence[str]:
    return SHAPES

"""Dataset manifests, directory scanners, image loading and the synthetic scene generator.

Directory layout understood by :func:`scan_university_layout`::

    <root>/<split>/<platform>/<class_dir>/<image files>

with ``split`` in ``train``, ``query``, ``gallery`` and ``platform`` in
``satellite``, ``drone``, ``ground``. Class directories are relabelled to dense
ids ``1..C`` in sorted order of their names. Train platforms are checked for
identical class sets; query and gallery share one id space built from the union
of their class names, so gallery-only classes act as distractors.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, UnidentifiedImageError

from .errors import DataError

logger = logging.getLogger(__name__)

PLATFORMS = {1: "satellite", 2: "drone", 3: "ground"}
PLATFORM_IDS = {name: idx for idx, name in PLATFORMS.items()}
SPLITS = ("train", "query", "gallery")
IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".webp", ".tif", ".tiff"}


def platform_id(platform) -> int:
    if isinstance(platform, str):
        try:
            return PLATFORM_IDS[platform.lower()]
        except KeyError:
            raise DataError(f"unknown platform {platform!r}") from None
    if int(platform) not in PLATFORMS:
        raise DataError(f"unknown platform {platform!r}; expected one of {sorted(PLATFORMS)}")
    return int(platform)


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    split: str
    platform: str
    entries: tuple[tuple[str, int], ...]
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))
        object.__setattr__(self, "entries", tuple((str(p), int(c)) for p, c in self.entries))
        paths = [p for p, _ in self.entries]
        if len(set(paths)) != len(paths):
            seen, dup = set(), []
            for p in paths:
                if p in seen:
                    dup.append(p)
                seen.add(p)
            raise DataError(f"duplicate paths in manifest: {dup[:5]}")

    def __len__(self):
        return len(self.entries)

    @property
    def paths(self) -> list[Path]:
        return [self.root / p for p, _ in self.entries]

    @property
    def labels(self) -> np.ndarray:
        return np.array([c for _, c in self.entries], dtype=np.int64)

    @property
    def num_classes(self) -> int:
        return len(self.class_names) if self.class_names else int(self.labels.max(initial=0))

    @property
    def platform_id(self) -> int:
        return platform_id(self.platform)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["path", "class_id", "platform", "split"])
            for rel, cid in self.entries:
                writer.writerow([rel, cid, self.platform, self.split])

    @classmethod
    def from_csv(cls, path, root=None) -> "DatasetManifest":
        path = Path(path)
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise DataError(f"{path}: manifest has no rows")
        platforms = {r["platform"] for r in rows}
        splits = {r["split"] for r in rows}
        if len(platforms) != 1 or len(splits) != 1:
            raise DataError(f"{path}: a manifest holds exactly one platform and split, "
                            f"got {sorted(platforms)} / {sorted(splits)}")
        entries = [(r["path"], int(r["class_id"])) for r in rows]
        names = {}
        for rel, cid in entries:
            names.setdefault(cid, Path(rel).parent.name or str(cid))
        class_names = tuple(names.get(i, str(i)) for i in range(1, max(names) + 1))
        return cls(Path(root) if root is not None else path.parent, splits.pop(), platforms.pop(),
                   tuple(entries), class_names)


def _list_images(directory: Path) -> list[str]:
    return sorted(p.name for p in directory.iterdir()
                  if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)


def scan_university_layout(root) -> dict[tuple[str, str], DatasetManifest]:
    """Scan ``split/platform/class_dir/*`` into manifests keyed by ``(split, platform)``."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    found: dict[tuple[str, str], dict[str, list[str]]] = {}
    for split in SPLITS:
        split_dir = root / split
        if not split_dir.is_dir():
            continue
        for platform_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
            if platform_dir.name not in PLATFORM_IDS:
                logger.warning("skipping unknown platform directory %s", platform_dir)
                continue
            classes = {}
            for class_dir in sorted(p for p in platform_dir.iterdir() if p.is_dir()):
                files = _list_images(class_dir)
                if not files:
                    logger.warning("skipping empty class directory %s", class_dir)
                    continue
                classes[class_dir.name] = files
            if classes:
                found[(split, platform_dir.name)] = classes
    if not found:
        raise DataError(f"no split/platform/class images found under {root}")

    train_sets = {plat: set(c) for (split, plat), c in found.items() if split == "train"}
    if len({frozenset(s) for s in train_sets.values()}) > 1:
        ref_plat, ref = next(iter(train_sets.items()))
        diffs = {p: sorted(s ^ ref)[:5] for p, s in train_sets.items() if s != ref}
        raise DataError(f"train class sets differ across platforms (vs {ref_plat}): {diffs}")

    id_spaces: dict[str, list[str]] = {}
    if train_sets:
        id_spaces["train"] = sorted(next(iter(train_sets.values())))
    test_names = set()
    for (split, _), classes in found.items():
        if split in ("query", "gallery"):
            test_names.update(classes)
    if test_names:
        id_spaces["query"] = id_spaces["gallery"] = sorted(test_names)

    manifests = {}
    for (split, plat), classes in found.items():
        names = id_spaces[split]
        ids = {name: i + 1 for i, name in enumerate(names)}
        entries = [(f"{split}/{plat}/{name}/{f}", ids[name])
                   for name in sorted(classes) for f in classes[name]]
        manifests[(split, plat)] = DatasetManifest(root, split, plat, tuple(entries), tuple(names))
    return manifests


def scan_pairs_layout(list_file, root=None, split="train") -> tuple[DatasetManifest, DatasetManifest]:
    """Read a ``ground_path,satellite_path`` list; every line becomes its own class.

    Returns ``(ground_manifest, satellite_manifest)``.
    """
    list_file = Path(list_file)
    root = Path(root) if root is not None else list_file.parent
    pairs = []
    with open(list_file, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            row = [c.strip() for c in row if c.strip()]
            if not row:
                continue
            if len(row) < 2:
                raise DataError(f"{list_file}:{lineno}: expected two paths, got {row}")
            pairs.append((row[0], row[1]))
    if not pairs:
        raise DataError(f"{list_file}: no pairs")
    seen = {}
    for lineno, pair in enumerate(pairs, start=1):
        if pair in seen:
            raise DataError(f"{list_file}: duplicate pair {pair} on lines {seen[pair]} and {lineno}")
        seen[pair] = lineno
    missing = [p for pair in pairs for p in pair if not (root / p).is_file()]
    if missing:
        raise DataError(f"{len(missing)} files listed in {list_file} are missing, e.g. {missing[:10]}")
    names = tuple(str(i) for i in range(1, len(pairs) + 1))
    ground = DatasetManifest(root, split, "ground", tuple((g, i + 1) for i, (g, _) in enumerate(pairs)), names)
    sat = DatasetManifest(root, split, "satellite", tuple((s, i + 1) for i, (_, s) in enumerate(pairs)), names)
    return ground, sat


def load_image(path, size=256, dtype=np.float32) -> np.ndarray:
    """Decode ``path`` to a ``(size, size, 3)`` array.

    Float dtypes are scaled to ``[0, 1]``; ``np.uint8`` returns raw pixel values.
    """
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if img.size != (size, size):
                img = img.resize((size, size), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32)
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    if np.dtype(dtype) == np.uint8:
        return arr.astype(np.uint8)
    return (arr / 255.0).astype(dtype)


# --------------------------------------------------------------------------- synthetic scenes

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = ((220, 60, 50), (40, 110, 220), (240, 200, 40), (150, 60, 190))
BACKGROUND = (96, 118, 92)


@dataclass(frozen=True)
class SyntheticSceneSpec:
    num_classes: int = 50
    image_size: int = 256
    context_objects: tuple[int, int] = (3, 6)
    shapes: tuple[str, ...] = SHAPES
    colors: tuple[tuple[int, int, int], ...] = COLORS
    # radii of the context bands, as a fraction of half the image side
    context_radii: tuple[float, ...] = (0.38, 0.62, 0.85)
    target_size: float = 0.22
    context_size: float = 0.14
    satellite_rotation: float = 180.0
    drone_rotation: float = 10.0
    scale_jitter: tuple[float, float] = (0.8, 1.2)
    translation_jitter: float = 10.0
    drone_views: int = 4
    query_views: int = 2
    gallery_distractors: int = 0
    layout_twins: bool = True
    noise: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise DataError("num_classes must be >= 2")
        lo, hi = self.context_objects
        if not 1 <= lo <= hi:
            raise DataError(f"invalid context_objects range {self.context_objects}")
        if self.drone_views < 1:
            raise DataError("drone_views must be >= 1")


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: tuple[int, int, int]
    radius: float  # distance from the scene centre, fraction of half side
    angle: float  # polar angle of the position, degrees
    size: float  # circumradius, fraction of half side
    spin: float  # orientation of the shape itself, degrees


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]  # objects[0] is the target at the centre
    heading: float = 0.0


def _random_scene(spec: SyntheticSceneSpec, rng: np.random.Generator) -> Scene:
    target = SceneObject(spec.shapes[rng.integers(len(spec.shapes))],
                         spec.colors[rng.integers(len(spec.colors))],
                         0.0, 0.0, spec.target_size, float(rng.uniform(0, 360)))
    count = int(rng.integers(spec.context_objects[0], spec.context_objects[1] + 1))
    objs = [target]
    angles = _spread_angles(count, rng)
    for k in range(count):
        objs.append(SceneObject(spec.shapes[rng.integers(len(spec.shapes))],
                                spec.colors[rng.integers(len(spec.colors))],
                                spec.context_radii[k % len(spec.context_radii)],
                                angles[k], spec.context_size, float(rng.uniform(0, 360))))
    return Scene(tuple(objs), float(rng.uniform(-spec.satellite_rotation, spec.satellite_rotation)))


def _spread_angles(count, rng):
    base = rng.uniform(0, 360)
    step = 360.0 / count
    return [float((base + k * step + rng.uniform(-0.25, 0.25) * step) % 360) for k in range(count)]


def _twin(scene: Scene, spec: SyntheticSceneSpec, rng: np.random.Generator) -> Scene:
    """Same objects, different radial arrangement of the context."""
    ctx = list(scene.objects[1:])
    kinds = [(o.shape, o.color) for o in ctx]
    radii = [o.radius for o in ctx]
    original = sorted(zip(kinds, radii))
    order = list(range(len(ctx)))
    for _ in range(50):
        order = list(rng.permutation(len(ctx)))
        if sorted((kinds[j], radii[i]) for i, j in enumerate(order)) != original:
            break
    angles = _spread_angles(len(ctx), rng)
    new_ctx = [SceneObject(ctx[j].shape, ctx[j].color, radii[i], angles[i], ctx[j].size, float(rng.uniform(0, 360)))
               for i, j in enumerate(order)]
    heading = float(rng.uniform(-spec.satellite_rotation, spec.satellite_rotation))
    return Scene((scene.objects[0],) + tuple(new_ctx), heading)


def make_scenes(spec: SyntheticSceneSpec, count=None, rng=None) -> list[Scene]:
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    count = spec.num_classes if count is None else count
    scenes: list[Scene] = []
    while len(scenes) < count:
        scene = _random_scene(spec, rng)
        scenes.append(scene)
        if spec.layout_twins and len(scenes) < count and len(scene.objects) > 2:
            scenes.append(_twin(scene, spec, rng))
    return scenes


def _shape_polygon(shape, cx, cy, r, spin):
    if shape == "circle":
        k = 40
        angles = np.linspace(0, 2 * np.pi, k, endpoint=False)
        radius = np.full(k, r)
    elif shape == "square":
        angles = np.deg2rad(spin + np.array([45, 135, 225, 315]))
        radius = np.full(4, r)
    elif shape == "triangle":
        angles = np.deg2rad(spin + np.array([90, 210, 330]))
        radius = np.full(3, r)
    elif shape == "cross":
        w = 0.38
        pts = np.array([(w, 1), (w, w), (1, w), (1, -w), (w, -w), (w, -1), (-w, -1), (-w, -w),
                        (-1, -w), (-1, w), (-w, w), (-w, 1)]) * r / math.hypot(1, w)
        rot = np.deg2rad(spin)
        c, s = math.cos(rot), math.sin(rot)
        return [(cx + c * x - s * y, cy + s * x + c * y) for x, y in pts]
    else:
        raise DataError(f"unknown shape {shape!r}")
    return [(cx + rr * math.cos(a), cy - rr * math.sin(a)) for a, rr in zip(angles, radius)]


def render_scene(scene: Scene, size=256, rotation=0.0, scale=1.0, shift=(0.0, 0.0),
                 noise=0.0, rng=None, supersample=2) -> np.ndarray:
    """Top-down render of ``scene`` as a ``(size, size, 3)`` uint8 array.

    ``rotation`` (degrees, counter-clockwise) is applied on top of the scene
    heading; ``shift`` is in output pixels. Geometry is transformed
    analytically, so no resampling happens.
    """
    ss = size * supersample
    img = Image.new("RGB", (ss, ss), BACKGROUND)
    draw = ImageDraw.Draw(img)
    half = ss / 2
    theta = math.radians(scene.heading + rotation)
    c, s = math.cos(theta), math.sin(theta)
    for obj in scene.objects:
        a = math.radians(obj.angle)
        x, y = obj.radius * math.cos(a), obj.radius * math.sin(a)
        xr, yr = c * x - s * y, s * x + c * y
        cx = half + (xr * scale) * half + shift[0] * supersample
        cy = half - (yr * scale) * half + shift[1] * supersample
        spin = obj.spin + scene.heading + rotation
        draw.polygon(_shape_polygon(obj.shape, cx, cy, obj.size * scale * half, spin), fill=obj.color)
    if supersample > 1:
        img = img.resize((size, size), Image.BOX)
    arr = np.asarray(img, dtype=np.float64)
    if noise > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        arr = arr + rng.normal(0.0, noise, size=arr.shape)
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)


def _drone_pose(spec: SyntheticSceneSpec, rng):
    rotation = float(rng.uniform(-spec.drone_rotation, spec.drone_rotation))
    scale = float(rng.uniform(*spec.scale_jitter))
    shift = tuple(float(v) for v in rng.uniform(-spec.translation_jitter, spec.translation_jitter, size=2))
    return rotation, scale, shift


def _save(arr, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def generate_synthetic(spec: SyntheticSceneSpec, out_root) -> dict[tuple[str, str], DatasetManifest]:
    """Render a University-style tree of satellite and drone views under ``out_root``.

    Writes ``train/satellite``, ``train/drone`` (``drone_views`` per class),
    ``query/drone`` (``query_views`` held-out views per class) and
    ``gallery/satellite`` (one per class plus ``gallery_distractors`` extra
    scenes that never match a query). Returns the manifests, identical to what
    :func:`scan_university_layout` reads back.
    """
    out_root = Path(out_root)
    seeds = np.random.SeedSequence(spec.seed).spawn(3)
    scene_rng, view_rng, noise_rng = (np.random.default_rng(s) for s in seeds)
    scenes = make_scenes(spec, rng=scene_rng)
    distractors = make_scenes(spec, spec.gallery_distractors, rng=scene_rng) if spec.gallery_distractors else []
    width = max(4, len(str(spec.num_classes)))
    names = [f"{i + 1:0{width}d}" for i in range(spec.num_classes)]
    size = spec.image_size

    for name, scene in zip(names, scenes):
        sat = render_scene(scene, size, noise=spec.noise, rng=noise_rng)
        _save(sat, out_root / "train" / "satellite" / name / "satellite.png")
        _save(sat, out_root / "gallery" / "satellite" / name / "satellite.png")
        for v in range(spec.drone_views):
            rot, scale, shift = _drone_pose(spec, view_rng)
            img = render_scene(scene, size, rot, scale, shift, spec.noise, noise_rng)
            _save(img, out_root / "train" / "drone" / name / f"view_{v:02d}.png")
        for v in range(spec.query_views):
            rot, scale, shift = _drone_pose(spec, view_rng)
            img = render_scene(scene, size, rot, scale, shift, spec.noise, noise_rng)
            _save(img, out_root / "query" / "drone" / name / f"query_{v:02d}.png")
    for k, scene in enumerate(distractors):
        img = render_scene(scene, size, noise=spec.noise, rng=noise_rng)
        _save(img, out_root / "gallery" / "satellite" / f"x{k + 1:0{width}d}" / "satellite.png")
    return _synthetic_manifests(spec, out_root, names)


def _synthetic_manifests(spec, root, names):
    width = max(4, len(str(spec.num_classes)))
    train_ids = {n: i + 1 for i, n in enumerate(names)}
    test_names = sorted(names + [f"x{k + 1:0{width}d}" for k in range(spec.gallery_distractors)])
    test_ids = {n: i + 1 for i, n in enumerate(test_names)}
    out = {}

    def build(split, platform, files, id_map, class_list, all_names):
        entries = [(f"{split}/{platform}/{n}/{f}", id_map[n]) for n in sorted(class_list) for f in files]
        out[(split, platform)] = DatasetManifest(root, split, platform, tuple(entries), tuple(all_names))

    build("train", "satellite", ["satellite.png"], train_ids, names, names)
    build("train", "drone", [f"view_{v:02d}.png" for v in range(spec.drone_views)], train_ids, names, names)
    if spec.query_views:
        build("query", "drone", [f"query_{v:02d}.png" for v in range(spec.query_views)], test_ids, names, test_names)
    build("gallery", "satellite", ["satellite.png"], test_ids, test_names, test_names)
    return out


def render_distractor_images(spec: SyntheticSceneSpec, count: int, seed: int) -> np.ndarray:
    """``count`` satellite renders of fresh scenes, ``(count, size, size, 3)`` uint8."""
    rng = np.random.default_rng(seed)
    scenes = make_scenes(spec, count, rng=rng)
    return np.stack([render_scene(s, spec.image_size, noise=spec.noise, rng=rng) for s in scenes])

"""Value types, dataset ingestion and the synthetic day/night scene generator.

Images are ``(H, W, 3)`` float arrays in [0, 1]; label maps are ``(H, W)``
int64 arrays holding class ids in ``[0, C)`` or :data:`IGNORE`.
"""

import enum
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from pignight import kernels

IGNORE = 255
DEFAULT_MAX_PROMPT = 10
INDEX_FILE = "index.txt"
CLASSES_FILE = "classes.txt"

CITYSCAPES_CLASSES = (
    "road", "sidewalk", "building", "wall", "fence", "pole", "traffic light",
    "traffic sign", "vegetation", "terrain", "sky", "person", "rider", "car",
    "truck", "bus", "train", "motorcycle", "bicycle",
)
SMALL_OBJECT_NAMES = frozenset(
    {"pole", "traffic light", "traffic sign", "person", "rider", "motorcycle", "bicycle"}
)


class DatasetError(ValueError):
    pass


class InvalidLabelError(DatasetError):
    pass


class Domain(str, enum.Enum):
    SOURCE_DAY = "source_day"
    TARGET_NIGHT = "target_night"
    PROMPT_NIGHT = "prompt_night"

    @property
    def labeled(self):
        return self is not Domain.TARGET_NIGHT


def check_image(image, name="image"):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DatasetError(f"{name}: expected (H, W, 3), got {image.shape}")
    h, w = image.shape[:2]
    if h < 2 or w < 2 or h % 2 or w % 2:
        raise DatasetError(f"{name}: height and width must be even and >= 2, got {h}x{w}")
    if not np.all(np.isfinite(image)) or image.min() < 0.0 or image.max() > 1.0:
        raise DatasetError(f"{name}: values must be finite and within [0, 1]")
    return image


def check_label(label, num_classes, name="label"):
    """Raise :class:`InvalidLabelError` naming the first offending pixel."""
    label = np.asarray(label)
    if label.ndim != 2:
        raise DatasetError(f"{name}: expected (H, W) label map, got {label.shape}")
    _, _, first_bad = kernels.class_histogram(label, num_classes, IGNORE)
    if first_bad >= 0:
        row, col = divmod(first_bad, label.shape[1])
        raise InvalidLabelError(
            f"{name}: invalid class id {int(label[row, col])} at pixel (row={row}, col={col}); "
            f"expected < {num_classes} or {IGNORE}"
        )
    return label


def class_histogram(label, num_classes):
    """Per-class pixel counts plus the IGNORE count.

    Returns ``(counts, ignore_count)``; ``counts.sum() + ignore_count`` equals
    the pixel count of ``label``.
    """
    label = check_label(label, num_classes)
    counts, n_ignore, _ = kernels.class_histogram(label, num_classes, IGNORE)
    return counts, n_ignore


def present_classes(label, num_classes):
    counts, _ = class_histogram(label, num_classes)
    return [int(c) for c in np.flatnonzero(counts)]


# --- raster IO ---------------------------------------------------------------

def read_image(path):
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return check_image(arr, name=str(path))


def write_image(path, image):
    image = np.asarray(image, dtype=np.float64)
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(data, mode="RGB").save(path, format="PNG")


def read_label(path, num_classes=None):
    with PILImage.open(path) as im:
        if im.mode not in ("L", "P"):
            raise DatasetError(f"{path}: label rasters must be single-channel 8-bit, got mode {im.mode}")
        arr = np.asarray(im, dtype=np.int64)
    if num_classes is not None:
        check_label(arr, num_classes, name=str(path))
    return arr


def write_label(path, label):
    label = np.asarray(label)
    if label.min() < 0 or label.max() > 255:
        raise DatasetError("label values must fit in 8 bits")
    PILImage.fromarray(label.astype(np.uint8), mode="L").save(path, format="PNG")


def write_mask(path, mask):
    """Binary masks are written as 0/255 grayscale for viewing."""
    PILImage.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path, format="PNG")


def resize_image(image, size, kernel="bilinear"):
    """Resize to ``size=(H, W)``; the kernel name is a PIL resampling filter."""
    resample = getattr(PILImage.Resampling, kernel.upper())
    data = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    out = PILImage.fromarray(data, mode="RGB").resize((size[1], size[0]), resample=resample)
    return np.asarray(out, dtype=np.float64) / 255.0


def resize_label(label, size):
    out = PILImage.fromarray(np.asarray(label).astype(np.uint8), mode="L").resize(
        (size[1], size[0]), resample=PILImage.Resampling.NEAREST
    )
    return np.asarray(out, dtype=np.int64)


# --- samples and manifests ---------------------------------------------------

@dataclass(frozen=True)
class DomainSample:
    image: np.ndarray
    label: np.ndarray | None
    domain: Domain
    name: str = ""

    def __post_init__(self):
        if self.domain is Domain.TARGET_NIGHT and self.label is not None:
            raise DatasetError("TARGET_NIGHT samples carry no label during training")
        if self.domain.labeled and self.label is None:
            raise DatasetError(f"{self.domain.value} sample {self.name!r} requires a label")
        if self.label is not None and self.label.shape != self.image.shape[:2]:
            raise DatasetError(f"sample {self.name!r}: label extent {self.label.shape} != image {self.image.shape[:2]}")


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    domain: Domain
    num_classes: int
    names: tuple
    class_names: tuple
    label_dir: str | None = "labels"
    split: str = ""

    def __len__(self):
        return len(self.names)

    @property
    def count(self):
        return len(self.names)

    @property
    def has_labels(self):
        return self.label_dir is not None

    def image_path(self, i):
        return self.root / "images" / f"{self.names[i]}.png"

    def label_path(self, i):
        if self.label_dir is None:
            raise DatasetError(f"manifest {self.root} has no labels")
        return self.root / self.label_dir / f"{self.names[i]}.png"

    def read(self, i):
        """Return ``(image, label_or_None)`` for sample ``i``."""
        image = read_image(self.image_path(i))
        label = None
        if self.label_dir is not None:
            label = read_label(self.label_path(i), self.num_classes)
            if label.shape != image.shape[:2]:
                raise DatasetError(f"{self.label_path(i)}: extent {label.shape} != image {image.shape[:2]}")
        return image, label

    def sample(self, i):
        image, label = self.read(i)
        if self.domain is Domain.TARGET_NIGHT:
            label = None
        return DomainSample(image=image, label=label, domain=self.domain, name=self.names[i])

    def with_labels(self, label_dir):
        """Same images, labels from ``label_dir`` (used for held-out evaluation)."""
        return DatasetManifest(self.root, self.domain, self.num_classes, self.names,
                               self.class_names, label_dir, self.split)

    def to_text(self):
        lines = [
            f"# domain: {self.domain.value}",
            f"# split: {self.split}",
            f"# num_classes: {self.num_classes}",
            f"# labels: {self.label_dir or '-'}",
            f"# count: {len(self.names)}",
        ]
        lines.extend(self.names)
        return "\n".join(lines) + "\n"

    def write_index(self, path=None):
        path = Path(path) if path is not None else self.root / INDEX_FILE
        path.write_text(self.to_text())
        return path


def _read_class_names(root, num_classes):
    for candidate in (root / CLASSES_FILE, root.parent / CLASSES_FILE):
        if candidate.is_file():
            names = tuple(line.strip() for line in candidate.read_text().splitlines() if line.strip())
            if len(names) != num_classes:
                raise DatasetError(f"{candidate}: lists {len(names)} classes, expected {num_classes}")
            return names
    return default_class_names(num_classes)


def default_class_names(num_classes):
    if num_classes == len(CITYSCAPES_CLASSES):
        return CITYSCAPES_CLASSES
    return tuple(f"class_{i}" for i in range(num_classes))


def load_dataset(root, domain, num_classes, *, split=None, label_dir=None,
                 max_prompt=DEFAULT_MAX_PROMPT, validate=True):
    """Enumerate ``<root>[/<split>]/images/*.png`` and, for labeled domains, labels.

    Every label file is read and range-checked when ``validate`` is set, so
    a returned manifest never references an out-of-range class id.
    """
    domain = Domain(domain)
    root = Path(root)
    if split:
        root = root / split
    image_dir = root / "images"
    if not image_dir.is_dir():
        raise DatasetError(f"{root}: missing images/ directory")
    names = tuple(sorted(p.stem for p in image_dir.glob("*.png")))
    if label_dir is None and domain.labeled:
        label_dir = "labels"
    if label_dir is not None:
        for name in names:
            path = root / label_dir / f"{name}.png"
            if not path.is_file():
                raise DatasetError(f"missing label for {image_dir / (name + '.png')}: expected {path}")
    if domain is Domain.PROMPT_NIGHT and max_prompt is not None and len(names) > max_prompt:
        raise DatasetError(f"{root}: {len(names)} prompt images exceeds the limit of {max_prompt}")
    manifest = DatasetManifest(
        root=root, domain=domain, num_classes=int(num_classes), names=names,
        class_names=_read_class_names(root, num_classes), label_dir=label_dir,
        split=split or root.name,
    )
    if validate and label_dir is not None:
        for i in range(len(names)):
            read_label(manifest.label_path(i), num_classes)
    return manifest


# --- synthetic scenes --------------------------------------------------------

SYNTHETIC_CLASSES = (
    "road", "sky", "building", "car", "sidewalk", "vegetation", "pole", "person",
    "traffic sign", "traffic light", "rider", "bicycle", "truck", "fence", "wall",
    "terrain", "bus", "train", "motorcycle",
)

# day colours per class; unlisted extras get seeded colours
_DAY_PALETTE = {
    "road": (0.45, 0.45, 0.47),
    "sky": (0.55, 0.75, 0.97),
    "building": (0.62, 0.52, 0.44),
    "car": (0.80, 0.12, 0.12),
    "sidewalk": (0.78, 0.74, 0.66),
    "vegetation": (0.22, 0.58, 0.20),
    "pole": (0.30, 0.30, 0.30),
    "person": (0.90, 0.65, 0.30),
    "traffic sign": (0.95, 0.85, 0.10),
    "traffic light": (0.15, 0.15, 0.10),
}


@dataclass
class SyntheticConfig:
    size: int = 64
    num_classes: int = 8
    low_similarity: tuple = ("sky",)
    night_gain: float = 0.45
    night_tint: tuple = (0.02, 0.03, 0.08)
    noise: float = 0.02
    class_names: tuple = field(default=())

    def __post_init__(self):
        if self.size % 2 or self.size < 2:
            raise DatasetError(f"synthetic size must be even, got {self.size}")
        if self.num_classes < 4:
            raise DatasetError("synthetic scenes need at least 4 classes")
        if not self.class_names:
            extra = tuple(f"object_{i}" for i in range(len(SYNTHETIC_CLASSES), self.num_classes))
            self.class_names = (SYNTHETIC_CLASSES + extra)[: self.num_classes]


def _scene_geometry(rng, cfg):
    """Layered label map: sky band, building blocks, sidewalk, road, small things."""
    s = cfg.size
    ids = {name: i for i, name in enumerate(cfg.class_names)}
    label = np.full((s, s), ids["building"], dtype=np.int64)
    rows = np.arange(s)[:, None]
    cols = np.arange(s)[None, :]

    road_top = int(rng.uniform(0.62, 0.75) * s)
    sky_line = int(rng.uniform(0.18, 0.35) * s)
    # skyline made of blocks of varying height
    col = 0
    while col < s:
        width = int(rng.integers(max(2, s // 8), max(3, s // 3)))
        top = sky_line + int(rng.integers(-s // 10, s // 6 + 1))
        label[: max(1, top), col:col + width] = ids["sky"]
        col += width
    label[road_top:, :] = ids["road"]
    if "sidewalk" in ids:
        sw = max(2, s // 16)
        label[road_top - sw:road_top, :] = ids["sidewalk"]
    if "vegetation" in ids:
        for _ in range(int(rng.integers(1, 3))):
            cy = rng.uniform(sky_line, road_top - 2)
            cx = rng.uniform(0, s)
            ry, rx = rng.uniform(0.05, 0.12) * s, rng.uniform(0.06, 0.16) * s
            blob = ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0
            label[blob & (label != ids["sky"])] = ids["vegetation"]
    for _ in range(int(rng.integers(1, 3))):
        w = int(rng.uniform(0.14, 0.24) * s)
        h = max(2, int(w * 0.5))
        x0 = int(rng.integers(0, s - w))
        y0 = int(rng.integers(road_top, max(road_top + 1, s - h)))
        label[y0:y0 + h, x0:x0 + w] = ids["car"]
    if "pole" in ids:
        for _ in range(int(rng.integers(1, 3))):
            x0 = int(rng.integers(1, s - 2))
            y0 = int(rng.uniform(0.25, 0.45) * s)
            label[y0:road_top, x0:x0 + max(1, s // 32)] = ids["pole"]
    if "person" in ids:
        for _ in range(int(rng.integers(1, 3))):
            x0 = int(rng.integers(0, s - 3))
            h = max(3, s // 10)
            label[road_top - h:road_top, x0:x0 + max(2, s // 24)] = ids["person"]
    # remaining classes become small rectangles scattered over the scene
    for name in cfg.class_names[8:]:
        c = ids[name]
        hh, ww = max(2, s // 16), max(2, s // 16)
        y0 = int(rng.integers(0, s - hh))
        x0 = int(rng.integers(0, s - ww))
        label[y0:y0 + hh, x0:x0 + ww] = c
    return label


def _palette(cfg):
    rng = np.random.default_rng(1234)
    colours = np.empty((cfg.num_classes, 3))
    for i, name in enumerate(cfg.class_names):
        colours[i] = _DAY_PALETTE.get(name, rng.uniform(0.2, 0.9, size=3))
    return colours


def _render(label, rng, cfg, night):
    s = cfg.size
    colours = _palette(cfg)
    low = {cfg.class_names.index(n) for n in cfg.low_similarity if n in cfg.class_names}
    rows = np.arange(s)[:, None]
    cols = np.arange(s)[None, :]
    # per-class texture shared by day and night so geometry and structure match
    texture = np.zeros((s, s))
    texture += 0.06 * (((rows // max(2, s // 16)) + (cols // max(2, s // 16))) % 2)
    flat = label == cfg.class_names.index("sky")
    image = colours[label] + texture[..., None] * ~flat[..., None]
    image = image + rng.normal(0.0, cfg.noise, size=image.shape)
    if night:
        gain = cfg.night_gain
        tint = np.asarray(cfg.night_tint)
        out = gain * image + tint
        for c in low:
            region = label == c
            # inverted luminance: bright by day, near-black by night, with the
            # channel order reversed so colour structure also changes
            out[region] = 0.12 * (1.0 - image[region][:, ::-1]) + tint
        image = out
    return np.clip(image, 0.0, 1.0)


def render_scene(seed, index, cfg):
    """Return ``(day_image, night_image, label)`` for one synthetic scene."""
    geo_rng = np.random.default_rng([seed, index, 0])
    label = _scene_geometry(geo_rng, cfg)
    day = _render(label, np.random.default_rng([seed, index, 1]), cfg, night=False)
    night = _render(label, np.random.default_rng([seed, index, 2]), cfg, night=True)
    return day, night, label


def _write_split(root, images, labels, label_dir):
    (root / "images").mkdir(parents=True, exist_ok=True)
    if labels is not None:
        (root / label_dir).mkdir(parents=True, exist_ok=True)
    names = []
    for i, image in enumerate(images):
        name = f"{i:05d}"
        write_image(root / "images" / f"{name}.png", image)
        if labels is not None:
            write_label(root / label_dir / f"{name}.png", labels[i])
        names.append(name)
    return tuple(names)


def generate_synthetic_dataset(out_dir, seed, n_samples, size=64, num_classes=8,
                               n_prompt=DEFAULT_MAX_PROMPT, **options):
    """Write a deterministic synthetic day/night dataset and return its manifests.

    Layout under ``out_dir``: ``day/{images,labels}``, ``night/{images,hidden_labels}``
    and ``prompt/{images,labels}`` (``n_prompt`` labeled night scenes drawn from
    geometry independent of the night split).  Returns ``(day, night)``; the
    night manifest exposes no labels.
    """
    cfg = SyntheticConfig(size=size, num_classes=num_classes, **options)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / CLASSES_FILE).write_text("\n".join(cfg.class_names) + "\n")

    days, nights, labels = [], [], []
    for i in range(n_samples):
        # day and night scenes of the same index share geometry
        day, night, label = render_scene(seed, i, cfg)
        days.append(day)
        nights.append(night)
        labels.append(label)
    day_names = _write_split(out / "day", days, labels, "labels")
    night_names = _write_split(out / "night", nights, labels, "hidden_labels")

    prompt_images, prompt_labels = [], []
    for j in range(n_prompt):
        _, night, label = render_scene(seed, n_samples + j, cfg)
        prompt_images.append(night)
        prompt_labels.append(label)
    _write_split(out / "prompt", prompt_images, prompt_labels, "labels")

    day_manifest = DatasetManifest(out / "day", Domain.SOURCE_DAY, num_classes, day_names,
                                   cfg.class_names, "labels", "day")
    night_manifest = DatasetManifest(out / "night", Domain.TARGET_NIGHT, num_classes, night_names,
                                     cfg.class_names, None, "night")
    day_manifest.write_index()
    night_manifest.write_index()
    if n_prompt:
        load_dataset(out / "prompt", Domain.PROMPT_NIGHT, num_classes,
                     max_prompt=max(n_prompt, DEFAULT_MAX_PROMPT)).write_index()
    return day_manifest, night_manifest


def small_object_ids(class_names):
    """Ids whose names are in the default small-object set."""
    return tuple(i for i, name in enumerate(class_names) if name in SMALL_OBJECT_NAMES)


def tree_digest(root):
    """Stable listing of ``(relative path, bytes)`` for determinism checks."""
    root = Path(root)
    out = []
    for dirpath, _, files in sorted(os.walk(root)):
        for f in sorted(files):
            p = Path(dirpath) / f
            out.append((str(p.relative_to(root)), p.read_bytes()))
    return out

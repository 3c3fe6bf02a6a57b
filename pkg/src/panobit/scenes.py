"""Deterministic synthetic panoptic scenes: colored shapes over stuff
backgrounds, with pixel-exact masks and (for videos) stable instance ids.

Everything is a pure function of (seed, index), so datasets never need to be
materialized to be reproducible. Train and val splits draw from disjoint
index ranges.
"""

import numpy as np

from .masks import PanopticMask

_VAL_INDEX_BASE = 10_000_000

# class id -> base RGB; appearance correlates with class so the image
# conditioning is informative.
_CLASS_COLORS = {
    1: (0.10, 0.35, 0.15),  # stuff: dark green
    2: (0.55, 0.60, 0.70),  # stuff: light gray-blue
    3: (0.15, 0.25, 0.80),  # thing: blue
    4: (0.85, 0.20, 0.15),  # thing: red
}


class SceneConfig:
    def __init__(self, height=64, width=64, num_classes=5, stuff_classes=(1, 2),
                 shape_palette=None, max_instances=8, shape_count=(1, 4),
                 size_range=(6, 13), seed=0):
        self.height = int(height)
        self.width = int(width)
        self.num_classes = int(num_classes)
        self.stuff_classes = tuple(stuff_classes)
        self.shape_palette = dict(shape_palette or {"disk": 3, "rect": 4, "tri": 4})
        self.max_instances = int(max_instances)
        self.shape_count = (int(shape_count[0]), int(shape_count[1]))
        self.size_range = (int(size_range[0]), int(size_range[1]))
        self.seed = int(seed)
        self.validate()

    @property
    def thing_classes(self):
        return tuple(sorted(set(self.shape_palette.values())))

    def validate(self):
        if self.shape_count[1] > self.max_instances:
            raise ValueError("shape_count upper bound exceeds max_instances")
        if self.shape_count[0] < 0 or self.shape_count[0] > self.shape_count[1]:
            raise ValueError(f"bad shape_count range {self.shape_count}")
        ids = list(self.stuff_classes) + list(self.shape_palette.values())
        if any(i < 1 or i >= self.num_classes for i in ids):
            raise ValueError("class ids must lie in [1, num_classes)")
        if set(self.stuff_classes) & set(self.shape_palette.values()):
            raise ValueError("stuff and thing class ids overlap")
        for cid in ids:
            if cid not in _CLASS_COLORS:
                raise ValueError(f"no color defined for class {cid}")

    def to_dict(self):
        return {
            "height": self.height,
            "width": self.width,
            "num_classes": self.num_classes,
            "stuff_classes": list(self.stuff_classes),
            "shape_palette": dict(self.shape_palette),
            "max_instances": self.max_instances,
            "shape_count": list(self.shape_count),
            "size_range": list(self.size_range),
            "seed": self.seed,
        }


class VideoSceneConfig(SceneConfig):
    def __init__(self, frames=8, speed_range=(1, 2), **kwargs):
        super().__init__(**kwargs)
        self.frames = int(frames)
        # integer per-axis speeds keep frame-to-frame motion an exact
        # translation of the rasterized shapes
        self.speed_range = (int(speed_range[0]), int(speed_range[1]))

    def to_dict(self):
        d = super().to_dict()
        d["frames"] = self.frames
        d["speed_range"] = list(self.speed_range)
        return d


def _scene_rng(cfg, index):
    return np.random.default_rng([cfg.seed, int(index)])


def _shape_pixels(kind, cy, cx, size, h, w):
    """Boolean raster of one shape (no anti-aliasing), clipped to the frame."""
    yy, xx = np.mgrid[0:h, 0:w]
    dy = yy - cy
    dx = xx - cx
    if kind == "disk":
        return dy * dy + dx * dx <= size * size
    if kind == "rect":
        return (np.abs(dy) <= size) & (np.abs(dx) <= round(size * 1.3))
    if kind == "tri":
        # upward triangle: apex at (cy - size), base at (cy + size)
        return (dy >= -size) & (dy <= size) & (np.abs(dx) <= (dy + size) * 0.75)
    raise ValueError(f"unknown shape kind '{kind}'")


def _draw_background(cfg, rng):
    h, w = cfg.height, cfg.width
    cls = np.zeros((h, w), dtype=np.uint16)
    if len(cfg.stuff_classes) >= 2 and rng.random() < 0.7:
        top, bottom = rng.choice(cfg.stuff_classes, size=2, replace=False)
        split = int(rng.integers(h // 4, 3 * h // 4))
        cls[:split] = top
        cls[split:] = bottom
    else:
        cls[:] = rng.choice(cfg.stuff_classes)
    return cls


def _sample_objects(cfg, rng):
    """Shape descriptors drawn once per scene (shared by all video frames)."""
    n = int(rng.integers(cfg.shape_count[0], cfg.shape_count[1] + 1))
    objects = []
    kinds = sorted(cfg.shape_palette)
    for _ in range(n):
        kind = kinds[int(rng.integers(len(kinds)))]
        size = int(rng.integers(cfg.size_range[0], cfg.size_range[1] + 1))
        cy = int(rng.integers(size, cfg.height - size))
        cx = int(rng.integers(size, cfg.width - size))
        jitter = rng.uniform(-0.08, 0.08, 3)
        objects.append({"kind": kind, "cy": cy, "cx": cx, "size": size, "jitter": jitter})
    return objects


def _render(cfg, background_cls, objects, noise, offsets=None):
    """Paint background + objects (painter's order) into (image, mask)."""
    h, w = cfg.height, cfg.width
    cls = background_cls.copy()
    inst = np.zeros((h, w), dtype=np.uint16)
    image = np.zeros((h, w, 3), dtype=np.float32)
    for region_class in np.unique(background_cls):
        sel = background_cls == region_class
        image[sel] = _CLASS_COLORS[int(region_class)]
    for idx, obj in enumerate(objects):
        dy, dx = (0, 0) if offsets is None else offsets[idx]
        pix = _shape_pixels(obj["kind"], obj["cy"] + dy, obj["cx"] + dx, obj["size"], h, w)
        if not pix.any():
            continue
        cid = cfg.shape_palette[obj["kind"]]
        cls[pix] = cid
        inst[pix] = idx + 1
        color = np.clip(np.asarray(_CLASS_COLORS[cid]) + obj["jitter"], 0.0, 1.0)
        image[pix] = color.astype(np.float32)
    image += noise
    np.clip(image, 0.0, 1.0, out=image)
    mask = PanopticMask(cls, inst, cfg.num_classes, cfg.max_instances)
    return image, mask


def _pixel_noise(cfg, rng):
    return rng.normal(0.0, 0.02, (cfg.height, cfg.width, 3)).astype(np.float32)


def gen_scene(cfg, index):
    """(image [H,W,3] float32 in [0,1], PanopticMask), deterministic in (seed, index)."""
    rng = _scene_rng(cfg, index)
    background = _draw_background(cfg, rng)
    objects = _sample_objects(cfg, rng)
    return _render(cfg, background, objects, _pixel_noise(cfg, rng))


def gen_video(cfg, index):
    """(frames, masks, identity table) for one synthetic video.

    Objects translate with constant integer velocity and keep their instance
    id for the whole video; the identity table maps (frame, instance id) ->
    object index.
    """
    rng = _scene_rng(cfg, index)
    background = _draw_background(cfg, rng)
    objects = _sample_objects(cfg, rng)
    lo, hi = cfg.speed_range
    velocities = []
    for _ in objects:
        vy = int(rng.integers(lo, hi + 1)) * (1 if rng.random() < 0.5 else -1)
        vx = int(rng.integers(lo, hi + 1)) * (1 if rng.random() < 0.5 else -1)
        velocities.append((vy, vx))
    # one noise field for the whole clip: zero velocity gives identical frames
    noise = _pixel_noise(cfg, rng)
    frames, masks, identity = [], [], []
    for f in range(cfg.frames):
        offsets = [(vy * f, vx * f) for vy, vx in velocities]
        image, mask = _render(cfg, background, objects, noise, offsets)
        frames.append(image)
        masks.append(mask)
        present = np.unique(mask.instance_ids)
        identity.append({int(i): int(i) - 1 for i in present if i > 0})
    return frames, masks, identity


def split_index(split, i):
    if split == "train":
        return i
    if split == "val":
        return _VAL_INDEX_BASE + i
    raise ValueError(f"split must be 'train' or 'val', got '{split}'")


class SceneDataset:
    """Stable enumeration of generated samples for one split."""

    def __init__(self, cfg, split, size):
        if size < 0:
            raise ValueError("size must be >= 0")
        self.cfg = cfg
        self.split = split
        self.size = int(size)
        split_index(split, 0)  # validates split name

    def __len__(self):
        return self.size

    def index(self, i):
        if not 0 <= i < self.size:
            raise IndexError(i)
        return split_index(self.split, i)

    def __getitem__(self, i):
        return gen_scene(self.cfg, self.index(i))

    def __iter__(self):
        for i in range(self.size):
            yield self[i]


class VideoDataset(SceneDataset):
    def __getitem__(self, i):
        return gen_video(self.cfg, self.index(i))

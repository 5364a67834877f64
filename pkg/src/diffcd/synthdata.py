"""Synthetic bi-temporal scenes with exact change masks.

A scene is a smooth background gradient with non-overlapping rectangles and
disks.  Time B copies the scene, then each object is independently added,
removed or moved with probability ``change_rate``; the union of old and new
footprints of changed objects is the change mask.  Only afterwards are
nuisances applied: a global brightness shift and a global sub-pixel
translation of B, and fresh pixel noise on both images.  Nuisances never enter
the mask.

Footprints use pixel centres at integer coordinates, the same convention as
:func:`diffcd.numerics.bilinear_warp`.  Rendering is anti-aliased with 4x4
supersampling.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from diffcd.errors import ConfigError, LoadError
from diffcd.numerics import Rng, Tensor, bilinear_warp, standard_normal
from diffcd.pgm import from_pixels, read_pgm, to_pixels, write_pgm

_SUBSAMPLE = (np.arange(4) + 0.5) / 4 - 0.5
CHANGE_KINDS = ("add", "remove", "move")


@dataclass(frozen=True)
class SceneConfig:
    size: int = 32
    n_objects: tuple[int, int] = (3, 6)
    change_rate: float = 0.5
    illum_delta: float = 0.1
    noise_sigma: float = 0.02
    misreg_max: float = 0.5
    seed: int = 0
    channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "n_objects", tuple(int(v) for v in self.n_objects))
        if len(self.n_objects) != 2 or not 0 <= self.n_objects[0] <= self.n_objects[1]:
            raise ConfigError(f"n_objects must be a range [lo, hi] with 0 <= lo <= hi, got {self.n_objects}")
        if self.size < 8:
            raise ConfigError(f"size must be at least 8, got {self.size}")
        if not 0.0 <= self.change_rate <= 1.0:
            raise ConfigError(f"change_rate must lie in [0, 1], got {self.change_rate}")
        if self.misreg_max < 0 or self.illum_delta < 0 or self.noise_sigma < 0:
            raise ConfigError("misreg_max, illum_delta and noise_sigma must be non-negative")
        if self.channels != 1:
            raise ConfigError("only single-channel scenes are generated")

    def check_depth(self, depth: int) -> None:
        if self.size % 2 ** depth:
            raise ConfigError(f"scene size {self.size} not divisible by 2**{depth}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_objects"] = list(self.n_objects)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown scene config keys: {unknown}")
        return cls(**d)


@dataclass
class SceneObject:
    kind: str  # "rect" or "disk"
    cy: float
    cx: float
    ry: float  # half-height, or radius for disks
    rx: float
    intensity: float

    def moved(self, cy: float, cx: float) -> "SceneObject":
        return SceneObject(self.kind, cy, cx, self.ry, self.rx, self.intensity)


@dataclass
class SamplePair:
    img_a: np.ndarray  # (1, size, size) in [-1, 1]
    img_b: np.ndarray
    mask: np.ndarray  # (size, size) uint8 in {0, 1}
    meta: dict = field(default_factory=dict)


def inside(obj: SceneObject, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    dy = ys - obj.cy
    dx = xs - obj.cx
    if obj.kind == "disk":
        return dy * dy + dx * dx <= obj.ry * obj.ry
    return (np.abs(dy) <= obj.ry) & (np.abs(dx) <= obj.rx)


def footprint(obj: SceneObject, size: int) -> np.ndarray:
    """Pixels whose centre lies inside the object."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    return inside(obj, ys, xs)


def coverage(obj: SceneObject, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    cov = np.zeros((size, size))
    for oy in _SUBSAMPLE:
        for ox in _SUBSAMPLE:
            cov += inside(obj, ys + oy, xs + ox)
    return cov / _SUBSAMPLE.size ** 2


def render(background: np.ndarray, objects: list[SceneObject]) -> np.ndarray:
    img = background.copy()
    for obj in objects:
        cov = coverage(obj, img.shape[0])
        img = img * (1.0 - cov) + obj.intensity * cov
    return img


def _background(rng: Rng, size: int) -> np.ndarray:
    base, gy, gx = rng.uniform_range(-0.7, -0.3), *rng.uniform_range(-0.3, 0.3, 2)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) / size - 0.5
    return base + gy * ys + gx * xs


def _bbox(obj: SceneObject):
    return obj.cy - obj.ry, obj.cy + obj.ry, obj.cx - obj.rx, obj.cx + obj.rx


def _overlaps(obj: SceneObject, others: list[SceneObject], gap: float = 1.5) -> bool:
    y0, y1, x0, x1 = _bbox(obj)
    for o in others:
        oy0, oy1, ox0, ox1 = _bbox(o)
        if y0 - gap <= oy1 and oy0 - gap <= y1 and x0 - gap <= ox1 and ox0 - gap <= x1:
            return True
    return False


def _place(rng: Rng, shape: SceneObject, size: int, others: list[SceneObject],
           attempts: int = 50) -> SceneObject | None:
    for _ in range(attempts):
        cy = rng.uniform_range(shape.ry + 1.0, size - 2.0 - shape.ry)
        cx = rng.uniform_range(shape.rx + 1.0, size - 2.0 - shape.rx)
        cand = shape.moved(cy, cx)
        if not _overlaps(cand, others):
            return cand
    return None


def _random_object(rng: Rng, size: int) -> SceneObject:
    kind = "disk" if rng.uniform(1)[0] < 0.5 else "rect"
    r_max = max(2.5, size / 7)
    ry = rng.uniform_range(2.0, r_max)
    rx = ry if kind == "disk" else rng.uniform_range(2.0, r_max)
    intensity = rng.uniform_range(0.1, 0.9)
    return SceneObject(kind, 0.0, 0.0, ry, rx, intensity)


def generate_pair(cfg: SceneConfig, index: int) -> SamplePair:
    """Deterministic in ``(cfg, index)``."""
    rng = Rng(cfg.seed).fork(index)
    size = cfg.size
    background = _background(rng, size)

    objects: list[SceneObject] = []
    count = int(rng.integers(cfg.n_objects[0], cfg.n_objects[1], 1)[0])
    for _ in range(count):
        placed = _place(rng, _random_object(rng, size), size, objects)
        if placed is not None:
            objects.append(placed)

    in_a: list[SceneObject] = []
    in_b: list[SceneObject] = []
    mask = np.zeros((size, size), dtype=bool)
    records = []
    for i, obj in enumerate(objects):
        change = None
        if rng.uniform(1)[0] < cfg.change_rate:
            change = CHANGE_KINDS[int(rng.integers(0, 2, 1)[0])]
        new_obj = obj
        if change == "move":
            others = [o for j, o in enumerate(objects) if j != i] + in_b
            new_obj = _place(rng, obj, size, others)
            if new_obj is None:
                change = "remove"
        if change in (None, "remove", "move"):
            in_a.append(obj)
        if change in (None, "add"):
            in_b.append(obj)
        if change == "move":
            in_b.append(new_obj)
        if change in ("add", "remove"):
            mask |= footprint(obj, size)
        elif change == "move":
            mask |= footprint(obj, size) | footprint(new_obj, size)
        records.append({**asdict(obj), "change": change,
                        "moved_to": [new_obj.cy, new_obj.cx] if change == "move" else None})

    img_a = render(background, in_a)
    img_b = render(background, in_b)

    shift = rng.uniform_range(-cfg.illum_delta, cfg.illum_delta)
    ty, tx = rng.uniform_range(-cfg.misreg_max, cfg.misreg_max, 2)
    img_b = img_b + shift
    flow = np.empty((1, 2, size, size))
    flow[0, 0] = tx
    flow[0, 1] = ty
    img_b = bilinear_warp(Tensor(img_b[None, None]), Tensor(flow)).data[0, 0]
    img_a = img_a + cfg.noise_sigma * standard_normal(rng, (size, size))
    img_b = img_b + cfg.noise_sigma * standard_normal(rng, (size, size))

    meta = {
        "index": int(index),
        "illum_shift": shift,
        "translation": [tx, ty],
        "noise_sigma": cfg.noise_sigma,
        "objects": records,
    }
    return SamplePair(np.clip(img_a, -1.0, 1.0)[None], np.clip(img_b, -1.0, 1.0)[None],
                      mask.astype(np.uint8), meta)


MANIFEST = "manifest.json"


def write_dataset(cfg: SceneConfig, count: int, out_dir) -> dict:
    """Write ``A_i.pgm``, ``B_i.pgm``, ``M_i.pgm`` for ``i < count`` plus ``manifest.json``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    samples = []
    for i in range(count):
        pair = generate_pair(cfg, i)
        names = {"a": f"A_{i}.pgm", "b": f"B_{i}.pgm", "mask": f"M_{i}.pgm"}
        try:
            write_pgm(out / names["a"], to_pixels(pair.img_a[0]))
            write_pgm(out / names["b"], to_pixels(pair.img_b[0]))
            write_pgm(out / names["mask"], pair.mask.astype(np.int64) * 255)
        except OSError as exc:
            raise OSError(f"failed writing sample {i} to {out}: {exc}") from exc
        samples.append({**names, "meta": pair.meta})
    manifest = {"format": "diffcd-synth", "version": 1, "config": cfg.to_dict(),
                "count": count, "samples": samples}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_dataset(data_dir) -> list[SamplePair]:
    root = Path(data_dir)
    path = root / MANIFEST
    if not path.is_file():
        raise LoadError(f"no {MANIFEST} in {root}")
    try:
        manifest = json.loads(path.read_text())
        count = int(manifest["count"])
        samples = manifest["samples"]
    except (ValueError, KeyError, TypeError) as exc:
        raise LoadError(f"{path}: corrupt manifest ({exc})") from exc
    if count != len(samples):
        raise LoadError(f"{path}: count {count} but {len(samples)} sample entries")
    on_disk = len(list(root.glob("A_*.pgm")))
    if on_disk != count:
        raise LoadError(f"{root}: manifest lists {count} samples but {on_disk} A_*.pgm files exist")
    pairs = []
    for entry in samples:
        imgs = {}
        for key in ("a", "b", "mask"):
            pixels, maxval = read_pgm(root / entry[key])
            imgs[key] = (pixels, maxval)
        a, b = from_pixels(*imgs["a"]), from_pixels(*imgs["b"])
        if a.shape != b.shape or imgs["mask"][0].shape != a.shape:
            raise LoadError(f"{root}: sample {entry['a']} has mismatched extents")
        mask = (imgs["mask"][0] >= 128).astype(np.uint8)
        pairs.append(SamplePair(a[None], b[None], mask, entry.get("meta", {})))
    return pairs


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / MANIFEST
    try:
        return json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc

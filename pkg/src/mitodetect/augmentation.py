"""Training and validation transforms.

Transforms act on :class:`PatchRecord` objects and return new records.
Geometric ops move centroid annotations together with the pixels; class
labels are never touched. Every random choice comes from an explicit
``numpy.random.Generator`` (or an int seed), so replaying the same state
reproduces the output exactly.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .data_model import PatchRecord

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

Centroids = list[tuple[float, float]] | None


def as_rng(state) -> np.random.Generator:
    if isinstance(state, np.random.Generator):
        return state
    return np.random.default_rng(state)


def worker_seed(global_seed: int, worker_id: int, epoch: int) -> int:
    """Per-worker, per-epoch stream seed."""
    return (global_seed ^ (worker_id * 0x9E3779B1) ^ (epoch * 0x85EBCA77)) & 0xFFFFFFFF


# --------------------------------------------------------------------------
# primitive ops: (image uint8 HxWx3, centroids, rng, **params) -> (image, centroids)
# --------------------------------------------------------------------------

def _keep_inside(cents, h, w):
    return [(x, y) for x, y in cents if 0 <= x < w and 0 <= y < h]


def resize(image: np.ndarray, size: tuple[int, int], cents: Centroids = None):
    """Bilinear resize to ``(h, w)``; centroids follow pixel-centre geometry."""
    h, w = image.shape[:2]
    nh, nw = size
    if (h, w) == (nh, nw):
        return image, cents
    out = np.asarray(Image.fromarray(image).resize((nw, nh), Image.BILINEAR))
    if cents is not None:
        sx, sy = nw / w, nh / h
        cents = _keep_inside([((x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5) for x, y in cents], nh, nw)
    return out, cents


def crop(image: np.ndarray, top: int, left: int, ch: int, cw: int, cents: Centroids = None):
    out = image[top:top + ch, left:left + cw]
    if cents is not None:
        cents = _keep_inside([(x - left, y - top) for x, y in cents], ch, cw)
    return out, cents


def center_crop(image, size: int, cents: Centroids = None):
    h, w = image.shape[:2]
    top, left = max(0, (h - size) // 2), max(0, (w - size) // 2)
    return crop(image, top, left, min(size, h), min(size, w), cents)


def hflip(image, cents, rng=None):
    w = image.shape[1]
    return image[:, ::-1].copy(), None if cents is None else [(w - 1 - x, y) for x, y in cents]


def vflip(image, cents, rng=None):
    h = image.shape[0]
    return image[::-1].copy(), None if cents is None else [(x, h - 1 - y) for x, y in cents]


def rotate(image, cents, rng, max_degrees: float = 30.0, degrees: float | None = None):
    """Rotate about the image centre with reflect padding."""
    if degrees is None:
        degrees = rng.uniform(-max_degrees, max_degrees)
    h, w = image.shape[:2]
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    center = np.array([(h - 1) / 2, (w - 1) / 2])
    # (row, col) coordinates; forward rotation R, sampling uses R^-1
    rot = np.array([[c, s], [-s, c]])
    inv = rot.T
    offset = center - inv @ center
    out = np.stack([
        ndimage.affine_transform(image[..., ch].astype(np.float32), inv, offset=offset,
                                 order=1, mode="mirror")
        for ch in range(image.shape[2])
    ], axis=-1)
    out = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    if cents is not None:
        moved = []
        for x, y in cents:
            r, col = rot @ (np.array([y, x]) - center) + center
            moved.append((float(col), float(r)))
        cents = _keep_inside(moved, h, w)
    return out, cents


def random_resized_crop(image, cents, rng, scale=(0.8, 1.0), ratio=(3 / 4, 4 / 3), size=None):
    h, w = image.shape[:2]
    area = h * w
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(math.log(ratio[0]), math.log(ratio[1])))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            break
    else:
        ch = cw = min(h, w)
        top, left = (h - ch) // 2, (w - cw) // 2
    image, cents = crop(image, top, left, ch, cw, cents)
    return resize(image, size or (h, w), cents)


def _blend(a: np.ndarray, b: np.ndarray, factor: float) -> np.ndarray:
    return np.clip(b + factor * (a.astype(np.float32) - b), 0, 255).astype(np.uint8)


def _gray(image: np.ndarray) -> np.ndarray:
    return (image.astype(np.float32) @ np.array([0.299, 0.587, 0.114], dtype=np.float32))[..., None]


def adjust_brightness(image, factor: float):
    return _blend(image, np.zeros_like(image, dtype=np.float32), factor)


def adjust_contrast(image, factor: float):
    return _blend(image, np.full(image.shape, _gray(image).mean(), dtype=np.float32), factor)


def adjust_saturation(image, factor: float):
    return _blend(image, np.broadcast_to(_gray(image), image.shape), factor)


def adjust_hue(image, shift: float):
    """Rotate hue by ``shift`` turns (in [-0.5, 0.5])."""
    hsv = np.asarray(Image.fromarray(image).convert("HSV")).copy()
    hsv[..., 0] = ((hsv[..., 0].astype(np.int32) + int(round(shift * 255))) % 256).astype(np.uint8)
    return np.asarray(Image.fromarray(hsv, "HSV").convert("RGB"))


def color_jitter(image, cents, rng, brightness=0.2, contrast=0.2, saturation=0.2, hue=0.05):
    image = adjust_brightness(image, rng.uniform(1 - brightness, 1 + brightness))
    image = adjust_contrast(image, rng.uniform(1 - contrast, 1 + contrast))
    image = adjust_saturation(image, rng.uniform(1 - saturation, 1 + saturation))
    if hue > 0:
        image = adjust_hue(image, rng.uniform(-hue, hue))
    return image, cents


def grayscale(image, cents, rng=None):
    g = np.clip(np.rint(_gray(image)), 0, 255).astype(np.uint8)
    return np.repeat(g, 3, axis=2), cents


def random_erasing(image, cents, rng, scale=(0.02, 0.2), ratio=(0.3, 3.3)):
    h, w = image.shape[:2]
    out = image.copy()
    for _ in range(10):
        target = h * w * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(math.log(ratio[0]), math.log(ratio[1])))
        eh = int(round(math.sqrt(target * aspect)))
        ew = int(round(math.sqrt(target / aspect)))
        if 0 < eh < h and 0 < ew < w:
            top, left = int(rng.integers(0, h - eh + 1)), int(rng.integers(0, w - ew + 1))
            out[top:top + eh, left:left + ew] = rng.integers(0, 256, (eh, ew, 3), dtype=np.uint8)
            break
    return out, cents


OPS: dict[str, Callable] = {
    "random_resized_crop": random_resized_crop,
    "hflip": hflip,
    "vflip": vflip,
    "rotate": rotate,
    "color_jitter": color_jitter,
    "grayscale": grayscale,
    "random_erasing": random_erasing,
}

GEOMETRIC = {"random_resized_crop", "hflip", "vflip", "rotate"}


# magnitude m in [0, 1] -> concrete op for the strong-augment pool
def _strong(name: str, image, cents, rng, m: float):
    sign = 1 if rng.random() < 0.5 else -1
    if name == "flip":
        return (hflip if rng.random() < 0.5 else vflip)(image, cents)
    if name == "hflip":
        return hflip(image, cents)
    if name == "vflip":
        return vflip(image, cents)
    if name == "rotate":
        return rotate(image, cents, rng, degrees=sign * 30.0 * m)
    if name == "brightness":
        return adjust_brightness(image, 1 + sign * 0.5 * m), cents
    if name == "contrast":
        return adjust_contrast(image, 1 + sign * 0.5 * m), cents
    if name == "saturation":
        return adjust_saturation(image, 1 + sign * 0.8 * m), cents
    if name == "hue":
        return adjust_hue(image, sign * 0.1 * m), cents
    if name == "grayscale":
        return grayscale(image, cents)
    if name == "erase":
        return random_erasing(image, cents, rng, scale=(0.02, 0.02 + 0.2 * m))
    raise KeyError(f"unknown strong-augment op {name!r}")


STRONG_POOL = ("flip", "rotate", "brightness", "contrast", "saturation", "hue", "grayscale", "erase")


# --------------------------------------------------------------------------
# policies
# --------------------------------------------------------------------------

@dataclass
class AugOp:
    name: str
    params: dict = field(default_factory=dict)
    probability: float = 0.5

    def __post_init__(self):
        if self.name not in OPS:
            raise KeyError(f"unknown op {self.name!r}; available: {sorted(OPS)}")
        if not 0 <= self.probability <= 1:
            raise ValueError(f"probability must be in [0, 1], got {self.probability}")


@dataclass
class StrongAugmentConfig:
    num_ops: int = 2
    magnitude_range: tuple[float, float] = (0.1, 0.9)
    pool: tuple[str, ...] = STRONG_POOL
    probability: float = 1.0


@dataclass
class AugmentPolicy:
    ops: list[AugOp] = field(default_factory=list)
    strong_augment: StrongAugmentConfig | None = None
    output_size: int | None = 224
    seed: int = 0

    @classmethod
    def classification(cls, output_size: int = 224, seed: int = 0) -> "AugmentPolicy":
        return cls(
            ops=[
                AugOp("random_resized_crop", {"scale": (0.8, 1.0)}, 1.0),
                AugOp("hflip", {}, 0.5),
                AugOp("vflip", {}, 0.5),
                AugOp("rotate", {"max_degrees": 30.0}, 0.5),
                AugOp("color_jitter", {"brightness": 0.2, "contrast": 0.2, "saturation": 0.2, "hue": 0.05}, 0.8),
                AugOp("grayscale", {}, 0.1),
                AugOp("random_erasing", {}, 0.25),
            ],
            strong_augment=StrongAugmentConfig(),
            output_size=output_size,
            seed=seed,
        )

    @classmethod
    def detection(cls, seed: int = 0) -> "AugmentPolicy":
        """Geometric subset only; patch size is preserved."""
        return cls(
            ops=[AugOp("hflip", {}, 0.5), AugOp("vflip", {}, 0.5), AugOp("rotate", {"max_degrees": 30.0}, 0.5)],
            output_size=None,
            seed=seed,
        )

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d: dict | None) -> "AugmentPolicy | None":
        if d is None:
            return None
        strong = d.get("strong_augment")
        if strong is not None:
            strong = StrongAugmentConfig(
                strong["num_ops"], tuple(strong["magnitude_range"]), tuple(strong["pool"]),
                strong.get("probability", 1.0),
            )
        return cls([AugOp(**o) for o in d.get("ops", [])], strong, d.get("output_size"), d.get("seed", 0))


def _replace(record: PatchRecord, image: np.ndarray, cents: Centroids) -> PatchRecord:
    return dataclasses.replace(
        record, image=image, centroids=cents, height=image.shape[0], width=image.shape[1]
    )


def strong_augment(
    record: PatchRecord,
    k_ops: int = 2,
    rng_state=None,
    pool: Sequence[str] = STRONG_POOL,
    magnitude_range: tuple[float, float] = (0.1, 0.9),
) -> PatchRecord:
    """Apply ``k_ops`` distinct ops drawn uniformly from ``pool``, in sampled order."""
    if k_ops < 1:
        raise ValueError("k_ops must be >= 1")
    rng = as_rng(rng_state)
    pool = list(pool)
    chosen = [pool[i] for i in rng.choice(len(pool), size=min(k_ops, len(pool)), replace=False)]
    image, cents = record.load_image(), record.centroids
    for name in chosen:
        image, cents = _strong(name, image, cents, rng, rng.uniform(*magnitude_range))
    out = _replace(record, image, cents)
    out.applied_ops = chosen
    return out


def train_transform(record: PatchRecord, policy: AugmentPolicy, rng_state=None) -> PatchRecord:
    """Stochastic training transform; resizes to ``policy.output_size`` if set."""
    rng = as_rng(policy.seed if rng_state is None else rng_state)
    image, cents = record.load_image(), record.centroids
    if image.size == 0:
        raise ValueError(f"record {record.patch_id!r} has an empty image")
    for op in policy.ops:
        if rng.random() < op.probability:
            params = dict(op.params)
            if op.name == "random_resized_crop" and policy.output_size:
                params.setdefault("size", (policy.output_size, policy.output_size))
            image, cents = OPS[op.name](image, cents, rng, **params)
    out = _replace(record, image, cents)
    sa = policy.strong_augment
    if sa is not None and rng.random() < sa.probability:
        out = strong_augment(out, sa.num_ops, rng, sa.pool, sa.magnitude_range)
    if policy.output_size:
        image, cents = resize(out.image, (policy.output_size, policy.output_size), out.centroids)
        out = _replace(out, image, cents)
    return out


def normalize(image: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    """uint8 HxWx3 -> float32 HxWx3, scaled to [0, 1] then standardised per channel."""
    x = image.astype(np.float32) / 255.0
    return (x - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)


def val_transform(
    record: PatchRecord,
    size: int = 224,
    crop_fraction: float = 0.875,
    mean=IMAGENET_MEAN,
    std=IMAGENET_STD,
) -> PatchRecord:
    """Resize, centre-crop and normalise. The returned image is float32."""
    image, cents = val_resize_crop(record.load_image(), size, crop_fraction, record.centroids)
    return _replace(record, normalize(image, mean, std), cents)


def val_resize_crop(image: np.ndarray, size: int = 224, crop_fraction: float = 0.875, cents: Centroids = None):
    """The geometric half of :func:`val_transform` (uint8 in, uint8 out)."""
    resize_to = int(math.floor(size / crop_fraction))
    image, cents = resize(image, (resize_to, resize_to), cents)
    return center_crop(image, size, cents)

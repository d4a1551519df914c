"""Dataset records, manifest I/O and the synthetic data generator.

A manifest is a JSON-lines file. The first line is a header
``{"schema_version": 1, "track": "detection"}``; each following line is one
patch record. Images live next to the manifest as 8-bit RGB PNGs and are
referenced by a path relative to the manifest file.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

SCHEMA_VERSION = 1
TRACKS = ("detection", "classification")
NUM_DOMAINS = 4


class ManifestError(ValueError):
    """Raised when a manifest or record violates its schema."""


@dataclass
class PatchRecord:
    patch_id: str
    slide_id: str
    domain_id: int
    mpp: float
    image_path: str | None = None
    centroids: list[tuple[float, float]] | None = None
    class_label: int | None = None
    image: np.ndarray | None = field(default=None, repr=False, compare=False)
    height: int | None = None
    width: int | None = None
    root: Path | None = field(default=None, repr=False, compare=False)

    def load_image(self, root: str | Path | None = None) -> np.ndarray:
        """Return the H x W x 3 uint8 raster, reading it from disk on first use."""
        if self.image is None:
            if self.image_path is None:
                raise ManifestError(f"record {self.patch_id!r} has neither pixels nor image_path")
            path = Path(self.image_path)
            root = root if root is not None else self.root
            if root is not None and not path.is_absolute():
                path = Path(root) / path
            with Image.open(path) as im:
                self.image = np.asarray(im.convert("RGB"), dtype=np.uint8)
            self.height, self.width = self.image.shape[:2]
        return self.image

    @property
    def is_positive(self) -> bool:
        """Mitosis present (detection) or atypical (classification)."""
        if self.class_label is not None:
            return self.class_label == 1
        return bool(self.centroids)

    def validate(self, track: str) -> None:
        if not self.patch_id:
            raise ManifestError("record with empty patch_id")
        if not (self.mpp > 0):
            raise ManifestError(f"record {self.patch_id!r}: mpp must be > 0, got {self.mpp}")
        has_centroids = self.centroids is not None
        has_label = self.class_label is not None
        if has_centroids == has_label:
            raise ManifestError(
                f"record {self.patch_id!r}: exactly one of centroids / class_label is required"
            )
        if track == "detection" and not has_centroids:
            raise ManifestError(f"record {self.patch_id!r}: detection records need centroids")
        if track == "classification":
            if not has_label:
                raise ManifestError(f"record {self.patch_id!r}: classification records need class_label")
            if self.class_label not in (0, 1):
                raise ManifestError(f"record {self.patch_id!r}: class_label must be 0 or 1")
        if has_centroids and self.height is not None and self.width is not None:
            for x, y in self.centroids:
                if not (0 <= x < self.width and 0 <= y < self.height):
                    raise ManifestError(
                        f"record {self.patch_id!r}: centroid ({x}, {y}) outside "
                        f"{self.width}x{self.height} image"
                    )

    def to_json(self) -> dict:
        out = {
            "patch_id": self.patch_id,
            "slide_id": self.slide_id,
            "domain_id": self.domain_id,
            "mpp": self.mpp,
            "image_path": self.image_path,
        }
        if self.centroids is not None:
            out["centroids"] = [[float(x), float(y)] for x, y in self.centroids]
        else:
            out["class_label"] = self.class_label
        return out


@dataclass
class DatasetManifest:
    records: list[PatchRecord]
    track: str
    schema_version: int = SCHEMA_VERSION
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_id(self) -> dict[str, PatchRecord]:
        return {r.patch_id: r for r in self.records}

    def subset(self, ids: Iterable[str]) -> list[PatchRecord]:
        lookup = self.by_id()
        return [lookup[i] for i in sorted(ids)]

    def image(self, record: PatchRecord) -> np.ndarray:
        return record.load_image(self.root)

    def validate(self) -> None:
        if self.track not in TRACKS:
            raise ManifestError(f"unknown track {self.track!r}; expected one of {TRACKS}")
        seen = set()
        for rec in self.records:
            if rec.patch_id in seen:
                raise ManifestError(f"duplicate patch_id {rec.patch_id!r}")
            seen.add(rec.patch_id)
            rec.validate(self.track)


def _image_size(path: Path) -> tuple[int, int]:
    with Image.open(path) as im:
        return im.size


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse and fully validate a manifest file.

    Raises:
        FileNotFoundError: the manifest or a referenced image is missing.
        ManifestError: schema violation or duplicate ``patch_id``.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise ManifestError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: header is not valid JSON") from exc
    if "track" not in header or "schema_version" not in header:
        raise ManifestError(f"{path}: header must carry schema_version and track")
    if header["schema_version"] != SCHEMA_VERSION:
        raise ManifestError(f"{path}: unsupported schema_version {header['schema_version']}")

    root = path.parent
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: invalid JSON") from exc
        pid = raw.get("patch_id", f"<line {lineno}>")
        missing = [k for k in ("patch_id", "slide_id", "domain_id", "mpp", "image_path") if k not in raw]
        if missing:
            raise ManifestError(f"record {pid!r}: missing fields {missing}")
        centroids = raw.get("centroids")
        if centroids is not None:
            centroids = [(float(c[0]), float(c[1])) for c in centroids]
        rec = PatchRecord(
            patch_id=str(raw["patch_id"]),
            slide_id=str(raw["slide_id"]),
            domain_id=int(raw["domain_id"]),
            mpp=float(raw["mpp"]),
            image_path=raw["image_path"],
            centroids=centroids,
            class_label=None if raw.get("class_label") is None else int(raw["class_label"]),
        )
        img_path = root / rec.image_path
        if not img_path.is_file():
            raise FileNotFoundError(f"record {rec.patch_id!r}: image not found: {img_path}")
        rec.width, rec.height = _image_size(img_path)
        rec.root = root
        records.append(rec)

    manifest = DatasetManifest(records, header["track"], header["schema_version"], root)
    manifest.validate()
    return manifest


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    """Write the manifest index and any in-memory images next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest.validate()
    lines = [json.dumps({"schema_version": manifest.schema_version, "track": manifest.track})]
    for rec in manifest.records:
        if rec.image is not None:
            rel = rec.image_path or f"images/{rec.patch_id}.png"
            out = path.parent / rel
            out.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(rec.image).save(out, optimize=False)
            rec.image_path = rel
        rec.root = path.parent
        lines.append(json.dumps(rec.to_json()))
    path.write_text("\n".join(lines) + "\n")
    manifest.root = path.parent
    return path


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------

def _smooth_noise(rng: np.random.Generator, h: int, w: int, cell: int) -> np.ndarray:
    coarse = rng.random((h // cell + 2, w // cell + 2)).astype(np.float32)
    im = Image.fromarray((coarse * 255).astype(np.uint8)).resize(
        ((w // cell + 2) * cell, (h // cell + 2) * cell), Image.BILINEAR
    )
    return np.asarray(im, dtype=np.float32)[:h, :w] / 255.0


def _tissue_background(rng: np.random.Generator, size: int) -> np.ndarray:
    # pink eosin-like base with low-frequency texture and grain
    base = np.array([225.0, 170.0, 200.0]) + rng.normal(0, 6, 3)
    tex = _smooth_noise(rng, size, size, 16) - 0.5
    grain = rng.normal(0, 4, (size, size, 1))
    img = base[None, None, :] + 40 * tex[..., None] * np.array([1.0, 0.8, 0.6]) + grain
    return img


def _ellipse_mask(size: int, cx: float, cy: float, a: float, b: float, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    dx, dy = xx - cx, yy - cy
    c, s = math.cos(theta), math.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    return u * u + v * v <= 1.0


def _paint(img: np.ndarray, mask: np.ndarray, color) -> None:
    img[mask] = 0.15 * img[mask] + 0.85 * np.asarray(color, dtype=np.float64)


def _place_centroids(rng, size, count, margin, min_dist):
    pts: list[tuple[float, float]] = []
    attempts = 0
    while len(pts) < count and attempts < 1000:
        attempts += 1
        x, y = (float(v) for v in rng.integers(margin, size - margin, 2))
        if all((x - px) ** 2 + (y - py) ** 2 >= min_dist**2 for px, py in pts):
            pts.append((x, y))
    return pts


def _detection_image(rng, size, positive):
    img = _tissue_background(rng, size)
    # dim, darker nuclei act as distractors
    for _ in range(int(rng.integers(2, 6))):
        cx, cy = rng.uniform(0, size, 2)
        m = _ellipse_mask(size, cx, cy, rng.uniform(3, 6), rng.uniform(3, 6), rng.uniform(0, np.pi))
        _paint(img, m, (150, 110, 160))
    centroids: list[tuple[float, float]] = []
    if positive:
        n = int(rng.integers(1, 4))
        centroids = _place_centroids(rng, size, n, margin=14, min_dist=26)
        for cx, cy in centroids:
            # full axis lengths 6-14 px
            a, b = rng.uniform(3, 7, 2)
            m = _ellipse_mask(size, cx, cy, a, b, rng.uniform(0, np.pi))
            _paint(img, m, (250, 250, 120))
    return np.clip(img, 0, 255).astype(np.uint8), centroids


def _classification_image(rng, size, atypical):
    img = _tissue_background(rng, size)
    c = size / 2 + rng.normal(0, 2, 2)
    if atypical:
        # fragmented, multipolar figure in a blue-violet tone
        n = int(rng.integers(3, 5))
        base_angle = rng.uniform(0, 2 * np.pi)
        for i in range(n):
            ang = base_angle + 2 * np.pi * i / n
            r = size * 0.18
            m = _ellipse_mask(size, c[0] + r * math.cos(ang), c[1] + r * math.sin(ang),
                              size * 0.07, size * 0.04, ang)
            _paint(img, m, (60, 60, 170))
    else:
        # single compact dark-purple plate
        m = _ellipse_mask(size, c[0], c[1], size * 0.16, size * 0.08, rng.uniform(0, np.pi))
        _paint(img, m, (110, 30, 90))
    return np.clip(img, 0, 255).astype(np.uint8)


def generate_synthetic_dataset(
    seed: int,
    n_slides: int,
    patches_per_slide: int,
    track: str,
    positive_rate: float,
    image_size: int | None = None,
    mpp: float = 0.25,
) -> DatasetManifest:
    """Build a deterministic in-memory dataset for either track.

    Detection patches carry bright elliptical blobs (full axes 6-14 px) at
    the recorded centroids; classification patches carry one of two visually
    distinct figure types. Domains are assigned round-robin over slides.
    Call :func:`write_manifest` to persist the result.
    """
    if track not in TRACKS:
        raise ManifestError(f"unknown track {track!r}")
    if n_slides < 2:
        raise ValueError(f"n_slides must be >= 2, got {n_slides}")
    if patches_per_slide < 1:
        raise ValueError(f"patches_per_slide must be >= 1, got {patches_per_slide}")
    if not 0 < positive_rate < 1:
        raise ValueError(f"positive_rate must be in (0, 1), got {positive_rate}")
    if image_size is None:
        image_size = 128 if track == "detection" else 96

    rng = np.random.default_rng(seed)
    total = n_slides * patches_per_slide
    n_pos = int(round(positive_rate * total))
    flags = np.zeros(total, dtype=bool)
    flags[rng.permutation(total)[:n_pos]] = True

    records = []
    for s in range(n_slides):
        slide = f"slide{s:03d}"
        domain = s % NUM_DOMAINS
        for p in range(patches_per_slide):
            idx = s * patches_per_slide + p
            pid = f"{slide}_p{p:03d}"
            if track == "detection":
                img, cents = _detection_image(rng, image_size, flags[idx])
                rec = PatchRecord(pid, slide, domain, mpp, f"images/{pid}.png", centroids=cents)
            else:
                img = _classification_image(rng, image_size, flags[idx])
                rec = PatchRecord(pid, slide, domain, mpp, f"images/{pid}.png", class_label=int(flags[idx]))
            rec.image = img
            rec.height, rec.width = img.shape[:2]
            records.append(rec)
    manifest = DatasetManifest(records, track)
    manifest.validate()
    return manifest

"""Test-time augmentation, ensemble averaging and detection prediction.

All averaging happens in probability space (after the sigmoid).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .augmentation import IMAGENET_MEAN, IMAGENET_STD
from .geometry import DEFAULT_MIN_AREA, Detection, mask_to_detections


@dataclass(frozen=True)
class TtaVariant:
    """One deterministic input transform; ``kind`` is one of
    identity / scale / hflip / vflip / rot90 / brightness."""

    kind: str = "identity"
    value: float = 0.0

    def __str__(self) -> str:
        return self.kind if self.kind in ("identity", "hflip", "vflip") else f"{self.kind}({self.value:g})"


IDENTITY = TtaVariant()


@dataclass
class TtaPolicy:
    scales: tuple[float, ...] = (0.9, 1.0, 1.1)
    flips: tuple[str, ...] = ("horizontal", "vertical")
    rotations: tuple[int, ...] = (90, 180, 270)
    brightness_factors: tuple[float, ...] = (0.9, 1.1)
    variant_list: list[TtaVariant] = field(default_factory=list)

    def __post_init__(self):
        if not self.variant_list:
            self.variant_list = self.single_op_variants()
        if IDENTITY not in self.variant_list:
            self.variant_list = [IDENTITY] + list(self.variant_list)

    def single_op_variants(self) -> list[TtaVariant]:
        """Identity plus one variant per non-trivial op (not the cartesian product)."""
        out = [IDENTITY]
        out += [TtaVariant("scale", s) for s in self.scales if s != 1.0]
        flip_kind = {"horizontal": "hflip", "vertical": "vflip"}
        out += [TtaVariant(flip_kind[f]) for f in self.flips if f in flip_kind]
        out += [TtaVariant("rot90", r) for r in self.rotations if r % 360]
        out += [TtaVariant("brightness", b) for b in self.brightness_factors if b != 1.0]
        return out

    @classmethod
    def identity_only(cls) -> "TtaPolicy":
        return cls(variant_list=[IDENTITY])

    def to_json(self) -> dict:
        return {"variants": [[v.kind, v.value] for v in self.variant_list]}

    @classmethod
    def from_json(cls, d: dict) -> "TtaPolicy":
        return cls(variant_list=[TtaVariant(k, v) for k, v in d["variants"]])


def _rescale(x: torch.Tensor, s: float) -> torch.Tensor:
    """Zoom by ``s`` about the centre, keeping the spatial size (reflect pad on zoom-out)."""
    h, w = x.shape[-2:]
    nh, nw = max(1, round(h * s)), max(1, round(w * s))
    y = F.interpolate(x, size=(nh, nw), mode="bilinear", align_corners=False)
    if s >= 1:
        top, left = (nh - h) // 2, (nw - w) // 2
        return y[..., top:top + h, left:left + w]
    ph, pw = h - nh, w - nw
    return F.pad(y, (pw // 2, pw - pw // 2, ph // 2, ph - ph // 2), mode="reflect")


def apply_variant(x: torch.Tensor, v: TtaVariant) -> torch.Tensor:
    """Transform an ``(N, C, H, W)`` batch in pixel space (values in [0, 1])."""
    if v.kind == "identity":
        return x
    if v.kind == "hflip":
        return x.flip(-1)
    if v.kind == "vflip":
        return x.flip(-2)
    if v.kind == "rot90":
        return torch.rot90(x, int(v.value) // 90, dims=(-2, -1))
    if v.kind == "brightness":
        return (x * v.value).clamp(0.0, 1.0)
    if v.kind == "scale":
        return _rescale(x, v.value)
    raise ValueError(f"unknown TTA variant {v.kind!r}")


def invert_variant(y: torch.Tensor, v: TtaVariant) -> torch.Tensor:
    """Map a dense prediction back to the original frame."""
    if v.kind in ("identity", "brightness"):
        return y
    if v.kind == "hflip":
        return y.flip(-1)
    if v.kind == "vflip":
        return y.flip(-2)
    if v.kind == "rot90":
        return torch.rot90(y, -(int(v.value) // 90), dims=(-2, -1))
    raise ValueError(f"variant {v} cannot be inverted for dense outputs")


class Normalize(nn.Module):
    def __init__(self, mean=IMAGENET_MEAN, std=IMAGENET_STD):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, -1, 1, 1))

    def forward(self, x):
        return (x - self.mean) / self.std


def _as_batch(image: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if image.dim() == 3:
        return image[None], True
    return image, False


@torch.no_grad()
def tta_predict(
    model: nn.Module,
    image: torch.Tensor,
    policy: TtaPolicy | None = None,
    normalize: nn.Module | None = None,
) -> torch.Tensor:
    """Mean sigmoid probability over TTA variants for a classifier.

    ``image`` is ``(C, H, W)`` or ``(N, C, H, W)`` in [0, 1] pixel space;
    ``normalize`` (if given) runs after each variant. Returns shape ``(N,)``
    (a 0-d tensor for a single image).
    """
    policy = policy or TtaPolicy.identity_only()
    if not policy.variant_list:
        raise ValueError("TTA policy has no variants")
    model.eval()
    x, single = _as_batch(image)
    probs = []
    for v in policy.variant_list:
        xv = apply_variant(x, v)
        if normalize is not None:
            xv = normalize(xv)
        probs.append(torch.sigmoid(model(xv)).reshape(len(x), -1)[:, 0])
    out = torch.stack(probs).mean(dim=0)
    return out[0] if single else out


@torch.no_grad()
def seg_predict(
    model: nn.Module,
    image: torch.Tensor,
    policy: TtaPolicy | None = None,
    normalize: nn.Module | None = None,
) -> torch.Tensor:
    """Probability map ``(N, H, W)`` (or ``(H, W)``), optionally TTA-averaged."""
    model.eval()
    x, single = _as_batch(image)
    variants = policy.variant_list if policy is not None else [IDENTITY]
    maps = []
    for v in variants:
        if v.kind == "scale":
            raise ValueError("scale variants are not supported for segmentation")
        xv = apply_variant(x, v)
        if normalize is not None:
            xv = normalize(xv)
        maps.append(invert_variant(torch.sigmoid(model(xv))[:, 0], v))
    out = torch.stack(maps).mean(dim=0)
    return out[0] if single else out


@torch.no_grad()
def ensemble_predict(
    models: Sequence[nn.Module],
    image: torch.Tensor,
    mode: str = "classification",
    policy: TtaPolicy | None = None,
    normalize: nn.Module | None = None,
) -> torch.Tensor:
    """Arithmetic mean of per-model probabilities (after per-model TTA)."""
    if not models:
        raise ValueError("ensemble needs at least one model")
    if mode == "classification":
        outs = [tta_predict(m, image, policy, normalize) for m in models]
    elif mode == "segmentation":
        outs = [seg_predict(m, image, policy, normalize) for m in models]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    shapes = {tuple(o.shape) for o in outs}
    if len(shapes) != 1:
        raise ValueError(f"ensemble members disagree on output shape: {sorted(shapes)}")
    return torch.stack(outs).mean(dim=0)


def predict_detections(
    models: Sequence[nn.Module],
    patch: torch.Tensor,
    threshold: float = 0.5,
    min_area: int = DEFAULT_MIN_AREA,
    normalize: nn.Module | None = None,
) -> list[Detection]:
    """Ensemble probability map of one ``(3, H, W)`` patch -> detections."""
    prob = ensemble_predict(models, patch, "segmentation", None, normalize)
    return mask_to_detections(prob.numpy(), threshold, min_area)

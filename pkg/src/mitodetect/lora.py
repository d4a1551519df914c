"""Low-rank adaptation of ``nn.Linear`` layers.

A wrapped layer computes ``W x + b + (alpha / rank) * B A dropout(x)`` with
the base ``W``/``b`` frozen. ``B`` starts at zero so a freshly wrapped model
is numerically identical to the original.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from torch import nn

DEFAULT_TARGETS = ("qkv", "proj", "fc1", "fc2")


@dataclass
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    dropout: float = 0.3
    target_names: tuple[str, ...] = DEFAULT_TARGETS
    trainable_extra: tuple[str, ...] = ("head",)

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        self.target_names = tuple(self.target_names)
        self.trainable_extra = tuple(self.trainable_extra)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def to_json(self) -> dict:
        return asdict(self)


class LoraLinear(nn.Module):
    """``nn.Linear`` with a frozen base and a trainable low-rank update."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float, dropout: float = 0.0):
        super().__init__()
        self.in_features = base.in_features
        self.out_features = base.out_features
        self.rank = rank
        self.alpha = alpha
        self.scaling = alpha / rank
        self.weight = nn.Parameter(base.weight.detach().clone(), requires_grad=False)
        self.bias = None
        if base.bias is not None:
            self.bias = nn.Parameter(base.bias.detach().clone(), requires_grad=False)
        self.lora_A = nn.Parameter(torch.empty(rank, self.in_features, dtype=base.weight.dtype))
        self.lora_B = nn.Parameter(torch.zeros(self.out_features, rank, dtype=base.weight.dtype))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))
        self.lora_dropout = nn.Dropout(dropout) if dropout > 0 else nn.Identity()
        self.merged = False

    def delta_weight(self) -> torch.Tensor:
        return self.scaling * (self.lora_B @ self.lora_A)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_features:
            raise ValueError(f"expected last dim {self.in_features}, got {x.shape[-1]}")
        out = nn.functional.linear(x, self.weight, self.bias)
        if self.merged:
            return out
        return out + self.scaling * (self.lora_dropout(x) @ self.lora_A.T @ self.lora_B.T)

    @torch.no_grad()
    def merge(self) -> None:
        if self.merged:
            raise RuntimeError("layer already merged")
        self.weight += self.delta_weight()
        self.merged = True

    @torch.no_grad()
    def unmerge(self) -> None:
        if not self.merged:
            raise RuntimeError("layer is not merged")
        self.weight -= self.delta_weight()
        self.merged = False

    def extra_repr(self) -> str:
        return (f"in={self.in_features}, out={self.out_features}, rank={self.rank}, "
                f"scaling={self.scaling:g}, merged={self.merged}")


def _matches(name: str, patterns) -> bool:
    leaf = name.rsplit(".", 1)[-1]
    return any(name == p or name.endswith("." + p) or leaf == p for p in patterns)


def wrap(model: nn.Module, config: LoraConfig = LoraConfig()) -> nn.Module:
    """Replace matching linear layers by :class:`LoraLinear` in place.

    Every parameter is frozen except the adapter factors and parameters
    under ``config.trainable_extra`` (the classification head by default).
    """
    targets = [
        (name, mod) for name, mod in model.named_modules()
        if isinstance(mod, nn.Linear) and _matches(name, config.target_names)
    ]
    if not targets:
        names = sorted(n for n, m in model.named_modules() if isinstance(m, nn.Linear))
        raise ValueError(f"no layers match {config.target_names}; linear layers: {names}")
    for p in model.parameters():
        p.requires_grad_(False)
    for name, mod in targets:
        parent_name, _, leaf = name.rpartition(".")
        parent = model.get_submodule(parent_name) if parent_name else model
        setattr(parent, leaf, LoraLinear(mod, config.rank, config.alpha, config.dropout))
    for name, p in model.named_parameters():
        if "lora_" in name or any(name == e or name.startswith(e + ".") for e in config.trainable_extra):
            p.requires_grad_(True)
    model.lora_config = config
    return model


def lora_layers(model: nn.Module) -> dict[str, LoraLinear]:
    return {n: m for n, m in model.named_modules() if isinstance(m, LoraLinear)}


def merge(model: nn.Module) -> nn.Module:
    for layer in lora_layers(model).values():
        layer.merge()
    return model


def unmerge(model: nn.Module) -> nn.Module:
    for layer in lora_layers(model).values():
        layer.unmerge()
    return model


def count_parameters(model: nn.Module) -> tuple[int, int]:
    """Return ``(trainable, total)`` parameter counts."""
    total = sum(p.numel() for p in model.parameters())
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    return trainable, total


def adapter_state_dict(model: nn.Module) -> dict[str, torch.Tensor]:
    """Trainable tensors only: LoRA factors plus the unfrozen head."""
    names = {n for n, p in model.named_parameters() if p.requires_grad}
    return {k: v.detach().clone() for k, v in model.state_dict().items() if k in names}


def save_adapter(model: nn.Module, path: str | Path, extra: dict | None = None) -> None:
    if any(layer.merged for layer in lora_layers(model).values()):
        raise RuntimeError("unmerge before saving adapter weights")
    torch.save({"adapter": adapter_state_dict(model),
                "lora_config": model.lora_config.to_json(),
                **(extra or {})}, path)


def load_adapter(model: nn.Module, state: dict[str, torch.Tensor]) -> nn.Module:
    missing = set(state) - set(model.state_dict())
    if missing:
        raise KeyError(f"adapter keys not in model: {sorted(missing)}")
    model.load_state_dict(state, strict=False)
    return model

"""Variable augmentation: channel replication so both model sides share one
even channel count.

A plan maps each of the C channel slots on the source and target side to a
(modality, native channel) pair. Replication is round-robin over whole
modalities (T1,T2,T1,T2,... for a two-source side), with any remainder
filled by cycling the last modality's channels. De-augmentation collapses
the replicated slots back to native modalities, by mean (default) or by
taking the first copy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError

SIDES = ("source", "target")
DEDUP_RULES = ("mean", "first")


@dataclass(frozen=True)
class Modality:
    """One imaging contrast: grayscale (1 channel) or color (3 channels)."""

    name: str
    channels: int = 1
    role: str = "source"

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise ConfigError(f"modality {self.name!r}: channels must be 1 or 3")
        if self.role not in SIDES:
            raise ConfigError(f"modality {self.name!r}: role must be source or target")


@dataclass
class AugmentationPlan:
    """Slot layouts mapping C channels to (modality, native channel) pairs."""

    sources: list
    targets: list
    channels: int
    source_layout: list = field(default_factory=list)  # [(name, native_ch), ...]
    target_layout: list = field(default_factory=list)
    dedup_rule: str = "mean"

    def modalities(self, side: str) -> list:
        return self.sources if side == "source" else self.targets

    def layout(self, side: str) -> list:
        _check_side(side)
        return self.source_layout if side == "source" else self.target_layout

    def to_dict(self) -> dict:
        return {
            "sources": [[m.name, m.channels] for m in self.sources],
            "targets": [[m.name, m.channels] for m in self.targets],
            "channels": self.channels,
            "source_layout": [list(slot) for slot in self.source_layout],
            "target_layout": [list(slot) for slot in self.target_layout],
            "dedup_rule": self.dedup_rule,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AugmentationPlan":
        return cls(
            sources=[Modality(n, c, "source") for n, c in data["sources"]],
            targets=[Modality(n, c, "target") for n, c in data["targets"]],
            channels=int(data["channels"]),
            source_layout=[(n, int(c)) for n, c in data["source_layout"]],
            target_layout=[(n, int(c)) for n, c in data["target_layout"]],
            dedup_rule=data["dedup_rule"],
        )


def _check_side(side: str) -> None:
    if side not in SIDES:
        raise ConfigError(f"side must be one of {SIDES}, got {side!r}")


def _side_layout(modalities: list, channels: int) -> list:
    native = [(m.name, c) for m in modalities for c in range(m.channels)]
    slots = []
    for _ in range(channels // len(native)):
        slots.extend(native)
    last = modalities[-1]
    last_channels = [(last.name, c) for c in range(last.channels)]
    for i in range(channels - len(slots)):
        slots.append(last_channels[i % last.channels])
    return slots


def plan_for(sources: list, targets: list, min_channels: int = 0) -> AugmentationPlan:
    """Build the smallest even-channel plan covering both modality sets."""
    if not sources or not targets:
        raise ConfigError("plan_for needs at least one source and one target modality")
    total_src = sum(m.channels for m in sources)
    total_tgt = sum(m.channels for m in targets)
    channels = max(min_channels, total_src, total_tgt)
    if channels % 2 != 0:
        channels += 1
    return AugmentationPlan(
        sources=list(sources),
        targets=list(targets),
        channels=channels,
        source_layout=_side_layout(sources, channels),
        target_layout=_side_layout(targets, channels),
    )


def augment(plan: AugmentationPlan, images: dict, side: str) -> np.ndarray:
    """Stack per-modality tensors into one C-channel tensor per the layout."""
    layout = plan.layout(side)
    needed = {name for name, _ in layout}
    missing = needed - set(images)
    if missing:
        raise ShapeError(f"augment: missing modalities {sorted(missing)} for side {side!r}")

    ref_name = layout[0][0]
    ref = images[ref_name]
    if ref.ndim != 4:
        raise ShapeError(f"augment: modality {ref_name!r} must be rank-4, got {ref.shape}")
    n, _, h, w = ref.shape
    declared = {m.name: m.channels for m in plan.modalities(side)}
    for name in needed:
        img = images[name]
        if img.shape[0] != n or img.shape[2:] != (h, w):
            raise ShapeError(
                f"augment: modality {name!r} shape {img.shape} does not match "
                f"{ref_name!r} shape {ref.shape}"
            )
        if img.shape[1] != declared[name]:
            raise ShapeError(
                f"augment: modality {name!r} has {img.shape[1]} channels, "
                f"plan declares {declared[name]}"
            )

    out = np.empty((n, plan.channels, h, w), dtype=ref.dtype)
    for slot, (name, ch) in enumerate(layout):
        out[:, slot] = images[name][:, ch]
    return out


def deaugment(plan: AugmentationPlan, stacked: np.ndarray, side: str,
              rule: str | None = None) -> dict:
    """Collapse replicated slots back to per-modality tensors."""
    layout = plan.layout(side)
    rule = plan.dedup_rule if rule is None else rule
    if rule not in DEDUP_RULES:
        raise ConfigError(f"dedup rule must be one of {DEDUP_RULES}, got {rule!r}")
    if stacked.ndim != 4 or stacked.shape[1] != plan.channels:
        raise ShapeError(
            f"deaugment: expected (N, {plan.channels}, H, W), got {stacked.shape}"
        )

    slots_for: dict = {}
    for slot, key in enumerate(layout):
        slots_for.setdefault(key, []).append(slot)

    out = {}
    for modality in plan.modalities(side):
        per_channel = []
        for ch in range(modality.channels):
            slots = slots_for[(modality.name, ch)]
            copies = stacked[:, slots]
            first = copies[:, 0]
            if rule == "first" or copies.shape[1] == 1:
                collapsed = first
            elif all(np.array_equal(copies[:, k], first) for k in range(1, copies.shape[1])):
                collapsed = first  # exact copies: the mean is the value, bit for bit
            else:
                collapsed = np.mean(copies, axis=1, dtype=copies.dtype)
            per_channel.append(collapsed)
        out[modality.name] = np.stack(per_channel, axis=1)
    return out

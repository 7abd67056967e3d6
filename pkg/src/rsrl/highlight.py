"""Highlight-region extraction from two checkpoints of the same network.

The first conv layer's feature maps are computed under both networks;
the channel whose maps correlate least across the two is selected, and
its elementwise difference map is the highlight. Constant (zero-variance)
channels are excluded from the selection rather than given a sentinel.
"""

import os
from dataclasses import dataclass

import numpy as np

from .errors import (
    AllChannelsDegenerate,
    BadChannel,
    IoError,
    ShapeMismatch,
    SpecMismatch,
    ZeroVariance,
)
from .dataset import write_pgm
from .jsonio import write_canonical_json
from .net import Checkpoint, forward


@dataclass(frozen=True)
class FeatureMapStack:
    """conv1 feature maps of one checkpoint: (H, W, channels)."""

    round_index: int
    maps: np.ndarray

    def __post_init__(self):
        maps = np.asarray(self.maps, dtype=np.float64)
        if maps.ndim != 3:
            raise ShapeMismatch(f"feature maps must be (H, W, C), got {maps.shape}")
        if not np.isfinite(maps).all():
            raise ShapeMismatch("feature maps contain non-finite values")
        maps.setflags(write=False)
        object.__setattr__(self, "maps", maps)

    @property
    def channel_count(self):
        return self.maps.shape[2]

    def channel(self, j):
        if not 0 <= j < self.channel_count:
            raise BadChannel(f"channel {j} outside [0, {self.channel_count})")
        return self.maps[:, :, j]


def pearson_corr(a, b) -> float:
    """Pearson correlation of two equally-shaped 2-D maps."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"maps differ in shape: {a.shape} vs {b.shape}")
    da = a.ravel() - a.mean()
    db = b.ravel() - b.mean()
    na = np.sqrt((da * da).sum())
    nb = np.sqrt((db * db).sum())
    if na == 0.0 or nb == 0.0:
        raise ZeroVariance("constant map has no defined correlation")
    r = float((da * db).sum() / (na * nb))
    return min(1.0, max(-1.0, r))


def _paired_stacks(stack_a: FeatureMapStack, stack_b: FeatureMapStack):
    if stack_a.maps.shape != stack_b.maps.shape:
        raise ShapeMismatch(
            f"stacks differ in shape: {stack_a.maps.shape} vs {stack_b.maps.shape}"
        )


def channel_correlations(stack_a: FeatureMapStack, stack_b: FeatureMapStack) -> list:
    """Per-channel correlation; None marks a degenerate (constant) channel."""
    _paired_stacks(stack_a, stack_b)
    corrs = []
    for j in range(stack_a.channel_count):
        try:
            corrs.append(pearson_corr(stack_a.channel(j), stack_b.channel(j)))
        except ZeroVariance:
            corrs.append(None)
    return corrs


def min_corr_channel(stack_a: FeatureMapStack, stack_b: FeatureMapStack) -> int:
    """Index of the least-correlated non-degenerate channel pair; ties
    resolve to the lowest index."""
    corrs = channel_correlations(stack_a, stack_b)
    best = None
    for j, c in enumerate(corrs):
        if c is None:
            continue
        if best is None or c < corrs[best]:
            best = j
    if best is None:
        raise AllChannelsDegenerate("every channel pair has zero variance")
    return best


def feature_diff_map(stack_a: FeatureMapStack, stack_b: FeatureMapStack, j: int) -> np.ndarray:
    """Signed elementwise difference of channel ``j``: a - b."""
    _paired_stacks(stack_a, stack_b)
    return stack_a.channel(j) - stack_b.channel(j)


@dataclass(frozen=True)
class HighlightResult:
    channel: int
    correlations: tuple  # per channel; None where excluded as degenerate
    diff_map: np.ndarray
    lag: int

    @property
    def excluded_channels(self):
        return tuple(j for j, c in enumerate(self.correlations) if c is None)

    def to_json_dict(self):
        return {
            "channel": self.channel,
            "correlations": list(self.correlations),
            "excluded_channels": list(self.excluded_channels),
            "lag": self.lag,
        }


def conv1_stack(net: Checkpoint, image) -> FeatureMapStack:
    pixels = image.pixels if hasattr(image, "pixels") else image
    return FeatureMapStack(round_index=net.round_index, maps=forward(net, pixels).conv1)


def extract_highlight(net_i: Checkpoint, net_prev: Checkpoint, image) -> HighlightResult:
    """Full pipeline: conv1 stacks under both networks, least-correlated
    channel, signed difference map."""
    if net_i.spec != net_prev.spec:
        raise SpecMismatch("checkpoints do not share a network spec")
    stack_i = conv1_stack(net_i, image)
    stack_prev = conv1_stack(net_prev, image)
    corrs = channel_correlations(stack_i, stack_prev)
    if all(c is None for c in corrs):
        raise AllChannelsDegenerate("every channel pair has zero variance")
    j = min_corr_channel(stack_i, stack_prev)
    return HighlightResult(
        channel=j,
        correlations=tuple(corrs),
        diff_map=feature_diff_map(stack_i, stack_prev, j),
        lag=net_i.round_index - net_prev.round_index,
    )


def diff_map_to_u8(diff_map: np.ndarray) -> np.ndarray:
    """Min-max normalize onto 0..255 with round-half-up; a constant map
    becomes all zeros."""
    d = np.asarray(diff_map, dtype=np.float64)
    if d.size == 0:
        raise ShapeMismatch("difference map is empty")
    lo, hi = d.min(), d.max()
    if hi == lo:
        return np.zeros(d.shape, dtype=np.uint8)
    scaled = (d - lo) / (hi - lo) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


def export_highlight(result: HighlightResult, pgm_path, sidecar_path=None) -> None:
    """Write the normalized difference map as PGM plus a JSON sidecar
    (selected channel, correlations, exclusions, lag)."""
    if sidecar_path is None:
        sidecar_path = os.path.splitext(str(pgm_path))[0] + ".json"
    write_pgm(pgm_path, diff_map_to_u8(result.diff_map))
    try:
        write_canonical_json(result.to_json_dict(), sidecar_path)
    except OSError as exc:
        raise IoError(f"cannot write sidecar {sidecar_path}: {exc}") from exc

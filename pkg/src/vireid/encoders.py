"""Image and text encoder stacks.

Two image families share one split convention: an early slice that is
duplicated per modality (visible / infrared) and a deep slice that is shared.

* ``mini`` -- a two-stage convolutional stack plus a small sequence encoder
  for text; CPU-friendly, used by the test suite and desk-scale runs.
* ``resnet`` -- a five-block residual backbone with attention pooling; the
  stem and first block form the modality-specific slice, the remaining four
  blocks plus pooling/projection form the shared slice.

GroupNorm is used throughout: no running statistics means frozen stages stay
bit-identical without train/eval mode bookkeeping.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
from torch import nn, Tensor

from .errors import ValidationError


class EncoderStack(nn.Module):
    """Ordered, named stages applied in sequence.

    Stage names become part of every parameter path, so they must stay
    stable across save/load round-trips.
    """

    def __init__(self, stages):
        super().__init__()
        self.stages = nn.ModuleDict(stages)

    def forward(self, x: Tensor) -> Tensor:
        for stage in self.stages.values():
            x = stage(x)
        return x

    def param_paths(self) -> list[str]:
        return [name for name, _ in self.named_parameters()]


def _conv_unit(cin: int, cout: int, stride: int) -> nn.Sequential:
    groups = 4 if cout % 4 == 0 else 1
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(groups, cout),
        nn.ReLU(inplace=True),
    )


class PoolProject(nn.Module):
    """Coarse spatial average pool followed by a linear projection to feature
    space; the small grid keeps layout information that a global pool would
    destroy."""

    def __init__(self, channels: int, feature_dim: int, grid=(4, 2)):
        super().__init__()
        self.pool = nn.AdaptiveAvgPool2d(grid)
        self.proj = nn.Linear(channels * grid[0] * grid[1], feature_dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.proj(self.pool(x).flatten(1))


class SequenceMixBlock(nn.Module):
    """Residual 1-D convolution mixing a token sequence (B, L, D)."""

    def __init__(self, dim: int):
        super().__init__()
        self.conv = nn.Conv1d(dim, dim, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return x + torch.relu(self.conv(x.transpose(1, 2)).transpose(1, 2))


class SequencePoolProject(nn.Module):
    """Mean over the sequence axis, then projection to feature space."""

    def __init__(self, dim: int, feature_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.proj = nn.Linear(dim, feature_dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.proj(self.norm(x.mean(dim=1)))


@dataclass(frozen=True)
class MiniEncoderConfig:
    """Small randomly-initialized encoder pair for tests and desk runs."""

    feature_dim: int = 64
    token_dim: int = 32
    stem_width: int = 16
    text_layers: int = 2
    pool_grid: tuple = (4, 2)

    def validate(self):
        if self.feature_dim <= 0 or self.token_dim <= 0 or self.stem_width <= 0:
            raise ValidationError(f"mini encoder dims must be positive: {self}")
        if self.text_layers < 1:
            raise ValidationError("text_layers must be >= 1")
        if len(self.pool_grid) != 2 or any(g <= 0 for g in self.pool_grid):
            raise ValidationError(f"pool_grid must be two positive ints, got {self.pool_grid}")


# In both families the stem and the first block are modality-specific and
# everything after is shared.
SPLIT_AFTER = "block1"


def build_mini_image_stack(cfg: MiniEncoderConfig) -> EncoderStack:
    """Full (unsplit) mini image encoder."""
    w = cfg.stem_width
    return EncoderStack({
        "stem": _conv_unit(3, w, stride=2),
        "block1": _conv_unit(w, w, stride=1),
        "block2": _conv_unit(w, 2 * w, stride=2),
        "head": PoolProject(2 * w, cfg.feature_dim, grid=tuple(cfg.pool_grid)),
    })


def build_mini_text_stack(cfg: MiniEncoderConfig) -> EncoderStack:
    stages = {f"mix{i + 1}": SequenceMixBlock(cfg.token_dim) for i in range(cfg.text_layers)}
    stages["head"] = SequencePoolProject(cfg.token_dim, cfg.feature_dim)
    return EncoderStack(stages)


class ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        groups = 4 if cout % 4 == 0 else 1
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.norm1 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, stride=1, padding=1, bias=False)
        self.norm2 = nn.GroupNorm(groups, cout)
        if stride != 1 or cin != cout:
            self.downsample = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                nn.GroupNorm(groups, cout),
            )
        else:
            self.downsample = None

    def forward(self, x: Tensor) -> Tensor:
        identity = x if self.downsample is None else self.downsample(x)
        out = torch.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return torch.relu(out + identity)


def _residual_layer(cin: int, cout: int, depth: int, stride: int) -> nn.Sequential:
    blocks = [ResidualBlock(cin, cout, stride)]
    blocks += [ResidualBlock(cout, cout, 1) for _ in range(depth - 1)]
    return nn.Sequential(*blocks)


class AttentionPool(nn.Module):
    """Mean-query single-layer attention over spatial tokens, projected to
    feature space. Position-agnostic by design."""

    def __init__(self, channels: int, feature_dim: int, heads: int = 4):
        super().__init__()
        if channels % heads != 0:
            raise ValidationError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.proj = nn.Linear(channels, feature_dim)

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)              # (B, HW, C)
        q = self.q(tokens.mean(dim=1, keepdim=True))       # (B, 1, C)
        k = self.k(tokens)
        v = self.v(tokens)
        d = c // self.heads
        q = q.view(b, 1, self.heads, d).transpose(1, 2)
        k = k.view(b, -1, self.heads, d).transpose(1, 2)
        v = v.view(b, -1, self.heads, d).transpose(1, 2)
        attn = (q @ k.transpose(-1, -2) / d ** 0.5).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, c)
        return self.proj(out)


@dataclass(frozen=True)
class ResnetEncoderConfig:
    """Five-block residual backbone with attention pooling."""

    feature_dim: int = 512
    token_dim: int = 128
    base_width: int = 32
    block_depths: tuple = (1, 1, 1, 1, 1)
    attn_heads: int = 4
    text_layers: int = 2

    def validate(self):
        if len(self.block_depths) != 5:
            raise ValidationError(f"block_depths must list 5 depths, got {self.block_depths}")
        if any(d < 1 for d in self.block_depths):
            raise ValidationError("block depths must be >= 1")
        if self.feature_dim <= 0 or self.token_dim <= 0 or self.base_width <= 0:
            raise ValidationError(f"resnet encoder dims must be positive: {self}")


def build_resnet_image_stack(cfg: ResnetEncoderConfig) -> EncoderStack:
    """Full (unsplit) residual backbone: stem, five residual blocks, and the
    attention pooling head."""
    w = cfg.base_width
    widths = [w, 2 * w, 4 * w, 8 * w, 8 * w]
    stages = {"stem": _conv_unit(3, w, stride=2)}
    cin = w
    for i in range(5):
        stride = 1 if i == 0 else 2
        stages[f"block{i + 1}"] = _residual_layer(cin, widths[i], cfg.block_depths[i], stride=stride)
        cin = widths[i]
    stages["attnpool"] = AttentionPool(cin, cfg.feature_dim, cfg.attn_heads)
    return EncoderStack(stages)


def build_resnet_text_stack(cfg: ResnetEncoderConfig) -> EncoderStack:
    stages = {f"mix{i + 1}": SequenceMixBlock(cfg.token_dim) for i in range(cfg.text_layers)}
    stages["head"] = SequencePoolProject(cfg.token_dim, cfg.feature_dim)
    return EncoderStack(stages)


def duplicate_stack(stack: EncoderStack) -> EncoderStack:
    """Independent copy with initially identical parameters."""
    return copy.deepcopy(stack)


def split_stack(stack: EncoderStack, split_after: str = SPLIT_AFTER) -> tuple[EncoderStack, EncoderStack]:
    """Split a full image stack into (modality-specific, shared) slices.

    Stages up to and including ``split_after`` form the specific slice; the
    rest form the shared slice. Module objects are reused, not copied.
    """
    names = list(stack.stages.keys())
    if split_after not in names:
        raise ValidationError(f"split stage {split_after!r} not in stack stages {names}")
    cut = names.index(split_after) + 1
    if cut == len(names):
        raise ValidationError("split leaves an empty shared slice")
    specific = EncoderStack({n: stack.stages[n] for n in names[:cut]})
    shared = EncoderStack({n: stack.stages[n] for n in names[cut:]})
    return specific, shared

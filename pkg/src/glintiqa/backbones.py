"""Feature extractors.

* ``VisionTransformer`` - ViT-S/16 style global extractor (VGFE). Only the blocks
  up to the deepest selected one are instantiated; the class token is kept
  inside the transformer and dropped from the emitted token grids.
* ``ConvStages`` - the first residual stages of a ResNet (CLFE), plus the
  per-stage embeddings whose kernel/stride ``k / 2**(j+1)`` align every stage
  with the patch grid.

State-dict keys follow timm (ViT) and torchvision (ResNet) naming so that
published ImageNet weights can be loaded directly.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.models import resnet

from .errors import ConfigError, DimensionError, InitializationError

_MOD = "model_backbones"

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
# augreg ViT-S/16 checkpoints were trained on inputs scaled to [-1, 1]
VIT_MEAN = (0.5, 0.5, 0.5)
VIT_STD = (0.5, 0.5, 0.5)

RESNET50_CHANNELS = (256, 512, 1024, 2048)


@dataclass
class BackboneConfig:
    vit_block_indices: tuple[int, ...] = (6, 7, 8, 9)  # 1-based
    vit_depth: int = 12
    vit_heads: int = 6
    vit_mlp_ratio: float = 4.0
    cnn_arch: str = "resnet50"  # or "tiny"
    cnn_stage_count: int = 3
    cnn_stage_channels: tuple[int, ...] = (256, 512, 1024)
    patch_size: int = 16
    embed_dim: int = 384
    img_size: int = 224
    # leading units frozen per stream; vit units: [patch embedding, block 1, ...],
    # cnn units: [stem, stage 1, stage 2, ...]
    frozen_prefix: dict = field(default_factory=lambda: {"vit": 1, "cnn": 2})
    vit_mean: tuple[float, ...] = VIT_MEAN
    vit_std: tuple[float, ...] = VIT_STD
    cnn_mean: tuple[float, ...] = IMAGENET_MEAN
    cnn_std: tuple[float, ...] = IMAGENET_STD
    vit_weights: str | None = None
    cnn_weights: str | None = None

    def __post_init__(self):
        self.vit_block_indices = tuple(int(i) for i in self.vit_block_indices)
        self.cnn_stage_channels = tuple(int(c) for c in self.cnn_stage_channels)
        if isinstance(self.frozen_prefix, int):
            self.frozen_prefix = {"vit": self.frozen_prefix, "cnn": self.frozen_prefix}
        self.frozen_prefix = {"vit": 0, "cnn": 0, **dict(self.frozen_prefix)}
        self.validate()

    def validate(self) -> None:
        if not self.vit_block_indices:
            raise ConfigError("at least one ViT block must be selected", module=_MOD)
        if sorted(set(self.vit_block_indices)) != list(self.vit_block_indices):
            raise ConfigError(
                f"vit_block_indices must be strictly ascending, got {self.vit_block_indices}",
                module=_MOD,
            )
        bad = [i for i in self.vit_block_indices if not 1 <= i <= self.vit_depth]
        if bad:
            raise ConfigError(
                f"ViT block indices {bad} out of range 1..{self.vit_depth}", module=_MOD
            )
        if self.embed_dim % self.vit_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by {self.vit_heads} heads", module=_MOD
            )
        if self.cnn_stage_count < 1:
            raise ConfigError("cnn_stage_count must be >= 1", module=_MOD)
        if len(self.cnn_stage_channels) != self.cnn_stage_count:
            raise ConfigError(
                f"{self.cnn_stage_count} CNN stages but {len(self.cnn_stage_channels)} channel "
                "widths given",
                module=_MOD,
            )
        if self.cnn_arch == "resnet50":
            if self.cnn_stage_channels != RESNET50_CHANNELS[: self.cnn_stage_count]:
                raise ConfigError(
                    f"resnet50 stage widths are {RESNET50_CHANNELS[:self.cnn_stage_count]}, "
                    f"config says {self.cnn_stage_channels}",
                    module=_MOD,
                )
        elif self.cnn_arch != "tiny":
            raise ConfigError(f"unknown cnn_arch {self.cnn_arch!r}", module=_MOD)
        for j in range(1, self.cnn_stage_count + 1):
            stage_kernel(j, self.patch_size)
        if self.img_size % self.patch_size:
            raise ConfigError(
                f"img_size {self.img_size} not divisible by patch size {self.patch_size}",
                module=_MOD,
            )

    @property
    def grid(self) -> tuple[int, int]:
        g = self.img_size // self.patch_size
        return g, g

    @property
    def num_tokens(self) -> int:
        h, w = self.grid
        return h * w

    def to_dict(self) -> dict:
        return asdict(self)


def stage_kernel(j: int, patch_size: int) -> int:
    """Kernel/stride that maps stage ``j`` (downsampled by 2**(j+1)) onto the
    ``patch_size`` token grid."""
    factor = 2 ** (j + 1)
    if patch_size % factor:
        raise ConfigError(
            f"stage {j} is downsampled by {factor}, which does not divide patch size "
            f"{patch_size} (kernel would be {patch_size}/{factor})",
            module=_MOD,
        )
    return patch_size // factor


def check_divisible(h: int, w: int, k: int) -> None:
    if h % k or w % k:
        raise DimensionError(
            f"image size H={h}, W={w} is not divisible by patch size k={k}", module=_MOD
        )


# --------------------------------------------------------------------------- ViT


class PatchEmbed(nn.Module):
    def __init__(self, patch_size: int, embed_dim: int, in_chans: int = 3):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(in_chans, embed_dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_divisible(x.shape[-2], x.shape[-1], self.patch_size)
        return self.proj(x).flatten(2).transpose(1, 2)


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, c // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q @ k.transpose(-2, -1) * self.scale).softmax(dim=-1)
        return self.proj((attn @ v).transpose(1, 2).reshape(b, n, c))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class VisionTransformer(nn.Module):
    """Truncated ViT emitting the patch tokens of selected blocks."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        d = cfg.embed_dim
        self.block_indices = cfg.vit_block_indices
        self.native_grid = cfg.grid
        self.patch_embed = PatchEmbed(cfg.patch_size, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + cfg.num_tokens, d))
        self.blocks = nn.ModuleList(
            Block(d, cfg.vit_heads, cfg.vit_mlp_ratio) for _ in range(max(cfg.vit_block_indices))
        )
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.normal_(self.cls_token, std=1e-6)
        self.apply(_init_vit_weights)

    def _pos_embed(self, grid: tuple[int, int]) -> torch.Tensor:
        if grid == self.native_grid:
            return self.pos_embed
        cls_pos, patch_pos = self.pos_embed[:, :1], self.pos_embed[:, 1:]
        gh, gw = self.native_grid
        d = patch_pos.shape[-1]
        patch_pos = patch_pos.reshape(1, gh, gw, d).permute(0, 3, 1, 2)
        patch_pos = F.interpolate(patch_pos, size=grid, mode="bicubic", align_corners=False)
        return torch.cat([cls_pos, patch_pos.flatten(2).transpose(1, 2)], dim=1)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        k = self.patch_embed.patch_size
        grid = (x.shape[-2] // k, x.shape[-1] // k)
        tokens = self.patch_embed(x)
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        h = torch.cat([cls, tokens], dim=1) + self._pos_embed(grid)
        outs = []
        for i, blk in enumerate(self.blocks, start=1):
            h = blk(h)
            if i in self.block_indices:
                outs.append(h[:, 1:])
        return outs

    def freeze_units(self) -> list[list[nn.Parameter]]:
        units = [[self.cls_token, self.pos_embed, *self.patch_embed.parameters()]]
        units += [list(b.parameters()) for b in self.blocks]
        return units


def _init_vit_weights(m: nn.Module) -> None:
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)


# --------------------------------------------------------------------------- CNN


class ConvStages(nn.Module):
    """Stem and the first ``cnn_stage_count`` residual stages of a ResNet.

    Stage j output is downsampled by 2**(j+1) relative to the input.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        if cfg.cnn_arch == "resnet50":
            net = resnet.resnet50(weights=None)
            self.conv1, self.bn1, self.relu, self.maxpool = net.conv1, net.bn1, net.relu, net.maxpool
            layers = [net.layer1, net.layer2, net.layer3, net.layer4][: cfg.cnn_stage_count]
        else:
            layers = self._tiny_layers(cfg.cnn_stage_channels)
        self.layers = nn.ModuleList(layers)

    def _tiny_layers(self, widths: Sequence[int]) -> list[nn.Module]:
        stem = max(8, widths[0] // 2)
        self.conv1 = nn.Conv2d(3, stem, kernel_size=3, stride=2, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(stem)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(kernel_size=3, stride=2, padding=1)
        layers, inplanes = [], stem
        for j, planes in enumerate(widths):
            stride = 1 if j == 0 else 2
            down = None
            if stride != 1 or inplanes != planes:
                down = nn.Sequential(
                    nn.Conv2d(inplanes, planes, 1, stride=stride, bias=False), nn.BatchNorm2d(planes)
                )
            layers.append(resnet.BasicBlock(inplanes, planes, stride=stride, downsample=down))
            inplanes = planes
        return layers

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        h = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        feats = []
        for layer in self.layers:
            h = layer(h)
            feats.append(h)
        return feats

    def freeze_units(self) -> list[list[nn.Parameter]]:
        units = [[*self.conv1.parameters(), *self.bn1.parameters()]]
        units += [list(layer.parameters()) for layer in self.layers]
        return units

    def frozen_modules(self, n_units: int) -> list[nn.Module]:
        mods = [self.conv1, self.bn1, *self.layers]
        # unit 0 covers both conv1 and bn1
        return mods[: n_units + 1] if n_units > 0 else []


class StageEmbed(nn.Module):
    """Map stage-j features (c_j, H/2^(j+1), W/2^(j+1)) onto the patch token grid."""

    def __init__(self, j: int, in_channels: int, cfg: BackboneConfig):
        super().__init__()
        self.j = j
        self.factor = 2 ** (j + 1)
        s = stage_kernel(j, cfg.patch_size)
        self.proj = nn.Conv2d(in_channels, cfg.embed_dim, kernel_size=s, stride=s)

    def forward(self, feat: torch.Tensor, image_hw: tuple[int, int] | None = None) -> torch.Tensor:
        if image_hw is not None:
            want = (image_hw[0] // self.factor, image_hw[1] // self.factor)
            if tuple(feat.shape[-2:]) != want:
                raise DimensionError(
                    f"stage {self.j} feature is {tuple(feat.shape[-2:])}, expected {want} for a "
                    f"{image_hw[0]}x{image_hw[1]} image",
                    module=_MOD,
                )
        return self.proj(feat).flatten(2).transpose(1, 2)


class LocalExtractor(nn.Module):
    """CNN stages followed by the multi-kernel alignment embeddings."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cnn = ConvStages(cfg)
        self.embeds = nn.ModuleList(
            StageEmbed(j, c, cfg) for j, c in enumerate(cfg.cnn_stage_channels, start=1)
        )

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = self.cnn(x)
        hw = (x.shape[-2], x.shape[-1])
        return [emb(f, hw) for emb, f in zip(self.embeds, feats)]


# --------------------------------------------------------------------------- weights


def cache_dir() -> Path:
    return Path(os.environ.get("GLINT_CACHE", Path.home() / ".cache" / "glintiqa"))


def _load_state(path: str | os.PathLike) -> dict:
    p = Path(path)
    if not p.is_file():
        raise InitializationError(f"weight file not found: {p}", module=_MOD)
    state = torch.load(p, map_location="cpu", weights_only=True)
    for key in ("state_dict", "model"):
        if isinstance(state, dict) and key in state and isinstance(state[key], dict):
            state = state[key]
    return state


def load_vit_weights(vit: VisionTransformer, source: str) -> None:
    """Load timm-named ViT weights from a file (or from ``$GLINT_CACHE`` when
    ``source == "imagenet"``). Blocks past the deepest selected one and the
    classifier are ignored."""
    if source == "imagenet":
        source = str(cache_dir() / "vit_small_patch16_224.pth")
    state = _load_state(source)
    own = vit.state_dict()
    picked = {}
    for k, v in state.items():
        if k in own:
            picked[k] = v
    missing = sorted(set(own) - set(picked))
    if missing:
        raise InitializationError(
            f"ViT weights at {source} lack {len(missing)} tensors (e.g. {missing[:3]})", module=_MOD
        )
    pos = picked["pos_embed"]
    if pos.shape != own["pos_embed"].shape:
        n_old = pos.shape[1] - 1
        g_old = int(round(n_old**0.5))
        patch = pos[:, 1:].reshape(1, g_old, g_old, -1).permute(0, 3, 1, 2)
        patch = F.interpolate(patch, size=vit.native_grid, mode="bicubic", align_corners=False)
        picked["pos_embed"] = torch.cat([pos[:, :1], patch.flatten(2).transpose(1, 2)], dim=1)
    vit.load_state_dict(picked)


def load_cnn_weights(cnn: ConvStages, source: str) -> None:
    if source == "imagenet":
        try:
            torch.hub.set_dir(str(cache_dir()))
            state = resnet.ResNet50_Weights.IMAGENET1K_V1.get_state_dict(progress=False)
        except Exception as exc:  # network or cache failure
            raise InitializationError(f"could not fetch ResNet50 weights: {exc}", module=_MOD)
    else:
        state = _load_state(source)
    own = cnn.state_dict()
    remapped = {}
    for k, v in state.items():
        parts = k.split(".")
        if parts[0].startswith("layer") and parts[0][5:].isdigit():
            k = ".".join(["layers", str(int(parts[0][5:]) - 1), *parts[1:]])
        if k in own:
            remapped[k] = v
    missing = sorted(set(own) - set(remapped))
    if missing:
        raise InitializationError(
            f"CNN weights lack {len(missing)} tensors (e.g. {missing[:3]})", module=_MOD
        )
    cnn.load_state_dict(remapped)


def clfe_forward(x: torch.Tensor, extractor: LocalExtractor, fusion) -> torch.Tensor:
    """Local feature f_l: stage grids concatenated, reweighted by CWSA and
    projected to ``embed_dim`` by ``fusion`` (a ``fusion.StreamFusion``)."""
    return fusion(extractor(x))

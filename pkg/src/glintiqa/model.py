"""The full scoring network: both feature streams, stream alignment, the
progressive integration stack and the MLP head."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from enum import Enum

import torch
import torch.nn as nn

from .backbones import (
    BackboneConfig,
    LocalExtractor,
    VisionTransformer,
    load_cnn_weights,
    load_vit_weights,
)
from .errors import ConfigError, DimensionError
from .fusion import FusionStage, PredictionHead, StreamFusion, progressive_integrate


class FusionOrder(str, Enum):
    # local stream seeds the state, global blocks are injected stage by stage
    CLFE_TO_VGFE = "clfe_to_vgfe"
    # global blocks seed the state, local stage grids are injected
    VGFE_TO_CLFE = "vgfe_to_clfe"


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fusion_order: FusionOrder = FusionOrder.CLFE_TO_VGFE
    dropout: float = 0.1
    siem_padding: int = 1

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        self.fusion_order = FusionOrder(self.fusion_order)
        if self.siem_padding != 1:
            raise ConfigError(
                "siem_padding must be 1: the 3x3 stride-1 map has to keep the token grid",
                module="fusion_core",
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)", module="fusion_core")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fusion_order"] = self.fusion_order.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**copy.deepcopy(d))


def surrogate_config(**overrides) -> ModelConfig:
    """Downsized network used by tests and desk-scale experiments:
    d=8, k=8, 32x32 inputs, one ViT block and one CNN stage."""
    bb = dict(
        vit_block_indices=(1,),
        vit_depth=1,
        vit_heads=2,
        cnn_arch="tiny",
        cnn_stage_count=1,
        cnn_stage_channels=(16,),
        patch_size=8,
        embed_dim=8,
        img_size=32,
        frozen_prefix={"vit": 0, "cnn": 0},
    )
    bb.update(overrides.pop("backbone", {}))
    return ModelConfig(backbone=BackboneConfig(**bb), **overrides)


class GlintIQA(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        bb = cfg.backbone
        d, n = bb.embed_dim, bb.num_tokens
        self.grid = bb.grid
        self.vgfe = VisionTransformer(bb)
        self.clfe = LocalExtractor(bb)
        if bb.vit_weights:
            load_vit_weights(self.vgfe, bb.vit_weights)
        if bb.cnn_weights:
            load_cnn_weights(self.clfe.cnn, bb.cnn_weights)
        n_vit, n_cnn = len(bb.vit_block_indices), bb.cnn_stage_count
        if cfg.fusion_order is FusionOrder.CLFE_TO_VGFE:
            self.seed_fusion = StreamFusion(n_cnn, n, d)
            n_stages = n_vit
        else:
            self.seed_fusion = StreamFusion(n_vit, n, d)
            n_stages = n_cnn
        self.stages = nn.ModuleList(FusionStage(n, d, cfg.siem_padding) for _ in range(n_stages))
        self.head = PredictionHead(d, cfg.dropout)
        self.register_buffer("vit_mean", torch.tensor(bb.vit_mean).view(1, 3, 1, 1))
        self.register_buffer("vit_std", torch.tensor(bb.vit_std).view(1, 3, 1, 1))
        self.register_buffer("cnn_mean", torch.tensor(bb.cnn_mean).view(1, 3, 1, 1))
        self.register_buffer("cnn_std", torch.tensor(bb.cnn_std).view(1, 3, 1, 1))
        self.apply_freeze()

    # -- freezing ---------------------------------------------------------------

    def apply_freeze(self) -> None:
        fp = self.cfg.backbone.frozen_prefix
        for unit in self.vgfe.freeze_units()[: fp["vit"]]:
            for p in unit:
                p.requires_grad_(False)
        for unit in self.clfe.cnn.freeze_units()[: fp["cnn"]]:
            for p in unit:
                p.requires_grad_(False)

    def train(self, mode: bool = True):
        super().train(mode)
        # frozen batch-norm layers keep their pretrained running statistics
        for m in self.clfe.cnn.frozen_modules(self.cfg.backbone.frozen_prefix["cnn"]):
            m.eval()
        return self

    # -- forward ----------------------------------------------------------------

    def _check_input(self, x: torch.Tensor) -> None:
        k = self.cfg.backbone.patch_size
        h, w = x.shape[-2:]
        if h % k or w % k:
            raise DimensionError(
                f"image size H={h}, W={w} is not divisible by patch size k={k}",
                module="model_backbones",
            )
        if (h // k) * (w // k) != self.cfg.backbone.num_tokens:
            raise DimensionError(
                f"model was built for {self.cfg.backbone.img_size}x{self.cfg.backbone.img_size} "
                f"inputs ({self.cfg.backbone.num_tokens} tokens); got {h}x{w}",
                module="fusion_core",
            )

    def global_features(self, x: torch.Tensor) -> list[torch.Tensor]:
        return self.vgfe((x - self.vit_mean) / self.vit_std)

    def local_stage_features(self, x: torch.Tensor) -> list[torch.Tensor]:
        return self.clfe((x - self.cnn_mean) / self.cnn_std)

    def forward_features(self, x: torch.Tensor) -> dict:
        """All intermediate token grids, keyed by role."""
        if x.dim() == 3:
            x = x.unsqueeze(0)
        self._check_input(x)
        k = self.cfg.backbone.patch_size
        grid = (x.shape[-2] // k, x.shape[-1] // k)
        globals_ = self.global_features(x)
        locals_ = self.local_stage_features(x)
        if self.cfg.fusion_order is FusionOrder.CLFE_TO_VGFE:
            seed = self.seed_fusion(locals_)
            injected = globals_
        else:
            seed = self.seed_fusion(globals_)
            injected = locals_
        states = [seed]
        for grid_i, stage in zip(injected, self.stages):
            states.append(stage(states[-1], grid_i, grid))
        return {"global": globals_, "local": locals_, "seed": seed, "states": states, "fused": states[-1]}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(0)
        self._check_input(x)
        k = self.cfg.backbone.patch_size
        grid = (x.shape[-2] // k, x.shape[-1] // k)
        globals_ = self.global_features(x)
        locals_ = self.local_stage_features(x)
        if self.cfg.fusion_order is FusionOrder.CLFE_TO_VGFE:
            seed, injected = self.seed_fusion(locals_), globals_
        else:
            seed, injected = self.seed_fusion(globals_), locals_
        return self.head(progressive_integrate(seed, injected, self.stages, grid))


def build_model(cfg: ModelConfig | dict | None = None, seed: int | None = None) -> GlintIQA:
    if isinstance(cfg, dict):
        cfg = ModelConfig.from_dict(cfg)
    if seed is not None:
        torch.manual_seed(seed)
    return GlintIQA(cfg)

"""Multi-modal late-fusion CNN.

Every modality gets its own encoder of three conv-BN-ReLU blocks (max-pooling
after the first two) followed by global average pooling. The per-modality
embeddings are concatenated and classified by a shared MLP head. The same code
builds the 3D volumetric model and the single-modality 2D slice model.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core_types import MODALITIES

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ConfigError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    modalities: tuple[str, ...] = MODALITIES
    encoder_channels: tuple[int, ...] = (16, 32, 64)
    embedding_dim: int = 64
    fused_dim: int = 256
    head_hidden: int = 128
    dropout_p: float = 0.30
    n_classes: int = 2
    spatial_rank: int = 3
    conv_kernel: int = 3
    pool_kernel: int = 2

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        ints = [self.embedding_dim, self.fused_dim, self.head_hidden, self.n_classes, self.conv_kernel,
                self.pool_kernel, *self.encoder_channels]
        if not self.modalities or not self.encoder_channels or any(v <= 0 for v in ints):
            raise ConfigError("all model dimensions must be positive")
        if self.spatial_rank not in (2, 3):
            raise ConfigError(f"spatial_rank must be 2 or 3, got {self.spatial_rank}")
        if self.conv_kernel % 2 == 0:
            raise ConfigError("conv_kernel must be odd to preserve spatial size")
        if self.embedding_dim != self.encoder_channels[-1]:
            raise ConfigError(
                f"embedding_dim {self.embedding_dim} must equal the last encoder width {self.encoder_channels[-1]}"
            )
        if self.fused_dim != self.embedding_dim * len(self.modalities):
            raise ConfigError(
                f"fused_dim {self.fused_dim} != embedding_dim {self.embedding_dim} x {len(self.modalities)} modalities"
            )
        if not 0 <= self.dropout_p < 1:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")

    @property
    def n_pools(self) -> int:
        return len(self.encoder_channels) - 1

    @property
    def min_spatial(self) -> int:
        # two voxels must survive the pooling stages
        return 2 * self.pool_kernel ** self.n_pools

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def slice_config(n_classes: int = 4, **overrides) -> ModelConfig:
    """Single-modality 2D variant used by the slice diagnostics."""
    base = dict(modalities=("T1",), fused_dim=64, n_classes=n_classes, spatial_rank=2)
    base.update(overrides)
    return ModelConfig(**base)


class ConvBlock(nn.Module):
    def __init__(self, c_in, c_out, rank, kernel):
        super().__init__()
        conv = nn.Conv3d if rank == 3 else nn.Conv2d
        bn = nn.BatchNorm3d if rank == 3 else nn.BatchNorm2d
        self.conv = conv(c_in, c_out, kernel, stride=1, padding=kernel // 2)
        self.bn = bn(c_out, eps=BN_EPS, momentum=BN_MOMENTUM)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class Encoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        chans = (1, *config.encoder_channels)
        self.blocks = nn.ModuleList(
            ConvBlock(a, b, config.spatial_rank, config.conv_kernel) for a, b in zip(chans[:-1], chans[1:])
        )
        self.rank = config.spatial_rank
        self.pool_kernel = config.pool_kernel

    def features(self, x):
        """Activation of the last block, before global pooling."""
        pool = F.max_pool3d if self.rank == 3 else F.max_pool2d
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i < len(self.blocks) - 1:
                x = pool(x, self.pool_kernel)
        return x

    def forward(self, x):
        return global_average_pool(self.features(x))


def global_average_pool(x: torch.Tensor) -> torch.Tensor:
    return x.flatten(2).mean(dim=2)


@dataclass
class ForwardTrace:
    logits: torch.Tensor
    embeddings: dict[str, torch.Tensor]
    activations: dict[str, torch.Tensor] = field(default_factory=dict)


class FusionNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoders = nn.ModuleDict({m: Encoder(config) for m in config.modalities})
        self.head = nn.Sequential(
            nn.Linear(config.fused_dim, config.head_hidden),
            nn.ReLU(),
            nn.Dropout(config.dropout_p),
            nn.Linear(config.head_hidden, config.n_classes),
        )

    def check_input(self, x: torch.Tensor):
        cfg = self.config
        if x.dim() != cfg.spatial_rank + 2:
            raise ShapeError(f"expected a (batch, channels, {cfg.spatial_rank} spatial) tensor, got {tuple(x.shape)}")
        if x.shape[1] != len(cfg.modalities):
            raise ShapeError(f"expected {len(cfg.modalities)} channels, got {x.shape[1]}")
        if min(x.shape[2:]) < cfg.min_spatial:
            raise ShapeError(f"spatial dims {tuple(x.shape[2:])} below minimum {cfg.min_spatial}")

    def trace(self, x: torch.Tensor, retain_activations: bool = False) -> ForwardTrace:
        self.check_input(x)
        embeddings, activations = {}, {}
        for c, (name, enc) in enumerate(self.encoders.items()):
            feats = enc.features(x[:, c : c + 1])
            if retain_activations:
                if feats.requires_grad:
                    feats.retain_grad()
                activations[name] = feats
            embeddings[name] = global_average_pool(feats)
        logits = self.head(torch.cat(list(embeddings.values()), dim=1))
        return ForwardTrace(logits, embeddings, activations)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.trace(x).logits


def build_model(config: ModelConfig, seed: int) -> FusionNet:
    """Fresh network with seeded fan-in (ReLU gain) normal initialisation.

    Biases start at zero, batch-norm scale 1 and shift 0.
    """
    model = FusionNet(config)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bn.weight"):
                p.fill_(1.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                nn.init.kaiming_normal_(p, mode="fan_in", nonlinearity="relu", generator=gen)
    return model


def forward(model: FusionNet, batch, mode: str = "eval", retain_activations: bool = False) -> ForwardTrace:
    """Run the network in ``train`` (batch statistics, dropout on) or ``eval`` mode."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == "train")
    x = torch.as_tensor(batch, dtype=next(model.parameters()).dtype)
    if mode == "eval" and not retain_activations:
        with torch.no_grad():
            return model.trace(x)
    return model.trace(x, retain_activations)


def forward_2d(model: FusionNet, batch, mode: str = "eval") -> torch.Tensor:
    if model.config.spatial_rank != 2:
        raise ShapeError("forward_2d needs a 2D model")
    return forward(model, batch, mode).logits


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def parameters_finite(model: nn.Module) -> bool:
    return all(torch.isfinite(t).all() for t in model.state_dict().values() if t.is_floating_point())


def with_overrides(config: ModelConfig, overrides: dict | None) -> ModelConfig:
    return replace(config, **(overrides or {}))


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter shapes implied by a config, keyed by state-dict name."""
    k = (config.conv_kernel,) * config.spatial_rank
    shapes: dict[str, tuple[int, ...]] = {}
    chans: Sequence[int] = (1, *config.encoder_channels)
    for m in config.modalities:
        for i, (a, b) in enumerate(zip(chans[:-1], chans[1:])):
            pre = f"encoders.{m}.blocks.{i}"
            shapes[f"{pre}.conv.weight"] = (b, a, *k)
            shapes[f"{pre}.conv.bias"] = (b,)
            shapes[f"{pre}.bn.weight"] = (b,)
            shapes[f"{pre}.bn.bias"] = (b,)
    shapes["head.0.weight"] = (config.head_hidden, config.fused_dim)
    shapes["head.0.bias"] = (config.head_hidden,)
    shapes["head.3.weight"] = (config.n_classes, config.head_hidden)
    shapes["head.3.bias"] = (config.n_classes,)
    return shapes

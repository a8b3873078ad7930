"""Scaled-down TransUNet-style backbone.

The network is split into five named parameter groups so that pretrained
pieces can be moved between stages:

* ``embedding``  - convolutional stem, token projection and position embedding
* ``encoder``    - transformer blocks and final norm
* ``decoder``    - cascaded upsampler with skip connections from the stem
* ``head``       - segmentation head and reconstruction head
* ``projection`` - two-layer MLP used only by contrastive pretraining
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from xdssl.errors import ConfigError, InvalidInputError

GROUPS: tuple[str, ...] = ("embedding", "encoder", "decoder", "head", "projection")
PROJECTION_DIM = 128


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 64
    in_channels: int = 1
    embed_channels: tuple[int, ...] = (16, 32)
    token_patch: int = 2
    encoder_depth: int = 4
    encoder_dim: int = 128
    encoder_heads: int = 4
    mlp_ratio: float = 4.0
    decoder_channels: tuple[int, ...] = (64, 32, 16)

    def __post_init__(self) -> None:
        object.__setattr__(self, "embed_channels", tuple(self.embed_channels))
        object.__setattr__(self, "decoder_channels", tuple(self.decoder_channels))
        if self.encoder_dim % self.encoder_heads:
            raise ConfigError("encoder_dim must be divisible by encoder_heads")
        if self.token_patch < 1 or self.token_patch & (self.token_patch - 1):
            raise ConfigError("token_patch must be a power of two")
        down = self.downsampling
        if self.image_size % down:
            raise ConfigError(f"image_size {self.image_size} is not divisible by total downsampling {down}")
        if 2 ** len(self.decoder_channels) != down:
            raise ConfigError(
                f"{len(self.decoder_channels)} decoder stages cannot undo a downsampling of {down}"
            )

    @property
    def downsampling(self) -> int:
        return 2 ** len(self.embed_channels) * self.token_patch

    @property
    def grid(self) -> int:
        return self.image_size // self.downsampling

    @classmethod
    def full_scale(cls) -> BackboneConfig:
        """ViT-B sized encoder at 224 px (not used by the desk-scale pipeline)."""
        return cls(
            image_size=224,
            in_channels=1,
            embed_channels=(64, 256, 512),
            token_patch=2,
            encoder_depth=12,
            encoder_dim=768,
            encoder_heads=12,
            decoder_channels=(256, 128, 64, 16),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["embed_channels"] = list(self.embed_channels)
        d["decoder_channels"] = list(self.decoder_channels)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, ch), ch)


class ConvNormAct(nn.Sequential):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__(
            nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
            _norm(cout),
            nn.ReLU(inplace=True),
        )


class Embedding(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        stages = []
        cin = cfg.in_channels
        for ch in cfg.embed_channels:
            stages.append(nn.Sequential(ConvNormAct(cin, ch, stride=2), ConvNormAct(ch, ch)))
            cin = ch
        self.stages = nn.ModuleList(stages)
        self.patch = nn.Conv2d(cin, cfg.encoder_dim, cfg.token_patch, stride=cfg.token_patch)
        self.pos = nn.Parameter(torch.zeros(1, cfg.grid * cfg.grid, cfg.encoder_dim))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        nn.init.trunc_normal_(self.pos, std=0.02)

    def forward(self, x):
        skips = []
        for stage in self.stages:
            x = stage(x)
            skips.append(x)
        tokens = self.patch(x).flatten(2).transpose(1, 2)
        return tokens + self.pos, skips


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class Encoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            [Block(cfg.encoder_dim, cfg.encoder_heads, cfg.mlp_ratio) for _ in range(cfg.encoder_depth)]
        )
        self.norm = nn.LayerNorm(cfg.encoder_dim)

    def forward(self, x):
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class Decoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.grid = cfg.grid
        chans = cfg.decoder_channels
        self.conv_more = ConvNormAct(cfg.encoder_dim, chans[0])
        # stem stage j emits features at 1/2**(j+1); decoder stage i at down/2**(i+1)
        self.skip_index = []
        stages = []
        cin = chans[0]
        for i, cout in enumerate(chans):
            scale = cfg.downsampling // 2 ** (i + 1)
            j = int(math.log2(scale)) - 1 if scale > 1 else -1
            j = j if 0 <= j < len(cfg.embed_channels) else -1
            self.skip_index.append(j)
            skip = cfg.embed_channels[j] if j >= 0 else 0
            stages.append(nn.Sequential(ConvNormAct(cin + skip, cout), ConvNormAct(cout, cout)))
            cin = cout
        self.stages = nn.ModuleList(stages)
        self.out_channels = chans[-1]

    def forward(self, tokens, skips):
        b, n, d = tokens.shape
        x = tokens.transpose(1, 2).reshape(b, d, self.grid, self.grid)
        x = self.conv_more(x)
        for stage, j in zip(self.stages, self.skip_index):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            if j >= 0:
                x = torch.cat([x, skips[j]], dim=1)
            x = stage(x)
        return x


class Heads(nn.Module):
    def __init__(self, cfg: BackboneConfig, cin: int):
        super().__init__()
        self.segment = nn.Conv2d(cin, 1, 3, padding=1)
        self.reconstruct = nn.Conv2d(cin, cfg.in_channels, 3, padding=1)


class ProjectionHead(nn.Module):
    def __init__(self, dim: int, out_dim: int = PROJECTION_DIM):
        super().__init__()
        self.layer1 = nn.Linear(dim, dim)
        self.layer2 = nn.Linear(dim, out_dim)

    def forward(self, x):
        return self.layer2(F.relu(self.layer1(x)))


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.config = cfg
        self.embedding = Embedding(cfg)
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.head = Heads(cfg, self.decoder.out_channels)
        self.projection = ProjectionHead(cfg.encoder_dim)

    def _check(self, x: torch.Tensor) -> None:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels or tuple(x.shape[-2:]) != (cfg.image_size, cfg.image_size):
            raise InvalidInputError(
                f"expected input (B, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}), got {tuple(x.shape)}"
            )

    def features(self, x):
        self._check(x)
        tokens, skips = self.embedding(x)
        return self.encoder(tokens), skips

    def forward_segment(self, x):
        """Per-pixel segmentation logits, shape (B, 1, H, W)."""
        tokens, skips = self.features(x)
        return self.head.segment(self.decoder(tokens, skips))

    def forward_reconstruct(self, x):
        """Image reconstruction in unbounded output space, shape (B, C, H, W)."""
        tokens, skips = self.features(x)
        return self.head.reconstruct(self.decoder(tokens, skips))

    def forward_embed(self, x):
        """Pooled encoder features through the projection head, L2-normalised (B, 128)."""
        tokens, _ = self.features(x)
        return F.normalize(self.projection(tokens.mean(dim=1)), dim=1)

    forward = forward_segment

    def group_parameters(self, group: str) -> dict[str, torch.Tensor]:
        if group not in GROUPS:
            raise KeyError(group)
        return {f"{group}.{k}": v for k, v in getattr(self, group).state_dict().items()}


def build_model(cfg: BackboneConfig, seed: int) -> Backbone:
    """Instantiate a backbone whose initial parameters depend only on (cfg, seed)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Backbone(cfg)
    return model


def reinitialize(model: Backbone, groups, seed: int) -> None:
    """Redraw the parameters of ``groups`` from the default initialisers."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for group in GROUPS:
            if group not in groups:
                continue
            for module in getattr(model, group).modules():
                if hasattr(module, "reset_parameters"):
                    module.reset_parameters()
                elif hasattr(module, "_reset_parameters"):
                    module._reset_parameters()


def tensor_digest(tensors: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().to(torch.float32).contiguous().cpu()
        h.update(name.encode())
        h.update(json.dumps(list(t.shape)).encode())
        h.update(t.numpy().astype("<f4").tobytes())
    return h.hexdigest()


def group_digests(model: Backbone) -> dict[str, str]:
    return {g: tensor_digest(model.group_parameters(g)) for g in GROUPS}


def model_digest(model: Backbone) -> str:
    return tensor_digest(model.state_dict())


def parameter_counts(model: Backbone) -> dict[str, int]:
    return {g: sum(p.numel() for p in getattr(model, g).parameters()) for g in GROUPS}

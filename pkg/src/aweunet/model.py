"""AWEU-Net: a U-Net whose stages are PAWE blocks and whose skips are CAWE blocks.

Wiring of the auxiliary resamplers (all bilinear, x2):

* Up1/Up3/Up5 lift encoder outputs at depths 4/3/2 into the CAWE input of
  the next shallower skip (depths 3/2/1).
* Up2/Up4/Up6 lift the CAWE outputs at depths 4/3/2 into the decoder stage
  of the next shallower depth (3/2/1).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .attention import CAWE, PAWE
from .errors import ConfigError, ContractViolation

__all__ = ["ModelConfig", "AWEUNet", "build_model", "nodule_probability", "predict_mask"]


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    num_classes: int = 2
    base_width: int = 64
    depth: int = 4
    web_ratio: int = 4
    input_size: int = 224

    def validate(self) -> None:
        if self.depth != 4:
            raise ConfigError("depth is fixed at 4 down-samplings")
        if self.base_width < 1 or self.in_channels < 1 or self.web_ratio < 1:
            raise ConfigError("base_width, in_channels and web_ratio must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.input_size < 2 ** self.depth or self.input_size % 2 ** self.depth:
            raise ConfigError(f"input_size {self.input_size} is not divisible by {2 ** self.depth}")

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * 2 ** i for i in range(self.depth + 1))

    def to_dict(self) -> dict:
        return asdict(self)


def _up2(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class AWEUNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        w = config.widths
        r = config.web_ratio
        depth = config.depth

        self.encoder_stages = nn.ModuleList()
        prev = config.in_channels
        for k in range(depth):
            self.encoder_stages.append(PAWE(w[k], prev, web_ratio=r))
            prev = w[k]
        self.bottleneck = PAWE(w[depth], w[depth - 1], web_ratio=r)

        # Skip k sees encoder k, plus the upsampled encoder k+1 except at the deepest skip.
        skip_ch = [w[k] + (w[k + 1] if k < depth - 1 else 0) for k in range(depth)]
        self.skip_channels = tuple(skip_ch)
        self.skip_blocks = nn.ModuleList(CAWE(c, web_ratio=r) for c in skip_ch)

        self.up_convs = nn.ModuleList()
        self.decoder_stages = nn.ModuleList()
        for k in range(depth):
            below = w[k + 1]
            self.up_convs.append(nn.ConvTranspose2d(below, w[k], 2, stride=2))
            cat = w[k] + skip_ch[k] + (skip_ch[k + 1] if k < depth - 1 else 0)
            self.decoder_stages.append(PAWE(w[k], cat, web_ratio=r))
        self.head = nn.Conv2d(w[0], config.num_classes, 1)
        self._init_weights()

    def _init_weights(self) -> None:
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        x = image.unsqueeze(0) if image.dim() == 3 else image
        cfg = self.config
        if x.dim() != 4 or x.shape[1] != cfg.in_channels:
            raise ContractViolation(f"expected (N,{cfg.in_channels},H,W) input, got {tuple(image.shape)}")
        if x.shape[-2:] != (cfg.input_size, cfg.input_size):
            raise ContractViolation(
                f"input spatial size {tuple(x.shape[-2:])} != configured {cfg.input_size}"
            )
        depth = cfg.depth

        enc = []
        for k, stage in enumerate(self.encoder_stages):
            x = stage.conv_forward(x if k == 0 else F.max_pool2d(x, 2, 2))
            enc.append(x)
        x = self.bottleneck.conv_forward(F.max_pool2d(x, 2, 2))

        skips = [None] * depth
        for k in reversed(range(depth)):
            inp = enc[k] if k == depth - 1 else torch.cat([enc[k], _up2(enc[k + 1])], dim=1)
            skips[k] = self.skip_blocks[k].conv_forward(inp)

        for k in reversed(range(depth)):
            parts = [self.up_convs[k](x), skips[k]]
            if k < depth - 1:
                parts.append(_up2(skips[k + 1]))
            x = self.decoder_stages[k].conv_forward(torch.cat(parts, dim=1))
        logits = self.head(x)
        return logits[0] if image.dim() == 3 else logits

    def alphas(self) -> list[nn.Parameter]:
        return [p for name, p in self.named_parameters() if name.endswith("alpha")]


def build_model(config: ModelConfig | None = None, seed: int | None = None) -> AWEUNet:
    config = config or ModelConfig()
    if seed is None:
        return AWEUNet(config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return AWEUNet(config)


def nodule_probability(logits: torch.Tensor) -> torch.Tensor:
    """Softmax probability of class 1 (nodule) from ``(..., K, H, W)`` logits."""
    return torch.softmax(logits, dim=-3).select(-3, 1)


@torch.no_grad()
def predict_mask(model: AWEUNet, image: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Binary nodule mask (uint8) where the nodule probability is >= ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ContractViolation(f"threshold must lie in (0, 1), got {threshold}")
    prob = nodule_probability(model(image))
    return (prob >= threshold).to(torch.uint8)

"""Network architectures, the soft Dice loss, and checkpoint handling.

The segmenter cascades two 4-level 2D U-nets (7 conv blocks per half,
14 total) with skip connections inside each half and from the first
half's decoder to the second half's encoder at equal resolutions. The
patch classifier stacks five dilated 3x3 convolutions whose feature maps
are concatenated before two 1x1 convolutions and a small dense head.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field
from pathlib import Path

import torch
import torch.nn as nn

from .volume import NormStats


class ConfigError(ValueError):
    """Raised for invalid architecture configurations."""


@dataclass
class WnetSegConfig:
    input_size: int = 96
    levels: int = 4
    base_channels: int = 64
    dropout: float = 0.1

    def validate(self) -> None:
        if self.levels != 4:
            raise ConfigError(f"segmenter is defined for 4 levels, got {self.levels}")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be positive")
        if self.input_size % 8 != 0:
            raise ConfigError(f"input_size must be divisible by 8, got {self.input_size}")


@dataclass
class PnetClConfig:
    input_size: int = 32
    channels: int = 64
    hidden_units: int = 128
    dropout: float = 0.5
    dilations: tuple[int, ...] = (1, 2, 4, 8, 16)

    def validate(self) -> None:
        if self.input_size < 1 or self.channels < 1 or self.hidden_units < 1:
            raise ConfigError("input_size, channels and hidden_units must be positive")


@dataclass
class UnetClConfig:
    input_size: int = 32
    base_channels: int = 64
    hidden_units: int = 128
    dropout: float = 0.5

    def validate(self) -> None:
        if self.input_size % 8 != 0:
            raise ConfigError(f"input_size must be divisible by 8, got {self.input_size}")


def _he_init(module: nn.Module) -> None:
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.kaiming_normal_(module.weight, nonlinearity="relu")
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Linear):
        nn.init.kaiming_normal_(module.weight, nonlinearity="relu")
        nn.init.zeros_(module.bias)


class ConvBlock(nn.Module):
    """Two zero-padded 3x3 convolutions with ReLU and dropout in between."""

    def __init__(self, c_in: int, c_out: int, dropout: float):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.drop = nn.Dropout2d(dropout)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        x = self.act(self.conv1(x))
        x = self.drop(x)
        return self.act(self.conv2(x))


class UnetHalf(nn.Module):
    """One 4-level U-net (7 blocks). Optional extra encoder inputs allow a
    second half to receive the first half's decoder features per level."""

    def __init__(self, in_channels: int, base: int, dropout: float,
                 extra_enc_channels: tuple[int, int, int] = (0, 0, 0)):
        super().__init__()
        C = base
        e1, e2, e3 = extra_enc_channels
        self.enc1 = ConvBlock(in_channels + e1, C, dropout)
        self.enc2 = ConvBlock(C + e2, 2 * C, dropout)
        self.enc3 = ConvBlock(2 * C + e3, 4 * C, dropout)
        self.bottom = ConvBlock(4 * C, 8 * C, dropout)
        self.pool = nn.MaxPool2d(2, stride=2)
        self.up3 = nn.ConvTranspose2d(8 * C, 4 * C, 2, stride=2)
        self.dec3 = ConvBlock(8 * C, 4 * C, dropout)
        self.up2 = nn.ConvTranspose2d(4 * C, 2 * C, 2, stride=2)
        self.dec2 = ConvBlock(4 * C, 2 * C, dropout)
        self.up1 = nn.ConvTranspose2d(2 * C, C, 2, stride=2)
        self.dec1 = ConvBlock(2 * C, C, dropout)

    def forward(self, x, skips=None):
        s1, s2, s3 = skips if skips is not None else (None, None, None)
        e1 = self.enc1(x if s1 is None else torch.cat([x, s1], dim=1))
        p1 = self.pool(e1)
        e2 = self.enc2(p1 if s2 is None else torch.cat([p1, s2], dim=1))
        p2 = self.pool(e2)
        e3 = self.enc3(p2 if s3 is None else torch.cat([p2, s3], dim=1))
        b = self.bottom(self.pool(e3))
        d3 = self.dec3(torch.cat([self.up3(b), e3], dim=1))
        d2 = self.dec2(torch.cat([self.up2(d3), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        return d1, d2, d3


class WnetSeg(nn.Module):
    """Cascade of two U-net halves with inter-half skip connections."""

    def __init__(self, cfg: WnetSegConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        C = cfg.base_channels
        self.half1 = UnetHalf(1, C, cfg.dropout)
        self.out1 = nn.Conv2d(C, 1, 1)
        self.half2 = UnetHalf(2, C, cfg.dropout, extra_enc_channels=(C, 2 * C, 4 * C))
        self.out2 = nn.Conv2d(C, 1, 1)
        self.apply(_he_init)

    def forward(self, x):
        d1, d2, d3 = self.half1(x)
        p1 = torch.sigmoid(self.out1(d1))
        x2 = torch.cat([x, p1], dim=1)
        f1, _, _ = self.half2(x2, skips=(d1, d2, d3))
        return torch.sigmoid(self.out2(f1))


class UnetSeg(nn.Module):
    """Single U-net half with a sigmoid head (the ablated segmenter)."""

    def __init__(self, cfg: WnetSegConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.body = UnetHalf(1, cfg.base_channels, cfg.dropout)
        self.out = nn.Conv2d(cfg.base_channels, 1, 1)
        self.apply(_he_init)

    def forward(self, x):
        d1, _, _ = self.body(x)
        return torch.sigmoid(self.out(d1))


class PnetCl(nn.Module):
    """Dilated-convolution patch classifier with a scalar sigmoid output."""

    def __init__(self, cfg: PnetClConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        C = cfg.channels
        convs = []
        c_in = 1
        for d in cfg.dilations:
            convs.append(nn.Conv2d(c_in, C, 3, padding=d, dilation=d))
            c_in = C
        self.dilated = nn.ModuleList(convs)
        n_levels = len(cfg.dilations)
        self.drop1 = nn.Dropout(cfg.dropout)
        self.squeeze = nn.Conv2d(n_levels * C, C, 1)
        self.project = nn.Conv2d(C, 1, 1)
        self.fc_hidden = nn.Linear(cfg.input_size * cfg.input_size, cfg.hidden_units)
        self.drop2 = nn.Dropout(cfg.dropout)
        self.fc_out = nn.Linear(cfg.hidden_units, 1)
        self.act = nn.ReLU(inplace=True)
        self.apply(_he_init)

    def forward(self, x):
        feats = []
        h = x
        for conv in self.dilated:
            h = self.act(conv(h))
            feats.append(h)
        cat = self.drop1(torch.cat(feats, dim=1))
        h = self.act(self.squeeze(cat))
        h = self.act(self.project(h))
        h = h.flatten(1)
        h = self.drop2(self.act(self.fc_hidden(h)))
        return torch.sigmoid(self.fc_out(h))


class UnetCl(nn.Module):
    """U-net backbone flattened into a dense head for patch classification."""

    def __init__(self, cfg: UnetClConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        C = cfg.base_channels
        self.backbone = UnetHalf(1, C, dropout=0.0)
        self.drop1 = nn.Dropout(cfg.dropout)
        self.fc_hidden = nn.Linear(C * cfg.input_size * cfg.input_size, cfg.hidden_units)
        self.drop2 = nn.Dropout(cfg.dropout)
        self.fc_out = nn.Linear(cfg.hidden_units, 1)
        self.act = nn.ReLU(inplace=True)
        self.apply(_he_init)

    def forward(self, x):
        d1, _, _ = self.backbone(x)
        h = self.drop1(d1.flatten(1))
        h = self.drop2(self.act(self.fc_hidden(h)))
        return torch.sigmoid(self.fc_out(h))


def build_wnetseg(cfg: WnetSegConfig | None = None) -> WnetSeg:
    return WnetSeg(cfg or WnetSegConfig())


def build_unetseg(cfg: WnetSegConfig | None = None) -> UnetSeg:
    return UnetSeg(cfg or WnetSegConfig())


def build_pnetcl(cfg: PnetClConfig | None = None) -> PnetCl:
    return PnetCl(cfg or PnetClConfig())


def build_unetcl(cfg: UnetClConfig | None = None) -> UnetCl:
    return UnetCl(cfg or UnetClConfig())


def dice_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """Soft Dice loss 1 - (2*sum(p*g)+eps)/(sum(p^2)+sum(g^2)+eps)."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    p = pred.reshape(-1)
    g = target.reshape(-1)
    num = 2.0 * torch.sum(p * g) + eps
    den = torch.sum(p * p) + torch.sum(g * g) + eps
    return 1.0 - num / den


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


CHECKPOINT_FORMAT = 1

_ARCHES = {
    "wnetseg": (WnetSegConfig, build_wnetseg),
    "unetseg": (WnetSegConfig, build_unetseg),
    "pnetcl": (PnetClConfig, build_pnetcl),
    "unetcl": (UnetClConfig, build_unetcl),
}


@dataclass
class ModelCheckpoint:
    """Weights plus everything needed to run them: architecture config,
    normalization statistics, and the calibrated classifier threshold."""

    kind: str
    config: dict
    state_dict: dict
    norm_stats: NormStats | None = None
    threshold: float | None = None
    meta: dict = field(default_factory=dict)

    def build_model(self) -> nn.Module:
        if self.kind not in _ARCHES:
            raise ConfigError(f"unknown architecture kind {self.kind!r}")
        cfg_cls, builder = _ARCHES[self.kind]
        cfg = cfg_cls(**{
            k: tuple(v) if isinstance(v, list) else v for k, v in self.config.items()
        })
        model = builder(cfg)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model


def make_checkpoint(kind: str, cfg, model: nn.Module, norm_stats: NormStats | None = None,
                    threshold: float | None = None, meta: dict | None = None) -> ModelCheckpoint:
    return ModelCheckpoint(
        kind=kind,
        config=asdict(cfg),
        state_dict={k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        norm_stats=norm_stats,
        threshold=threshold,
        meta=meta or {},
    )


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "kind": ckpt.kind,
        "config": ckpt.config,
        "state_dict": ckpt.state_dict,
        "norm": None if ckpt.norm_stats is None else {"mean": ckpt.norm_stats.mean, "std": ckpt.norm_stats.std},
        "threshold": ckpt.threshold,
        "meta": ckpt.meta,
    }
    torch.save(payload, path)


def load_checkpoint(path) -> ModelCheckpoint:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"unsupported checkpoint format {payload.get('format')!r}")
    norm = payload.get("norm")
    return ModelCheckpoint(
        kind=payload["kind"],
        config=payload["config"],
        state_dict=payload["state_dict"],
        norm_stats=None if norm is None else NormStats(mean=norm["mean"], std=norm["std"]),
        threshold=payload.get("threshold"),
        meta=payload.get("meta", {}),
    )

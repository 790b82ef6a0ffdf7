"""Content encoder, speaker encoder, and fusion decoder.

Convolutions are 1-D over time with the feature dimension as channels;
reflect padding keeps channel-constant signals constant, which the
instance-norm invariances rely on.
"""

from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class ModelConfig:
    mel_bins: int = 80
    frames_per_crop: int = 64
    d_c: int = 64
    d_s: int = 64
    width: int = 128
    kernel_size: int = 5
    n_blocks: int = 6
    n_decoder_blocks: int = 4

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def instance_norm(x: torch.Tensor, epsilon: float = 1e-5) -> torch.Tensor:
    """(x - mean) / sqrt(var + eps) per channel over time; biased variance.

    Accepts (C, T) or (B, C, T).
    """
    mean = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, unbiased=False, keepdim=True)
    return (x - mean) / torch.sqrt(var + epsilon)


def adain(x: torch.Tensor, scale: torch.Tensor, shift: torch.Tensor,
          epsilon: float = 1e-5) -> torch.Tensor:
    """scale * instance_norm(x) + shift, scale/shift broadcast over time."""
    if scale.shape[-1] != x.shape[-2] or shift.shape[-1] != x.shape[-2]:
        raise ValueError("scale/shift length must equal channel count")
    return scale.unsqueeze(-1) * instance_norm(x, epsilon) + shift.unsqueeze(-1)


def _conv(in_ch: int, out_ch: int, kernel_size: int) -> nn.Conv1d:
    return nn.Conv1d(in_ch, out_ch, kernel_size,
                     padding=kernel_size // 2, padding_mode="reflect")


class ResidualBlock(nn.Module):
    """x + IN(conv(relu(IN(conv(x))))) with optional instance norm."""

    def __init__(self, width: int, kernel_size: int, use_in: bool = True):
        super().__init__()
        self.conv1 = _conv(width, width, kernel_size)
        self.conv2 = _conv(width, width, kernel_size)
        self.use_in = use_in

    def forward(self, x):
        h = self.conv1(x)
        if self.use_in:
            h = instance_norm(h)
        h = F.relu(h)
        h = self.conv2(h)
        if self.use_in:
            h = instance_norm(h)
        return x + h

    def first_norm(self, x):
        """Post-IN activation of the first conv (probe for norm invariances)."""
        return instance_norm(self.conv1(x))


class ContentEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.in_proj = _conv(cfg.mel_bins, cfg.width, cfg.kernel_size)
        self.blocks = nn.ModuleList(
            ResidualBlock(cfg.width, cfg.kernel_size) for _ in range(cfg.n_blocks))
        self.out_proj = nn.Linear(cfg.width, cfg.d_c)

    def forward(self, mel):
        h = self.in_proj(mel)
        for b in self.blocks:
            h = b(h)
        return self.out_proj(h.mean(dim=-1))

    def probe_first_block(self, mel):
        return self.blocks[0].first_norm(self.in_proj(mel))


class SpeakerEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.in_proj = _conv(cfg.mel_bins, cfg.width, cfg.kernel_size)
        self.blocks = nn.ModuleList(
            ResidualBlock(cfg.width, cfg.kernel_size) for _ in range(cfg.n_blocks))
        self.fc1 = nn.Linear(cfg.width, cfg.width)
        self.fc2 = nn.Linear(cfg.width, cfg.d_s)

    def forward(self, mel):
        h = self.in_proj(mel)
        for b in self.blocks:
            h = b(h)
        pooled = h.mean(dim=-1)
        return self.fc2(F.relu(self.fc1(pooled)))


class FusionDecoder(nn.Module):
    """Content branch of conv blocks with AdaIN sites fed by a style branch."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.content_proj = nn.Linear(cfg.d_c, cfg.width)
        # non-zero init: a time-constant activation map would be annihilated
        # by the first AdaIN's mean subtraction, severing the content path
        self.pos_bias = nn.Parameter(
            0.1 * torch.randn(cfg.width, cfg.frames_per_crop))
        self.convs = nn.ModuleList(
            _conv(cfg.width, cfg.width, cfg.kernel_size)
            for _ in range(cfg.n_decoder_blocks))
        self.style_fc1 = nn.Linear(cfg.d_s, cfg.width)
        self.style_fc2 = nn.Linear(cfg.width, 2 * cfg.width * cfg.n_decoder_blocks)
        self.out_proj = _conv(cfg.width, cfg.mel_bins, cfg.kernel_size)
        with torch.no_grad():
            # start all AdaIN sites at identity style (scale 1, shift 0)
            bias = self.style_fc2.bias.view(cfg.n_decoder_blocks, 2, cfg.width)
            bias[:, 0].fill_(1.0)
            bias[:, 1].fill_(0.0)

    def style_params(self, s):
        raw = self.style_fc2(F.relu(self.style_fc1(s)))
        return raw.view(*s.shape[:-1], self.cfg.n_decoder_blocks, 2, self.cfg.width)

    def forward(self, s, c):
        style = self.style_params(s)
        h = self.content_proj(c).unsqueeze(-1) + self.pos_bias
        for i, conv in enumerate(self.convs):
            # relu before the AdaIN site: the content vector enters as a
            # per-channel constant, and normalizing a conv output directly
            # would subtract it right back out; the rectification mixes it
            # into the temporal profile first
            h = F.relu(conv(h))
            h = adain(h, style[..., i, 0, :], style[..., i, 1, :])
        return self.out_proj(h)


def build_models(cfg: ModelConfig, seed: int):
    """Seed-deterministic construction of (CE, SE, FD)."""
    torch.manual_seed(seed)
    ce = ContentEncoder(cfg)
    torch.manual_seed(seed + 1)
    se = SpeakerEncoder(cfg)
    torch.manual_seed(seed + 2)
    fd = FusionDecoder(cfg)
    return ce, se, fd


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())

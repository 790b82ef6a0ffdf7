"""Training objectives and the finite-difference gradient checker.

The perceptual distance uses a frozen, seeded random conv stack over mel
spectrograms plus a raw mean-L1 term; reconstruction norms are mean-L1
inside that aggregation.
"""

from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .model import FusionDecoder


@dataclass
class Stage1Config:
    sigma: float = 0.3
    lambda_noise: float = 1e-3
    lr_latents: float = 1.0
    lr_decoder: float = 0.02
    epochs: int = 300
    batch_size: int = 16
    seed: int = 7
    penalty_target: str = "content_latent"  # or "noise" for the literal reading

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class Stage2Config:
    lambda_1: float = 1.0
    lambda_2: float = 1.0
    lambda_3: float = 1.0
    lr: float = 1e-3
    epochs: int = 300
    batch_size: int = 16
    seed: int = 11
    finetune_decoder: bool = True

    def to_json(self) -> dict:
        return asdict(self)


class PerceptualNet(nn.Module):
    """Frozen 4-layer random conv stack; feature distances define the loss."""

    def __init__(self, mel_bins: int, seed: int = 0, n_layers: int = 4,
                 width: int = 32, kernel_size: int = 5):
        super().__init__()
        self.seed = seed
        torch.manual_seed(seed)
        layers = []
        ch = mel_bins
        for _ in range(n_layers):
            layers.append(nn.Conv1d(ch, width, kernel_size,
                                    padding=kernel_size // 2, padding_mode="reflect"))
            ch = width
        self.layers = nn.ModuleList(layers)
        self.layer_weights = [1.0] * n_layers
        self.raw_weight = 1.0
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, x):
        feats = []
        h = x
        for conv in self.layers:
            h = F.relu(conv(h))
            feats.append(h)
        return feats


def perceptual_loss(net: PerceptualNet, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Raw mean-L1 plus weighted mean-L1 over frozen-feature activations."""
    if a.shape != b.shape:
        raise ValueError("spectrogram shapes differ")
    loss = net.raw_weight * (a - b).abs().mean()
    for w, fa, fb in zip(net.layer_weights, net.features(a), net.features(b)):
        loss = loss + w * (fa - fb).abs().mean()
    return loss


def embedding_losses(e_cx, e_cz, e_sx, e_sz):
    """Squared-norm MSE pair: content term, speaker term (batch-averaged)."""
    if e_cx.shape != e_cz.shape or e_sx.shape != e_sz.shape:
        raise ValueError("embedding dimensions differ")
    l_ec = ((e_cx - e_cz) ** 2).sum(dim=-1).mean()
    l_es = ((e_sx - e_sz) ** 2).sum(dim=-1).mean()
    return l_ec, l_es


def draw_noise(shape, sigma: float, seed: int, dtype=torch.float32) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return sigma * torch.randn(shape, generator=g, dtype=dtype)


def stage1_loss(net: PerceptualNet, decoder: FusionDecoder,
                content_rows: torch.Tensor, speaker_rows: torch.Tensor,
                targets: torch.Tensor, noise: torch.Tensor,
                lambda_noise: float, penalty_target: str = "content_latent"):
    """Batch-mean reconstruction-through-noise loss plus the latent penalty.

    Returns (total, reconstruction term) so training can log both.
    """
    recon = perceptual_loss(net, decoder(speaker_rows, content_rows + noise), targets)
    if penalty_target == "content_latent":
        penalty = (content_rows ** 2).sum(dim=-1).mean()
    elif penalty_target == "noise":
        # literal reading: penalizes the fixed draw, contributes no gradient
        penalty = (noise ** 2).sum(dim=-1).mean()
    else:
        raise ValueError(f"unknown penalty target: {penalty_target}")
    return recon + lambda_noise * penalty, recon


def stage2_reconstruction_loss(net: PerceptualNet, decoder: FusionDecoder,
                               e_sz, e_cz, target) -> torch.Tensor:
    """Noise-free reconstruction through the decoder from encoder outputs."""
    return perceptual_loss(net, decoder(e_sz, e_cz), target)


def stage2_total_loss(cfg: Stage2Config, l_ec, l_es, l_r2):
    return cfg.lambda_1 * l_ec + cfg.lambda_2 * l_es + cfg.lambda_3 * l_r2


def grad_check(loss_fn, params_flat: np.ndarray, epsilon: float = 1e-5,
               probes: int = 64, seed: int = 0, atol: float = 1e-8) -> float:
    """Max relative error between autograd and central differences.

    loss_fn maps a float64 torch vector to a scalar tensor; probes random
    coordinates are perturbed. Coordinates where both gradients sit below
    atol are treated as matching: there the central difference is pure
    floating-point cancellation noise (e.g. dead ReLU units with an exactly
    zero analytic gradient).
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ValueError("epsilon out of the supported range")
    x = torch.tensor(np.asarray(params_flat, dtype=np.float64), requires_grad=True)
    loss = loss_fn(x)
    if not torch.isfinite(loss):
        raise ValueError("non-finite loss at probe point")
    analytic = torch.autograd.grad(loss, x)[0].detach().numpy()
    rng = np.random.default_rng(seed)
    coords = rng.choice(len(params_flat), size=min(probes, len(params_flat)), replace=False)
    worst = 0.0
    base = np.asarray(params_flat, dtype=np.float64)
    for i in coords:
        for sign, store in ((+1, "hi"), (-1, "lo")):
            pert = base.copy()
            pert[i] += sign * epsilon
            val = float(loss_fn(torch.tensor(pert)))
            if store == "hi":
                hi = val
            else:
                lo = val
        fd = (hi - lo) / (2 * epsilon)
        if max(abs(analytic[i]), abs(fd)) < atol:
            continue
        denom = max(abs(analytic[i]), abs(fd), 1e-12)
        worst = max(worst, abs(analytic[i] - fd) / denom)
    return worst

"""Frozen-parameter identity swap and reconstruction.

Content audio longer than one crop is processed crop-by-crop and the
outputs concatenated; identity audio is summarized by averaging speaker
embeddings over its crops.
"""

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .features import (FeatureConfig, MelSpectrogram, Waveform, compute_mel,
                       crop_or_pad, denormalize_mel, load_waveform,
                       mel_to_waveform, normalize_mel)
from .model import build_models
from .training import Checkpoint


class InferenceError(RuntimeError):
    pass


@dataclass
class AnonymizationRequest:
    content_audio: object  # path or Waveform
    identity_audio: object  # path or Waveform
    checkpoint: Checkpoint
    out_mel: str | None = None
    out_wav: str | None = None
    out_heatmap: str | None = None
    griffin_lim_iterations: int = 32


def _as_waveform(audio, fcfg: FeatureConfig) -> Waveform:
    if isinstance(audio, Waveform):
        return audio
    return load_waveform(audio, fcfg.sample_rate_hz)


def _crops(audio, ckpt: Checkpoint) -> list:
    """Normalized fixed-size crops tiling the utterance (last crop padded)."""
    fcfg = ckpt.feature_config
    mel = compute_mel(_as_waveform(audio, fcfg), fcfg)
    if mel.config_fingerprint != fcfg.fingerprint():
        raise InferenceError("feature fingerprint mismatch against checkpoint")
    norm = normalize_mel(mel, ckpt.mel_stats)
    step = fcfg.frames_per_crop
    out = []
    for start in range(0, norm.frames, step):
        piece = MelSpectrogram(norm.values[:, start:start + step], norm.config_fingerprint)
        if piece.frames < step:
            # pad in the physical domain so padding lands on the per-bin floor
            raw_piece = MelSpectrogram(mel.values[:, start:start + step], mel.config_fingerprint)
            raw_piece = crop_or_pad(raw_piece, step, "start",
                                    pad_value=float(np.log(fcfg.log_floor)))
            piece = normalize_mel(raw_piece, ckpt.mel_stats)
        out.append(piece.values)
    return out


def _load_networks(ckpt: Checkpoint):
    if ckpt.stage != "stage2":
        raise InferenceError(f"inference needs a stage2 checkpoint, got {ckpt.stage}")
    ce, se, fd = build_models(ckpt.model_config, seed=0)
    ce.load_state_dict(ckpt.content_encoder_state)
    se.load_state_dict(ckpt.speaker_encoder_state)
    fd.load_state_dict(ckpt.decoder_state)
    for net in (ce, se, fd):
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
    return ce, se, fd


def checkpoint_digest(ckpt: Checkpoint) -> str:
    """Hash of every parameter tensor; used to verify the frozen contract."""
    h = hashlib.sha256()
    for state in (ckpt.decoder_state, ckpt.content_encoder_state or {},
                  ckpt.speaker_encoder_state or {}):
        for k in sorted(state):
            h.update(k.encode())
            h.update(np.ascontiguousarray(state[k].numpy()).tobytes())
    h.update(np.ascontiguousarray(ckpt.latents.content_table.numpy()).tobytes())
    h.update(np.ascontiguousarray(ckpt.latents.speaker_table.numpy()).tobytes())
    return h.hexdigest()


def synthesize_mel(ckpt: Checkpoint, content_audio, identity_audio) -> MelSpectrogram:
    """FD(SE(identity), CE(content)) in the normalized mel domain."""
    ce, se, fd = _load_networks(ckpt)
    content_crops = _crops(content_audio, ckpt)
    identity_crops = _crops(identity_audio, ckpt)
    with torch.no_grad():
        s = torch.stack([se(torch.from_numpy(c)) for c in identity_crops]).mean(dim=0)
        pieces = []
        for crop in content_crops:
            c = ce(torch.from_numpy(crop))
            pieces.append(fd(s, c).numpy())
    values = np.concatenate(pieces, axis=1).astype(np.float32)
    return MelSpectrogram(values=values,
                          config_fingerprint=ckpt.feature_config.fingerprint())


def reconstruct(ckpt: Checkpoint, audio) -> MelSpectrogram:
    """FD(SE(mel), CE(mel)) for a single utterance."""
    return synthesize_mel(ckpt, audio, audio)


def anonymize(req: AnonymizationRequest):
    """Identity swap; returns (normalized synth mel, synthesized waveform)."""
    ckpt = req.checkpoint
    synth = synthesize_mel(ckpt, req.content_audio, req.identity_audio)
    physical = denormalize_mel(synth, ckpt.mel_stats)
    wav = mel_to_waveform(physical, ckpt.feature_config,
                          iterations=req.griffin_lim_iterations)
    if req.out_mel:
        from .features import save_mel_tensor
        save_mel_tensor(req.out_mel, synth.values)
    if req.out_wav:
        from .features import save_waveform
        save_waveform(req.out_wav, wav)
    if req.out_heatmap:
        from .features import save_mel_heatmap
        save_mel_heatmap(req.out_heatmap, synth.values, title="synthesized")
    return synth, wav


def three_panel_figure(path, original: np.ndarray, reconstructed: np.ndarray,
                       synthesized: np.ndarray) -> None:
    """Original / reconstructed / synthesized heatmaps side by side."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 3, figsize=(12, 3))
    for ax, values, title in zip(axes, (original, reconstructed, synthesized),
                                 ("original", "reconstructed", "synthesized")):
        ax.imshow(values, origin="lower", aspect="auto", cmap="magma")
        ax.set_title(title)
        ax.set_xlabel("frame")
    axes[0].set_ylabel("mel bin")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

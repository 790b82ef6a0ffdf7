"""Two-stage training (latent optimization, then encoder distillation) and
the binary checkpoint container shared by inference and evaluation."""

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import Manifest, batch_iter
from .features import (FeatureConfig, MelStats, MelSpectrogram, compute_mel,
                       compute_stats, crop_or_pad, load_mel_tensor,
                       load_waveform, normalize_mel, save_mel_tensor)
from .losses import (PerceptualNet, Stage1Config, Stage2Config, embedding_losses,
                     perceptual_loss, stage1_loss, stage2_total_loss)
from .model import ModelConfig, build_models, FusionDecoder


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class LatentTables:
    content_table: torch.Tensor  # (num train utterances, d_c)
    speaker_table: torch.Tensor  # (num speakers, d_s)
    utterance_ids: list
    speaker_ids: list
    manifest_fingerprint: str


def init_latents(m: Manifest, d_c: int, d_s: int, seed: int) -> LatentTables:
    """Rows i.i.d. N(0, 1/d), so expected squared row norm is 1."""
    utt_ids = m.utterance_ids("train")
    g = torch.Generator().manual_seed(seed)
    content = torch.randn(len(utt_ids), d_c, generator=g) / np.sqrt(d_c)
    speaker = torch.randn(len(m.speakers), d_s, generator=g) / np.sqrt(d_s)
    return LatentTables(content_table=content, speaker_table=speaker,
                        utterance_ids=utt_ids, speaker_ids=list(m.speakers),
                        manifest_fingerprint=m.fingerprint())


@dataclass
class Checkpoint:
    stage: str  # "stage1" | "stage2"
    feature_config: FeatureConfig
    mel_stats: MelStats
    model_config: ModelConfig
    decoder_state: dict
    latents: LatentTables
    perceptual_seed: int
    manifest_fingerprint: str
    content_encoder_state: dict | None = None
    speaker_encoder_state: dict | None = None
    optimizer_state: dict = field(default_factory=dict)
    training_log: list = field(default_factory=list)
    stage1_config: dict = field(default_factory=dict)
    stage2_config: dict = field(default_factory=dict)


CKPT_MAGIC = b"SAIC"
CKPT_VERSION = 1
_DTYPES = {0: np.float32, 1: np.float64, 2: np.int64}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


def _pack_tensors(tensors: dict) -> bytes:
    out = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    return b"".join(out)


def _unpack_tensors(buf: bytes, off: int):
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(n):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode()
        off += nlen
        code, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        dtype = np.dtype(_DTYPES[code]).newbyteorder("<")
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        tensors[name] = arr.reshape(shape).astype(_DTYPES[code])
    return tensors, off


def save_checkpoint(c: Checkpoint, path) -> None:
    tensors = {}
    for k, v in c.decoder_state.items():
        tensors[f"fd.{k}"] = v.detach().numpy()
    tensors["latents.content"] = c.latents.content_table.detach().numpy()
    tensors["latents.speaker"] = c.latents.speaker_table.detach().numpy()
    if c.content_encoder_state is not None:
        for k, v in c.content_encoder_state.items():
            tensors[f"ce.{k}"] = v.detach().numpy()
    if c.speaker_encoder_state is not None:
        for k, v in c.speaker_encoder_state.items():
            tensors[f"se.{k}"] = v.detach().numpy()
    for k, v in c.optimizer_state.items():
        tensors[f"opt.{k}"] = v.detach().numpy() if torch.is_tensor(v) else np.asarray(v)
    trailer = json.dumps({
        "feature_config": c.feature_config.__dict__,
        "mel_stats": c.mel_stats.to_json(),
        "model_config": c.model_config.to_json(),
        "utterance_ids": c.latents.utterance_ids,
        "speaker_ids": c.latents.speaker_ids,
        "perceptual_seed": c.perceptual_seed,
        "has_encoders": c.content_encoder_state is not None,
        "training_log": c.training_log,
        "stage1_config": c.stage1_config,
        "stage2_config": c.stage2_config,
    }, sort_keys=True).encode()
    payload = _pack_tensors(tensors) + struct.pack("<Q", len(trailer)) + trailer
    header = (CKPT_MAGIC + struct.pack("<I", CKPT_VERSION)
              + c.stage.encode().ljust(8, b"\0")
              + c.manifest_fingerprint.encode().ljust(16, b"\0")
              + hashlib.sha256(payload).digest())
    Path(path).write_bytes(header + payload)


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if len(buf) < 60 or buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"not a checkpoint file: {path}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version} (supported: {CKPT_VERSION})")
    stage = buf[8:16].rstrip(b"\0").decode()
    manifest_fp = buf[16:32].rstrip(b"\0").decode()
    digest = buf[32:64]
    payload = buf[64:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"checkpoint checksum mismatch (corrupt file): {path}")
    tensors, off = _unpack_tensors(payload, 0)
    (tlen,) = struct.unpack_from("<Q", payload, off)
    trailer = json.loads(payload[off + 8:off + 8 + tlen].decode())

    def section(prefix):
        return {k[len(prefix):]: torch.from_numpy(v.copy())
                for k, v in tensors.items() if k.startswith(prefix)}

    latents = LatentTables(
        content_table=torch.from_numpy(tensors["latents.content"].copy()),
        speaker_table=torch.from_numpy(tensors["latents.speaker"].copy()),
        utterance_ids=trailer["utterance_ids"],
        speaker_ids=trailer["speaker_ids"],
        manifest_fingerprint=manifest_fp)
    return Checkpoint(
        stage=stage,
        feature_config=FeatureConfig(**trailer["feature_config"]),
        mel_stats=MelStats.from_json(trailer["mel_stats"]),
        model_config=ModelConfig.from_json(trailer["model_config"]),
        decoder_state=section("fd."),
        latents=latents,
        perceptual_seed=trailer["perceptual_seed"],
        manifest_fingerprint=manifest_fp,
        content_encoder_state=section("ce.") if trailer["has_encoders"] else None,
        speaker_encoder_state=section("se.") if trailer["has_encoders"] else None,
        optimizer_state=section("opt."),
        training_log=trailer["training_log"],
        stage1_config=trailer["stage1_config"],
        stage2_config=trailer["stage2_config"])


# ---------------------------------------------------------------------------
# crop cache


def prepare_features(m: Manifest, fcfg: FeatureConfig, cache_dir) -> MelStats:
    """Cache one raw mel per utterance keyed by feature fingerprint; return
    train-split normalization stats. Rerunning with the same config is a no-op."""
    cache = Path(cache_dir) / fcfg.fingerprint()
    cache.mkdir(parents=True, exist_ok=True)
    for r in m.records:
        out = cache / f"{r.utterance_id}.mel"
        if out.exists():
            continue
        mel = compute_mel(load_waveform(r.audio_path, fcfg.sample_rate_hz), fcfg)
        save_mel_tensor(out, mel.values)
    stats_path = cache / "stats.json"
    if stats_path.exists():
        return MelStats.from_json(json.loads(stats_path.read_text()))
    train_mels = [MelSpectrogram(load_mel_tensor(cache / f"{u}.mel"), fcfg.fingerprint())
                  for u in m.utterance_ids("train")]
    stats = compute_stats(train_mels)
    stats_path.write_text(json.dumps(stats.to_json()))
    return stats


def load_crops(m: Manifest, split: str, fcfg: FeatureConfig, stats: MelStats,
               cache_dir, policy: str = "center") -> dict:
    """Deterministic normalized crops, keyed by utterance_id."""
    cache = Path(cache_dir) / fcfg.fingerprint()
    crops = {}
    for u in m.utterance_ids(split):
        mel = MelSpectrogram(load_mel_tensor(cache / f"{u}.mel"), fcfg.fingerprint())
        cropped = crop_or_pad(mel, fcfg.frames_per_crop, policy,
                              pad_value=float(np.log(fcfg.log_floor)))
        crops[u] = normalize_mel(cropped, stats).values
    return crops


# ---------------------------------------------------------------------------
# stage 1: latent optimization


def train_stage1(m: Manifest, crops: dict, fcfg: FeatureConfig, stats: MelStats,
                 mcfg: ModelConfig, cfg: Stage1Config,
                 perceptual_seed: int = 0) -> Checkpoint:
    """Jointly optimize the decoder and both latent tables against the
    noisy-reconstruction loss; returns a stage1 checkpoint."""
    torch.set_num_threads(1)
    latents = init_latents(m, mcfg.d_c, mcfg.d_s, cfg.seed)
    torch.manual_seed(cfg.seed + 2)
    fd = FusionDecoder(mcfg)
    net = PerceptualNet(mcfg.mel_bins, seed=perceptual_seed)
    content = latents.content_table.clone().requires_grad_(True)
    speaker = latents.speaker_table.clone().requires_grad_(True)
    opt = torch.optim.SGD([
        {"params": [content, speaker], "lr": cfg.lr_latents},
        {"params": fd.parameters(), "lr": cfg.lr_decoder},
    ], momentum=0.9)
    noise_gen = torch.Generator().manual_seed(cfg.seed + 1000)
    log = []
    for epoch in range(cfg.epochs):
        totals, recons, count = 0.0, 0.0, 0
        for utt_idx, spk_idx, mels in batch_iter(m, "train", cfg.batch_size,
                                                 cfg.seed, crops, epoch=epoch):
            targets = torch.from_numpy(mels)
            noise = cfg.sigma * torch.randn(len(utt_idx), mcfg.d_c, generator=noise_gen)
            c_rows = content[torch.from_numpy(np.asarray(utt_idx))]
            s_rows = speaker[torch.from_numpy(np.asarray(spk_idx))]
            total, recon = stage1_loss(net, fd, c_rows, s_rows, targets, noise,
                                       cfg.lambda_noise, cfg.penalty_target)
            if not torch.isfinite(total):
                raise TrainingError(
                    f"non-finite stage-1 loss at epoch {epoch}, batch utterances {list(utt_idx)}")
            opt.zero_grad()
            total.backward()
            opt.step()
            totals += float(total.detach()) * len(utt_idx)
            recons += float(recon.detach()) * len(utt_idx)
            count += len(utt_idx)
        log.append({"epoch": epoch, "loss": totals / count, "recon": recons / count})
    latents.content_table = content.detach()
    latents.speaker_table = speaker.detach()
    opt_state = {}
    for name, p in list(fd.named_parameters()) + [("latents.content", content),
                                                  ("latents.speaker", speaker)]:
        st = opt.state.get(p, {})
        if "momentum_buffer" in st and st["momentum_buffer"] is not None:
            opt_state[f"mom.{name}"] = st["momentum_buffer"].detach()
    return Checkpoint(
        stage="stage1", feature_config=fcfg, mel_stats=stats, model_config=mcfg,
        decoder_state={k: v.detach() for k, v in fd.state_dict().items()},
        latents=latents, perceptual_seed=perceptual_seed,
        manifest_fingerprint=m.fingerprint(),
        optimizer_state=opt_state, training_log=log,
        stage1_config=cfg.to_json())


# ---------------------------------------------------------------------------
# stage 2: encoder training against stage-1 targets


def train_stage2(m: Manifest, crops: dict, stage1_ckpt: Checkpoint,
                 cfg: Stage2Config) -> Checkpoint:
    """Train CE/SE to match stage-1 latents plus noise-free reconstruction;
    the decoder starts from stage-1 weights and moves only if finetuning."""
    if stage1_ckpt.stage != "stage1":
        raise TrainingError(f"expected a stage1 checkpoint, got {stage1_ckpt.stage}")
    if stage1_ckpt.manifest_fingerprint != m.fingerprint():
        raise TrainingError("stage1 checkpoint was trained on a different manifest")
    torch.set_num_threads(1)
    mcfg = stage1_ckpt.model_config
    ce, se, fd = build_models(mcfg, cfg.seed)
    fd.load_state_dict(stage1_ckpt.decoder_state)
    net = PerceptualNet(mcfg.mel_bins, seed=stage1_ckpt.perceptual_seed)
    content_tab = stage1_ckpt.latents.content_table
    speaker_tab = stage1_ckpt.latents.speaker_table
    params = list(ce.parameters()) + list(se.parameters())
    if cfg.finetune_decoder:
        params += list(fd.parameters())
    else:
        for p in fd.parameters():
            p.requires_grad_(False)
    # Adam here: plain momentum SGD leaves the content encoder underfitting
    # its latent targets, and the residual correlates with speaker identity
    opt = torch.optim.Adam(params, lr=cfg.lr)
    log = []
    for epoch in range(cfg.epochs):
        sums = np.zeros(4)
        count = 0
        for utt_idx, spk_idx, mels in batch_iter(m, "train", cfg.batch_size,
                                                 cfg.seed, crops, epoch=epoch):
            targets = torch.from_numpy(mels)
            e_cx = content_tab[torch.from_numpy(np.asarray(utt_idx))]
            e_sx = speaker_tab[torch.from_numpy(np.asarray(spk_idx))]
            e_cz = ce(targets)
            e_sz = se(targets)
            l_ec, l_es = embedding_losses(e_cx, e_cz, e_sx, e_sz)
            l_r2 = (perceptual_loss(net, fd(e_sz, e_cz), targets)
                    if cfg.lambda_3 > 0 else torch.zeros(()))
            total = stage2_total_loss(cfg, l_ec, l_es, l_r2)
            if not torch.isfinite(total):
                raise TrainingError(
                    f"non-finite stage-2 loss at epoch {epoch}, batch utterances {list(utt_idx)}")
            opt.zero_grad()
            total.backward()
            opt.step()
            sums += np.array([float(total.detach()), float(l_ec.detach()),
                              float(l_es.detach()), float(l_r2.detach())]) * len(utt_idx)
            count += len(utt_idx)
        means = sums / count
        log.append({"epoch": epoch, "loss": means[0], "l_ec": means[1],
                    "l_es": means[2], "l_r2": means[3]})
    return Checkpoint(
        stage="stage2", feature_config=stage1_ckpt.feature_config,
        mel_stats=stage1_ckpt.mel_stats, model_config=mcfg,
        decoder_state={k: v.detach() for k, v in fd.state_dict().items()},
        latents=stage1_ckpt.latents, perceptual_seed=stage1_ckpt.perceptual_seed,
        manifest_fingerprint=stage1_ckpt.manifest_fingerprint,
        content_encoder_state={k: v.detach() for k, v in ce.state_dict().items()},
        speaker_encoder_state={k: v.detach() for k, v in se.state_dict().items()},
        training_log=stage1_ckpt.training_log + log,
        stage1_config=stage1_ckpt.stage1_config, stage2_config=cfg.to_json())

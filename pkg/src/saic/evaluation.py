"""Desk-scale speaker-identification evaluation.

A locally trained verification oracle (small conv net, cosine scoring
against per-speaker centroids) judges whose identity a synthesized mel
carries; k-NN metrics over encoder embeddings quantify disentanglement.
"""

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import Manifest
from .features import FeatureConfig, MelStats
from .inference import AnonymizationRequest, synthesize_mel, _crops, _load_networks
from .training import Checkpoint


class EvaluationError(RuntimeError):
    pass


@dataclass
class OracleConfig:
    embed_dim: int = 64
    width: int = 64
    kernel_size: int = 5
    epochs: int = 60
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 21
    accuracy_floor: float = 0.95


class OracleNet(nn.Module):
    def __init__(self, mel_bins: int, cfg: OracleConfig):
        super().__init__()
        k = cfg.kernel_size
        self.convs = nn.ModuleList([
            nn.Conv1d(mel_bins, cfg.width, k, stride=2, padding=k // 2),
            nn.Conv1d(cfg.width, cfg.width, k, stride=2, padding=k // 2),
            nn.Conv1d(cfg.width, cfg.embed_dim, k, stride=2, padding=k // 2),
        ])

    def embed(self, mel):
        h = mel
        for conv in self.convs:
            h = F.relu(conv(h))
        return h.mean(dim=-1)


@dataclass
class VerificationOracle:
    net_state: dict
    centroids: np.ndarray  # (num speakers, embed_dim), unit rows
    speakers: list
    config: OracleConfig
    holdout_accuracy: float
    mel_bins: int

    def network(self) -> OracleNet:
        net = OracleNet(self.mel_bins, self.config)
        net.load_state_dict(self.net_state)
        net.eval()
        return net


def _crop_list(entry):
    return list(entry) if isinstance(entry, (list, tuple)) else [entry]


def train_oracle(m: Manifest, train_crops: dict, test_crops: dict,
                 cfg: OracleConfig = OracleConfig()) -> VerificationOracle:
    """Softmax speaker classifier on mel crops; refuses to return an oracle
    below the held-out accuracy floor.

    Crop dict values may be single (bins, frames) arrays or lists of several
    crops per utterance; training uses them all.
    """
    if len(m.speakers) < 2:
        raise EvaluationError("need >= 2 speakers to train a verification oracle")
    torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)
    mel_bins = _crop_list(next(iter(train_crops.values())))[0].shape[0]
    net = OracleNet(mel_bins, cfg)
    head = nn.Linear(cfg.embed_dim, len(m.speakers))
    opt = torch.optim.Adam(list(net.parameters()) + list(head.parameters()), lr=cfg.lr)
    utt_ids = m.utterance_ids("train")
    x = torch.from_numpy(np.stack(
        [c for u in utt_ids for c in _crop_list(train_crops[u])]))
    y = torch.tensor([m.speaker_index(m.record(u).speaker_id)
                      for u in utt_ids for _ in _crop_list(train_crops[u])])
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(order), cfg.batch_size):
            idx = torch.from_numpy(order[start:start + cfg.batch_size])
            logits = head(net.embed(x[idx]))
            loss = F.cross_entropy(logits, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    net.eval()
    with torch.no_grad():
        emb = net.embed(x).numpy()
    centroids = np.zeros((len(m.speakers), cfg.embed_dim))
    for s in range(len(m.speakers)):
        c = emb[y.numpy() == s].mean(axis=0)
        centroids[s] = c / max(np.linalg.norm(c), 1e-12)
    oracle = VerificationOracle(
        net_state={k: v.detach() for k, v in net.state_dict().items()},
        centroids=centroids.astype(np.float32), speakers=list(m.speakers),
        config=cfg, holdout_accuracy=0.0, mel_bins=mel_bins)
    correct = 0
    test_ids = m.utterance_ids("test")
    for u in test_ids:
        pred, _ = identify(oracle, _crop_list(test_crops[u])[0])
        correct += pred == m.record(u).speaker_id
    oracle.holdout_accuracy = correct / len(test_ids)
    if oracle.holdout_accuracy < cfg.accuracy_floor:
        raise EvaluationError(
            f"verification oracle held-out top-1 {oracle.holdout_accuracy:.3f} "
            f"below floor {cfg.accuracy_floor}; evaluation refuses to run")
    return oracle


def _embed_crop(oracle: VerificationOracle, crop: np.ndarray) -> np.ndarray:
    net = oracle.network()
    with torch.no_grad():
        e = net.embed(torch.from_numpy(crop[None])).numpy()[0]
    return e / max(np.linalg.norm(e), 1e-12)


def identify(oracle: VerificationOracle, crop: np.ndarray,
             embedding: np.ndarray | None = None):
    """Cosine scoring against centroids; ties break to the lower speaker index."""
    if embedding is None:
        if crop.shape[0] != oracle.mel_bins:
            raise EvaluationError("crop shape does not match oracle config")
        embedding = _embed_crop(oracle, crop)
    scores = oracle.centroids @ embedding
    return oracle.speakers[int(np.argmax(scores))], scores


def identify_mel(oracle: VerificationOracle, values: np.ndarray, frames_per_crop: int):
    """Identify a variable-length mel by averaging per-crop embeddings."""
    net = oracle.network()
    embs = []
    with torch.no_grad():
        for start in range(0, values.shape[1], frames_per_crop):
            piece = values[:, start:start + frames_per_crop]
            if piece.shape[1] < frames_per_crop // 2 and embs:
                continue  # skip a thin padded tail
            e = net.embed(torch.from_numpy(piece[None])).numpy()[0]
            embs.append(e / max(np.linalg.norm(e), 1e-12))
    mean = np.mean(embs, axis=0)
    mean = mean / max(np.linalg.norm(mean), 1e-12)
    return identify(oracle, piece, embedding=mean)


@dataclass
class EvalReport:
    target_top1: float
    source_top1: float
    pairs: list
    seed: int
    num_pairs: int
    oracle_holdout_accuracy: float
    chance_level: float
    disentanglement: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


def eval_anonymization(ckpt: Checkpoint, oracle: VerificationOracle, m: Manifest,
                       pairs: int, seed: int) -> EvalReport:
    """Seeded random (i, j != i) swaps over the test split; reports the
    fraction identified as the target speaker and leakage toward the source."""
    test_ids = m.utterance_ids("test")
    by_spk = {s: [u for u in test_ids if m.record(u).speaker_id == s] for s in m.speakers}
    live = [s for s in m.speakers if by_spk[s]]
    if len(live) < 2:
        raise EvaluationError("need >= 2 speakers in the test split")
    rng = np.random.default_rng(seed)
    trace = []
    hit_target = hit_source = 0
    for p in range(pairs):
        i = live[rng.integers(len(live))]
        j = live[rng.integers(len(live))]
        while j == i:
            j = live[rng.integers(len(live))]
        u_i = by_spk[i][rng.integers(len(by_spk[i]))]
        u_j = by_spk[j][rng.integers(len(by_spk[j]))]
        synth = synthesize_mel(ckpt, m.record(u_i).audio_path, m.record(u_j).audio_path)
        pred, scores = identify_mel(oracle, synth.values,
                                    ckpt.feature_config.frames_per_crop)
        hit_target += pred == j
        hit_source += pred == i
        trace.append({"source": i, "target": j, "content_utt": u_i,
                      "identity_utt": u_j, "predicted": pred,
                      "scores": np.asarray(scores).tolist()})
    return EvalReport(
        target_top1=hit_target / pairs, source_top1=hit_source / pairs,
        pairs=trace, seed=seed, num_pairs=pairs,
        oracle_holdout_accuracy=oracle.holdout_accuracy,
        chance_level=1.0 / len(m.speakers))


def _utterance_embeddings(ckpt: Checkpoint, m: Manifest, split: str):
    """Per-utterance CE/SE embeddings (crop-averaged), sorted by utterance_id."""
    ce, se, fd = _load_networks(ckpt)
    utt_ids = m.utterance_ids(split)
    speaker_emb, content_emb, speakers = [], [], []
    with torch.no_grad():
        for u in utt_ids:
            crops = _crops(m.record(u).audio_path, ckpt)
            s = torch.stack([se(torch.from_numpy(c)) for c in crops]).mean(dim=0)
            c = torch.stack([ce(torch.from_numpy(cr)) for cr in crops]).mean(dim=0)
            speaker_emb.append(s.numpy())
            content_emb.append(c.numpy())
            speakers.append(m.record(u).speaker_id)
    return utt_ids, speakers, np.stack(speaker_emb), np.stack(content_emb)


def _knn_accuracy(emb: np.ndarray, labels: list, k: int) -> float:
    """Leave-one-out k-NN with cosine distance; ties break to lower index."""
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    unit = emb / np.maximum(norms, 1e-12)
    sim = unit @ unit.T
    np.fill_diagonal(sim, -np.inf)
    labels = np.asarray(labels)
    correct = 0
    for i in range(len(labels)):
        nn_idx = np.argsort(-sim[i], kind="stable")[:k]
        votes = labels[nn_idx]
        uniq, counts = np.unique(votes, return_counts=True)
        correct += uniq[np.argmax(counts)] == labels[i]
    return correct / len(labels)


def disentanglement_report(ckpt: Checkpoint, m: Manifest, k: int = 3) -> dict:
    """Speaker k-NN accuracy over SE embeddings (expect high) and over CE
    embeddings (expect near chance)."""
    per_spk = min(len([u for u in m.utterance_ids("test")
                       if m.record(u).speaker_id == s]) for s in m.speakers)
    if not (1 <= k < per_spk + 1):
        raise EvaluationError(f"k={k} too large for {per_spk} test utterances per speaker")
    _, speakers, s_emb, c_emb = _utterance_embeddings(ckpt, m, "test")
    return {
        "speaker_knn_acc_on_speaker_emb": _knn_accuracy(s_emb, speakers, k),
        "speaker_knn_acc_on_content_emb": _knn_accuracy(c_emb, speakers, k),
        "chance_level": 1.0 / len(m.speakers),
        "k": k,
    }


def export_embeddings(ckpt: Checkpoint, m: Manifest, out_path, split: str = "test") -> None:
    """Two CSVs (<out>.speaker.csv / <out>.content.csv), one row per utterance."""
    utt_ids, speakers, s_emb, c_emb = _utterance_embeddings(ckpt, m, split)
    out_path = Path(out_path)
    for kind, emb in (("speaker", s_emb), ("content", c_emb)):
        path = out_path.with_suffix(f".{kind}.csv")
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["utterance_id", "speaker_id", "embedding_kind"]
                       + [f"dim{i}" for i in range(emb.shape[1])])
            for u, s, row in zip(utt_ids, speakers, emb):
                w.writerow([u, s, kind] + [f"{v:.6g}" for v in row])

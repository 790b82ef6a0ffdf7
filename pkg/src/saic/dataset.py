"""Corpus indexing, splits, batching, and a synthetic-speaker corpus.

The synthetic corpus factors identity (fundamental frequency + harmonic
amplitude profile) and content (token sequence of pitch-offset / duty-cycle
patterns) independently, so disentanglement can be checked against exact
ground truth.
"""

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .features import Waveform, save_waveform


class DatasetError(ValueError):
    pass


@dataclass
class UtteranceRecord:
    speaker_id: str
    utterance_id: str
    audio_path: str
    split: str = "train"


@dataclass
class Manifest:
    records: list
    speakers: list
    feature_config_fingerprint: str = ""

    def __post_init__(self):
        ids = [r.utterance_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate utterance_id in manifest")
        expected = sorted({r.speaker_id for r in self.records})
        if self.speakers != expected:
            raise DatasetError("speaker list does not match records")

    def utterance_ids(self, split: str) -> list:
        return sorted(r.utterance_id for r in self.records if r.split == split)

    def record(self, utterance_id: str) -> UtteranceRecord:
        for r in self.records:
            if r.utterance_id == utterance_id:
                return r
        raise KeyError(utterance_id)

    def speaker_index(self, speaker_id: str) -> int:
        return self.speakers.index(speaker_id)

    def fingerprint(self) -> str:
        import hashlib
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_json(self) -> dict:
        return {
            "speakers": list(self.speakers),
            "records": [asdict(r) for r in self.records],
            "feature_config_fingerprint": self.feature_config_fingerprint,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def from_json(cls, d: dict) -> "Manifest":
        recs = [UtteranceRecord(**r) for r in d["records"]]
        return cls(records=recs, speakers=list(d["speakers"]),
                   feature_config_fingerprint=d.get("feature_config_fingerprint", ""))

    @classmethod
    def load(cls, path) -> "Manifest":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class SynthCorpusConfig:
    num_speakers: int = 8
    utterances_per_speaker: int = 20
    duration_s: float = 3.0
    seed: int = 1234
    speaker_f0_min_hz: float = 100.0
    speaker_f0_max_hz: float = 320.0
    content_vocabulary_size: int = 8
    tones_per_utterance: int = 6
    sample_rate_hz: int = 16000

    def __post_init__(self):
        if self.num_speakers < 2:
            raise DatasetError("need at least 2 speakers")
        if self.utterances_per_speaker < 2:
            raise DatasetError("need at least 2 utterances per speaker")
        if self.content_vocabulary_size < 2:
            raise DatasetError("content vocabulary must have at least 2 tokens")


def scan_corpus(root) -> Manifest:
    """Index root/speaker_id/*.wav into a manifest (all records split=train)."""
    root = Path(root)
    speaker_dirs = sorted(d for d in root.iterdir() if d.is_dir()) if root.is_dir() else []
    if not speaker_dirs:
        raise DatasetError(f"no speakers found under {root}")
    records = []
    for d in speaker_dirs:
        wavs = sorted(d.glob("*.wav"))
        if not wavs:
            raise DatasetError(f"speaker directory {d} contains no wav files")
        for w in wavs:
            records.append(UtteranceRecord(
                speaker_id=d.name,
                utterance_id=f"{d.name}__{w.stem}",
                audio_path=str(w),
            ))
    return Manifest(records=records, speakers=sorted(d.name for d in speaker_dirs))


def make_splits(m: Manifest, test_fraction: float, seed: int) -> Manifest:
    """Per-speaker stratified split; every speaker lands in both splits."""
    if not (0.0 < test_fraction < 1.0):
        raise DatasetError("test_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    new_records = []
    for spk in m.speakers:
        recs = sorted((r for r in m.records if r.speaker_id == spk),
                      key=lambda r: r.utterance_id)
        n = len(recs)
        n_test = int(round(test_fraction * n))
        if n_test < 1 or n - n_test < 1:
            raise DatasetError(
                f"speaker {spk}: split {test_fraction} leaves an empty side with {n} utterances")
        order = rng.permutation(n)
        test_idx = set(order[:n_test].tolist())
        for i, r in enumerate(recs):
            new_records.append(UtteranceRecord(
                speaker_id=r.speaker_id, utterance_id=r.utterance_id,
                audio_path=r.audio_path,
                split="test" if i in test_idx else "train"))
    return Manifest(records=new_records, speakers=list(m.speakers),
                    feature_config_fingerprint=m.feature_config_fingerprint)


def _token_offsets_semitones(vocab_size: int) -> np.ndarray:
    # small offsets keep speakers pitch-separable by construction
    return np.linspace(-1.5, 1.5, vocab_size)


def _token_duty_cycles(vocab_size: int) -> np.ndarray:
    # deterministic scramble so duty isn't collinear with pitch offset
    order = (np.arange(vocab_size) * 5 + 2) % vocab_size
    return 0.45 + 0.5 * order / (vocab_size - 1)


def speaker_f0_grid(cfg: SynthCorpusConfig) -> np.ndarray:
    """Geometric f0 spacing over [f0_min, f0_max], one value per speaker."""
    return np.geomspace(cfg.speaker_f0_min_hz, cfg.speaker_f0_max_hz, cfg.num_speakers)


def render_utterance(f0_hz: float, harmonics: np.ndarray, tokens: list,
                     cfg: SynthCorpusConfig) -> np.ndarray:
    rate = cfg.sample_rate_hz
    offsets = _token_offsets_semitones(cfg.content_vocabulary_size)
    duties = _token_duty_cycles(cfg.content_vocabulary_size)
    slot = int(round(cfg.duration_s * rate / len(tokens)))
    fade = int(0.01 * rate)
    out = np.zeros(slot * len(tokens))
    for k, tok in enumerate(tokens):
        freq = f0_hz * 2.0 ** (offsets[tok] / 12.0)
        active = int(duties[tok] * slot)
        t = np.arange(active) / rate
        seg = np.zeros(active)
        for h, amp in enumerate(harmonics, start=1):
            if h * freq < rate / 2:
                seg += amp * np.sin(2 * np.pi * h * freq * t)
        env = np.ones(active)
        n = min(fade, active // 2)
        ramp = 0.5 * (1 - np.cos(np.pi * np.arange(n) / n)) if n else np.zeros(0)
        env[:n] = ramp
        env[active - n:] = ramp[::-1]
        out[k * slot:k * slot + active] = seg * env
    peak = np.max(np.abs(out))
    if peak > 0:
        out = 0.9 * out / peak
    return out.astype(np.float32)


def generate_synthetic_corpus(cfg: SynthCorpusConfig, out_dir) -> Manifest:
    """Render the synthetic corpus plus per-utterance ground-truth sidecars."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    f0s = speaker_f0_grid(cfg)
    records = []
    for s in range(cfg.num_speakers):
        spk = f"spk{s:02d}"
        spk_dir = out_dir / spk
        spk_dir.mkdir(exist_ok=True)
        harmonics = (1.0 / np.arange(1, 9)) * rng.uniform(0.5, 1.5, size=8)
        harmonics /= harmonics.max()
        for u in range(cfg.utterances_per_speaker):
            tokens = rng.integers(0, cfg.content_vocabulary_size,
                                  size=cfg.tones_per_utterance).tolist()
            samples = render_utterance(float(f0s[s]), harmonics, tokens, cfg)
            name = f"utt{u:03d}"
            wav_path = spk_dir / f"{name}.wav"
            save_waveform(wav_path, Waveform(samples=samples, sample_rate_hz=cfg.sample_rate_hz))
            meta = {
                "speaker_id": spk,
                "f0_hz": float(f0s[s]),
                "harmonic_profile": harmonics.tolist(),
                "token_sequence": tokens,
            }
            (spk_dir / f"{name}.json").write_text(json.dumps(meta, indent=2))
            records.append(UtteranceRecord(
                speaker_id=spk, utterance_id=f"{spk}__{name}", audio_path=str(wav_path)))
    return Manifest(records=records,
                    speakers=[f"spk{s:02d}" for s in range(cfg.num_speakers)])


def batch_iter(m: Manifest, split: str, batch_size: int, seed: int,
               crops: dict, epoch: int = 0):
    """Yield (utterance indices, speaker indices, stacked crops) per batch.

    Indices address the sorted utterance list of the split and the manifest
    speaker list; order is a deterministic shuffle per (seed, epoch).
    """
    if batch_size < 1:
        raise DatasetError("batch_size must be >= 1")
    utt_ids = m.utterance_ids(split)
    if not utt_ids:
        raise DatasetError(f"empty split: {split}")
    rng = np.random.default_rng((seed, epoch))
    order = rng.permutation(len(utt_ids))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        spk_idx = np.array([m.speaker_index(m.record(utt_ids[i]).speaker_id) for i in idx])
        mels = np.stack([crops[utt_ids[i]] for i in idx])
        yield idx, spk_idx, mels


def estimate_f0(samples: np.ndarray, rate: int,
                fmin: float = 60.0, fmax: float = 420.0) -> float:
    """Median frame-wise autocorrelation pitch estimate over voiced frames."""
    win = int(0.05 * rate)
    hop = win // 2
    lo = int(rate / fmax)
    hi = int(rate / fmin)
    rms = []
    frames = []
    for s in range(0, len(samples) - win, hop):
        fr = samples[s:s + win].astype(np.float64)
        frames.append(fr)
        rms.append(np.sqrt(np.mean(fr ** 2)))
    rms = np.array(rms)
    if rms.size == 0 or rms.max() <= 0:
        return 0.0
    f0s = []
    for fr, e in zip(frames, rms):
        if e < 0.25 * rms.max():
            continue
        ac = np.correlate(fr, fr, mode="full")[len(fr) - 1:]
        lag = lo + int(np.argmax(ac[lo:hi]))
        f0s.append(rate / lag)
    return float(np.median(f0s)) if f0s else 0.0


def nearest_speaker_by_f0(f0: float, speaker_f0s: np.ndarray) -> int:
    return int(np.argmin(np.abs(np.log(np.maximum(f0, 1e-6)) - np.log(speaker_f0s))))

"""Waveform I/O, log-mel extraction/normalization, and Griffin-Lim inversion.

All functions here are pure; the mel spectrogram is the tensor every other
module exchanges.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate_hz: int = 16000
    window_length_samples: int = 1024
    hop_length_samples: int = 256
    fft_size: int = 1024
    mel_bins: int = 80
    fmin_hz: float = 0.0
    fmax_hz: float = 8000.0
    log_floor: float = 1e-5
    frames_per_crop: int = 64

    def __post_init__(self):
        if not (self.hop_length_samples <= self.window_length_samples <= self.fft_size):
            raise FeatureError("need hop <= window <= fft_size")
        if not (0 <= self.fmin_hz < self.fmax_hz <= self.sample_rate_hz / 2):
            raise FeatureError("need 0 <= fmin < fmax <= nyquist")
        if self.log_floor <= 0:
            raise FeatureError("log_floor must be positive")

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Waveform:
    samples: np.ndarray  # float32, 1-D, in [-1, 1]
    sample_rate_hz: int


@dataclass
class MelSpectrogram:
    values: np.ndarray  # (mel_bins, frames) float32 log-magnitudes
    config_fingerprint: str

    @property
    def frames(self) -> int:
        return self.values.shape[1]


@dataclass
class MelStats:
    """Per-bin mean/std computed over the training split."""

    mean: np.ndarray
    std: np.ndarray

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "MelStats":
        return cls(np.asarray(d["mean"], dtype=np.float32),
                   np.asarray(d["std"], dtype=np.float32))


def load_waveform(path, target_rate: int) -> Waveform:
    """Load a mono waveform at target_rate, peak-normalized to 1.0."""
    path = Path(path)
    if not path.exists():
        raise FeatureError(f"no such file: {path}")
    try:
        rate, data = scipy.io.wavfile.read(str(path))
    except Exception as e:
        raise FeatureError(f"cannot decode {path}: {e}") from e
    if data.size == 0:
        raise FeatureError(f"zero-length audio: {path}")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        raise FeatureError(f"unsupported sample encoding {data.dtype} in {path}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    if rate != target_rate:
        g = np.gcd(rate, target_rate)
        x = scipy.signal.resample_poly(x, target_rate // g, rate // g)
    peak = np.max(np.abs(x))
    if peak > 0:
        x = x / peak
    return Waveform(samples=x.astype(np.float32), sample_rate_hz=target_rate)


def save_waveform(path, w: Waveform) -> None:
    x = np.clip(w.samples, -1.0, 1.0)
    pcm = (x * 32767.0).astype(np.int16)
    scipy.io.wavfile.write(str(path), w.sample_rate_hz, pcm)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Triangular area-normalized filters, (mel_bins, fft_size//2 + 1)."""
    n_freqs = cfg.fft_size // 2 + 1
    fft_freqs = np.linspace(0.0, cfg.sample_rate_hz / 2, n_freqs)
    mel_pts = np.linspace(_hz_to_mel(cfg.fmin_hz), _hz_to_mel(cfg.fmax_hz), cfg.mel_bins + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fb = np.zeros((cfg.mel_bins, n_freqs))
    for i in range(cfg.mel_bins):
        lo, ctr, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        up = (fft_freqs - lo) / max(ctr - lo, 1e-12)
        down = (hi - fft_freqs) / max(hi - ctr, 1e-12)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
        # area normalization: unit integral over Hz
        fb[i] *= 2.0 / (hi - lo)
    return fb


def mel_bin_centers_hz(cfg: FeatureConfig) -> np.ndarray:
    mel_pts = np.linspace(_hz_to_mel(cfg.fmin_hz), _hz_to_mel(cfg.fmax_hz), cfg.mel_bins + 2)
    return _mel_to_hz(mel_pts)[1:-1]


def _frame(x: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    win, hop = cfg.window_length_samples, cfg.hop_length_samples
    n = 1 + (len(x) - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def _stft_mag(x: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    frames = _frame(x, cfg) * np.hanning(cfg.window_length_samples)[None, :]
    return np.abs(np.fft.rfft(frames, n=cfg.fft_size, axis=1)).T  # (freqs, frames)


def compute_mel(w: Waveform, cfg: FeatureConfig) -> MelSpectrogram:
    """Log mel-energy spectrogram; frames = 1 + (len - window) // hop."""
    if w.sample_rate_hz != cfg.sample_rate_hz:
        raise FeatureError("waveform rate does not match feature config")
    if len(w.samples) < cfg.window_length_samples:
        raise FeatureError("waveform shorter than one analysis window")
    mag = _stft_mag(w.samples.astype(np.float64), cfg)
    energy = mel_filterbank(cfg) @ (mag ** 2)
    values = np.log(np.maximum(energy, cfg.log_floor))
    return MelSpectrogram(values=values.astype(np.float32),
                          config_fingerprint=cfg.fingerprint())


def compute_stats(mels: list, epsilon: float = 1e-6) -> MelStats:
    stacked = np.concatenate([m.values for m in mels], axis=1)
    mean = stacked.mean(axis=1)
    std = np.maximum(stacked.std(axis=1), epsilon)
    return MelStats(mean=mean.astype(np.float32), std=std.astype(np.float32))


def normalize_mel(m: MelSpectrogram, stats: MelStats) -> MelSpectrogram:
    if stats.mean.shape[0] != m.values.shape[0]:
        raise FeatureError("stats bin count does not match spectrogram")
    out = (m.values - stats.mean[:, None]) / stats.std[:, None]
    return MelSpectrogram(values=out.astype(np.float32),
                          config_fingerprint=m.config_fingerprint)


def denormalize_mel(m: MelSpectrogram, stats: MelStats) -> MelSpectrogram:
    if stats.mean.shape[0] != m.values.shape[0]:
        raise FeatureError("stats bin count does not match spectrogram")
    out = m.values * stats.std[:, None] + stats.mean[:, None]
    return MelSpectrogram(values=out.astype(np.float32),
                          config_fingerprint=m.config_fingerprint)


def crop_or_pad(m: MelSpectrogram, frames_per_crop: int, offset_policy: str = "start",
                pad_value: float | None = None, seed: int = 0) -> MelSpectrogram:
    """Fixed-size crop; short inputs are right-padded with pad_value.

    pad_value defaults to the log floor of the default FeatureConfig; pass
    the appropriate floor explicitly for other configs or for normalized
    spectrograms.
    """
    if frames_per_crop < 1:
        raise FeatureError("frames_per_crop must be >= 1")
    n = m.frames
    if pad_value is None:
        pad_value = float(np.log(FeatureConfig().log_floor))
    if n < frames_per_crop:
        pad = np.full((m.values.shape[0], frames_per_crop - n), pad_value, dtype=np.float32)
        out = np.concatenate([m.values, pad], axis=1)
        return MelSpectrogram(values=out, config_fingerprint=m.config_fingerprint)
    if offset_policy == "start":
        off = 0
    elif offset_policy == "center":
        off = (n - frames_per_crop) // 2
    elif offset_policy == "random":
        off = np.random.default_rng(seed).integers(0, n - frames_per_crop + 1)
    else:
        raise FeatureError(f"unknown offset policy: {offset_policy}")
    out = m.values[:, off:off + frames_per_crop].copy()
    return MelSpectrogram(values=out, config_fingerprint=m.config_fingerprint)


def _istft(spec: np.ndarray, cfg: FeatureConfig, length: int) -> np.ndarray:
    win, hop = cfg.window_length_samples, cfg.hop_length_samples
    window = np.hanning(win)
    frames = np.fft.irfft(spec.T, n=cfg.fft_size, axis=1)[:, :win]
    out = np.zeros(length)
    norm = np.zeros(length)
    for i in range(frames.shape[0]):
        s = i * hop
        out[s:s + win] += frames[i] * window
        norm[s:s + win] += window ** 2
    # zero out edge samples with negligible window coverage instead of
    # amplifying them through the division
    good = norm > 1e-3 * norm.max()
    out[good] /= norm[good]
    out[~good] = 0.0
    return out


def mel_to_waveform(m: MelSpectrogram, cfg: FeatureConfig, iterations: int = 32) -> Waveform:
    """Griffin-Lim reconstruction from the mel-inverted linear spectrogram."""
    if m.config_fingerprint != cfg.fingerprint():
        raise FeatureError("mel spectrogram was produced under a different feature config")
    fb = mel_filterbank(cfg)
    energy = np.exp(m.values.astype(np.float64))
    # treat exact-floor entries as silence rather than residual energy
    energy[m.values <= np.log(cfg.log_floor) + 1e-6] = 0.0
    lin_power = np.maximum(np.linalg.pinv(fb) @ energy, 0.0)
    mag = np.sqrt(lin_power)
    length = cfg.window_length_samples + (m.frames - 1) * cfg.hop_length_samples
    spec = mag.astype(np.complex128)  # zero phase
    x = _istft(spec, cfg, length)
    for _ in range(iterations):
        phase = np.angle(np.fft.rfft(
            _frame(x, cfg) * np.hanning(cfg.window_length_samples)[None, :],
            n=cfg.fft_size, axis=1)).T
        x = _istft(mag * np.exp(1j * phase), cfg, length)
    peak = np.max(np.abs(x))
    if peak > 0:
        x = x / peak
    return Waveform(samples=x.astype(np.float32), sample_rate_hz=cfg.sample_rate_hz)


_MEL_MAGIC_NOTE = "two LE uint32 (rows, cols) then row-major float32"


def save_mel_tensor(path, values: np.ndarray) -> None:
    rows, cols = values.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<II", rows, cols))
        f.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def load_mel_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        rows, cols = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(rows * cols * 4), dtype="<f4")
    if data.size != rows * cols:
        raise FeatureError(f"truncated mel tensor file: {path}")
    return data.reshape(rows, cols).astype(np.float32)


def save_mel_heatmap(path, values: np.ndarray, title: str = "") -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3))
    ax.imshow(values, origin="lower", aspect="auto", cmap="magma")
    ax.set_xlabel("frame")
    ax.set_ylabel("mel bin")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

"""Audio to 3-channel feature images (log-Mel or MFCC plus temporal deltas)."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dct
from scipy.io import wavfile

LOG_FLOOR = 1e-10

# Slaney mel scale: linear below 1 kHz, logarithmic above.
_F_SP = 200.0 / 3
_MIN_LOG_HZ = 1000.0
_MIN_LOG_MEL = _MIN_LOG_HZ / _F_SP
_LOGSTEP = np.log(6.4) / 27.0

FIMG_MAGIC = b"FIMG"
FIMG_VERSION = 1


@dataclass(frozen=True)
class AudioSignal:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("AudioSignal expects a mono 1-D sample buffer")
        if not np.all(np.isfinite(samples)):
            raise ValueError("AudioSignal samples must be finite")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class Spectrogram:
    values: np.ndarray  # [bands, frames]
    band_kind: str  # "mel" or "mfcc"
    hop: int
    frame_len: int

    @property
    def n_bands(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class FeatureImage:
    """Channels are (static, delta, delta-delta), each side x side, in [-1, 1]."""

    channels: np.ndarray
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        ch = np.asarray(self.channels, dtype=np.float32)
        if ch.ndim != 3 or ch.shape[0] != 3 or ch.shape[1] != ch.shape[2]:
            raise ValueError(f"FeatureImage needs shape (3, S, S), got {ch.shape}")
        object.__setattr__(self, "channels", ch)

    @property
    def side(self) -> int:
        return self.channels.shape[1]

    @property
    def degenerate(self) -> bool:
        return bool(self.metadata.get("degenerate", False))


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 224
    frame_len: int = 2048
    hop: int = 1024
    fmin: float = 0.0
    fmax: float | None = None


@dataclass(frozen=True)
class MfccConfig:
    n_mfcc: int = 40
    n_mels: int = 128
    frame_len: int = 2048
    hop: int = 512
    fmin: float = 0.0
    fmax: float | None = None


# ---------------------------------------------------------------- framing

def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window of length n."""
    if n < 1:
        raise ValueError("hann_window: n must be >= 1")
    k = np.arange(n)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * k / n)


def _center_pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    if len(x) == 1:
        return np.full(len(x) + 2 * pad, x[0])
    # numpy reflects repeatedly when pad exceeds the signal length
    return np.pad(x, pad, mode="reflect")


def frame_count(n_samples: int, hop: int) -> int:
    return 1 + n_samples // hop


def stft(signal: AudioSignal, frame_len: int, hop: int, window: np.ndarray) -> np.ndarray:
    """Complex STFT, [frame_len//2 + 1, frames], center reflect-padded."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 1 or len(window) != frame_len:
        raise ValueError(f"stft: window length {len(window)} != frame_len {frame_len}")
    if hop < 1:
        raise ValueError("stft: hop must be >= 1")
    x = signal.samples
    if x.size == 0:
        raise ValueError("stft: empty signal")
    padded = _center_pad(x, frame_len // 2)
    n_frames = 1 + (len(padded) - frame_len) // hop
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = padded[idx] * window
    return np.fft.rfft(frames, axis=1).T


# ---------------------------------------------------------------- mel scale

def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    lin = f / _F_SP
    log = _MIN_LOG_MEL + np.log(np.maximum(f, _MIN_LOG_HZ) / _MIN_LOG_HZ) / _LOGSTEP
    return np.where(f >= _MIN_LOG_HZ, log, lin)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    lin = _F_SP * m
    log = _MIN_LOG_HZ * np.exp(_LOGSTEP * (np.maximum(m, _MIN_LOG_MEL) - _MIN_LOG_MEL))
    return np.where(m >= _MIN_LOG_MEL, log, lin)


def mel_filterbank(
    n_mels: int, n_fft_bins: int, sample_rate: int, fmin: float = 0.0, fmax: float | None = None
) -> np.ndarray:
    """Area-normalized triangular filters, [n_mels, n_fft_bins].

    ``n_fft_bins`` counts the non-negative frequency bins (frame_len//2 + 1).
    """
    nyquist = sample_rate / 2.0
    if fmax is None:
        fmax = nyquist
    if n_mels < 1 or n_fft_bins < 2:
        raise ValueError("mel_filterbank: need n_mels >= 1 and n_fft_bins >= 2")
    if fmax > nyquist:
        raise ValueError(f"mel_filterbank: fmax {fmax} exceeds Nyquist {nyquist}")
    if not 0 <= fmin < fmax:
        raise ValueError("mel_filterbank: need 0 <= fmin < fmax")

    fft_freqs = np.linspace(0.0, nyquist, n_fft_bins)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    widths = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]

    weights = np.zeros((n_mels, n_fft_bins))
    for i in range(n_mels):
        rising = -ramps[i] / widths[i]
        falling = ramps[i + 2] / widths[i + 1]
        weights[i] = np.maximum(0.0, np.minimum(rising, falling))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    return weights


def _power_to_db(power: np.ndarray) -> np.ndarray:
    return 10.0 * np.log10(np.maximum(power, LOG_FLOOR))


def _mel_db(signal: AudioSignal, n_mels: int, frame_len: int, hop: int, fmin, fmax) -> np.ndarray:
    spec = stft(signal, frame_len, hop, hann_window(frame_len))
    power = np.abs(spec) ** 2
    fb = mel_filterbank(n_mels, frame_len // 2 + 1, signal.sample_rate, fmin, fmax)
    return _power_to_db(fb @ power)


def log_mel_spectrogram(signal: AudioSignal, cfg: MelConfig = MelConfig()) -> Spectrogram:
    if len(signal.samples) < 1:
        raise ValueError("log_mel_spectrogram: empty signal")
    values = _mel_db(signal, cfg.n_mels, cfg.frame_len, cfg.hop, cfg.fmin, cfg.fmax)
    return Spectrogram(values, "mel", cfg.hop, cfg.frame_len)


def mfcc(signal: AudioSignal, cfg: MfccConfig = MfccConfig()) -> Spectrogram:
    if cfg.n_mfcc > cfg.n_mels:
        raise ValueError(f"mfcc: n_mfcc {cfg.n_mfcc} exceeds mel bands {cfg.n_mels}")
    if len(signal.samples) < 1:
        raise ValueError("mfcc: empty signal")
    mel_db = _mel_db(signal, cfg.n_mels, cfg.frame_len, cfg.hop, cfg.fmin, cfg.fmax)
    coeffs = dct(mel_db, type=2, axis=0, norm="ortho")[: cfg.n_mfcc]
    return Spectrogram(coeffs, "mfcc", cfg.hop, cfg.frame_len)


# ---------------------------------------------------------------- image

def delta(features: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression deltas along the frame axis, replicating edge frames."""
    c = np.asarray(features, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] < 1:
        raise ValueError("delta: need a [bands, frames] matrix with at least one frame")
    if width < 1:
        raise ValueError("delta: width must be >= 1")
    t = c.shape[1]
    padded = np.pad(c, ((0, 0), (width, width)), mode="edge")
    out = np.zeros_like(c)
    for n in range(1, width + 1):
        out += n * (padded[:, width + n: width + n + t] - padded[:, width - n: width - n + t])
    return out / (2.0 * sum(n * n for n in range(1, width + 1)))


def bilinear_resize(img: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a 2-D array."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape

    def coords(n_out, n_in):
        if n_in == 1 or n_out == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = coords(rows, h)
    c0, c1, fc = coords(cols, w)
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bottom = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bottom * fr[:, None]


def normalize_image(raw: np.ndarray) -> tuple[np.ndarray, bool]:
    """Min-max the whole stack to [0, 1], then map to [-1, 1].

    Returns the image and whether it was degenerate (max == min).
    """
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.zeros_like(raw), True
    unit = (raw - lo) / (hi - lo)
    return (unit - 0.5) / 0.5, False


def feature_stack(spec: Spectrogram) -> np.ndarray:
    """(static, delta, delta-delta) at the spectrogram's native size."""
    d1 = delta(spec.values)
    return np.stack([spec.values, d1, delta(d1)])


def build_feature_image(spec: Spectrogram, side: int = 224) -> FeatureImage:
    if side < 2:
        raise ValueError("build_feature_image: side must be >= 2")
    stack = feature_stack(spec)
    resized = np.stack([bilinear_resize(ch, side, side) for ch in stack])
    img, degenerate = normalize_image(resized)
    meta = {"degenerate": degenerate, "band_kind": spec.band_kind}
    return FeatureImage(img.astype(np.float32), meta)


def extract_image(signal: AudioSignal, kind: str = "mel", side: int = 224) -> FeatureImage:
    if kind == "mel":
        spec = log_mel_spectrogram(signal)
    elif kind == "mfcc":
        spec = mfcc(signal)
    else:
        raise ValueError(f"unknown feature kind {kind!r}")
    return build_feature_image(spec, side)


# ---------------------------------------------------------------- file io

def read_wav(path) -> AudioSignal:
    """Read 16-bit PCM or 32-bit float WAV; stereo is averaged to mono."""
    rate, data = wavfile.read(path)
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    return AudioSignal(x, int(rate))


def save_fimg(image: FeatureImage, path) -> None:
    header = FIMG_MAGIC + struct.pack("<IIB", FIMG_VERSION, image.side, 3)
    Path(path).write_bytes(header + image.channels.astype("<f4").tobytes())


def load_fimg(path) -> FeatureImage:
    raw = Path(path).read_bytes()
    if raw[:4] != FIMG_MAGIC:
        raise ValueError(f"{path}: not a FIMG file")
    version, side, n_ch = struct.unpack_from("<IIB", raw, 4)
    if version != FIMG_VERSION or n_ch != 3:
        raise ValueError(f"{path}: unsupported FIMG version {version} / channels {n_ch}")
    body = np.frombuffer(raw, dtype="<f4", offset=13)
    if body.size != 3 * side * side:
        raise ValueError(f"{path}: truncated FIMG payload")
    return FeatureImage(body.reshape(3, side, side).astype(np.float32))


def extract_directory(in_dir, out_dir, kind: str = "mel", side: int = 224) -> list[Path]:
    """Write one ``<stem>.<kind>.fimg`` per WAV file in ``in_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for wav in sorted(Path(in_dir).glob("*.wav")):
        image = extract_image(read_wav(wav), kind, side)
        target = out_dir / f"{wav.stem}.{kind}.fimg"
        save_fimg(image, target)
        written.append(target)
    return written

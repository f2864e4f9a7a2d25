"""WAV decoding, STFT power, mel filterbank and normalized log-mel spectrograms."""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np


class WavError(ValueError):
    pass


class NotPcmError(WavError):
    pass


class BitDepthError(WavError):
    pass


class SampleRateMismatch(ValueError):
    pass


@dataclass(frozen=True)
class DspConfig:
    sample_rate: int = 16000
    n_fft: int = 512
    hop: int = 160
    n_mels: int = 64
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if not (0 < self.hop <= self.n_fft):
            raise ValueError(f"need 0 < hop <= n_fft, got hop={self.hop}, n_fft={self.n_fft}")
        if not (0 <= self.fmin < self.fmax <= self.sample_rate / 2):
            raise ValueError(f"need 0 <= fmin < fmax <= sr/2, got {self.fmin}, {self.fmax}, sr={self.sample_rate}")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("waveform must be a non-empty 1-d array")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive")


@dataclass
class MelSpectrogram:
    values: np.ndarray  # n_mels x n_frames
    config: DspConfig
    source_id: str = ""

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def load_wav(path) -> Waveform:
    """Read a PCM-16 RIFF/WAVE file, averaging stereo channels to mono."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such WAV file: {path}")
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavError(f"{path}: not a RIFF/WAVE container")

    fmt = data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid, size = raw[pos : pos + 4], struct.unpack("<I", raw[pos + 4 : pos + 8])[0]
        body = raw[pos + 8 : pos + 8 + size]
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise WavError(f"{path}: missing fmt or data chunk")

    tag, channels, rate = struct.unpack("<HHI", fmt[:8])
    bits = struct.unpack("<H", fmt[14:16])[0]
    if tag == 0xFFFE and len(fmt) >= 26:  # WAVE_FORMAT_EXTENSIBLE: subformat GUID starts at 24
        tag = struct.unpack("<H", fmt[24:26])[0]
    if tag != 1:
        raise NotPcmError(f"{path}: format tag {tag} is not integer PCM")
    if bits != 16:
        raise BitDepthError(f"{path}: {bits}-bit PCM is not supported (16-bit only)")
    if channels not in (1, 2):
        raise WavError(f"{path}: {channels} channels not supported")

    frames = len(data) // (2 * channels)
    pcm = np.frombuffer(data[: frames * 2 * channels], dtype="<i2").astype(np.float64) / 32768.0
    if channels == 2:
        pcm = pcm.reshape(frames, 2).mean(axis=1)
    return Waveform(pcm, rate)


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    """Write mono float samples in [-1, 1] as PCM-16 (used for fixtures)."""
    import wave

    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def n_frames_for(n_samples: int, cfg: DspConfig) -> int:
    return (n_samples - cfg.n_fft) // cfg.hop + 1


def hann(n: int) -> np.ndarray:
    # periodic Hann, the usual choice for spectral analysis
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def frame_signal(x: np.ndarray, cfg: DspConfig) -> np.ndarray:
    n = n_frames_for(len(x), cfg)
    idx = np.arange(cfg.n_fft)[None, :] + cfg.hop * np.arange(n)[:, None]
    return x[idx]


def stft_power(wave: Waveform, cfg: DspConfig) -> np.ndarray:
    """|DFT|^2 of Hann-windowed frames, shape (n_fft//2 + 1, n_frames)."""
    if wave.sample_rate != cfg.sample_rate:
        raise SampleRateMismatch(f"waveform is {wave.sample_rate} Hz but config expects {cfg.sample_rate} Hz")
    if len(wave.samples) < cfg.n_fft:
        raise ValueError(f"signal of {len(wave.samples)} samples is shorter than one window ({cfg.n_fft})")
    frames = frame_signal(wave.samples, cfg) * hann(cfg.n_fft)
    spectrum = np.fft.rfft(frames, axis=1)
    return (spectrum.real**2 + spectrum.imag**2).T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_points(cfg: DspConfig) -> np.ndarray:
    """n_mels + 2 Hz edges; filter k rises from edge k, peaks at k+1, falls to k+2."""
    m = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    return mel_to_hz(m)


def mel_filterbank(cfg: DspConfig) -> np.ndarray:
    """Peak-1 triangular filters, shape (n_mels, n_fft//2 + 1)."""
    edges = mel_points(cfg)
    bins = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate / cfg.n_fft
    fb = np.zeros((cfg.n_mels, bins.size))
    for k in range(cfg.n_mels):
        lo, mid, hi = edges[k : k + 3]
        rise = (bins - lo) / (mid - lo)
        fall = (hi - bins) / (hi - mid)
        fb[k] = np.maximum(0.0, np.minimum(rise, fall))
        if not np.any(fb[k] > 0):
            raise ValueError(
                f"mel filter {k} ({lo:.1f}-{hi:.1f} Hz) covers no FFT bin; "
                f"reduce n_mels or raise n_fft"
            )
    return fb


def normalize(logmel: np.ndarray) -> np.ndarray:
    """Per-utterance z-score; a constant input maps to all zeros."""
    # exact constancy test; std of a constant can round to a tiny nonzero value
    if np.ptp(logmel) == 0:
        return np.zeros_like(logmel)
    std = logmel.std()
    return (logmel - logmel.mean()) / std


def log_mel(wave: Waveform, cfg: DspConfig) -> np.ndarray:
    return np.log(mel_filterbank(cfg) @ stft_power(wave, cfg) + cfg.log_floor)


def mel_spectrogram(wave: Waveform, cfg: DspConfig, source_id: str = "") -> MelSpectrogram:
    return MelSpectrogram(normalize(log_mel(wave, cfg)), cfg, source_id)


def fit_frames(values: np.ndarray, n_frames: int) -> np.ndarray:
    """Right-pad with zeros or center-crop along the frame axis."""
    cur = values.shape[1]
    if cur == n_frames:
        return values
    if cur < n_frames:
        out = np.zeros((values.shape[0], n_frames))
        out[:, :cur] = values
        return out
    start = (cur - n_frames) // 2
    return values[:, start : start + n_frames].copy()

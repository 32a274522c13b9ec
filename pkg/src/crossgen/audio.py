"""WAV decoding and the MEL spectrogram pipeline that feeds the audio encoders."""
from __future__ import annotations

import io
import struct
import wave
from dataclasses import dataclass
from typing import Optional

import numpy as np

SPEC_SIZE = 48

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003
WAVE_FORMAT_EXTENSIBLE = 0xFFFE


class WavError(ValueError):
    """Malformed or unsupported RIFF/WAVE data."""


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    source_id: str = ""
    label: Optional[int] = None

    def __post_init__(self):
        if self.samples.size == 0:
            raise ValueError(f"empty audio clip {self.source_id!r}")


@dataclass
class Spectrogram:
    pixels: np.ndarray
    label: int
    source_id: str

    def __post_init__(self):
        if self.pixels.shape != (SPEC_SIZE, SPEC_SIZE):
            raise ValueError(f"spectrogram must be {SPEC_SIZE}x{SPEC_SIZE}, got {self.pixels.shape}")
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise ValueError("spectrogram pixels must lie in [0, 1]")


@dataclass(frozen=True)
class DspConfig:
    window: int = 512
    hop: int = 128
    n_mels: int = 64
    f_min: float = 0.0
    f_max: Optional[float] = None
    out_size: int = SPEC_SIZE


# ---------------------------------------------------------------------------
# WAV
# ---------------------------------------------------------------------------

def _chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise WavError(f"chunk {cid.decode('latin-1')!r} truncated: declared {size} bytes, found {len(body)}")
        yield cid, body
        pos += 8 + size + (size & 1)


def decode_wav(data: bytes, source_id: str = "", label: Optional[int] = None) -> AudioClip:
    """Decode PCM16 or float32 WAV bytes into samples in [-1, 1], downmixed to mono."""
    if len(data) < 12:
        raise WavError("RIFF header truncated")
    riff, _, form = struct.unpack_from("<4sI4s", data, 0)
    if riff != b"RIFF" or form != b"WAVE":
        raise WavError("RIFF header: not a RIFF/WAVE container")

    fmt = None
    payload = None
    for cid, body in _chunks(data):
        if cid == b"fmt ":
            if len(body) < 16:
                raise WavError("chunk 'fmt ' too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == WAVE_FORMAT_EXTENSIBLE:
                if len(body) < 40:
                    raise WavError("chunk 'fmt ' extensible header too short")
                subformat = struct.unpack_from("<H", body, 24)[0]
                fmt = (subformat,) + fmt[1:]
        elif cid == b"data":
            payload = body
    if fmt is None:
        raise WavError("chunk 'fmt ' missing")
    if payload is None:
        raise WavError("chunk 'data' missing")

    tag, channels, rate, _, block_align, bits = fmt
    if channels < 1:
        raise WavError("chunk 'fmt ': zero channels")
    if tag == WAVE_FORMAT_PCM and bits == 16:
        raw = np.frombuffer(payload[: len(payload) - len(payload) % 2], dtype="<i2")
        samples = raw.astype(np.float32) / 32768.0
    elif tag == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        raw = np.frombuffer(payload[: len(payload) - len(payload) % 4], dtype="<f4")
        samples = raw.astype(np.float32)
    else:
        raise WavError(f"chunk 'fmt ': unsupported codec (format tag {tag:#06x}, {bits} bits)")
    frames = len(samples) // channels
    if frames == 0:
        raise WavError("chunk 'data' holds no complete frames")
    samples = samples[: frames * channels]
    if channels > 1:
        samples = samples.reshape(frames, channels).mean(axis=1, dtype=np.float64).astype(np.float32)
    return AudioClip(samples=samples, sample_rate=rate, source_id=source_id, label=label)


def encode_wav(samples: np.ndarray, sample_rate: int) -> bytes:
    """Mono PCM16 WAV bytes; samples are clipped to [-1, 1 - 2^-15]."""
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())
    return buf.getvalue()


def read_wav(path, label: Optional[int] = None, source_id: Optional[str] = None) -> AudioClip:
    with open(path, "rb") as fh:
        data = fh.read()
    sid = source_id if source_id is not None else str(path)
    try:
        return decode_wav(data, source_id=sid, label=label)
    except WavError as exc:
        raise WavError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# MEL spectrogram
# ---------------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int, f_min: float = 0.0, f_max: Optional[float] = None) -> np.ndarray:
    """Triangular filters ``[n_mels, n_fft // 2 + 1]`` with peaks equally spaced in mel."""
    f_max = sample_rate / 2 if f_max is None else f_max
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_center_frequencies(sample_rate: int, n_mels: int, f_min: float = 0.0, f_max: Optional[float] = None) -> np.ndarray:
    f_max = sample_rate / 2 if f_max is None else f_max
    return mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))[1:-1]


def power_spectrogram(samples: np.ndarray, window: int, hop: int) -> np.ndarray:
    """|STFT|^2 with a periodic Hann window, ``[window // 2 + 1, n_frames]``."""
    x = np.asarray(samples, dtype=np.float64)
    if len(x) < window:
        x = np.pad(x, (0, window - len(x)))
    n_frames = 1 + (len(x) - window) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, window)[::hop][:n_frames]
    hann = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(window) / window)
    spec = np.fft.rfft(frames * hann, axis=1)
    return (spec.real ** 2 + spec.imag ** 2).T


def mel_spectrogram(clip: AudioClip, cfg: DspConfig = DspConfig()) -> np.ndarray:
    """``log(1 + mel power)`` with shape ``[n_mels, n_frames]``."""
    power = power_spectrogram(clip.samples, cfg.window, cfg.hop)
    fb = mel_filterbank(clip.sample_rate, cfg.window, cfg.n_mels, cfg.f_min, cfg.f_max)
    return np.log1p(fb @ power)


def resize_bilinear(img: np.ndarray, out_shape=(SPEC_SIZE, SPEC_SIZE)) -> np.ndarray:
    """Bilinear resize with corner-aligned sampling (first/last pixels map to first/last)."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    oh, ow = out_shape

    def coords(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        i0 = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, pos - i0

    r0, r1, fr = coords(h, oh)
    c0, c1, fc = coords(w, ow)
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bottom = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bottom * fr[:, None]


def normalize01(img: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant image maps to zeros."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if hi - lo <= 0:
        return np.zeros_like(img)
    return np.clip((img - lo) / (hi - lo), 0.0, 1.0)


def clip_to_spectrogram(clip: AudioClip, cfg: DspConfig = DspConfig()) -> Spectrogram:
    """Full pipeline: log-MEL, bilinear resize to 48x48, min-max normalization."""
    mel = mel_spectrogram(clip, cfg)
    pixels = normalize01(resize_bilinear(mel, (cfg.out_size, cfg.out_size))).astype(np.float32)
    return Spectrogram(pixels=pixels, label=-1 if clip.label is None else clip.label, source_id=clip.source_id)

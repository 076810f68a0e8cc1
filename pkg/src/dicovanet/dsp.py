"""WAV decoding, length normalization and log-mel spectrogram images.

Defaults: 2048 Hz audio, 4 second clips, a 2048 sample FFT window and a
512 sample hop. Everything here is a pure function of its inputs.
"""

from __future__ import annotations

import io
import struct
import wave
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DecodeError

SPECTROGRAM_MAGIC = b"DSPC"
SPECTROGRAM_VERSION = 1

_PCM = 0x0001
_EXTENSIBLE = 0xFFFE


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("AudioClip samples must be one-dimensional")
        if not np.all(np.isfinite(samples)):
            raise ValueError("AudioClip samples must be finite")
        if samples.size and np.max(np.abs(samples)) > 1.0:
            raise ValueError("AudioClip samples must lie in [-1, 1]")
        if int(self.sample_rate_hz) < 1:
            raise ValueError("sample_rate_hz must be >= 1")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    def __len__(self):
        return self.samples.size

    @property
    def duration(self):
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class DspConfig:
    sample_rate_hz: int = 2048
    clip_seconds: float = 4.0
    fft_window: int = 2048
    frame_shift: int = 512
    n_mels: int = 64
    fmin_hz: float = 0.0
    fmax_hz: float | None = None
    log_floor_db: float = -80.0

    def __post_init__(self):
        if self.fmax_hz is None:
            object.__setattr__(self, "fmax_hz", self.sample_rate_hz / 2)
        self.validate()

    def validate(self):
        if self.sample_rate_hz < 1:
            raise ConfigError("sample_rate_hz must be >= 1")
        if self.clip_seconds <= 0:
            raise ConfigError("clip_seconds must be positive")
        if not self.fft_window >= self.frame_shift >= 1:
            raise ConfigError("need fft_window >= frame_shift >= 1")
        if self.n_mels < 1:
            raise ConfigError("n_mels must be >= 1")
        if not 0 <= self.fmin_hz < self.fmax_hz <= self.sample_rate_hz / 2:
            raise ConfigError(
                f"need 0 <= fmin_hz < fmax_hz <= {self.sample_rate_hz / 2} "
                f"(got {self.fmin_hz}, {self.fmax_hz})"
            )

    @property
    def n_samples(self):
        return int(round(self.clip_seconds * self.sample_rate_hz))

    @property
    def n_frames(self):
        return (self.n_samples - self.fft_window) // self.frame_shift + 1

    @property
    def image_shape(self):
        return (self.n_mels, self.n_frames)


@dataclass(frozen=True)
class SpectrogramImage:
    values: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError("SpectrogramImage values must be 2-D")
        if not np.all((values >= 0.0) & (values <= 1.0)):
            raise ValueError("SpectrogramImage values must lie in [0, 1]")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def shape(self):
        return self.values.shape


# --------------------------------------------------------------------------
# WAV container


def _chunks(data):
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise DecodeError(f"chunk {cid.decode('latin-1')!r} truncated "
                              f"({len(body)} of {size} bytes)")
        yield cid, body
        pos += 8 + size + (size & 1)


def decode_wav(data: bytes) -> AudioClip:
    """Decode a 16-bit little-endian PCM RIFF/WAVE file to a mono clip.

    Channels are averaged and integer samples scaled by 1/32768.
    """
    data = bytes(data)
    if len(data) < 12 or data[:4] != b"RIFF":
        raise DecodeError("chunk 'RIFF': missing RIFF header")
    if data[8:12] != b"WAVE":
        raise DecodeError("chunk 'RIFF': form type is not WAVE")

    fmt = None
    pcm = None
    for cid, body in _chunks(data):
        if cid == b"fmt ":
            if len(body) < 16:
                raise DecodeError("chunk 'fmt ': too short")
            tag, channels, rate, _, align, bits = struct.unpack_from("<HHIIHH", body)
            if tag == _EXTENSIBLE and len(body) >= 26:
                (tag,) = struct.unpack_from("<H", body, 24)
            if tag != _PCM:
                raise DecodeError(f"chunk 'fmt ': unsupported encoding tag {tag:#06x} (need PCM)")
            if bits != 16:
                raise DecodeError(f"chunk 'fmt ': unsupported sample width {bits} bits (need 16)")
            if channels < 1 or rate < 1 or align != 2 * channels:
                raise DecodeError("chunk 'fmt ': inconsistent channel/rate/alignment fields")
            fmt = (channels, rate)
        elif cid == b"data":
            pcm = body
    if fmt is None:
        raise DecodeError("chunk 'fmt ': not found")
    if pcm is None:
        raise DecodeError("chunk 'data': not found")

    channels, rate = fmt
    usable = len(pcm) - len(pcm) % (2 * channels)
    ints = np.frombuffer(pcm[:usable], dtype="<i2").reshape(-1, channels)
    samples = ints.astype(np.float64).mean(axis=1) / 32768.0
    return AudioClip(samples, rate)


def encode_wav(clip: AudioClip) -> bytes:
    """Encode a clip as mono 16-bit PCM. Inverse of decode_wav up to quantization."""
    ints = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate_hz)
        w.writeframes(ints.tobytes())
    return buf.getvalue()


# --------------------------------------------------------------------------
# time-domain preparation


def resample(clip: AudioClip, target_rate_hz: int) -> AudioClip:
    if len(clip) == 0:
        raise ValueError("cannot resample an empty clip")
    target_rate_hz = int(target_rate_hz)
    if target_rate_hz == clip.sample_rate_hz:
        return clip
    n_out = int(round(len(clip) * target_rate_hz / clip.sample_rate_hz))
    # position of each output sample on the source sample grid
    pos = np.arange(n_out) * (clip.sample_rate_hz / target_rate_hz)
    out = np.interp(pos, np.arange(len(clip)), clip.samples)
    return AudioClip(out, target_rate_hz)


def fix_length(clip: AudioClip, seconds: float) -> AudioClip:
    """Keep the first ``seconds`` of audio, zero-padding at the end if short."""
    if len(clip) == 0:
        raise ValueError("cannot fix the length of an empty clip")
    n = int(round(seconds * clip.sample_rate_hz))
    if len(clip) == n:
        return clip
    if len(clip) > n:
        return AudioClip(clip.samples[:n], clip.sample_rate_hz)
    out = np.zeros(n)
    out[:len(clip)] = clip.samples
    return AudioClip(out, clip.sample_rate_hz)


# --------------------------------------------------------------------------
# spectral analysis


def hann_window(n):
    """Periodic Hann window of length n."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_signal(samples, cfg: DspConfig):
    n = samples.size
    if n < cfg.fft_window:
        raise ValueError(
            f"clip has {n} samples but one FFT window needs {cfg.fft_window}; "
            "call fix_length first"
        )
    frames = np.lib.stride_tricks.sliding_window_view(samples, cfg.fft_window)
    return frames[::cfg.frame_shift]


def stft_power(clip: AudioClip, cfg: DspConfig) -> np.ndarray:
    """Power spectrogram, shape (fft_window // 2 + 1, n_frames)."""
    frames = frame_signal(clip.samples, cfg) * hann_window(cfg.fft_window)
    spec = np.fft.rfft(frames, axis=1)
    return (spec.real ** 2 + spec.imag ** 2).T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_points_hz(cfg: DspConfig):
    """The n_mels + 2 band edges in Hz; filter m peaks at entry m + 1."""
    mels = np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2)
    return mel_to_hz(mels)


def mel_filterbank(cfg: DspConfig) -> np.ndarray:
    """Triangular mel filters, shape (n_mels, fft_window // 2 + 1).

    Triangles are linear in Hz between consecutive mel points and each row
    is rescaled so its largest sampled value is exactly 1.
    """
    edges = mel_points_hz(cfg)
    freqs = np.arange(cfg.fft_window // 2 + 1) * cfg.sample_rate_hz / cfg.fft_window
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    peaks = fb.max(axis=1)
    empty = np.flatnonzero(peaks <= 0.0)
    if empty.size:
        raise ConfigError(
            f"n_mels={cfg.n_mels} too large for {cfg.fft_window}-point FFT: "
            f"filter {int(empty[0])} covers no frequency bin"
        )
    return fb / peaks[:, None]


def power_to_db(power, floor_db):
    db = 10.0 * np.log10(power + 1e-10)
    return np.maximum(db, db.max() - abs(floor_db))


def normalize_minmax(values):
    lo, hi = values.min(), values.max()
    if hi <= lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def mel_spectrogram(clip: AudioClip, cfg: DspConfig, source_id: str = "") -> SpectrogramImage:
    power = stft_power(clip, cfg)
    mel = mel_filterbank(cfg) @ power
    img = normalize_minmax(power_to_db(mel, cfg.log_floor_db))
    # rounding can leave values a hair outside [0, 1]
    return SpectrogramImage(np.clip(img, 0.0, 1.0), source_id)


def prepare_clip(clip: AudioClip, cfg: DspConfig) -> AudioClip:
    return fix_length(resample(clip, cfg.sample_rate_hz), cfg.clip_seconds)


def featurize_wav(data: bytes, cfg: DspConfig, source_id: str = "") -> SpectrogramImage:
    return mel_spectrogram(prepare_clip(decode_wav(data), cfg), cfg, source_id)


# --------------------------------------------------------------------------
# spectrogram cache records


def encode_spectrogram(image: SpectrogramImage) -> bytes:
    n_mels, n_frames = image.shape
    header = SPECTROGRAM_MAGIC + struct.pack("<III", SPECTROGRAM_VERSION, n_mels, n_frames)
    return header + np.ascontiguousarray(image.values, dtype="<f8").tobytes()


def decode_spectrogram(data: bytes, source_id: str = "") -> SpectrogramImage:
    if len(data) < 16 or data[:4] != SPECTROGRAM_MAGIC:
        raise DecodeError("spectrogram cache: bad magic")
    version, n_mels, n_frames = struct.unpack_from("<III", data, 4)
    if version != SPECTROGRAM_VERSION:
        raise DecodeError(f"spectrogram cache: unsupported version {version}")
    body = data[16:]
    if len(body) != 8 * n_mels * n_frames:
        raise DecodeError("spectrogram cache: payload size does not match header")
    values = np.frombuffer(body, dtype="<f8").reshape(n_mels, n_frames).astype(np.float64)
    return SpectrogramImage(values, source_id)

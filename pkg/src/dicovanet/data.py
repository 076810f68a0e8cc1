"""Manifests, fold splits, the synthetic corpus and minority augmentation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsp import AudioClip, DspConfig, SpectrogramImage, encode_wav
from .errors import ConfigError, ManifestError

MANIFEST_HEADER = ["id", "path", "label", "fold"]
AUGMENT_METHODS = ("none", "duplicate", "gaussian")


@dataclass(frozen=True)
class ManifestEntry:
    recording_id: str
    path: str
    label: int
    fold: int


@dataclass(frozen=True)
class AugmentConfig:
    method: str = "gaussian"
    replication_factor: int = 3
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.method not in AUGMENT_METHODS:
            raise ConfigError(f"augment method must be one of {AUGMENT_METHODS}, got {self.method!r}")
        if self.replication_factor < 1:
            raise ConfigError("replication_factor must be >= 1")
        if not self.noise_sigma >= 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.seed < 0:
            raise ConfigError("augment seed must be unsigned")


def load_manifest(text: str, n_folds: int | None = None) -> list[ManifestEntry]:
    """Parse an ``id,path,label,fold`` CSV. Row numbers in errors count the header as row 1."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        raise ManifestError("row 1: missing header")
    header = [h.strip() for h in header]
    if header != MANIFEST_HEADER:
        raise ManifestError(f"row 1: expected header {','.join(MANIFEST_HEADER)}, got {','.join(header)}")

    entries = []
    seen = set()
    for rowno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 4:
            raise ManifestError(f"row {rowno}: expected 4 columns, got {len(row)}")
        rid, path, label, fold = (c.strip() for c in row)
        if not rid:
            raise ManifestError(f"row {rowno}: empty id")
        if not path:
            raise ManifestError(f"row {rowno}: missing file path")
        if rid in seen:
            raise ManifestError(f"row {rowno}: duplicate id {rid!r}")
        if label not in ("0", "1"):
            raise ManifestError(f"row {rowno}: label must be 0 or 1, got {label!r}")
        try:
            fold_no = int(fold)
        except ValueError:
            raise ManifestError(f"row {rowno}: fold must be an integer, got {fold!r}") from None
        if fold_no < 1 or (n_folds is not None and fold_no > n_folds):
            raise ManifestError(f"row {rowno}: fold {fold_no} out of range")
        seen.add(rid)
        entries.append(ManifestEntry(rid, path, int(label), fold_no))
    return entries


def dump_manifest(entries) -> str:
    lines = [",".join(MANIFEST_HEADER)]
    lines += [f"{e.recording_id},{e.path},{e.label},{e.fold}" for e in entries]
    return "\n".join(lines) + "\n"


def split_train_val(entries, held_out_fold: int):
    if not any(e.fold == held_out_fold for e in entries):
        raise ConfigError(f"fold {held_out_fold} does not occur in the manifest")
    train = [e for e in entries if e.fold != held_out_fold]
    val = [e for e in entries if e.fold == held_out_fold]
    return train, val


# --------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SynthStyle:
    """Knobs for the synthetic corpus; the defaults define the target variant.

    Band edges are fractions of the sample rate.
    """

    band: tuple = (0.05, 0.45)
    noise_rms: float = 0.1
    burst_amplitude: tuple = (0.3, 0.6)
    burst_count: tuple = (2, 4)
    burst_seconds: tuple = (0.1, 0.3)


def _item_rng(seed, label, index):
    return np.random.default_rng(np.random.SeedSequence([seed, label, index]))


def band_limited_noise(rng, n, rate, style: SynthStyle):
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, d=1.0 / rate)
    lo, hi = style.band[0] * rate, style.band[1] * rate
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    noise = np.fft.irfft(spec, n)
    return noise * (style.noise_rms / np.sqrt(np.mean(noise ** 2)))


def tone_bursts(rng, n, rate, style: SynthStyle):
    out = np.zeros(n)
    lo, hi = style.band[0] * rate, style.band[1] * rate
    for _ in range(int(rng.integers(style.burst_count[0], style.burst_count[1] + 1))):
        length = int(rng.uniform(*style.burst_seconds) * rate)
        start = int(rng.integers(0, max(1, n - length)))
        freq = rng.uniform(lo, hi)
        amp = rng.uniform(*style.burst_amplitude)
        phase = rng.uniform(0, 2 * np.pi)
        t = np.arange(length) / rate
        decay = np.exp(-t / (length / rate / 3.0))
        seg = amp * decay * np.sin(2 * np.pi * freq * t + phase)
        end = min(n, start + length)
        out[start:end] += seg[:end - start]
    return out


def synth_clip(seed, label, index, cfg: DspConfig, style: SynthStyle = SynthStyle()) -> AudioClip:
    rng = _item_rng(seed, label, index)
    n = cfg.n_samples
    x = band_limited_noise(rng, n, cfg.sample_rate_hz, style)
    if label == 1:
        x = x + tone_bursts(rng, n, cfg.sample_rate_hz, style)
    return AudioClip(np.clip(x, -1.0, 32767 / 32768), cfg.sample_rate_hz)


def synth_generate(n_negative, n_positive, seed, cfg: DspConfig, out_dir, n_folds=5,
                   style: SynthStyle = SynthStyle()):
    """Write a synthetic two-class corpus and its manifest.

    Negatives are band-limited noise; positives add decaying tone bursts.
    Every clip is drawn from its own RNG keyed by (seed, label, index), so
    the corpus is a pure function of the arguments. Returns the entries;
    the manifest is written to ``out_dir/manifest.csv``.
    """
    if n_negative < 0 or n_positive < 0:
        raise ConfigError("class counts must be non-negative")
    out_dir = Path(out_dir)
    try:
        (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out_dir}: {exc}") from exc

    entries = []
    for label, count, tag in ((0, n_negative, "neg"), (1, n_positive, "pos")):
        for i in range(count):
            rid = f"{tag}{i:04d}"
            rel = f"audio/{rid}.wav"
            clip = synth_clip(seed, label, i, cfg, style)
            (out_dir / rel).write_bytes(encode_wav(clip))
            entries.append(ManifestEntry(rid, rel, label, i % n_folds + 1))
    (out_dir / "manifest.csv").write_text(dump_manifest(entries), encoding="utf-8", newline="\n")
    return entries


def clip_energy(clip: AudioClip) -> float:
    return float(np.sum(clip.samples ** 2))


# --------------------------------------------------------------------------
# minority augmentation


def _noise_rng(seed, index, copy):
    return np.random.default_rng(np.random.SeedSequence([seed, index, copy]))


def augment_minority(images, cfg: AugmentConfig):
    """Append ``replication_factor`` synthetic copies of every label-1 image.

    ``images`` is a sequence of (SpectrogramImage, label) pairs. Gaussian
    copies add ``noise_sigma`` times standard-normal noise, drawn from a
    generator keyed by (seed, position of the original, copy number), and
    clamp to [0, 1]. Originals come first, in input order.
    """
    out = list(images)
    if cfg.method == "none":
        return out
    for idx, (img, label) in enumerate(images):
        if label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {label!r}")
        if label != 1:
            continue
        for copy in range(cfg.replication_factor):
            if cfg.method == "duplicate":
                out.append((img, 1))
                continue
            noise = _noise_rng(cfg.seed, idx, copy).standard_normal(img.shape)
            values = np.clip(img.values + cfg.noise_sigma * noise, 0.0, 1.0)
            out.append((SpectrogramImage(values, img.source_id), 1))
    return out

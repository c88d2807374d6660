"""Mel-spectrogram extraction, standardization, chunking and the ZSTF feature file.

Extraction profile: 22050 Hz mono input, periodic Hann window of 1024
samples, hop 512, centred framing with reflect padding, magnitude spectrum,
128 Slaney-style mel bands over 0-11025 Hz with area-normalized triangles,
then ``log(1 + S)``. Frames are stored time-major (T x n_mels).
"""

from __future__ import annotations

import json
import math
import struct
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable
from urllib.parse import quote

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window

from zsltag.errors import DataError

SAMPLE_RATE = 22050
N_FFT = 1024
HOP = 512
N_MELS = 128
CHUNK_FRAMES = 130
STD_FLOOR = 1e-8

MAGIC = b"ZSTF"
VERSION = 1


# -- mel scale -------------------------------------------------------------------

_F_SP = 200.0 / 3
_MIN_LOG_HZ = 1000.0
_MIN_LOG_MEL = _MIN_LOG_HZ / _F_SP
_LOGSTEP = math.log(6.4) / 27.0


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=float)
    lin = f / _F_SP
    with np.errstate(divide="ignore"):
        log = _MIN_LOG_MEL + np.log(np.maximum(f, 1e-10) / _MIN_LOG_HZ) / _LOGSTEP
    return np.where(f >= _MIN_LOG_HZ, log, lin)


def mel_to_hz(m):
    m = np.asarray(m, dtype=float)
    lin = _F_SP * m
    log = _MIN_LOG_HZ * np.exp(_LOGSTEP * (m - _MIN_LOG_MEL))
    return np.where(m >= _MIN_LOG_MEL, log, lin)


def mel_band_edges(n_mels: int = N_MELS, fmin: float = 0.0, fmax: float = SAMPLE_RATE / 2) -> np.ndarray:
    """``n_mels + 2`` frequencies; band ``k`` rises from edge ``k``, peaks at ``k+1``, falls to ``k+2``."""
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


def mel_filterbank(
    sr: int = SAMPLE_RATE, n_fft: int = N_FFT, n_mels: int = N_MELS, fmin: float = 0.0, fmax: float | None = None
) -> np.ndarray:
    """``(n_mels, n_fft // 2 + 1)`` triangular filters, each scaled to unit area in Hz."""
    fmax = sr / 2 if fmax is None else fmax
    fft_freqs = np.linspace(0.0, sr / 2, n_fft // 2 + 1)
    edges = mel_band_edges(n_mels, fmin, fmax)
    widths = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    return weights


# -- extraction ------------------------------------------------------------------


@dataclass(frozen=True)
class MelSpectrogram:
    frames: np.ndarray
    sample_rate: int = SAMPLE_RATE
    hop: int = HOP
    n_fft: int = N_FFT
    n_mels: int = N_MELS
    compression: str = "log1p"

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def params(self) -> dict:
        return {
            "sample_rate": self.sample_rate,
            "hop": self.hop,
            "n_fft": self.n_fft,
            "n_mels": self.n_mels,
            "window": "hann",
            "mel_scale": "slaney",
            "compression": self.compression,
        }


def stft_magnitude(samples: np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Centred, reflect-padded STFT magnitude, ``(1 + len // hop, n_fft // 2 + 1)``."""
    x = np.asarray(samples, dtype=np.float64)
    pad = n_fft // 2
    mode = "reflect" if len(x) > pad else "constant"
    x = np.pad(x, pad, mode=mode)
    n_frames = 1 + (len(x) - n_fft) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop][:n_frames]
    window = get_window("hann", n_fft, fftbins=True)
    return np.abs(np.fft.rfft(frames * window, axis=1))


def extract_mel(samples: np.ndarray, sample_rate: int, compress: bool = True) -> MelSpectrogram:
    x = np.asarray(samples)
    if x.ndim != 1:
        raise DataError(f"expected mono samples, got array of shape {x.shape}")
    if sample_rate != SAMPLE_RATE:
        raise DataError(f"expected {SAMPLE_RATE} Hz audio, got {sample_rate} Hz (resample first)")
    if x.size == 0:
        raise DataError("empty audio")
    mel = stft_magnitude(x) @ _FILTERBANK.T
    if compress:
        return MelSpectrogram(np.log1p(mel))
    return MelSpectrogram(mel, compression="none")


_FILTERBANK = mel_filterbank()


def read_wav(path) -> tuple[np.ndarray, int]:
    """Mono 16-bit PCM or float WAV as float64 in [-1, 1]."""
    try:
        sr, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    if data.ndim != 1:
        raise DataError(f"{path}: expected mono audio, found {data.shape[1]} channels")
    if data.dtype == np.int16:
        data = data / 32768.0
    elif data.dtype == np.int32:
        data = data / 2147483648.0
    elif data.dtype.kind != "f":
        raise DataError(f"{path}: unsupported sample format {data.dtype}")
    return data.astype(np.float64), sr


# -- standardization -------------------------------------------------------------


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray
    fitted_on: int

    @property
    def constant(self) -> np.ndarray:
        return self.std <= STD_FLOOR

    def apply(self, frames: np.ndarray) -> np.ndarray:
        z = (np.asarray(frames, float) - self.mean) / self.std
        z[..., self.constant] = 0.0
        return z

    def invert(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, float) * self.std + self.mean

    def to_json(self) -> str:
        return json.dumps({"mean": self.mean.tolist(), "std": self.std.tolist(), "fitted_on": self.fitted_on})

    @classmethod
    def from_json(cls, text: str) -> "Standardizer":
        obj = json.loads(text)
        return cls(np.asarray(obj["mean"], float), np.asarray(obj["std"], float), int(obj["fitted_on"]))


class StandardizedFeatures(Mapping):
    """View of a feature mapping with a standardizer applied on access."""

    def __init__(self, features: Mapping[str, np.ndarray], standardizer: Standardizer):
        self.features = features
        self.standardizer = standardizer

    def __getitem__(self, instance_id: str) -> np.ndarray:
        return self.standardizer.apply(self.features[instance_id])

    def __iter__(self):
        return iter(self.features)

    def __len__(self) -> int:
        return len(self.features)


def fit_standardizer(features: Iterable) -> Standardizer:
    """Per-bin mean and population std over every frame of every supplied matrix.

    Accepts ``MelSpectrogram`` objects or plain ``(T, D)`` arrays and merges
    per-matrix moments pairwise, so memory stays at one matrix.
    """
    n, mean, m2 = 0, None, None
    for f in features:
        x = np.asarray(f.frames if isinstance(f, MelSpectrogram) else f, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] == 0:
            raise DataError(f"expected a non-empty (T, D) matrix, got shape {x.shape}")
        nb = x.shape[0]
        mb = x.mean(axis=0)
        m2b = ((x - mb) ** 2).sum(axis=0)
        if mean is None:
            n, mean, m2 = nb, mb, m2b
            continue
        if mb.shape != mean.shape:
            raise DataError("feature matrices disagree on the number of bins")
        delta = mb - mean
        tot = n + nb
        mean = mean + delta * nb / tot
        m2 = m2 + m2b + delta**2 * n * nb / tot
        n = tot
    if mean is None:
        raise DataError("no features to fit the standardizer on")
    if n < 2:
        raise DataError("need at least two frames to fit the standardizer")
    std = np.sqrt(m2 / n)
    return Standardizer(mean, np.maximum(std, STD_FLOOR), n)


# -- chunking --------------------------------------------------------------------


def _frames(mel) -> np.ndarray:
    return mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel)


def _tile(x: np.ndarray, length: int) -> np.ndarray:
    reps = -(-length // x.shape[0])
    return np.concatenate([x] * reps, axis=0)[:length]


def sample_chunk(mel, chunk_frames: int = CHUNK_FRAMES, rng=None) -> np.ndarray:
    """Random contiguous window; shorter inputs are tiled along time."""
    if chunk_frames < 1:
        raise ValueError("chunk_frames must be positive")
    x = _frames(mel)
    t = x.shape[0]
    if t <= chunk_frames:
        return _tile(x, chunk_frames)
    rng = np.random.default_rng(rng)
    start = int(rng.integers(0, t - chunk_frames + 1))
    return x[start:start + chunk_frames]


def chunk_track(mel, chunk_frames: int = CHUNK_FRAMES) -> list[np.ndarray]:
    """Consecutive non-overlapping windows; a trailing partial window is tiled to full length."""
    if chunk_frames < 1:
        raise ValueError("chunk_frames must be positive")
    x = _frames(mel)
    return [
        x[s:s + chunk_frames] if s + chunk_frames <= len(x) else _tile(x[s:], chunk_frames)
        for s in range(0, max(len(x), 1), chunk_frames)
    ]


# -- feature files ---------------------------------------------------------------

_HEADER = struct.Struct("<4sBII")


def write_features(path, frames: np.ndarray, params: dict | None = None) -> None:
    """Write a ZSTF file: magic, version, T, D, row-major float32 data, JSON trailer."""
    x = np.ascontiguousarray(frames, dtype="<f4")
    if x.ndim != 2:
        raise DataError("feature matrix must be 2-D")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, x.shape[0], x.shape[1]))
        f.write(x.tobytes())
        f.write(json.dumps(params or {}, sort_keys=True).encode("utf-8"))


def read_features(path) -> tuple[np.ndarray, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated feature file")
    magic, version, t, d = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"{path}: not a ZSTF feature file")
    if version != VERSION:
        raise DataError(f"{path}: unsupported ZSTF version {version}")
    end = _HEADER.size + 4 * t * d
    if len(raw) < end:
        raise DataError(f"{path}: truncated feature data")
    frames = np.frombuffer(raw, dtype="<f4", count=t * d, offset=_HEADER.size).reshape(t, d)
    try:
        params = json.loads(raw[end:].decode("utf-8")) if len(raw) > end else {}
    except ValueError:
        raise DataError(f"{path}: malformed JSON trailer") from None
    return frames.astype(np.float64), params


def feature_filename(instance_id: str) -> str:
    return quote(instance_id, safe="") + ".zstf"


class FeatureDir(Mapping):
    """Read-only mapping ``instance_id -> (T, D) array`` over a directory of ZSTF files."""

    def __init__(self, root, cache: bool = True):
        self.root = Path(root)
        if not self.root.is_dir():
            raise DataError(f"feature directory not found: {self.root}")
        self._cache: dict[str, np.ndarray] | None = {} if cache else None

    def __getitem__(self, instance_id: str) -> np.ndarray:
        if self._cache is not None and instance_id in self._cache:
            return self._cache[instance_id]
        path = self.root / feature_filename(instance_id)
        if not path.exists():
            raise KeyError(instance_id)
        x, _ = read_features(path)
        if self._cache is not None:
            self._cache[instance_id] = x
        return x

    def __iter__(self):
        from urllib.parse import unquote

        return (unquote(p.name[: -len(".zstf")]) for p in sorted(self.root.glob("*.zstf")))

    def __len__(self) -> int:
        return sum(1 for _ in self.root.glob("*.zstf"))


def save_feature_dir(root, features: Mapping[str, np.ndarray], params: dict | None = None) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for iid, x in features.items():
        write_features(root / feature_filename(iid), x, params)


def extract_catalog_features(catalog, audio_root, out_dir, overwrite: bool = False) -> int:
    """Extract a mel file for each catalog instance with an audio reference.

    Existing files are kept unless ``overwrite``; returns the number written.
    """
    audio_root, out_dir = Path(audio_root), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = 0
    for iid, ref in zip(catalog.instance_ids, catalog.audio):
        if ref is None or (not overwrite and (out_dir / feature_filename(iid)).exists()):
            continue
        samples, sr = read_wav(audio_root / ref)
        mel = extract_mel(samples, sr)
        write_features(out_dir / feature_filename(iid), mel.frames, mel.params())
        n += 1
    return n

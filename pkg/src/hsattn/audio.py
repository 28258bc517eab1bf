"""PCM audio ingestion and log-Mel spectrogram extraction.

The front end reads RIFF/WAVE files (16-bit PCM or 32-bit IEEE float) and turns
4 kHz recordings into ``frames × 64`` log-Mel matrices: Hamming-windowed
256-sample frames with a hop of 128, power spectrum, 64 triangular HTK mel
filters spanning 0 Hz to Nyquist, and a natural log with a 1e-10 floor.

Spectrograms are cached in the ``LMEL`` little-endian binary format::

    b"LMEL" | version u32 | T u32 | M u32 | T*M float32 (row-major)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hsattn.errors import ConfigError, InputError, ParseError

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003
WAVE_FORMAT_EXTENSIBLE = 0xFFFE

LMEL_MAGIC = b"LMEL"
LMEL_VERSION = 1
LOG_FLOOR = 1e-10


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    source_path: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise InputError(f"sample rate must be positive, got {self.sample_rate}")
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise InputError("audio clip must be a non-empty mono signal")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 4000
    window: int = 256
    hop: int = 128
    mel_bins: int = 64
    f_min: float = 0.0
    f_max: float | None = None  # None means Nyquist
    num_frames: int | None = 936  # None keeps the natural frame count
    log_floor: float = LOG_FLOOR

    @property
    def nyquist(self) -> float:
        return self.sample_rate / 2

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Spectrogram:
    """A ``frames × mel_bins`` log-Mel matrix plus the settings that produced it."""

    values: np.ndarray
    sample_rate: int = 4000
    window: int = 256
    hop: int = 128
    original_frames: int | None = None
    source_path: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def frame_count(self) -> int:
        return self.values.shape[0]

    @property
    def mel_bins(self) -> int:
        return self.values.shape[1]


# -- WAV parsing ----------------------------------------------------------------

def _chunks(buf: bytes):
    pos = 12
    while pos + 8 <= len(buf):
        cid, size = struct.unpack_from("<4sI", buf, pos)
        name = cid.decode("ascii", errors="replace")
        start = pos + 8
        if start + size > len(buf):
            raise ParseError(f"chunk '{name}' truncated: declares {size} bytes, {len(buf) - start} available")
        yield name, buf[start:start + size]
        pos = start + size + (size & 1)


def parse_wav(buf: bytes, source: str = "") -> AudioClip:
    if len(buf) < 12:
        raise ParseError("chunk 'RIFF' truncated: file shorter than the 12-byte header")
    riff, _, wave = struct.unpack_from("<4sI4s", buf, 0)
    if riff != b"RIFF":
        raise ParseError(f"chunk 'RIFF' missing: file starts with {riff!r}")
    if wave != b"WAVE":
        raise ParseError(f"chunk 'RIFF' has form type {wave!r}, expected b'WAVE'")

    fmt = None
    data = None
    for name, payload in _chunks(buf):
        if name == "fmt ":
            if len(payload) < 16:
                raise ParseError(f"chunk 'fmt ' too short ({len(payload)} bytes)")
            fmt = struct.unpack_from("<HHIIHH", payload, 0)
            if fmt[0] == WAVE_FORMAT_EXTENSIBLE:
                if len(payload) < 26:
                    raise ParseError("chunk 'fmt ' extensible header too short")
                fmt = (struct.unpack_from("<H", payload, 24)[0],) + fmt[1:]
        elif name == "data":
            if fmt is None:
                raise ParseError("chunk 'data' appears before chunk 'fmt '")
            data = payload
            break
    if fmt is None:
        raise ParseError("chunk 'fmt ' not found")
    if data is None:
        raise ParseError("chunk 'data' not found")

    codec, channels, rate, _, block_align, bits = fmt
    if channels < 1:
        raise ParseError("chunk 'fmt ' declares zero channels")
    if codec == WAVE_FORMAT_PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1 / 32768.0
    elif codec == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise ParseError(f"chunk 'fmt ' has unsupported codec {codec:#06x} with {bits} bits per sample")
    frame_bytes = dtype.itemsize * channels
    if len(data) % frame_bytes:
        raise ParseError(f"chunk 'data' truncated: {len(data)} bytes is not a multiple of the {frame_bytes}-byte frame")
    if not data:
        raise ParseError("chunk 'data' is empty")
    raw = np.frombuffer(data, dtype=dtype).astype(np.float64) * scale
    samples = raw.reshape(-1, channels).mean(axis=1)
    return AudioClip(samples, int(rate), source)


def load_wav(path) -> AudioClip:
    path = Path(path)
    return parse_wav(path.read_bytes(), str(path))


def write_wav(path, samples, sample_rate: int, *, float32: bool = False) -> None:
    """Write mono (1-D) or interleaved multichannel (frames × channels) audio."""
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    channels = arr.shape[1]
    if float32:
        payload = arr.astype("<f4").tobytes()
        codec, bits = WAVE_FORMAT_IEEE_FLOAT, 32
    else:
        ints = np.clip(np.round(arr * 32768.0), -32768, 32767).astype("<i2")
        payload = ints.tobytes()
        codec, bits = WAVE_FORMAT_PCM, 16
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", codec, channels, sample_rate, sample_rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


# -- spectral analysis -------------------------------------------------------------

def hamming(length: int) -> np.ndarray:
    """Symmetric Hamming window ``0.54 - 0.46 cos(2 pi n / (L - 1))``."""
    n = np.arange(length)
    return 0.54 - 0.46 * np.cos(2 * np.pi * n / (length - 1))


def frame_count(num_samples: int, window: int = 256, hop: int = 128) -> int:
    return (num_samples - window) // hop + 1


def stft_power(samples, window: int = 256, hop: int = 128) -> np.ndarray:
    """Power spectrum of Hamming-windowed frames, ``T × (window/2 + 1)``."""
    if isinstance(samples, AudioClip):
        samples = samples.samples
    x = np.asarray(samples, dtype=np.float64)
    if x.size < window:
        raise InputError(f"clip has {x.size} samples, shorter than one {window}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(x, window)[::hop]
    spec = np.fft.rfft(frames * hamming(window), n=window, axis=-1)
    return spec.real ** 2 + spec.imag ** 2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    num_bins: int = 64,
    fft_bins: int = 129,
    sample_rate: int = 4000,
    f_min: float = 0.0,
    f_max: float | None = None,
) -> np.ndarray:
    """Triangular filters with centres equally spaced on the HTK mel scale.

    Returns ``num_bins × fft_bins`` peak-normalized (unit height) weights.
    """
    if f_max is None:
        f_max = sample_rate / 2
    if not (0 <= f_min < f_max <= sample_rate / 2):
        raise ConfigError(f"invalid mel range [{f_min}, {f_max}] for sample rate {sample_rate}")
    n_fft = 2 * (fft_bins - 1)
    bin_hz = np.arange(fft_bins) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), num_bins + 2))
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz - lower) / (centre - lower)
    falling = (upper - bin_hz) / (upper - centre)
    return np.maximum(0.0, np.minimum(rising, falling))


def filter_centres(num_bins: int = 64, sample_rate: int = 4000, f_min: float = 0.0, f_max: float | None = None):
    f_max = sample_rate / 2 if f_max is None else f_max
    return mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), num_bins + 2))[1:-1]


def log_mel(clip: AudioClip, config: FeatureConfig | None = None) -> Spectrogram:
    """Log-Mel spectrogram, padded or truncated to ``config.num_frames``.

    Padded frames hold the log-floor value, i.e. the log-Mel of silence.
    """
    config = config or FeatureConfig()
    if clip.sample_rate != config.sample_rate:
        raise InputError(f"{clip.source_path or 'clip'}: sample rate {clip.sample_rate} Hz, expected {config.sample_rate} Hz")
    power = stft_power(clip.samples, config.window, config.hop)
    fb = mel_filterbank(config.mel_bins, config.window // 2 + 1, config.sample_rate, config.f_min, config.f_max)
    values = np.log(power @ fb.T + config.log_floor)
    natural = values.shape[0]
    if config.num_frames is not None:
        target = config.num_frames
        if natural >= target:
            values = values[:target]
        else:
            pad = np.full((target - natural, config.mel_bins), np.log(config.log_floor))
            values = np.concatenate([values, pad], axis=0)
    return Spectrogram(
        values.astype(np.float32),
        sample_rate=config.sample_rate,
        window=config.window,
        hop=config.hop,
        original_frames=natural,
        source_path=clip.source_path,
    )


# -- LMEL cache ---------------------------------------------------------------------

def write_lmel(path, spec: Spectrogram | np.ndarray) -> None:
    values = spec.values if isinstance(spec, Spectrogram) else np.asarray(spec)
    t, m = values.shape
    header = LMEL_MAGIC + struct.pack("<III", LMEL_VERSION, t, m)
    Path(path).write_bytes(header + np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_lmel(path) -> Spectrogram:
    buf = Path(path).read_bytes()
    if len(buf) < 16 or buf[:4] != LMEL_MAGIC:
        raise ParseError(f"{path}: missing LMEL magic")
    version, t, m = struct.unpack_from("<III", buf, 4)
    if version != LMEL_VERSION:
        raise ParseError(f"{path}: unsupported LMEL version {version}")
    expected = 16 + 4 * t * m
    if len(buf) != expected:
        raise ParseError(f"{path}: LMEL payload has {len(buf) - 16} bytes, expected {expected - 16}")
    values = np.frombuffer(buf, dtype="<f4", offset=16).reshape(t, m).astype(np.float32)
    return Spectrogram(values, source_path=str(path))

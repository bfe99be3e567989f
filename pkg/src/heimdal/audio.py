"""WAV loading, MFCC front end, and time-domain augmentation.

Features are 16 MFCC coefficients per 250 ms analysis window at a 100 ms
hop, so one feature column covers frames of 4000 samples stepped by 1600
samples at the canonical 16 kHz rate.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct

from .errors import FormatError, PreconditionError, UnsupportedError

SAMPLE_RATE = 16000
FRAME_LEN_S = 0.250
FRAME_HOP_S = 0.100
FRAME_LEN = int(SAMPLE_RATE * FRAME_LEN_S)   # 4000 samples
FRAME_HOP = int(SAMPLE_RATE * FRAME_HOP_S)   # 1600 samples
N_MFCC = 16

# Mel filterbank instantiation: 40 triangular filters between 20 Hz and
# 7600 Hz, log energies floored at 1e-10, orthonormal DCT-II, keep
# coefficients 0..15.
N_FILTERS = 40
FMIN_HZ = 20.0
FMAX_HZ = 7600.0
LOG_FLOOR = 1e-10
N_FFT = 4096

FEATURE_MAGIC = b"HMFT"
FEATURE_VERSION = 1


@dataclass
class AudioBuffer:
    """Mono audio with samples nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise PreconditionError("AudioBuffer expects a 1-D sample array")
        if self.sample_rate <= 0:
            raise PreconditionError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise PreconditionError("audio samples must be finite")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureMatrix:
    """MFCC features, one column per frame: shape [16, T]."""

    coeffs: np.ndarray
    frame_hop: float = FRAME_HOP_S
    frame_len: float = FRAME_LEN_S

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float32)
        if self.coeffs.ndim != 2 or self.coeffs.shape[0] != N_MFCC:
            raise PreconditionError(
                f"feature matrix must be [{N_MFCC} x T], got {self.coeffs.shape}"
            )
        if not np.all(np.isfinite(self.coeffs)):
            raise PreconditionError("feature values must be finite")

    @property
    def num_frames(self) -> int:
        return self.coeffs.shape[1]


def num_frames(num_samples: int) -> int:
    """Frame count for an N-sample buffer: floor((N - 4000)/1600) + 1."""
    if num_samples < FRAME_LEN:
        return 0
    return (num_samples - FRAME_LEN) // FRAME_HOP + 1


# ---------------------------------------------------------------------------
# WAV I/O
#
# A small RIFF parser is used instead of a library reader so that malformed
# and truncated files produce well-defined FormatError/UnsupportedError
# outcomes (library readers tend to either tolerate truncation silently or
# raise generic exceptions).
# ---------------------------------------------------------------------------

_WAVE_FORMAT_PCM = 1
_WAVE_FORMAT_IEEE_FLOAT = 3


def load_wav(path) -> AudioBuffer:
    """Load a RIFF/WAVE file (PCM 16-bit or IEEE float-32).

    Multi-channel files are reduced to the first channel. Samples are
    normalized to [-1, 1]; the file's sample rate is preserved.
    """
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12 or data[0:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (chunk_size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8:pos + 8 + chunk_size]
        if len(body) < chunk_size:
            raise FormatError(f"{path}: truncated {chunk_id!r} chunk")
        if chunk_id == b"fmt ":
            if chunk_size < 16:
                raise FormatError(f"{path}: fmt chunk too small")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            payload = body
        pos += 8 + chunk_size + (chunk_size & 1)  # chunks are word-aligned

    if fmt is None or payload is None:
        raise FormatError(f"{path}: missing fmt or data chunk")

    audio_format, channels, sample_rate, _, _, bits = fmt
    if channels < 1:
        raise FormatError(f"{path}: zero channels")

    if audio_format == _WAVE_FORMAT_PCM and bits == 16:
        raw = np.frombuffer(payload[: len(payload) - len(payload) % (2 * channels)],
                            dtype="<i2")
        samples = raw.astype(np.float32) / 32768.0
    elif audio_format == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        raw = np.frombuffer(payload[: len(payload) - len(payload) % (4 * channels)],
                            dtype="<f4")
        samples = raw.astype(np.float32)
    else:
        raise UnsupportedError(
            f"{path}: unsupported encoding (format={audio_format}, bits={bits}); "
            "expected PCM16 or float32"
        )

    if channels > 1:
        samples = samples[::channels].copy()
    return AudioBuffer(samples, sample_rate)


def save_wav(path, audio: AudioBuffer) -> None:
    """Write mono PCM 16-bit WAV. Samples are clipped to [-1, 1]."""
    clipped = np.clip(audio.samples, -1.0, 1.0)
    pcm = np.round(clipped * 32767.0).astype("<i2")
    payload = pcm.tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, _WAVE_FORMAT_PCM, 1, audio.sample_rate,
        audio.sample_rate * 2, 2, 16,
        b"data", len(payload),
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


# ---------------------------------------------------------------------------
# MFCC
# ---------------------------------------------------------------------------

def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


def mel_filterbank(n_filters=N_FILTERS, n_fft=N_FFT, sample_rate=SAMPLE_RATE,
                   fmin=FMIN_HZ, fmax=FMAX_HZ) -> np.ndarray:
    """Triangular mel filterbank, [n_filters x n_fft//2+1], float64.

    Triangles are evaluated at exact bin frequencies (no snapping of the
    band edges to bins), which keeps every filter non-empty.
    """
    mel_pts = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_filters + 2)
    hz_pts = _mel_to_hz(mel_pts)
    bin_hz = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)

    fb = np.zeros((n_filters, n_fft // 2 + 1))
    for i in range(n_filters):
        lo, center, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        up = (bin_hz - lo) / (center - lo)
        down = (hi - bin_hz) / (hi - center)
        fb[i] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


_FILTERBANK = None
_WINDOW = None


def _frontend_tables():
    global _FILTERBANK, _WINDOW
    if _FILTERBANK is None:
        _FILTERBANK = mel_filterbank()
        _WINDOW = np.hanning(FRAME_LEN)
    return _FILTERBANK, _WINDOW


def mfcc(audio: AudioBuffer) -> FeatureMatrix:
    """16-coefficient MFCCs over 250 ms windows at a 100 ms hop.

    T = floor((N - 4000)/1600) + 1 frames for N >= 4000 samples, else an
    empty matrix. Coefficient 0 is kept. Deterministic: identical input
    bytes give bit-identical features.
    """
    if audio.sample_rate != SAMPLE_RATE:
        raise PreconditionError(
            f"mfcc expects {SAMPLE_RATE} Hz audio, got {audio.sample_rate}"
        )
    n = len(audio.samples)
    t = num_frames(n)
    if t == 0:
        return FeatureMatrix(np.zeros((N_MFCC, 0), dtype=np.float32))

    fb, window = _frontend_tables()
    frames = np.lib.stride_tricks.sliding_window_view(
        audio.samples.astype(np.float64), FRAME_LEN
    )[::FRAME_HOP][:t]
    spectrum = np.fft.rfft(frames * window, n=N_FFT)
    power = spectrum.real ** 2 + spectrum.imag ** 2
    energies = power @ fb.T
    log_e = np.log(np.maximum(energies, LOG_FLOOR))
    cepstra = dct(log_e, type=2, norm="ortho", axis=1)[:, :N_MFCC]
    return FeatureMatrix(cepstra.T.astype(np.float32))


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

GAIN_DB_MIN = -40.0
GAIN_DB_MAX = 10.0


def apply_gain_db(audio: AudioBuffer, gain_db: float) -> AudioBuffer:
    """Scale samples by 10^(gain_db/20). No clipping is applied; the MFCC
    log compression tolerates values outside [-1, 1]."""
    if not (GAIN_DB_MIN <= gain_db <= GAIN_DB_MAX):
        raise PreconditionError(
            f"gain_db must lie in [{GAIN_DB_MIN}, {GAIN_DB_MAX}], got {gain_db}"
        )
    scale = np.float32(10.0 ** (gain_db / 20.0))
    return AudioBuffer(audio.samples * scale, audio.sample_rate)


def mix_noise(audio: AudioBuffer, noise: AudioBuffer | None,
              snr_db: float) -> AudioBuffer:
    """Add noise scaled so that audio power / noise power matches snr_db.

    The noise buffer is tiled or cropped to the audio length. snr_db of
    +inf (or a None noise buffer) returns the audio unchanged; zero-power
    audio or noise yields alpha = 0.
    """
    if noise is None or np.isinf(snr_db):
        return audio
    if noise.sample_rate != audio.sample_rate:
        raise PreconditionError("audio and noise sample rates differ")

    n = len(audio.samples)
    if len(noise.samples) == 0:
        return audio
    reps = -(-n // len(noise.samples))
    tiled = np.tile(noise.samples, reps)[:n]

    p_audio = float(np.mean(np.square(audio.samples, dtype=np.float64)))
    p_noise = float(np.mean(np.square(tiled, dtype=np.float64)))
    if p_audio <= 0.0 or p_noise <= 0.0:
        alpha = 0.0
    else:
        alpha = np.sqrt(p_audio / (p_noise * 10.0 ** (snr_db / 10.0)))
    return AudioBuffer(audio.samples + np.float32(alpha) * tiled,
                       audio.sample_rate)


# ---------------------------------------------------------------------------
# Feature files ("HMFT"): magic, u32 version, u32 rows=16, u32 cols=T,
# then 16*T float32 little-endian, row-major.
# ---------------------------------------------------------------------------

def write_features(path, features: FeatureMatrix) -> None:
    coeffs = np.ascontiguousarray(features.coeffs, dtype="<f4")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<III", FEATURE_VERSION, coeffs.shape[0],
                            coeffs.shape[1]))
        f.write(coeffs.tobytes())


def read_features(path) -> FeatureMatrix:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 16 or data[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: not a feature file")
    version, rows, cols = struct.unpack_from("<III", data, 4)
    if version != FEATURE_VERSION:
        raise FormatError(
            f"{path}: feature file version {version}, expected {FEATURE_VERSION}"
        )
    if rows != N_MFCC:
        raise FormatError(f"{path}: expected {N_MFCC} rows, found {rows}")
    expected = 16 + 4 * rows * cols
    if len(data) < expected:
        raise FormatError(f"{path}: truncated feature payload")
    values = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=16)
    return FeatureMatrix(values.reshape(rows, cols).copy())

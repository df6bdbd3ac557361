"""Audio I/O, log-mel analysis and Griffin-Lim resynthesis.

Framing is centred: frame ``t`` is the Hann-windowed span of ``window``
samples centred on sample ``t * hop`` of a reflect-padded signal, giving
exactly ``ceil(n_samples / hop)`` frames (1 s at 16 kHz, hop 320 -> 50).
"""

from __future__ import annotations

import math
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

SAMPLE_RATE = 16000
HOP = 320
WINDOW = 800
N_MELS = 80
LOG_FLOOR = 1e-5

FEATURE_MAGIC = b"NAMF"
FEATURE_VERSION = 1


class AudioFormatError(ValueError):
    """Unreadable or unsupported audio/feature file."""


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio samples must be finite")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # (T, n_mels), natural-log magnitude
    hop: int = HOP
    window: int = WINDOW
    sample_rate: int = SAMPLE_RATE
    floor: float = LOG_FLOOR
    n_mels: int = field(init=False)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValueError(f"mel frames must be 2-D, got shape {self.frames.shape}")
        if self.hop > self.window:
            raise ValueError(f"hop {self.hop} exceeds window {self.window}")
        self.n_mels = self.frames.shape[1]

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


# --- WAV I/O --------------------------------------------------------------


def load_wav(path, target_rate: int | None = SAMPLE_RATE) -> AudioBuffer:
    """Read a 16-bit PCM mono WAV; resample to ``target_rate`` if it differs."""
    try:
        with wave.open(str(path), "rb") as wf:
            channels, width, rate = wf.getnchannels(), wf.getsampwidth(), wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError, struct.error) as exc:
        raise AudioFormatError(f"{path}: malformed WAV ({exc})") from exc
    if channels != 1:
        raise AudioFormatError(f"{path}: expected mono, got {channels} channels")
    if width != 2:
        raise AudioFormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    buf = AudioBuffer(samples, rate)
    if target_rate is not None and rate != target_rate:
        buf = resample(buf, target_rate)
    return buf


def save_wav(buffer: AudioBuffer, path) -> None:
    pcm = np.clip(np.round(buffer.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(buffer.sample_rate))
        wf.writeframes(pcm.tobytes())


def resample(buffer: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Polyphase windowed-sinc resampling (Kaiser window, beta 5)."""
    g = math.gcd(int(buffer.sample_rate), int(target_rate))
    up, down = target_rate // g, buffer.sample_rate // g
    out = resample_poly(buffer.samples, up, down, window=("kaiser", 5.0))
    return AudioBuffer(np.clip(out, -1.0, 1.0), target_rate)


# --- framing / STFT -----------------------------------------------------------


def n_frames_for(n_samples: int, hop: int) -> int:
    return -(-n_samples // hop)


def hann(window: int) -> np.ndarray:
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(window) / window)


def _frame_layout(n_samples: int, hop: int, window: int) -> tuple[int, int, int]:
    """(n_frames, left pad, padded length) for centred framing."""
    T = n_frames_for(n_samples, hop)
    left = window // 2
    total = (T - 1) * hop + window
    return T, left, total


def stft(samples: np.ndarray, hop: int = HOP, window: int = WINDOW) -> np.ndarray:
    """Complex STFT, shape (T, window // 2 + 1)."""
    n = len(samples)
    T, left, total = _frame_layout(n, hop, window)
    right = total - left - n
    padded = np.pad(samples, (left, max(right, 0)), mode="reflect")[:total]
    idx = np.arange(window)[None, :] + hop * np.arange(T)[:, None]
    return np.fft.rfft(padded[idx] * hann(window), axis=1)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int = N_MELS, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    return edges[1:-1]


def mel_filterbank(n_mels: int = N_MELS, window: int = WINDOW, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Unit-peak triangular filters on the HTK mel scale over [0, sr/2].

    Shape (n_mels, window // 2 + 1). Adjacent triangles overlap so that the
    per-bin total weight never exceeds 1.
    """
    freqs = np.fft.rfftfreq(window, 1.0 / sample_rate)
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_spectrogram(
    audio: AudioBuffer,
    n_mels: int = N_MELS,
    hop: int = HOP,
    window: int = WINDOW,
    floor: float = LOG_FLOOR,
) -> MelSpectrogram:
    if hop > window:
        raise ValueError(f"hop {hop} exceeds window {window}")
    if len(audio.samples) < window:
        raise ValueError(f"audio has {len(audio.samples)} samples, shorter than one window ({window})")
    mag = np.abs(stft(audio.samples, hop, window))
    fb = mel_filterbank(n_mels, window, audio.sample_rate)
    mel = np.log(np.maximum(mag @ fb.T, floor))
    return MelSpectrogram(mel, hop=hop, window=window, sample_rate=audio.sample_rate, floor=floor)


# --- Griffin-Lim ------------------------------------------------------------


def _bin_weights(window: int) -> np.ndarray:
    # rfft bins other than DC/Nyquist stand for two conjugate full-FFT bins
    w = np.full(window // 2 + 1, 2.0)
    w[0] = 1.0
    if window % 2 == 0:
        w[-1] = 1.0
    return w


def _overlap_add(frames: np.ndarray, hop: int, window: int) -> np.ndarray:
    """Least-squares signal whose windowed frames best match ``frames``."""
    T = frames.shape[0]
    total = (T - 1) * hop + window
    win = hann(window)
    num = np.zeros(total)
    den = np.zeros(total)
    for t in range(T):
        num[t * hop : t * hop + window] += frames[t] * win
        den[t * hop : t * hop + window] += win * win
    out = np.zeros(total)
    ok = den > 1e-10
    out[ok] = num[ok] / den[ok]
    return out


def _analyse(x_ext: np.ndarray, T: int, hop: int, window: int) -> np.ndarray:
    idx = np.arange(window)[None, :] + hop * np.arange(T)[:, None]
    return np.fft.rfft(x_ext[idx] * hann(window), axis=1)


def spectral_convergence(target_mag: np.ndarray, spec: np.ndarray, weights: np.ndarray) -> float:
    num = np.sum(weights * (np.abs(spec) - target_mag) ** 2)
    den = np.sum(weights * target_mag**2)
    return float(np.sqrt(num / den)) if den > 0 else float(np.sqrt(num))


def griffin_lim(
    mel: MelSpectrogram,
    iterations: int = 60,
    seed: int = 0,
    return_history: bool = False,
):
    """Invert a log-mel spectrogram to audio.

    The mel magnitudes are mapped back to linear-frequency magnitudes with
    the filterbank pseudo-inverse (clipped at 0), then phase is recovered by
    alternating projections on the padded-signal domain. Output length is
    ``n_frames * hop``.
    """
    if iterations <= 0:
        raise ValueError("iterations must be >= 1")
    hop, window = mel.hop, mel.window
    fb = mel_filterbank(mel.n_mels, window, mel.sample_rate)
    lin = np.exp(mel.frames)
    lin[mel.frames <= np.log(mel.floor) + 1e-12] = 0.0
    target = np.maximum(lin @ np.linalg.pinv(fb).T, 0.0)
    T = mel.n_frames
    weights = _bin_weights(window)[None, :]
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(target.shape))
    spec = target * phase
    history = []
    for _ in range(iterations):
        x_ext = _overlap_add(np.fft.irfft(spec, n=window, axis=1), hop, window)
        rebuilt = _analyse(x_ext, T, hop, window)
        history.append(spectral_convergence(target, rebuilt, weights))
        spec = target * np.exp(1j * np.angle(rebuilt))
    x_ext = _overlap_add(np.fft.irfft(spec, n=window, axis=1), hop, window)
    left = window // 2
    samples = np.clip(x_ext[left : left + T * hop], -1.0, 1.0)
    out = AudioBuffer(samples, mel.sample_rate)
    return (out, history) if return_history else out


# --- feature files --------------------------------------------------------------


def write_features(path, mat: np.ndarray, sample_rate: int = SAMPLE_RATE, hop: int = HOP,
                   window: int = WINDOW, n_mels: int | None = None) -> None:
    """Write a "NAMF" feature matrix (f32 payload, 24-byte trailer)."""
    m = np.ascontiguousarray(np.asarray(mat, dtype="<f4"))
    if m.ndim != 2:
        raise ValueError(f"feature matrix must be 2-D, got {m.shape}")
    rows, cols = m.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", rows, cols))
        fh.write(m.tobytes(order="C"))
        # trailer: sr, hop, window, n_mels, reserved (= format version), pad
        fh.write(struct.pack("<fIIIII", float(sample_rate), hop, window,
                             cols if n_mels is None else n_mels, FEATURE_VERSION, 0))


def read_features(path) -> tuple[np.ndarray, dict]:
    data = Path(path).read_bytes()
    if len(data) < 12 + 24 or data[:4] != FEATURE_MAGIC:
        raise AudioFormatError(f"{path}: not a NAMF feature file")
    rows, cols = struct.unpack("<II", data[4:12])
    body = 4 * rows * cols
    if len(data) != 12 + body + 24:
        raise AudioFormatError(f"{path}: size does not match {rows}x{cols} header")
    sr, hop, window, n_mels, version, _ = struct.unpack("<fIIIII", data[12 + body :])
    if version != FEATURE_VERSION:
        raise AudioFormatError(f"{path}: unsupported feature format version {version}")
    mat = np.frombuffer(data[12 : 12 + body], dtype="<f4").reshape(rows, cols).astype(np.float64)
    return mat, {"sample_rate": sr, "hop": hop, "window": window, "n_mels": n_mels}

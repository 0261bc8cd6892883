"""Per-word prosodic and raw acoustic features from mono PCM audio.

Frames are 25 ms with a 10 ms hop. A frame belongs to a word when its centre
lies in the word's half-open interval ``[t_start, t_end)``. Pitch uses a
longer analysis window (two periods of the 60 Hz floor) centred on the same
frame centres so every word sees one F0 estimate per hop.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.fft import dct
from scipy.io import wavfile
from scipy.signal import get_window

from . import kernels
from .errors import AlignmentRangeError, ConfigurationError, DimensionError, FormatError, TooShortError

FRAME_MS = 25.0
HOP_MS = 10.0
F0_MIN = 60.0
F0_MAX = 400.0
VOICING_THRESHOLD = 0.30
ENERGY_FLOOR = 1e-10
N_MELS = 26
N_CEPS = 13

PROSODY_FIELDS = (
    "f0_mean", "f0_std", "f0_min", "f0_max", "f0_slope", "voiced_fraction",
    "energy_mean", "energy_std", "energy_max", "energy_range",
    "duration_s", "pause_before_s", "pause_after_s", "rel_position",
    "f0_mean_utt_norm", "energy_mean_utt_norm",
)
D_PROSODY = len(PROSODY_FIELDS)
D_RAW = 2 * N_CEPS
FEATURE_MODES = ("prosody", "raw", "prosody+raw", "text")


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate < 8000:
            raise ConfigurationError(f"sample rate {self.sample_rate} Hz is below 8000 Hz")
        if self.samples.size == 0:
            raise TooShortError("audio clip is empty")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class WordAlignment:
    word: str
    t_start: float
    t_end: float


# ---------------------------------------------------------------- IO


def read_wav(path) -> AudioClip:
    """Read mono PCM16 (scaled by 1/32768) or float32 WAV."""
    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if data.ndim != 1:
        raise FormatError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample format {data.dtype}")
    return AudioClip(samples, int(rate))


def write_wav(path, clip: AudioClip) -> None:
    """Write 16-bit PCM mono."""
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, clip.sample_rate, pcm)


def load_alignment(path) -> list[WordAlignment]:
    try:
        items = json.loads(Path(path).read_text())
        return [WordAlignment(str(it["word"]), float(it["t_start"]), float(it["t_end"])) for it in items]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad alignment file ({exc})") from exc


def dump_alignment(path, alignment: Sequence[WordAlignment]) -> None:
    Path(path).write_text(json.dumps(
        [{"word": a.word, "t_start": a.t_start, "t_end": a.t_end} for a in alignment]))


# ---------------------------------------------------------------- framing


def _frame_params(sample_rate: int, frame_ms: float, hop_ms: float) -> tuple[int, int]:
    return int(round(sample_rate * frame_ms / 1000.0)), int(round(sample_rate * hop_ms / 1000.0))


def frame_signal(clip: AudioClip, frame_ms: float = FRAME_MS, hop_ms: float = HOP_MS,
                 window: str | None = "hann") -> np.ndarray:
    """Split into ``floor((N - L) / H) + 1`` frames of ``L`` samples, hop ``H``."""
    L, H = _frame_params(clip.sample_rate, frame_ms, hop_ms)
    n = clip.samples.size
    if n < L:
        raise TooShortError(f"clip of {n} samples is shorter than one {L}-sample frame")
    count = (n - L) // H + 1
    frames = np.lib.stride_tricks.sliding_window_view(clip.samples, L)[::H][:count]
    if window is None:
        return frames.copy()
    return frames * get_window(window, L, fftbins=True)


def frame_centers(n_samples: int, sample_rate: int, frame_ms: float = FRAME_MS,
                  hop_ms: float = HOP_MS) -> np.ndarray:
    """Frame centre times in seconds."""
    L, H = _frame_params(sample_rate, frame_ms, hop_ms)
    count = (n_samples - L) // H + 1
    return (np.arange(count) * H + L / 2.0) / sample_rate


def pitch_frame_length(sample_rate: int) -> int:
    return int(math.ceil(2.0 * sample_rate / F0_MIN))


def _lag_range(sample_rate: int) -> tuple[int, int]:
    return int(math.floor(sample_rate / F0_MAX)), int(math.ceil(sample_rate / F0_MIN))


def estimate_f0(frame: np.ndarray, sample_rate: int) -> tuple[float | None, float]:
    """Autocorrelation pitch of one frame: ``(f0 in Hz or None, voicing strength)``."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.size < 2.0 * sample_rate / F0_MIN:
        raise TooShortError(
            f"pitch frame needs >= {pitch_frame_length(sample_rate)} samples, got {frame.size}")
    f0, strength = _f0_batch(frame[None, :], sample_rate)
    return (None if np.isnan(f0[0]) else float(f0[0])), float(strength[0])


def _f0_batch(frames: np.ndarray, sample_rate: int) -> tuple[np.ndarray, np.ndarray]:
    lmin, lmax = _lag_range(sample_rate)
    lags, peaks = kernels.acf_peaks(frames, lmin, lmax)
    voiced = (peaks > VOICING_THRESHOLD) & (lags > 0)
    f0 = np.full(lags.shape, np.nan)
    f0[voiced] = sample_rate / lags[voiced]
    return f0, peaks


def frame_log_energy(frame: np.ndarray) -> float:
    frame = np.asarray(frame, dtype=np.float64)
    return float(np.log(np.mean(frame * frame) + ENERGY_FLOOR))


def _pitch_frames(clip: AudioClip) -> np.ndarray:
    L, H = _frame_params(clip.sample_rate, FRAME_MS, HOP_MS)
    P = pitch_frame_length(clip.sample_rate)
    count = (clip.samples.size - L) // H + 1
    starts = np.arange(count) * H + L // 2 - P // 2
    pad = P
    padded = np.concatenate([np.zeros(pad), clip.samples, np.zeros(pad)])
    view = np.lib.stride_tricks.sliding_window_view(padded, P)
    return view[starts + pad]


# ---------------------------------------------------------------- per-word extraction


def _validate_alignment(clip: AudioClip, alignment: Sequence[WordAlignment]) -> None:
    if not alignment:
        raise AlignmentRangeError("alignment is empty")
    end = clip.duration + 1e-9
    prev_end = 0.0
    for a in alignment:
        if not (0.0 <= a.t_start < a.t_end <= end):
            raise AlignmentRangeError(
                f"word {a.word!r} [{a.t_start}, {a.t_end}) outside clip of {clip.duration:.3f} s")
        if a.t_start < prev_end - 1e-9:
            raise AlignmentRangeError(f"word {a.word!r} overlaps the previous word")
        prev_end = a.t_end


def _word_frames(centers: np.ndarray, alignment: Sequence[WordAlignment]) -> list[np.ndarray]:
    groups = []
    for a in alignment:
        idx = np.flatnonzero((centers >= a.t_start) & (centers < a.t_end))
        if idx.size == 0:
            # word shorter than a hop: nearest frame to its midpoint
            idx = np.array([int(np.argmin(np.abs(centers - 0.5 * (a.t_start + a.t_end))))])
        groups.append(idx)
    return groups


def extract_prosody(clip: AudioClip, alignment: Sequence[WordAlignment]) -> np.ndarray:
    """Return a ``(T, 16)`` array ordered as :data:`PROSODY_FIELDS`."""
    _validate_alignment(clip, alignment)
    frames = frame_signal(clip, window=None)
    centers = frame_centers(clip.samples.size, clip.sample_rate)
    energy = np.log(np.mean(frames * frames, axis=1) + ENERGY_FLOOR)
    f0, _ = _f0_batch(_pitch_frames(clip), clip.sample_rate)
    groups = _word_frames(centers, alignment)

    all_idx = np.concatenate(groups)
    utt_f0 = f0[all_idx][~np.isnan(f0[all_idx])]
    utt_f0_mean = float(utt_f0.mean()) if utt_f0.size else 0.0
    utt_energy_mean = float(energy[all_idx].mean())

    T = len(alignment)
    out = np.zeros((T, D_PROSODY))
    for k, (a, idx) in enumerate(zip(alignment, groups)):
        wf0 = f0[idx]
        voiced = ~np.isnan(wf0)
        row = out[k]
        if voiced.any():
            v = wf0[voiced]
            row[0] = v.mean()
            row[1] = v.std()
            row[2] = v.min()
            row[3] = v.max()
            if v.size >= 2:
                t = centers[idx][voiced]
                tc = t - t.mean()
                denom = float(tc @ tc)
                row[4] = float(tc @ (v - v.mean())) / denom if denom > 0 else 0.0
            row[5] = voiced.mean()
            row[14] = row[0] / utt_f0_mean if utt_f0_mean > 0 else 1.0
        else:
            row[14] = 1.0
        e = energy[idx]
        row[6] = e.mean()
        row[7] = e.std()
        row[8] = e.max()
        row[9] = e.max() - e.min()
        row[10] = a.t_end - a.t_start
        row[11] = a.t_start - (alignment[k - 1].t_end if k > 0 else 0.0)
        row[12] = (alignment[k + 1].t_start if k + 1 < T else clip.duration) - a.t_end
        row[13] = k / (T - 1) if T > 1 else 0.0
        row[15] = row[6] - utt_energy_mean
    out[:, 11:13] = np.maximum(out[:, 11:13], 0.0)
    return out


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int = N_MELS) -> np.ndarray:
    """Triangular filters evenly spaced on the mel scale over 0..sample_rate/2."""
    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def mfcc_frames(clip: AudioClip) -> np.ndarray:
    """``(n_frames, 13)`` cepstra: power spectrum, mel filters, log, DCT-II."""
    frames = frame_signal(clip, window="hann")
    n_fft = 1 << int(np.ceil(np.log2(frames.shape[1])))
    spec = np.fft.rfft(frames, n_fft, axis=1)
    power = (spec.real ** 2 + spec.imag ** 2) / n_fft
    mel = power @ mel_filterbank(clip.sample_rate, n_fft).T
    return dct(np.log(mel + ENERGY_FLOOR), type=2, axis=1, norm="ortho")[:, :N_CEPS]


def extract_raw(clip: AudioClip, alignment: Sequence[WordAlignment]) -> np.ndarray:
    """Return ``(T, 26)``: per-word means then standard deviations of 13 cepstra."""
    _validate_alignment(clip, alignment)
    ceps = mfcc_frames(clip)
    centers = frame_centers(clip.samples.size, clip.sample_rate)
    out = np.zeros((len(alignment), D_RAW))
    for k, idx in enumerate(_word_frames(centers, alignment)):
        c = ceps[idx]
        out[k, :N_CEPS] = c.mean(axis=0)
        out[k, N_CEPS:] = c.std(axis=0) if idx.size > 1 else 0.0
    return out


def extract_file(wav_path, align_path, utt_id: str | None = None) -> dict:
    """Feature record for one WAV + alignment pair (output JSON-lines schema)."""
    clip = read_wav(wav_path)
    alignment = load_alignment(align_path)
    if utt_id is None:
        utt_id = Path(wav_path).stem
    return {
        "id": utt_id,
        "prosody": extract_prosody(clip, alignment).tolist(),
        "raw": extract_raw(clip, alignment).tolist(),
    }


# ---------------------------------------------------------------- fusion


def feature_dim(mode: str, d_embed: int) -> int:
    if mode not in FEATURE_MODES:
        raise ConfigurationError(f"unknown feature mode {mode!r}; expected one of {FEATURE_MODES}")
    acoustic = {"prosody": D_PROSODY, "raw": D_RAW, "prosody+raw": D_PROSODY + D_RAW, "text": 0}
    return acoustic[mode] + d_embed


def describe_dim(mode: str, d_embed: int) -> str:
    parts = {"prosody": [D_PROSODY], "raw": [D_RAW], "prosody+raw": [D_PROSODY, D_RAW],
             "text": []}[mode] + [d_embed]
    return "+".join(str(p) for p in parts) + f"={sum(parts)}"


def fuse(prosody, raw, embed, mode: str = "prosody", normalizer: "Normalizer | None" = None) -> np.ndarray:
    """Concatenate ``[prosody | raw | embed]`` as selected by ``mode``.

    Works on single word vectors or ``(T, d)`` sequences alike.
    """
    if mode not in FEATURE_MODES:
        raise ConfigurationError(f"unknown feature mode {mode!r}")
    if embed is None:
        raise ConfigurationError("text embedding is required for every mode")
    parts = []
    if mode in ("prosody", "prosody+raw"):
        if prosody is None:
            raise ConfigurationError(f"mode {mode!r} needs prosody features")
        parts.append(np.asarray(prosody, dtype=np.float64))
    if mode in ("raw", "prosody+raw"):
        if raw is None:
            raise ConfigurationError(f"mode {mode!r} needs raw features")
        parts.append(np.asarray(raw, dtype=np.float64))
    parts.append(np.asarray(embed, dtype=np.float64))
    lead = {p.shape[:-1] for p in parts}
    if len(lead) != 1:
        raise DimensionError(f"fuse: parts disagree on leading shape {sorted(lead)}")
    out = np.concatenate(parts, axis=-1)
    return normalizer.apply(out) if normalizer is not None else out


@dataclass
class Normalizer:
    """Per-dimension standardisation fitted on training vectors."""

    mean: np.ndarray
    std: np.ndarray

    STD_FLOOR = 1e-6

    @classmethod
    def fit(cls, rows: Iterable[np.ndarray]) -> "Normalizer":
        X = np.concatenate([np.atleast_2d(r) for r in rows], axis=0)
        return cls(X.mean(axis=0), np.maximum(X.std(axis=0), cls.STD_FLOOR))

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.mean.size:
            raise DimensionError(f"normalizer has {self.mean.size} dims, input has {x.shape[-1]}")
        return (x - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))

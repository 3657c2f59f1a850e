"""Acoustic front end and target preparation.

Three per-utterance streams share one frame clock: 39-dim MFCC features
(13 cepstra plus delta and delta-delta), 39-dim phoneme one-hots read off
forced-alignment interval files, and 12-channel articulator trajectories
resampled to acoustic frame centers.  Frame i is centered at
``(i + 0.5) * hop`` seconds throughout.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import scipy.fft
import scipy.io.wavfile

from .errors import DataError

# Stress-free ARPAbet inventory (39 symbols), alphabetical and stable.
ARPABET_39 = (
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER",
    "EY", "F", "G", "HH", "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW",
    "OY", "P", "R", "S", "SH", "T", "TH", "UH", "UW", "V", "W", "Y", "Z", "ZH",
)
PHONEME_INDEX = {label: i for i, label in enumerate(ARPABET_39)}

# Labels that mark non-speech; these map to the all-zero phoneme vector.
SILENCE_LABELS = frozenset({"", "sil", "sp", "spn", "pau", "h#"})

EMA_CHANNELS = (
    "T1_x", "T1_z", "T2_x", "T2_z", "T3_x", "T3_z",
    "UL_x", "UL_z", "LL_x", "LL_z", "LI_x", "LI_z",
)
TONGUE_CHANNELS = EMA_CHANNELS[:6]

assert len(ARPABET_39) == 39
assert len(set(ARPABET_39)) == 39


@dataclass(frozen=True)
class MfccConfig:
    """MFCC pipeline settings.  ``sample_rate`` of None accepts whatever the
    audio file carries (rates below 8 kHz are always rejected)."""

    sample_rate: int | None = None
    window_ms: float = 25.0
    hop_ms: float = 10.0
    mel_filters: int = 26
    cepstra: int = 13
    pre_emphasis: float = 0.97
    log_floor: float = 1e-10
    delta_window: int = 2

    @property
    def feature_dim(self) -> int:
        return self.cepstra * 3

    def hop_seconds(self, rate: int | None = None) -> float:
        if rate is None:
            return self.hop_ms / 1000.0
        return self.hop_samples(rate) / rate

    def window_samples(self, rate: int) -> int:
        return int(round(rate * self.window_ms / 1000.0))

    def hop_samples(self, rate: int) -> int:
        return int(round(rate * self.hop_ms / 1000.0))


def feature_config_hash(cfg: MfccConfig) -> str:
    """Stable digest of everything the feature streams depend on; stored in
    checkpoints so a model is never scored against differently-built inputs."""
    payload = {
        "mfcc": asdict(cfg),
        "phoneme_inventory": list(ARPABET_39),
        "ema_channels": list(EMA_CHANNELS),
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# -- audio ----------------------------------------------------------------

def load_wav(path) -> tuple[int, np.ndarray]:
    """Read PCM 16-bit mono WAV; returns (rate, float64 samples in [-1, 1))."""
    try:
        rate, samples = scipy.io.wavfile.read(path)
    except FileNotFoundError:
        raise DataError(f"audio file not found: {path}") from None
    except ValueError as exc:
        raise DataError(f"unreadable WAV file {path}: {exc}") from None
    if samples.dtype != np.int16:
        raise DataError(f"{path}: expected 16-bit PCM, got dtype {samples.dtype}")
    if samples.ndim != 1:
        raise DataError(f"{path}: expected mono audio, got {samples.ndim} channels")
    if rate < 8000:
        raise DataError(f"{path}: sample rate {rate} Hz below the 8 kHz minimum (resampling is out of scope)")
    return int(rate), samples.astype(np.float64) / 32768.0


# -- MFCC stages ----------------------------------------------------------

def pre_emphasize(samples: np.ndarray, coeff: float) -> np.ndarray:
    out = samples.copy()
    out[1:] -= coeff * samples[:-1]
    return out


def frame_signal(samples: np.ndarray, window: int, hop: int) -> np.ndarray:
    """Slice into overlapping frames: count = floor((n - window)/hop) + 1."""
    n = samples.shape[0]
    if n < window:
        raise DataError(f"signal of {n} samples is shorter than one {window}-sample window")
    count = (n - window) // hop + 1
    idx = np.arange(window)[None, :] + hop * np.arange(count)[:, None]
    return samples[idx]


def mel_filterbank_matrix(n_filters: int, nfft: int, rate: int) -> np.ndarray:
    """Triangular filters on the HTK mel scale over rfft bins, [n_filters, nfft//2 + 1]."""
    def to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def from_mel(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    mel_points = np.linspace(to_mel(0.0), to_mel(rate / 2.0), n_filters + 2)
    hz_points = from_mel(mel_points)
    bins = np.floor((nfft + 1) * hz_points / rate).astype(int)
    fbank = np.zeros((n_filters, nfft // 2 + 1))
    for m in range(1, n_filters + 1):
        left, center, right = bins[m - 1], bins[m], bins[m + 1]
        for k in range(left, center):
            if center > left:
                fbank[m - 1, k] = (k - left) / (center - left)
        for k in range(center, right):
            if right > center:
                fbank[m - 1, k] = (right - k) / (right - center)
    return fbank


def log_mel_energies(frames: np.ndarray, fbank: np.ndarray, nfft: int, floor: float) -> np.ndarray:
    windowed = frames * np.hamming(frames.shape[1])
    spectrum = np.abs(np.fft.rfft(windowed, n=nfft, axis=1))
    energies = spectrum @ fbank.T
    return np.log(np.maximum(energies, floor))


def cepstra_from_log_mel(log_mel: np.ndarray, n_cepstra: int) -> np.ndarray:
    return scipy.fft.dct(log_mel, type=2, axis=1, norm="ortho")[:, :n_cepstra]


def delta_coefficients(coeffs: np.ndarray, window: int = 2) -> np.ndarray:
    """Regression deltas with edge frames repeated:
    d[t] = sum_n n * (c[t+n] - c[t-n]) / (2 * sum_n n^2)."""
    count = coeffs.shape[0]
    padded = np.pad(coeffs, ((window, window), (0, 0)), mode="edge")
    denom = 2.0 * sum(n * n for n in range(1, window + 1))
    out = np.zeros_like(coeffs)
    for n in range(1, window + 1):
        out += n * (padded[window + n:window + n + count] - padded[window - n:window - n + count])
    return out / denom


def mean_variance_normalize(features: np.ndarray) -> np.ndarray:
    """Per-coefficient z-normalization over the utterance; constant
    coefficients stay at zero instead of dividing by a vanishing std."""
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    constant = std <= 1e-10
    out = (features - mean) / np.where(constant, 1.0, std)
    out[:, constant] = 0.0
    return out


def mfcc_cepstra(samples: np.ndarray, rate: int, cfg: MfccConfig) -> np.ndarray:
    """Un-normalized cepstra [T, cfg.cepstra] for one utterance."""
    window = cfg.window_samples(rate)
    hop = cfg.hop_samples(rate)
    nfft = 1
    while nfft < window:
        nfft *= 2
    frames = frame_signal(pre_emphasize(samples, cfg.pre_emphasis), window, hop)
    fbank = mel_filterbank_matrix(cfg.mel_filters, nfft, rate)
    return cepstra_from_log_mel(log_mel_energies(frames, fbank, nfft, cfg.log_floor), cfg.cepstra)


def compute_mfcc(samples: np.ndarray, rate: int, cfg: MfccConfig | None = None) -> np.ndarray:
    """Full pipeline: [T, 39] normalized cepstra + deltas + delta-deltas."""
    cfg = cfg or MfccConfig()
    if cfg.sample_rate is not None and rate != cfg.sample_rate:
        raise DataError(f"sample rate {rate} Hz does not match the configured {cfg.sample_rate} Hz")
    if rate < 8000:
        raise DataError(f"sample rate {rate} Hz below the 8 kHz minimum")
    base = mfcc_cepstra(samples, rate, cfg)
    d1 = delta_coefficients(base, cfg.delta_window)
    d2 = delta_coefficients(d1, cfg.delta_window)
    return mean_variance_normalize(np.concatenate([base, d1, d2], axis=1))


# -- phoneme alignment ------------------------------------------------------

class AlignmentEntry(NamedTuple):
    start: float
    end: float
    label: str


def read_alignment(path) -> list[AlignmentEntry]:
    """Parse the tab-separated interval format: ``start_s<TAB>end_s<TAB>LABEL``."""
    entries = []
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise DataError(f"{path}:{lineno}: expected 'start<TAB>end<TAB>label', got {line!r}")
                try:
                    start, end = float(parts[0]), float(parts[1])
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-numeric interval bounds in {line!r}") from None
                entries.append(AlignmentEntry(start, end, parts[2]))
    except FileNotFoundError:
        raise DataError(f"alignment file not found: {path}") from None
    _validate_alignment(entries, path)
    return entries


def _validate_alignment(entries, origin="alignment"):
    prev_end = -np.inf
    for e in entries:
        if not (0.0 <= e.start < e.end):
            raise DataError(f"{origin}: invalid interval [{e.start}, {e.end}) for label {e.label!r}")
        if e.start < prev_end:
            raise DataError(f"{origin}: overlapping or unsorted entries near {e.start}")
        prev_end = e.end


def normalize_label(label: str) -> int | None:
    """Map an alignment label to an inventory index, None for silence.

    Trailing stress digits are stripped (forced aligners emit e.g. AA1);
    unknown labels raise, naming the offender.
    """
    bare = label.strip()
    if bare.lower() in SILENCE_LABELS:
        return None
    sym = bare.upper()
    if sym and sym[-1] in "012":
        sym = sym[:-1]
    if sym in PHONEME_INDEX:
        return PHONEME_INDEX[sym]
    raise DataError(f"phoneme label {label!r} is not in the 39-symbol inventory and is not a silence token")


def encode_phonemes(entries: list[AlignmentEntry], frame_count: int, hop_s: float) -> np.ndarray:
    """One-hot matrix [frame_count, 39]; frame i takes the entry covering its
    center time (i + 0.5) * hop, and silence or uncovered frames stay zero."""
    _validate_alignment(entries)
    out = np.zeros((frame_count, len(ARPABET_39)))
    if not entries:
        return out
    starts = np.array([e.start for e in entries])
    for i in range(frame_count):
        center = (i + 0.5) * hop_s
        j = int(np.searchsorted(starts, center, side="right")) - 1
        if j < 0:
            continue
        entry = entries[j]
        if entry.start <= center < entry.end:
            idx = normalize_label(entry.label)
            if idx is not None:
                out[i, idx] = 1.0
    return out


# -- articulator targets -----------------------------------------------------

@dataclass
class EmaTrack:
    """Articulator trajectories: sample times in seconds and one column per
    channel in EMA_CHANNELS order, millimetres."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != len(EMA_CHANNELS):
            raise DataError(f"EMA track must have {len(EMA_CHANNELS)} channels, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)) or not np.all(np.isfinite(self.times)):
            raise DataError("EMA track contains NaN or Inf")
        if np.any(np.diff(self.times) <= 0):
            raise DataError("EMA sample times must be strictly increasing")


def read_ema_csv(path) -> EmaTrack:
    expected = ("time_s",) + EMA_CHANNELS
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != expected:
                raise DataError(f"{path}: header must be {','.join(expected)}")
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if len(row) != len(expected):
                    raise DataError(f"{path}:{lineno}: expected {len(expected)} columns, got {len(row)}")
                try:
                    rows.append([float(v) for v in row])
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-numeric value") from None
    except FileNotFoundError:
        raise DataError(f"EMA file not found: {path}") from None
    if not rows:
        raise DataError(f"{path}: no samples")
    data = np.array(rows)
    return EmaTrack(times=data[:, 0], values=data[:, 1:])


def align_ema(track: EmaTrack, frame_count: int, hop_s: float, slack_s: float = 0.05) -> np.ndarray:
    """Linearly interpolate each channel at acoustic frame centers,
    [frame_count, 12] mm.  Frame times outside the track clamp to its
    endpoints; a gap beyond ``slack_s`` is a duration mismatch."""
    centers = (np.arange(frame_count) + 0.5) * hop_s
    if centers[0] < track.times[0] - slack_s or centers[-1] > track.times[-1] + slack_s:
        raise DataError(
            f"EMA track [{track.times[0]:.3f}s, {track.times[-1]:.3f}s] does not cover "
            f"frames [{centers[0]:.3f}s, {centers[-1]:.3f}s] within {slack_s * 1000:.0f} ms slack"
        )
    out = np.empty((frame_count, track.values.shape[1]))
    for c in range(track.values.shape[1]):
        out[:, c] = np.interp(centers, track.times, track.values[:, c])
    return out

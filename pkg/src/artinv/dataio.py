"""Dataset manifests, synthetic corpus generation, and checkpoint persistence.

Manifest contract: CSV with header ``utterance_id,speaker_id,features,alignment,ema``
and paths relative to the manifest's directory.  The features column names
either a WAV file (PCM 16-bit mono) or a precomputed ``*.mfcc.csv`` with T
rows of 39 columns and no header.  Numeric text files are ASCII decimal
with '.' radix, newline-terminated rows; floats are written with
round-trip precision so readers reconstruct them bit-exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import features as feat
from .errors import DataError
from .model import InversionModel, ModelConfig

MANIFEST_COLUMNS = ("utterance_id", "speaker_id", "features", "alignment", "ema")


@dataclass
class UtteranceSample:
    """One aligned utterance: acoustic frames, phoneme one-hots, articulator
    targets (mm), all sharing the frame count."""

    utterance_id: str
    speaker_id: str
    mfcc: np.ndarray
    phonemes: np.ndarray
    ema: np.ndarray


def format_float(x) -> str:
    return repr(float(x))


def write_matrix_csv(path, matrix: np.ndarray, header=None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if header is not None:
            writer.writerow(header)
        for row in np.atleast_2d(matrix):
            writer.writerow([format_float(v) for v in row])


def write_trace_csv(path, trace) -> None:
    """Per-epoch loss trace: epoch, train_loss, val_loss rows."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("epoch", "train_loss", "val_loss"))
        for epoch, train_loss, val_loss in trace:
            writer.writerow((epoch, format_float(train_loss), format_float(val_loss)))


def read_matrix_csv(path, expect_columns: int | None = None, has_header: bool = False) -> np.ndarray:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if has_header:
            next(reader, None)
        for lineno, row in enumerate(reader, start=2 if has_header else 1):
            if expect_columns is not None and len(row) != expect_columns:
                raise DataError(f"{path}:{lineno}: expected {expect_columns} columns, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric value") from None
    if not rows:
        raise DataError(f"{path}: empty matrix")
    return np.array(rows)


# -- manifest loading --------------------------------------------------------

def load_manifest(path, cfg: feat.MfccConfig | None = None) -> list[UtteranceSample]:
    """Load every utterance the manifest references, with all three feature
    streams aligned to a shared frame count.  Errors name the utterance."""
    cfg = cfg or feat.MfccConfig()
    manifest_path = Path(path)
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {path}")
    base = manifest_path.parent

    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_COLUMNS:
            raise DataError(f"{path}: manifest header must be {','.join(MANIFEST_COLUMNS)}")
        rows = list(reader)

    if not rows:
        raise DataError(f"{path}: no utterances")

    samples = []
    seen = set()
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(MANIFEST_COLUMNS):
            raise DataError(f"{path}:{lineno}: malformed row, expected {len(MANIFEST_COLUMNS)} fields")
        utt_id, speaker_id, feat_rel, align_rel, ema_rel = row
        if utt_id in seen:
            raise DataError(f"{path}:{lineno}: duplicate utterance_id {utt_id!r}")
        seen.add(utt_id)
        for rel in (feat_rel, align_rel, ema_rel):
            if not (base / rel).exists():
                raise DataError(f"utterance {utt_id!r}: missing file {base / rel}")
        try:
            samples.append(_load_utterance(utt_id, speaker_id, base, feat_rel, align_rel, ema_rel, cfg))
        except DataError as exc:
            raise DataError(f"utterance {utt_id!r}: {exc}") from None
    return samples


def _load_utterance(utt_id, speaker_id, base: Path, feat_rel, align_rel, ema_rel,
                    cfg: feat.MfccConfig) -> UtteranceSample:
    feat_path = base / feat_rel
    if feat_path.suffix.lower() == ".wav":
        rate, audio = feat.load_wav(feat_path)
        mfcc = feat.compute_mfcc(audio, rate, cfg)
        hop_s = cfg.hop_seconds(rate)
    else:
        mfcc = read_matrix_csv(feat_path, expect_columns=cfg.feature_dim)
        hop_s = cfg.hop_seconds()
    frames = mfcc.shape[0]
    phonemes = feat.encode_phonemes(feat.read_alignment(base / align_rel), frames, hop_s)
    ema = feat.align_ema(feat.read_ema_csv(base / ema_rel), frames, hop_s)
    return UtteranceSample(utt_id, speaker_id, mfcc, phonemes, ema)


def speakers_of(samples) -> list[str]:
    """Distinct speaker ids in manifest order."""
    out = []
    for s in samples:
        if s.speaker_id not in out:
            out.append(s.speaker_id)
    return out


# -- synthetic corpus ---------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Desk-scale corpus recipe.  Articulator targets are smoothed
    piecewise-constant per-phoneme anchors plus a per-speaker constant offset
    plus Gaussian noise; acoustic frames are a fixed random linear+tanh
    rendering of (phoneme one-hot ++ articulators), so the acoustics genuinely
    encode articulator information."""

    speakers: int = 8
    utterances_per_speaker: int = 20
    speaker_offset_scale: float = 2.0
    noise_scale: float = 0.3
    smoothing: int = 3
    seed: int = 0
    duration_range: tuple = (5, 20)
    phones_range: tuple = (2, 5)
    anchor_scale: float = 8.0
    acoustic_ema_scale: float = 0.1
    hop_s: float = 0.01

    def __post_init__(self):
        if self.smoothing < 1:
            raise ValueError("smoothing width must be >= 1")
        if self.speakers < 1 or self.utterances_per_speaker < 1:
            raise ValueError("speakers and utterances_per_speaker must be >= 1")


def _moving_average(track: np.ndarray, width: int) -> np.ndarray:
    if width == 1:
        return track
    left = width // 2
    padded = np.pad(track, ((left, width - 1 - left), (0, 0)), mode="edge")
    kernel = np.ones(width) / width
    return np.stack([np.convolve(padded[:, c], kernel, mode="valid") for c in range(track.shape[1])], axis=1)


def generate_synthetic(spec: SyntheticSpec, out_dir) -> Path:
    """Write a corpus under ``out_dir`` and return the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    n_phonemes = len(feat.ARPABET_39)
    anchors = rng.uniform(-spec.anchor_scale, spec.anchor_scale, size=(n_phonemes, 12))
    render_w = rng.normal(0.0, 1.0 / np.sqrt(n_phonemes + 12), size=(n_phonemes + 12, 39))
    render_b = rng.uniform(-0.1, 0.1, size=39)
    offsets = rng.normal(0.0, spec.speaker_offset_scale, size=(spec.speakers, 12))

    manifest_rows = []
    for s in range(spec.speakers):
        speaker = f"s{s + 1:02d}"
        spk_dir = out / speaker
        spk_dir.mkdir(exist_ok=True)
        for u in range(spec.utterances_per_speaker):
            utt = f"{speaker}_u{u + 1:03d}"
            n_phones = int(rng.integers(spec.phones_range[0], spec.phones_range[1] + 1))
            labels = rng.integers(0, n_phonemes, size=n_phones)
            durations = rng.integers(spec.duration_range[0], spec.duration_range[1] + 1, size=n_phones)
            frames = int(durations.sum())

            per_frame_label = np.repeat(labels, durations)
            anchor_track = anchors[per_frame_label]
            ema = (_moving_average(anchor_track, spec.smoothing)
                   + offsets[s]
                   + rng.normal(0.0, spec.noise_scale, size=(frames, 12)))
            onehot = np.zeros((frames, n_phonemes))
            onehot[np.arange(frames), per_frame_label] = 1.0
            acoustics = np.tanh(np.concatenate([onehot, ema * spec.acoustic_ema_scale], axis=1) @ render_w + render_b)

            feat_rel = f"{speaker}/{utt}.mfcc.csv"
            align_rel = f"{speaker}/{utt}.align.txt"
            ema_rel = f"{speaker}/{utt}.ema.csv"
            write_matrix_csv(out / feat_rel, acoustics)

            with open(out / align_rel, "w", encoding="utf-8") as fh:
                t0 = 0
                for label, dur in zip(labels, durations):
                    start, end = t0 * spec.hop_s, (t0 + int(dur)) * spec.hop_s
                    fh.write(f"{format_float(start)}\t{format_float(end)}\t{feat.ARPABET_39[label]}\n")
                    t0 += int(dur)

            times = (np.arange(frames) + 0.5) * spec.hop_s
            write_matrix_csv(out / ema_rel, np.column_stack([times, ema]),
                             header=("time_s",) + feat.EMA_CHANNELS)
            manifest_rows.append((utt, speaker, feat_rel, align_rel, ema_rel))

    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(manifest_rows)
    return manifest


# -- checkpoint container -----------------------------------------------------
#
# Byte layout (all integers little-endian):
#
#   offset 0   8 bytes   magic b"ARTINVCK"
#   offset 8   u16       format version (currently 1)
#   offset 10  u32       header length N
#   offset 14  N bytes   UTF-8 JSON header: scenario, seed, hyper,
#                        feature_config_hash, model_config, and "arrays" -
#                        an ordered list of {name, partition, shape}
#   then, per arrays entry in order, raw '<f8' data (prod(shape) * 8 bytes)
#   last 32 bytes        SHA-256 over everything before it
#
# Partition tags: speech_stream / fusion / phoneme_stream / inversion_head
# for parameters, "stats" for the target-normalization buffers.  Loads are
# bit-exact; the checksum turns any single-byte corruption into an error.

MAGIC = b"ARTINVCK"
FORMAT_VERSION = 1


class CheckpointError(DataError):
    """Base for checkpoint container failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


class CheckpointCompatError(CheckpointError):
    """Checkpoint was produced under an incompatible feature configuration."""


@dataclass
class Checkpoint:
    scenario: str | None
    seed: int | None
    hyper: dict
    feature_config_hash: str
    model_config: dict
    arrays: dict = field(default_factory=dict)     # name -> float64 array
    partitions: dict = field(default_factory=dict)  # name -> partition tag


def save_checkpoint(path, model: InversionModel, feature_hash: str,
                    scenario: str | None = None, hyper: dict | None = None,
                    seed: int | None = None) -> None:
    """Binary container: magic, version, JSON header, raw little-endian
    float64 blobs, SHA-256 trailer.  Round-trips bit-exactly."""
    arrays = model.state_arrays()
    entries = []
    for name, arr in arrays.items():
        partition = "stats" if name.startswith("stats.") else model.partition_of(name)
        entries.append({"name": name, "partition": partition, "shape": list(arr.shape)})
    header = {
        "format_version": FORMAT_VERSION,
        "scenario": scenario,
        "seed": seed,
        "hyper": hyper or {},
        "feature_config_hash": feature_hash,
        "model_config": model.config.to_dict(),
        "arrays": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<HI", FORMAT_VERSION, len(header_bytes))
    blob += header_bytes
    for name in arrays:
        blob += np.ascontiguousarray(arrays[name], dtype="<f8").tobytes()
    blob += hashlib.sha256(bytes(blob)).digest()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None

    head_len = len(MAGIC) + struct.calcsize("<HI")
    if len(raw) < head_len + 32:
        raise CheckpointTruncatedError(f"{path}: file too short to be a checkpoint")
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint container")
    version, header_len = struct.unpack_from("<HI", raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")

    digest = raw[-32:]
    body = raw[:-32]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointIntegrityError(f"{path}: checksum mismatch (corrupted or tampered)")

    try:
        header = json.loads(body[head_len:head_len + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointTruncatedError(f"{path}: header unreadable") from None

    arrays = {}
    partitions = {}
    offset = head_len + header_len
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(body):
            raise CheckpointTruncatedError(f"{path}: parameter data truncated at {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(body, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        partitions[entry["name"]] = entry["partition"]
        offset += nbytes
    if offset != len(body):
        raise CheckpointIntegrityError(f"{path}: {len(body) - offset} unexpected trailing bytes")

    return Checkpoint(
        scenario=header["scenario"],
        seed=header["seed"],
        hyper=header["hyper"],
        feature_config_hash=header["feature_config_hash"],
        model_config=header["model_config"],
        arrays=arrays,
        partitions=partitions,
    )


def model_from_checkpoint(ckpt: Checkpoint) -> InversionModel:
    model = InversionModel(ModelConfig.from_dict(ckpt.model_config), seed=ckpt.seed or 0)
    model.load_state_arrays(ckpt.arrays)
    return model


def require_compatible(ckpt: Checkpoint, feature_hash: str, path="checkpoint") -> None:
    if ckpt.feature_config_hash != feature_hash:
        raise CheckpointCompatError(
            f"{path}: feature configuration hash {ckpt.feature_config_hash[:12]}... does not match "
            f"the current configuration {feature_hash[:12]}...; the model was trained on "
            "differently-built features"
        )

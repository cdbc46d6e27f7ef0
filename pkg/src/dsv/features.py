"""Feature extraction, segmentation, the synthetic corpus, and on-disk formats."""
import hashlib
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import ContractViolation, FeatureFormatError, TooShortError

LOG_EPS = 1e-10

FEATURE_MAGIC = b"DSVF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sHHII")  # magic, version, reserved, T, F

MANIFEST_VERSION = 1


@dataclass
class StftConfig:
    sample_rate: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: Optional[int] = None  # defaults to the window length
    n_bins: int = 200

    @property
    def win_length(self):
        return int(round(self.sample_rate * self.window_ms / 1000.0))

    @property
    def hop_length(self):
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def fft_size(self):
        return self.n_fft or self.win_length

    @property
    def frame_rate(self):
        return self.sample_rate / self.hop_length


@dataclass
class SequenceRecord:
    sequence_id: str
    speaker_id: str
    features: np.ndarray
    frame_rate: float = 100.0
    content_labels: Optional[np.ndarray] = None
    split: str = "train"
    group: Optional[str] = None

    def __post_init__(self):
        f = np.asarray(self.features)
        if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] < 1:
            raise ContractViolation(f"{self.sequence_id}: features must be T x F with T, F >= 1")
        if not np.isfinite(f).all():
            raise ContractViolation(f"{self.sequence_id}: non-finite feature values")
        self.features = f

    @property
    def num_frames(self):
        return self.features.shape[0]


@dataclass
class Segment:
    sequence_id: str
    segment_index: int
    start_frame: int
    frames: np.ndarray
    future_frames: Optional[np.ndarray] = None

    @property
    def has_target(self):
        return self.future_frames is not None


# --------------------------------------------------------------------------
# STFT front end


def _frame(signal, win, hop):
    n = 1 + (len(signal) - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    return signal[idx]


def stft_complex(waveform, cfg):
    """Hann-windowed STFT without padding; returns (T, fft_size//2 + 1) complex."""
    win, hop = cfg.win_length, cfg.hop_length
    if hop <= 0:
        raise ContractViolation("hop must be positive")
    if cfg.fft_size < win:
        raise ContractViolation("n_fft must be at least the window length")
    waveform = np.asarray(waveform, dtype=np.float64)
    if len(waveform) < win:
        raise TooShortError(f"waveform has {len(waveform)} samples, one window needs {win}")
    window = np.hanning(win + 1)[:-1]  # periodic Hann
    frames = _frame(waveform, win, hop) * window
    return np.fft.rfft(frames, n=cfg.fft_size, axis=1)


def stft_log_magnitude(waveform, sample_rate=16000, window_ms=25.0, hop_ms=10.0, n_bins=200, n_fft=None):
    """Log-magnitude spectrogram, bins 1..n_bins (DC dropped), ln(|S| + 1e-10)."""
    cfg = StftConfig(sample_rate, window_ms, hop_ms, n_fft, n_bins)
    if cfg.hop_length <= 0:
        raise ContractViolation("hop must be positive")
    if n_bins < 1 or n_bins > cfg.fft_size // 2:
        raise ContractViolation(f"n_bins={n_bins} exceeds the {cfg.fft_size // 2} non-DC bins")
    spec = stft_complex(waveform, cfg)
    return np.log(np.abs(spec[:, 1 : n_bins + 1]) + LOG_EPS)


# --------------------------------------------------------------------------
# segmentation


def segment_sequence(seq, L, shift, m):
    if L < 1 or shift < 1 or m < 0:
        raise ContractViolation(f"bad segmentation parameters L={L} shift={shift} m={m}")
    x = seq.features
    T = x.shape[0]
    segments = []
    for n, start in enumerate(range(0, T - L + 1, shift)):
        future = None
        if start + m + L <= T:
            future = x[start + m : start + m + L]
        segments.append(Segment(seq.sequence_id, n, start, x[start : start + L], future))
    return segments


# --------------------------------------------------------------------------
# synthetic corpus


def make_synthetic_corpus(
    n_speakers=40,
    sequences_per_speaker=12,
    frames_per_sequence=200,
    F=24,
    n_content_classes=8,
    seed=0,
    gamma_spk=1.0,
    sigma_noise=0.3,
    block_len=20,
    n_test_speakers=12,
    dev_per_speaker=1,
):
    """Speaker-offset plus content-template sequences with ground-truth labels.

    The last ``n_test_speakers`` speakers are held out entirely (split
    ``test``); of the remaining speakers, the last ``dev_per_speaker``
    sequences go to ``dev``. Speakers alternate between two groups so that
    per-group conversion conditions can be evaluated.
    """
    for name, v in [("n_speakers", n_speakers), ("sequences_per_speaker", sequences_per_speaker),
                    ("frames_per_sequence", frames_per_sequence), ("F", F),
                    ("n_content_classes", n_content_classes), ("block_len", block_len)]:
        if v < 1:
            raise ContractViolation(f"{name} must be >= 1, got {v}")
    if not 0 <= n_test_speakers < n_speakers:
        raise ContractViolation("n_test_speakers must leave at least one training speaker")
    if not 0 <= dev_per_speaker < sequences_per_speaker:
        raise ContractViolation("dev_per_speaker must leave at least one training sequence")

    rng = np.random.default_rng(seed)
    templates = rng.standard_normal((n_content_classes, F))
    offsets = rng.standard_normal((n_speakers, F)) * gamma_spk
    n_blocks = math.ceil(frames_per_sequence / block_len)

    records = []
    first_test = n_speakers - n_test_speakers
    for s in range(n_speakers):
        speaker_id = f"spk{s:03d}"
        group = "group_a" if s % 2 == 0 else "group_b"
        for u in range(sequences_per_speaker):
            classes = rng.integers(0, n_content_classes, size=n_blocks)
            labels = np.repeat(classes, block_len)[:frames_per_sequence]
            noise = rng.standard_normal((frames_per_sequence, F)) * sigma_noise
            feats = templates[labels] + offsets[s] + noise
            if s >= first_test:
                split = "test"
            elif u >= sequences_per_speaker - dev_per_speaker:
                split = "dev"
            else:
                split = "train"
            records.append(SequenceRecord(
                sequence_id=f"{speaker_id}_u{u:03d}",
                speaker_id=speaker_id,
                features=feats.astype(np.float32),
                frame_rate=100.0,
                content_labels=labels.astype(np.int64),
                split=split,
                group=group,
            ))
    return records


# --------------------------------------------------------------------------
# binary feature files


def write_features(path, matrix):
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise ContractViolation("feature matrix must be 2-D")
    T, F = m.shape
    if T < 1 or F < 1:
        raise ContractViolation(f"refusing to write empty {T}x{F} matrix")
    data = np.ascontiguousarray(m, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, 0, T, F))
        fh.write(data.tobytes())


def read_features(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FeatureFormatError("truncated header", offset=len(raw))
    magic, version, _, T, F = _HEADER.unpack_from(raw, 0)
    if magic != FEATURE_MAGIC:
        raise FeatureFormatError(f"bad magic {magic!r}", offset=0)
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"unsupported version {version}", offset=4)
    if T < 1 or F < 1:
        raise FeatureFormatError(f"invalid shape {T}x{F}", offset=8)
    expected = _HEADER.size + 4 * T * F
    if len(raw) != expected:
        raise FeatureFormatError(f"payload size mismatch: expected {expected} bytes, got {len(raw)}",
                                 offset=min(len(raw), expected))
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(T, F).astype(np.float32)


# --------------------------------------------------------------------------
# normalization


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, records):
        train = [r.features for r in records if r.split == "train"]
        if not train:
            raise ContractViolation("normalization needs at least one training sequence")
        x = np.concatenate(train, axis=0).astype(np.float64)
        std = x.std(axis=0)
        std[std < 1e-8] = 1.0
        return cls(x.mean(axis=0), std)

    @classmethod
    def identity(cls, F):
        return cls(np.zeros(F), np.ones(F))

    def apply(self, x):
        return ((x - self.mean) / self.std).astype(np.float32)

    def invert(self, x):
        return (np.asarray(x, dtype=np.float64) * self.std + self.mean).astype(np.float32)

    def to_dict(self):
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


# --------------------------------------------------------------------------
# manifest


@dataclass
class ManifestEntry:
    sequence_id: str
    speaker_id: str
    path: str
    T: int
    split: str = "train"
    group: Optional[str] = None


@dataclass
class CorpusManifest:
    entries: List[ManifestEntry]
    segmentation: dict
    features: dict
    seed: int
    normalization: dict
    labels_path: Optional[str] = None
    version: int = MANIFEST_VERSION
    root: Optional[str] = field(default=None, repr=False)

    def to_json(self):
        d = asdict(self)
        d.pop("root")
        d["entries"] = sorted(d["entries"], key=lambda e: e["sequence_id"])
        return json.dumps(d, indent=2, sort_keys=True)

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")
        self.root = str(Path(path).parent)

    @classmethod
    def load(cls, path):
        d = json.loads(Path(path).read_text())
        if d.get("version") != MANIFEST_VERSION:
            raise FeatureFormatError(f"unsupported manifest version {d.get('version')}")
        d["entries"] = sorted((ManifestEntry(**e) for e in d["entries"]), key=lambda e: e.sequence_id)
        return cls(**d, root=str(Path(path).parent))

    def resolve(self, rel):
        return Path(self.root or ".") / rel

    @property
    def normalizer(self):
        return Normalizer.from_dict(self.normalization)

    def load_records(self, splits=None):
        labels = {}
        if self.labels_path:
            with np.load(self.resolve(self.labels_path)) as z:
                labels = {k: z[k] for k in z.files}
        frame_rate = float(self.features.get("frame_rate", 100.0))
        out = []
        for e in self.entries:
            if splits is not None and e.split not in splits:
                continue
            feats = read_features(self.resolve(e.path))
            if feats.shape != (e.T, self.features["F"]):
                raise FeatureFormatError(
                    f"{e.path}: shape {feats.shape} disagrees with manifest ({e.T}, {self.features['F']})")
            out.append(SequenceRecord(e.sequence_id, e.speaker_id, feats, frame_rate,
                                      labels.get(e.sequence_id), e.split, e.group))
        return out

    def corpus_hash(self):
        h = hashlib.sha256(self.to_json().encode())
        for e in self.entries:
            h.update(self.resolve(e.path).read_bytes())
        if self.labels_path:
            h.update(self.resolve(self.labels_path).read_bytes())
        return h.hexdigest()


def write_corpus(records, out_dir, L=20, shift=20, m=3, stft=None, seed=0):
    """Write feature files, labels and ``manifest.json``; returns the manifest."""
    ids = [r.sequence_id for r in records]
    if len(set(ids)) != len(ids):
        raise ContractViolation("sequence_id values must be unique")
    Fs = {r.features.shape[1] for r in records}
    if len(Fs) != 1:
        raise ContractViolation(f"feature dimension differs across corpus: {sorted(Fs)}")
    out_dir = Path(out_dir)
    (out_dir / "feats").mkdir(parents=True, exist_ok=True)
    records = sorted(records, key=lambda r: r.sequence_id)
    entries = []
    for r in records:
        rel = os.path.join("feats", f"{r.sequence_id}.feat")
        write_features(out_dir / rel, r.features)
        entries.append(ManifestEntry(r.sequence_id, r.speaker_id, rel, r.num_frames, r.split, r.group))
    labels_path = None
    if any(r.content_labels is not None for r in records):
        labels_path = "labels.npz"
        np.savez(out_dir / labels_path,
                 **{r.sequence_id: r.content_labels for r in records if r.content_labels is not None})
    feat_info = {"F": Fs.pop(), "frame_rate": float(records[0].frame_rate),
                 "stft": asdict(stft) if stft is not None else None}
    manifest = CorpusManifest(
        entries=entries,
        segmentation={"L": L, "shift": shift, "m": m},
        features=feat_info,
        seed=seed,
        normalization=Normalizer.fit(records).to_dict(),
        labels_path=labels_path,
    )
    manifest.save(out_dir / "manifest.json")
    return manifest


def prepare_audio_corpus(audio_dir, stft, test_fraction=0.25, dev_per_speaker=1, seed=0):
    """Read ``<audio_dir>/<speaker>/<utt>.wav`` into SequenceRecords with a speaker-disjoint test split."""
    from scipy.io import wavfile

    audio_dir = Path(audio_dir)
    speakers = sorted(p for p in audio_dir.iterdir() if p.is_dir())
    if not speakers:
        raise ContractViolation(f"no speaker directories under {audio_dir}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(speakers))
    n_test = int(round(test_fraction * len(speakers)))
    test_set = {speakers[i].name for i in order[:n_test]}
    records = []
    for gi, spk in enumerate(speakers):
        wavs = sorted(spk.glob("*.wav"))
        for u, wav in enumerate(wavs):
            rate, data = wavfile.read(wav)
            if rate != stft.sample_rate:
                raise ContractViolation(f"{wav}: sample rate {rate} != configured {stft.sample_rate}")
            if data.ndim > 1:
                data = data.mean(axis=1)
            if np.issubdtype(data.dtype, np.integer):
                data = data / float(np.iinfo(data.dtype).max)
            feats = stft_log_magnitude(data, stft.sample_rate, stft.window_ms, stft.hop_ms,
                                       stft.n_bins, stft.n_fft)
            if spk.name in test_set:
                split = "test"
            elif u >= len(wavs) - dev_per_speaker:
                split = "dev"
            else:
                split = "train"
            records.append(SequenceRecord(f"{spk.name}_{wav.stem}", spk.name, feats.astype(np.float32),
                                          stft.frame_rate, None, split, None))
    return records

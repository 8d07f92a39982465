"""Synthetic paired teacher-feature / student-signal benchmark.

The generator builds two kinds of asymmetry between the modalities.

Semantic gap
    Each class has a unit-norm prototype in R^D; each image adds its own
    jitter to it. Teacher features carry that whole content vector plus a
    nuisance term orthogonal to a rank-r "semantic" subspace. The student
    only ever sees the projection of the image content onto that subspace.

Fidelity gap
    The student latent is rendered into a C x T signal through a fixed
    channel-loading matrix and per-dimension temporal waveforms that are
    non-zero only inside the response window. The rendering is blurred across
    neighbouring channels (volume conduction), contaminated by the previous
    stimulus' response shifted into the head of the window (temporal
    aliasing), and corrupted by white noise. Each stored signal is the mean
    of R independently corrupted repetitions.

All values are rounded to float32 precision so that the on-disk formats
(float32 payloads) round-trip bit-exactly.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .core_math import Rng, as_matrix, digest_of

TRAIN = "train"
VAL = "val"
TEST = "test-unseen"
SPLITS = (TRAIN, VAL, TEST)

FEATURE_MAGIC = b"ATSF"
SIGNAL_MAGIC = b"ATSS"
FORMAT_VERSION = 1
MAX_ELEMENTS = 1 << 32

FEATURES_FILE = "features.atsf"
SIGNALS_FILE = "signals.atss"
LABELS_FILE = "labels.csv"
GEN_CONFIG_FILE = "gen_config.json"


class FeatureFormatError(ValueError):
    """Base class for malformed feature/signal files."""


class BadMagicError(FeatureFormatError):
    pass


class TruncatedPayloadError(FeatureFormatError):
    pass


class DimensionOverflowError(FeatureFormatError):
    pass


@dataclass(frozen=True)
class GenConfig:
    n_seen_classes: int = 64
    n_unseen_classes: int = 16
    images_per_class: int = 10
    repetitions: int = 4
    teacher_dim: int = 128
    semantic_rank: int = 16
    channels: int = 16
    time_steps: int = 100
    window_start: int = 10
    window_end: int = 60
    mixing_bandwidth: float = 1.0
    alias_strength: float = 0.5
    noise_sigma: float = 0.5
    jitter: float = 0.3
    nuisance_scale: float = 3.0
    nuisance_spread: float = 1.0
    semantic_share: float = 0.8
    n_categories: int = 5
    category_strength: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_seen_classes < 2:
            raise ValueError("n_seen_classes must be >= 2")
        if self.n_unseen_classes < 2:
            raise ValueError("n_unseen_classes must be >= 2")
        if self.images_per_class < 2:
            raise ValueError("images_per_class must be >= 2 (one image per seen class is held out for validation)")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if not 1 <= self.semantic_rank < self.teacher_dim:
            raise ValueError(
                f"semantic_rank must satisfy 1 <= r < teacher_dim, got r={self.semantic_rank}, D={self.teacher_dim}"
            )
        if self.channels < 1 or self.time_steps < 2:
            raise ValueError("channels must be >= 1 and time_steps >= 2")
        if not 0 <= self.window_start < self.window_end <= self.time_steps:
            raise ValueError(
                f"window_start/window_end must satisfy 0 <= start < end <= time_steps, "
                f"got [{self.window_start}, {self.window_end}) with time_steps={self.time_steps}"
            )
        if not 0.0 <= self.alias_strength <= 1.0:
            raise ValueError("alias_strength must lie in [0, 1]")
        for name in ("mixing_bandwidth", "noise_sigma", "jitter", "nuisance_scale", "nuisance_spread", "category_strength"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.semantic_share <= 1.0:
            raise ValueError("semantic_share must lie in [0, 1]")
        if self.n_categories < 1:
            raise ValueError("n_categories must be >= 1")

    @property
    def n_classes(self) -> int:
        return self.n_seen_classes + self.n_unseen_classes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown GenConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SyntheticDataset:
    teacher_features: np.ndarray  # (N, D)
    student_signals: np.ndarray  # (N, C, T)
    labels: np.ndarray  # (N,) class ids
    splits: np.ndarray  # (N,) split tags
    image_index: np.ndarray  # (N,) image number within its class
    categories: np.ndarray  # (n_classes,) super-category per class id
    config: GenConfig | None = None

    def __len__(self) -> int:
        return len(self.labels)

    def indices(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
        return np.flatnonzero(self.splits == split)

    def subset(self, split: str) -> "SyntheticDataset":
        idx = self.indices(split)
        return SyntheticDataset(
            self.teacher_features[idx],
            self.student_signals[idx],
            self.labels[idx],
            self.splits[idx],
            self.image_index[idx],
            self.categories,
            self.config,
        )

    def category_of(self, labels) -> np.ndarray:
        return self.categories[np.asarray(labels)]


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def channel_mixing_matrix(channels: int, bandwidth: float) -> np.ndarray:
    """Row-normalized Gaussian blur over channel index; identity at bandwidth 0."""
    if bandwidth == 0:
        return np.eye(channels)
    idx = np.arange(channels)
    k = np.exp(-0.5 * ((idx[:, None] - idx[None, :]) / bandwidth) ** 2)
    return k / k.sum(axis=1, keepdims=True)


def temporal_waveforms(rank: int, time_steps: int, start: int, end: int, rng: Rng) -> np.ndarray:
    """One Gaussian bump per latent dimension, zero outside ``[start, end)``."""
    t = np.arange(time_steps)
    width = max((end - start) / 8.0, 1.0)
    centers = rng.uniform(start, end, size=rank)
    w = np.exp(-0.5 * ((t[None, :] - centers[:, None]) / width) ** 2)
    w[:, :start] = 0.0
    w[:, end:] = 0.0
    return w


@dataclass
class GeneratorState:
    """Fixed random structure shared by all samples of one dataset."""

    basis: np.ndarray  # (D, r) orthonormal semantic subspace
    prototypes: np.ndarray  # (n_classes, D)
    loading: np.ndarray  # (C, r)
    waveforms: np.ndarray  # (r, T)
    mixing: np.ndarray  # (C, C)

    def student_latent(self, content: np.ndarray) -> np.ndarray:
        """Semantic coordinates of a teacher-space content vector, rescaled to O(1) norm."""
        d, r = self.basis.shape
        return self.basis.T @ content * np.sqrt(d / r)

    def render(self, latent: np.ndarray) -> np.ndarray:
        """Clean windowed response (C x T) for one latent vector."""
        return (self.loading * latent[None, :]) @ self.waveforms


def _prototype_part(rng: Rng, n_classes: int, dim: int, config: GenConfig) -> np.ndarray:
    centers = _unit(rng.normal(size=(config.n_categories, dim)))
    raw = _unit(rng.normal(size=(n_classes, dim)))
    cats = np.arange(n_classes) % config.n_categories
    return _unit(raw + config.category_strength * centers[cats])


def build_generator_state(config: GenConfig) -> GeneratorState:
    rng = Rng(config.seed)
    d, r = config.teacher_dim, config.semantic_rank
    q, _ = np.linalg.qr(rng.child("basis").normal(size=(d, d)))
    basis, complement = q[:, :r], q[:, r:]
    sem = _prototype_part(rng.child("prototypes:semantic"), config.n_classes, r, config)
    rest = _prototype_part(rng.child("prototypes:complement"), config.n_classes, d - r, config)
    share = config.semantic_share
    prototypes = np.sqrt(share) * sem @ basis.T + np.sqrt(1.0 - share) * rest @ complement.T
    loading = rng.child("loading").normal(size=(config.channels, r))
    waveforms = temporal_waveforms(r, config.time_steps, config.window_start, config.window_end, rng.child("waveforms"))
    mixing = channel_mixing_matrix(config.channels, config.mixing_bandwidth)
    return GeneratorState(basis, prototypes, loading, waveforms, mixing)


def _shift_into_head(response: np.ndarray, shift: int) -> np.ndarray:
    """Move a response ``shift`` steps earlier, zero-filling the tail."""
    out = np.zeros_like(response)
    if shift < response.shape[1]:
        out[:, : response.shape[1] - shift] = response[:, shift:]
    return out


def _class_samples(config: GenConfig, state: GeneratorState, label: int, rng: Rng):
    d = config.teacher_dim
    proto = state.prototypes[label]
    proj_perp = np.eye(d) - state.basis @ state.basis.T
    m = config.images_per_class
    jitter = rng.normal(size=(m, d)) * (config.jitter / np.sqrt(d))
    nuisance = _unit(rng.normal(size=(m, d)) @ proj_perp)
    nuisance *= config.nuisance_scale * np.exp(config.nuisance_spread * rng.normal(size=(m, 1)))
    content = proto[None, :] + jitter
    teacher = _unit(content + nuisance)

    shift = (config.window_end - config.window_start) // 2
    signals = np.empty((m, config.channels, config.time_steps))
    for i in range(m):
        clean = state.render(state.student_latent(content[i]))
        acc = np.zeros((config.channels, config.time_steps))
        for _ in range(config.repetitions):
            response = clean
            if config.alias_strength > 0:
                prev = int(rng.integers(0, config.n_classes))
                prev_resp = state.render(state.student_latent(state.prototypes[prev]))
                response = response + config.alias_strength * _shift_into_head(prev_resp, shift)
            rep = state.mixing @ response
            if config.noise_sigma > 0:
                rep = rep + rng.normal(size=rep.shape, scale=config.noise_sigma)
            acc += rep
        signals[i] = acc / config.repetitions
    return teacher, signals


def generate(config: GenConfig) -> SyntheticDataset:
    state = build_generator_state(config)
    root = Rng(config.seed)
    feats, sigs, labels, splits, image_idx = [], [], [], [], []
    m = config.images_per_class
    for label in range(config.n_classes):
        teacher, signals = _class_samples(config, state, label, root.child(f"class:{label}"))
        feats.append(teacher)
        sigs.append(signals)
        labels.extend([label] * m)
        image_idx.extend(range(m))
        if label < config.n_seen_classes:
            splits.extend([TRAIN] * (m - 1) + [VAL])
        else:
            splits.extend([TEST] * m)
    return SyntheticDataset(
        _f32(np.concatenate(feats)),
        _f32(np.concatenate(sigs)),
        np.asarray(labels, dtype=np.int64),
        np.asarray(splits),
        np.asarray(image_idx, dtype=np.int64),
        np.arange(config.n_classes) % config.n_categories,
        config,
    )


# ---------------------------------------------------------------------------
# binary formats

_HEADER = struct.Struct("<4sHII")
_SIGNAL_EXT = struct.Struct("<II")


def _pack(magic: bytes, m: np.ndarray, ext: bytes = b"") -> bytes:
    rows, cols = m.shape
    payload = np.ascontiguousarray(m, dtype="<f4").tobytes()
    return _HEADER.pack(magic, FORMAT_VERSION, rows, cols) + ext + payload


def _unpack_header(buf: bytes, magic: bytes, path) -> tuple[int, int]:
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: expected at least {_HEADER.size} header bytes, got {len(buf)}")
    got_magic, version, rows, cols = _HEADER.unpack_from(buf)
    if got_magic != magic:
        raise BadMagicError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise FeatureFormatError(f"{path}: unsupported format version {version}")
    if rows * cols > MAX_ELEMENTS:
        raise DimensionOverflowError(f"{path}: {rows}x{cols} exceeds the {MAX_ELEMENTS}-element limit")
    return rows, cols


def _read_payload(buf: bytes, offset: int, rows: int, cols: int, path) -> np.ndarray:
    expected = offset + rows * cols * 4
    if len(buf) != expected:
        kind = TruncatedPayloadError if len(buf) < expected else FeatureFormatError
        raise kind(f"{path}: expected {expected} bytes for a {rows}x{cols} payload, got {len(buf)}")
    data = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=offset)
    return data.astype(np.float64).reshape(rows, cols)


def save_features(m, path) -> Path:
    path = Path(path)
    path.write_bytes(_pack(FEATURE_MAGIC, as_matrix(m)))
    return path


def load_features(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    rows, cols = _unpack_header(buf, FEATURE_MAGIC, path)
    return _read_payload(buf, _HEADER.size, rows, cols, path)


def save_signals(x, path) -> Path:
    x = np.asarray(x, dtype=np.float64)
    n, c, t = x.shape
    path = Path(path)
    path.write_bytes(_pack(SIGNAL_MAGIC, x.reshape(n, c * t), _SIGNAL_EXT.pack(c, t)))
    return path


def load_signals(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    rows, cols = _unpack_header(buf, SIGNAL_MAGIC, path)
    if len(buf) < _HEADER.size + _SIGNAL_EXT.size:
        raise TruncatedPayloadError(f"{path}: missing channel/time header extension")
    c, t = _SIGNAL_EXT.unpack_from(buf, _HEADER.size)
    if c * t != cols:
        raise DimensionOverflowError(f"{path}: channels x time_steps = {c}x{t} does not match row width {cols}")
    flat = _read_payload(buf, _HEADER.size + _SIGNAL_EXT.size, rows, cols, path)
    return flat.reshape(rows, c, t)


def save_bundle(ds: SyntheticDataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_features(ds.teacher_features, out / FEATURES_FILE)
    save_signals(ds.student_signals, out / SIGNALS_FILE)
    with (out / LABELS_FILE).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "label", "split"])
        for i, (y, s) in enumerate(zip(ds.labels, ds.splits)):
            w.writerow([i, int(y), s])
    config = ds.config.to_dict() if ds.config else None
    meta = {"config": config, "config_digest": digest_of(config), "categories": ds.categories.tolist()}
    (out / GEN_CONFIG_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def load_bundle(path) -> SyntheticDataset:
    root = Path(path)
    feats = load_features(root / FEATURES_FILE)
    sigs = load_signals(root / SIGNALS_FILE)
    labels, splits = [], []
    with (root / LABELS_FILE).open(newline="") as fh:
        for i, row in enumerate(csv.DictReader(fh)):
            if int(row["index"]) != i:
                raise FeatureFormatError(f"{root / LABELS_FILE}: row {i} has index {row['index']}")
            labels.append(int(row["label"]))
            splits.append(row["split"])
    if not (len(labels) == feats.shape[0] == sigs.shape[0]):
        raise FeatureFormatError(
            f"{root}: {feats.shape[0]} features, {sigs.shape[0]} signals, {len(labels)} labels"
        )
    labels_arr = np.asarray(labels, dtype=np.int64)
    image_idx = np.zeros(len(labels), dtype=np.int64)
    seen: dict[int, int] = {}
    for i, y in enumerate(labels):
        image_idx[i] = seen.get(y, 0)
        seen[y] = image_idx[i] + 1
    meta_path = root / GEN_CONFIG_FILE
    config = None
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        categories = np.asarray(meta["categories"], dtype=np.int64)
        config = GenConfig.from_dict(meta["config"]) if meta.get("config") else None
    else:
        categories = np.arange(labels_arr.max() + 1 if len(labels) else 0)
    return SyntheticDataset(feats, sigs, labels_arr, np.asarray(splits), image_idx, categories, config)

"""On-disk formats and the synthetic dataset generator.

Feature file (``.dxft``), little-endian::

    b"DXFT" | u32 version (=1) | u32 T | u32 D | T*D float32, frame-major

A ``.csv`` file with T rows of D comma-separated numbers is accepted too.

Checkpoint (``.dxck``), little-endian::

    b"DXCK" | u32 version (=1) | u32 n | n bytes of UTF-8 "key=value" lines
    | u32 count | count x (u32 name_len | name | u32 rank | rank x u32 extent
    | float32 payload)

Payloads carry no checksum: a flipped byte loads fine and changes the model.
"""
import csv
import os
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import CheckpointError, DataError, FormatError, LengthError
from .model import ModelConfig, param_shapes
from .tensor import Tensor

FEATURE_MAGIC = b"DXFT"
CHECKPOINT_MAGIC = b"DXCK"
FORMAT_VERSION = 1
FEATURE_EXT = ".dxft"
LABEL_EXT = ".txt"


# ---------------------------------------------------------------------------
# features


def write_feature_file(path, features):
    """Write ``features[D, T]`` (Tensor or array) in the binary feature format."""
    arr = features.data if isinstance(features, Tensor) else np.asarray(features)
    if arr.ndim != 2:
        raise FormatError(f"features must be [D, T], got shape {arr.shape}")
    d, t = arr.shape
    payload = np.ascontiguousarray(arr.T, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<III", FORMAT_VERSION, t, d) + payload)


def _read_feature_bytes(buf, path):
    if len(buf) < 16:
        raise LengthError(f"{path}: header needs 16 bytes, file has {len(buf)}")
    if buf[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r} at byte 0, expected {FEATURE_MAGIC!r}")
    version, t, d = struct.unpack_from("<III", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    if t == 0 or d == 0:
        raise FormatError(f"{path}: empty feature matrix (T={t}, D={d}) at byte 8")
    expected = 16 + 4 * t * d
    if len(buf) != expected:
        raise LengthError(f"{path}: expected {expected} bytes for T={t}, D={d}, got {len(buf)}")
    arr = np.frombuffer(buf, dtype="<f4", offset=16).reshape(t, d)
    return Tensor(arr.T.astype(np.float32))


def _read_feature_csv(path):
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from None
            if len(rows[-1]) != len(rows[0]):
                raise FormatError(f"{path}: line {lineno} has {len(rows[-1])} columns, expected {len(rows[0])}")
    if not rows:
        raise FormatError(f"{path}: no feature rows")
    return Tensor(np.asarray(rows, dtype=np.float32).T)


def read_feature_file(path):
    """Load a feature file as a float32 Tensor ``[D, T]``."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return _read_feature_csv(path)
    return _read_feature_bytes(path.read_bytes(), path)


# ---------------------------------------------------------------------------
# labels, mapping, splits


@dataclass(frozen=True)
class ClassMapping:
    names: tuple

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise DataError("class names must be unique")
        for n in self.names:
            if not n or any(ch.isspace() for ch in n):
                raise DataError(f"invalid class name {n!r}")

    def __len__(self):
        return len(self.names)

    def id_of(self, name):
        return self.names.index(name)

    def to_text(self):
        return "".join(f"{i} {n}\n" for i, n in enumerate(self.names))

    def write(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def read(cls, path):
        entries = {}
        text = Path(path).read_text(encoding="utf-8")
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2 or not parts[0].isdigit():
                raise DataError(f"{path}: line {lineno}: expected '<id> <name>', got {line!r}")
            i = int(parts[0])
            if i in entries:
                raise DataError(f"{path}: line {lineno}: duplicate id {i}")
            entries[i] = parts[1]
        if sorted(entries) != list(range(len(entries))):
            raise DataError(f"{path}: class ids must be dense from 0, got {sorted(entries)}")
        return cls(tuple(entries[i] for i in range(len(entries))))


def read_labels(path, mapping):
    """One class name per line -> list of ids. A trailing newline is fine; blank lines are not."""
    lookup = {n: i for i, n in enumerate(mapping.names)}
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    out = []
    for lineno, line in enumerate(lines, 1):
        name = line.strip()
        if name not in lookup:
            raise DataError(f"{path}: line {lineno}: unknown label {name!r}")
        out.append(lookup[name])
    return out


def write_labels(path, labels, mapping):
    Path(path).write_text("".join(f"{mapping.names[int(i)]}\n" for i in labels), encoding="utf-8")


def read_split(path):
    ids = [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate video ids in split manifest")
    return ids


def write_split(path, ids):
    Path(path).write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")


@dataclass
class SegmentationSample:
    id: str
    features: Tensor  # [D, T]
    labels: np.ndarray  # [T] int64

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (self.features.shape[1],):
            raise DataError(
                f"{self.id}: paired-length mismatch, features have T={self.features.shape[1]} "
                f"but labels have {self.labels.shape[0]}"
            )

    @property
    def T(self):
        return self.features.shape[1]

    @property
    def D(self):
        return self.features.shape[0]


def _feature_path(features_dir, vid):
    base = Path(features_dir) / vid
    for ext in (FEATURE_EXT, ".csv"):
        if base.with_name(vid + ext).exists():
            return base.with_name(vid + ext)
    raise DataError(f"no feature file for {vid!r} in {features_dir}")


def list_video_ids(features_dir):
    return sorted(p.stem for p in Path(features_dir).iterdir() if p.suffix in (FEATURE_EXT, ".csv"))


def load_dataset(features_dir, labels_dir, mapping, ids=None):
    """Read samples for ``ids`` (default: every feature file), validating D and label ranges."""
    ids = list_video_ids(features_dir) if ids is None else list(ids)
    samples = []
    for vid in ids:
        feats = read_feature_file(_feature_path(features_dir, vid))
        labels = read_labels(Path(labels_dir) / (vid + LABEL_EXT), mapping)
        samples.append(SegmentationSample(vid, feats, labels))
    check_feature_dims(samples)
    return samples


def check_feature_dims(samples):
    if not samples:
        return None
    dims = {}
    for s in samples:
        dims.setdefault(s.D, []).append(s.id)
    if len(dims) > 1:
        common = max(dims, key=lambda d: len(dims[d]))
        offenders = sorted(f"{vid} (D={d})" for d, vids in dims.items() if d != common for vid in vids)
        raise DataError(f"inconsistent feature dims; expected D={common}, offenders: {', '.join(offenders)}")
    return next(iter(dims))


# ---------------------------------------------------------------------------
# checkpoints


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse_value(text, typ):
    if typ is bool:
        if text not in ("true", "false"):
            raise CheckpointError(f"bad boolean {text!r}")
        return text == "true"
    return typ(text)


@dataclass
class Checkpoint:
    cfg: ModelConfig
    params: dict
    step: int = 0
    meta: dict = None  # extra key=value entries, strings
    extra: dict = None  # extra named tensors, e.g. optimizer moments

    def __post_init__(self):
        self.meta = dict(self.meta or {})
        self.extra = dict(self.extra or {})


def encode_checkpoint(ckpt):
    lines = [f"{f.name}={_format_value(getattr(ckpt.cfg, f.name))}" for f in fields(ModelConfig)]
    lines.append(f"step={ckpt.step}")
    for k in sorted(ckpt.meta):
        if k in {f.name for f in fields(ModelConfig)} or k == "step":
            raise CheckpointError(f"meta key {k!r} collides with a reserved key")
        lines.append(f"{k}={ckpt.meta[k]}")
    cfg_bytes = ("\n".join(lines) + "\n").encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", FORMAT_VERSION, len(cfg_bytes)), cfg_bytes]
    tensors = list(ckpt.params.items()) + list(ckpt.extra.items())
    chunks.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        arr = np.asarray(arr)
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def save_checkpoint(path, ckpt):
    data = encode_checkpoint(ckpt)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise LengthError(
                f"{self.path}: truncated {what} at byte {self.pos}: need {n} bytes, {len(self.buf) - self.pos} left"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def decode_checkpoint(buf, path="<bytes>"):
    r = _Reader(buf, path)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic at byte 0")
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version} at byte 4")
    cfg_text = r.take(r.u32("config length"), "config block").decode("utf-8")
    entries = {}
    for line in cfg_text.splitlines():
        if line:
            k, _, v = line.partition("=")
            entries[k] = v
    types = {f.name: f.type for f in fields(ModelConfig)}
    try:
        cfg = ModelConfig(**{k: _parse_value(entries.pop(k), t) for k, t in types.items() if k in entries})
        step = int(entries.pop("step", "0"))
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid config block: {exc}") from None
    tensors = {}
    for _ in range(r.u32("tensor count")):
        name = r.take(r.u32("name length"), "tensor name").decode("utf-8")
        rank = r.u32(f"rank of {name}")
        shape = tuple(r.u32(f"extent of {name}") for _ in range(rank))
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(4 * n, f"payload of {name}"), dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float32)
    if r.pos != len(buf):
        raise LengthError(f"{path}: {len(buf) - r.pos} trailing bytes after byte {r.pos}")
    expected = param_shapes(cfg)
    params, extra = {}, {}
    for name, arr in tensors.items():
        if name in expected:
            params[name] = arr
        else:
            extra[name] = arr
    for name, shape in expected.items():
        if name not in params:
            raise CheckpointError(f"{path}: tensor {name!r} missing for the stored config")
        if params[name].shape != shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {params[name].shape}, config implies {shape}"
            )
    # extra tensors keyed "<slot>/<param name>" must match their parameter
    for name, arr in extra.items():
        _, _, base = name.partition("/")
        if base not in expected:
            raise CheckpointError(f"{path}: tensor {name!r} does not belong to any parameter")
        if arr.shape != expected[base]:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {arr.shape}, expected {expected[base]}")
    params = {name: params[name] for name in expected}
    return Checkpoint(cfg, params, step, entries, extra)


def load_checkpoint(path, expect=None):
    """Read a checkpoint; ``expect`` maps ModelConfig keys to required values."""
    ckpt = decode_checkpoint(Path(path).read_bytes(), path)
    for key, value in (expect or {}).items():
        if getattr(ckpt.cfg, key) != value:
            raise CheckpointError(f"{path}: checkpoint has {key}={getattr(ckpt.cfg, key)}, expected {value}")
    return ckpt


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthSpec:
    num_videos: int = 25
    num_classes: int = 4
    t_min: int = 100
    t_max: int = 300
    mean_duration: float = 30.0
    signal_scale: float = 4.0
    noise: float = 1.0
    input_dim: int = 32
    num_folds: int = 4
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("noise", "seed"):
                if v < 0:
                    raise DataError(f"{f.name} must be >= 0, got {v}")
            elif v <= 0:
                raise DataError(f"{f.name} must be positive, got {v}")
        if self.num_classes < 2:
            raise DataError("num_classes must be >= 2")
        if self.t_min > self.t_max:
            raise DataError(f"t_min {self.t_min} exceeds t_max {self.t_max}")
        if self.mean_duration < 1:
            raise DataError("mean_duration must be >= 1 frame")
        if self.num_folds > self.num_videos:
            raise DataError("num_folds cannot exceed num_videos")


def synth_mapping(num_classes):
    return ClassMapping(tuple(f"action_{c}" for c in range(num_classes)))


def synth_samples(spec):
    """Generate ``(samples, folds)`` in memory; folds are lists of video ids partitioning the set."""
    rng = np.random.default_rng(spec.seed)
    centroids = rng.normal(0.0, spec.signal_scale, size=(spec.num_classes, spec.input_dim))
    p = 1.0 / spec.mean_duration
    samples = []
    for v in range(spec.num_videos):
        t = int(rng.integers(spec.t_min, spec.t_max + 1))
        labels = np.empty(t, dtype=np.int64)
        pos = 0
        cls = int(rng.integers(spec.num_classes))
        while pos < t:
            dur = int(rng.geometric(p))
            labels[pos:pos + dur] = cls
            pos += dur
            nxt = int(rng.integers(spec.num_classes - 1))
            cls = nxt if nxt < cls else nxt + 1
        noise = rng.normal(0.0, 1.0, size=(spec.input_dim, t)) * spec.noise
        feats = (centroids[labels].T + noise).astype(np.float32)
        samples.append(SegmentationSample(f"vid_{v:03d}", Tensor(feats), labels))
    order = rng.permutation(spec.num_videos)
    folds = [sorted(samples[i].id for i in order[k::spec.num_folds]) for k in range(spec.num_folds)]
    return samples, folds


def synth_generate(spec, out_dir):
    """Write a synthetic dataset: features/, labels/, mapping.txt and splits/fold{k}.txt."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    (out / "splits").mkdir(parents=True, exist_ok=True)
    mapping = synth_mapping(spec.num_classes)
    mapping.write(out / "mapping.txt")
    samples, folds = synth_samples(spec)
    for s in samples:
        write_feature_file(out / "features" / (s.id + FEATURE_EXT), s.features)
        write_labels(out / "labels" / (s.id + LABEL_EXT), s.labels, mapping)
    for k, ids in enumerate(folds, 1):
        write_split(out / "splits" / f"fold{k}.txt", ids)
    return samples, folds

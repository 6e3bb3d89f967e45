"""Embedding sets, binary containers (EMB1 / FRM1), frame pooling, and a synthetic two-view task.

EMB1 layout (little-endian throughout)::

    "EMB1" | u32 version=1 | u32 dim | u64 count
    count x ( u64 id | u8 label | u8 domain | dim x f32 )

FRM1 uses the same header with magic "FRM1"; each record is
``u64 id | u8 label | u8 domain | u32 n_frames | n_frames*dim x f32``.

Labels: 0 bonafide, 1 fake, 255 unlabeled. Domains: 0 "E", 1 "C".
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from thama.errors import DataFormatError, FramingError, ShapeError

EMB_MAGIC = b"EMB1"
FRM_MAGIC = b"FRM1"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIIQ")
FRAME_RECORD_HEAD = struct.Struct("<QBBI")

BONAFIDE, FAKE, UNLABELED = 0, 1, 255
DOMAIN_TAGS = {"E": 0, "C": 1}
DOMAIN_NAMES = {v: k for k, v in DOMAIN_TAGS.items()}

# representation sizes of the upstream foundation models
FM_DIMS = {
    "x-vector": 512,
    "whisper": 512,
    "wav2vec2": 768,
    "wavlm": 768,
    "unispeech-sat": 768,
    "hubert": 768,
    "music2vec-v1": 768,
    "mert-v1-95m": 768,
    "mert-v0": 768,
    "mert-v0-public": 768,
    "mert-v1-330m": 1024,
    "xls-r": 1280,
    "mms": 1280,
}


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("label", "u1"), ("domain", "u1"), ("vector", "<f4", (dim,))])


class EmbeddingRecord(NamedTuple):
    id: int
    label: int
    domain: int
    vector: np.ndarray


@dataclass
class EmbeddingSet:
    """Column-wise storage of records sharing one dimensionality."""

    dim: int
    ids: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        if self.dim < 1:
            raise ShapeError("embedding dim must be positive")
        self.ids = np.asarray(self.ids, dtype=np.uint64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
        self.domains = np.asarray(self.domains, dtype=np.uint8).reshape(-1)
        self.vectors = np.asarray(self.vectors, dtype=np.float32).reshape(-1, self.dim)
        n = len(self.ids)
        if not len(self.labels) == len(self.domains) == self.vectors.shape[0] == n:
            raise ShapeError("embedding set columns have different lengths")
        if not np.isin(self.labels, (BONAFIDE, FAKE, UNLABELED)).all():
            raise DataFormatError("labels must be 0, 1 or 255")
        if len(np.unique(self.ids)) != n:
            raise DataFormatError("record ids must be unique within a set")

    @classmethod
    def empty(cls, dim):
        return cls(dim, [], [], [], np.zeros((0, dim), dtype=np.float32))

    @classmethod
    def from_records(cls, dim, records):
        records = list(records)
        if not records:
            return cls.empty(dim)
        ids, labels, domains, vectors = zip(*records)
        return cls(dim, ids, labels, domains, np.stack(vectors))

    def __len__(self):
        return len(self.ids)

    def __iter__(self) -> Iterator[EmbeddingRecord]:
        for i in range(len(self)):
            yield EmbeddingRecord(int(self.ids[i]), int(self.labels[i]), int(self.domains[i]), self.vectors[i])

    def subset(self, index):
        return EmbeddingSet(self.dim, self.ids[index], self.labels[index], self.domains[index], self.vectors[index])

    def equals(self, other) -> bool:
        """Bitwise equality of every column."""
        return (
            self.dim == other.dim
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.domains, other.domains)
            and self.vectors.tobytes() == other.vectors.tobytes()
        )


def write_emb1(eset: EmbeddingSet, path) -> None:
    rec = np.empty(len(eset), dtype=_record_dtype(eset.dim))
    rec["id"], rec["label"], rec["domain"], rec["vector"] = eset.ids, eset.labels, eset.domains, eset.vectors
    Path(path).write_bytes(HEADER.pack(EMB_MAGIC, FORMAT_VERSION, eset.dim, len(eset)) + rec.tobytes())


def _read_header(data: bytes, magic: bytes, path):
    if len(data) < HEADER.size:
        raise FramingError(f"{path}: file shorter than the {HEADER.size}-byte header")
    got_magic, version, dim, count = HEADER.unpack_from(data)
    if got_magic != magic:
        raise DataFormatError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    if dim == 0:
        raise DataFormatError(f"{path}: dim must be positive")
    return dim, count


def read_emb1(path) -> EmbeddingSet:
    data = Path(path).read_bytes()
    dim, count = _read_header(data, EMB_MAGIC, path)
    dtype = _record_dtype(dim)
    payload = len(data) - HEADER.size
    if payload < count * dtype.itemsize:
        index = payload // dtype.itemsize
        raise FramingError(f"{path}: truncated inside record {index} of {count}", record_index=index)
    if payload > count * dtype.itemsize:
        raise FramingError(f"{path}: {payload - count * dtype.itemsize} trailing bytes after {count} records")
    rec = np.frombuffer(data, dtype=dtype, count=count, offset=HEADER.size)
    return EmbeddingSet(dim, rec["id"].copy(), rec["label"].copy(), rec["domain"].copy(), rec["vector"].copy())


@dataclass
class FrameRecord:
    id: int
    label: int
    domain: int
    frames: np.ndarray  # [n_frames, dim]


@dataclass
class FrameSet:
    dim: int
    records: list[FrameRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)


def write_frm1(fset: FrameSet, path) -> None:
    chunks = [HEADER.pack(FRM_MAGIC, FORMAT_VERSION, fset.dim, len(fset))]
    for r in fset.records:
        frames = np.asarray(r.frames, dtype="<f4")
        if frames.ndim != 2 or frames.shape[1] != fset.dim:
            raise ShapeError(f"record {r.id}: frames {frames.shape} do not match dim {fset.dim}")
        chunks.append(FRAME_RECORD_HEAD.pack(r.id, r.label, r.domain, frames.shape[0]))
        chunks.append(frames.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_frm1(path) -> FrameSet:
    data = Path(path).read_bytes()
    dim, count = _read_header(data, FRM_MAGIC, path)
    pos = HEADER.size
    records = []
    for i in range(count):
        if pos + FRAME_RECORD_HEAD.size > len(data):
            raise FramingError(f"{path}: truncated header of record {i} of {count}", record_index=i)
        rid, label, domain, n_frames = FRAME_RECORD_HEAD.unpack_from(data, pos)
        pos += FRAME_RECORD_HEAD.size
        nbytes = 4 * n_frames * dim
        if pos + nbytes > len(data):
            raise FramingError(f"{path}: truncated frames of record {i} of {count}", record_index=i)
        frames = np.frombuffer(data, dtype="<f4", count=n_frames * dim, offset=pos).reshape(n_frames, dim)
        pos += nbytes
        records.append(FrameRecord(rid, label, domain, frames.copy()))
    if pos != len(data):
        raise FramingError(f"{path}: {len(data) - pos} trailing bytes after {count} records")
    return FrameSet(dim, records)


def pool_frames(frames: np.ndarray) -> np.ndarray:
    """Average over the frame axis of an [n, d] matrix of hidden states."""
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ShapeError(f"pool_frames needs an [n >= 1, d] matrix, got shape {frames.shape}")
    return frames.astype(np.float64).mean(axis=0).astype(np.float32)


def pool_frame_set(fset: FrameSet) -> EmbeddingSet:
    vectors = []
    for i, r in enumerate(fset.records):
        if r.frames.shape[0] == 0:
            raise FramingError(f"record {i} (id {r.id}) has no frames to pool", record_index=i)
        vectors.append(pool_frames(r.frames))
    if not vectors:
        return EmbeddingSet.empty(fset.dim)
    return EmbeddingSet(
        fset.dim,
        [r.id for r in fset.records],
        [r.label for r in fset.records],
        [r.domain for r in fset.records],
        np.stack(vectors),
    )


def _parse_domain(value: str) -> int:
    value = value.strip()
    if value in DOMAIN_TAGS:
        return DOMAIN_TAGS[value]
    return int(value)


def read_manifest(path) -> EmbeddingSet:
    """Ingest a CSV manifest with columns id,label,domain,path.

    Each path names a ``.npy`` file holding either a pooled vector [d] or a
    frame matrix [n, d], which is averaged. Relative paths resolve against
    the manifest's directory.
    """
    path = Path(path)
    records = []
    dim = None
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {"id", "label", "domain", "path"}:
            raise DataFormatError(f"{path}: manifest header must be id,label,domain,path")
        for i, row in enumerate(reader):
            try:
                rid, label, domain = int(row["id"]), int(row["label"]), _parse_domain(row["domain"])
                arr = np.load(path.parent / row["path"])
            except (ValueError, OSError) as exc:
                raise FramingError(f"{path}: row {i}: {exc}", record_index=i) from None
            vec = pool_frames(arr) if arr.ndim == 2 else np.asarray(arr, dtype=np.float32)
            if vec.ndim != 1:
                raise FramingError(f"{path}: row {i}: expected a vector or frame matrix", record_index=i)
            if dim is None:
                dim = vec.shape[0]
            elif vec.shape[0] != dim:
                raise FramingError(f"{path}: row {i}: dim {vec.shape[0]} != {dim}", record_index=i)
            records.append((rid, label, domain, vec))
    if dim is None:
        raise DataFormatError(f"{path}: manifest has no rows, so the dimension is unknown")
    return EmbeddingSet.from_records(dim, records)


# synthetic data

SPLITS = ("train", "dev", "test")


@dataclass(frozen=True)
class SynthConfig:
    d1: int = 64
    d2: int = 64
    n_train: int = 2730
    n_dev: int = 910
    n_test: int = 1750
    sigma: float = 0.5
    theta_deg: float = 30.0
    seed: int = 42
    domains: tuple[str, ...] = ("E", "C")

    def __post_init__(self):
        if min(self.n_train, self.n_dev, self.n_test) <= 0:
            raise ValueError("split counts must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if min(self.d1, self.d2) < 2:
            raise ValueError("view dims must be >= 2 to hold a rotation plane")
        if not set(self.domains) <= set(DOMAIN_TAGS):
            raise ValueError(f"domains must be drawn from {sorted(DOMAIN_TAGS)}")

    def count(self, split):
        return {"train": self.n_train, "dev": self.n_dev, "test": self.n_test}[split]


@dataclass
class SyntheticData:
    config: SynthConfig
    splits: dict[str, dict[str, tuple[EmbeddingSet, EmbeddingSet]]]
    directions: dict[str, tuple[np.ndarray, np.ndarray]]  # domain -> (u, v)
    planes: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]  # u, u_perp, v, v_perp

    def __getitem__(self, domain):
        return self.splits[domain]


def signal_plane(d: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit signal direction (constant) and an orthogonal unit direction (a +/- step).

    Both survive convolution, ReLU and pair max-pooling, so either domain is
    learnable by the convolutional models; a model fitted to the constant
    direction sees mean-zero input along the step, so rotating towards it
    removes the signal it relies on.
    """
    u = np.full(d, 1.0 / np.sqrt(d))
    step = np.where(np.arange(d) < d / 2, 1.0, -1.0)
    step = step - (step @ u) * u
    return u, step / np.linalg.norm(step)


def generate_synthetic(config: SynthConfig = SynthConfig()) -> SyntheticData:
    """Seeded two-view bilinear task, one copy per domain.

    Per record, signs a, b are uniform on {-1, +1}; label is 1 iff a*b > 0;
    view1 = a*u + noise, view2 = b*v + noise with isotropic N(0, sigma^2 I).
    Domain "C" replaces u (v) by its rotation through theta towards the
    orthogonal direction u_perp (v_perp); see :func:`signal_plane`.
    """
    split_seeds = np.random.SeedSequence(config.seed).spawn(len(DOMAIN_TAGS) * len(SPLITS))
    u, u_perp = signal_plane(config.d1)
    v, v_perp = signal_plane(config.d2)
    theta = np.deg2rad(config.theta_deg)
    directions = {
        "E": (u, v),
        "C": (np.cos(theta) * u + np.sin(theta) * u_perp, np.cos(theta) * v + np.sin(theta) * v_perp),
    }
    splits = {}
    next_id = 0
    for domain in ("E", "C"):
        tag = DOMAIN_TAGS[domain]
        du, dv = directions[domain]
        per_split = {}
        for s, split in enumerate(SPLITS):
            n = config.count(split)
            rng = np.random.default_rng(split_seeds[tag * len(SPLITS) + s])
            a = rng.choice((-1.0, 1.0), size=n)
            b = rng.choice((-1.0, 1.0), size=n)
            labels = (a * b > 0).astype(np.uint8)
            x1 = a[:, None] * du + config.sigma * rng.standard_normal((n, config.d1))
            x2 = b[:, None] * dv + config.sigma * rng.standard_normal((n, config.d2))
            ids = np.arange(next_id, next_id + n, dtype=np.uint64)
            next_id += n
            domains = np.full(n, tag, dtype=np.uint8)
            per_split[split] = (
                EmbeddingSet(config.d1, ids, labels, domains, x1),
                EmbeddingSet(config.d2, ids, labels, domains, x2),
            )
        if domain in config.domains:
            splits[domain] = per_split
    return SyntheticData(config, splits, directions, (u, u_perp, v, v_perp))


class Batch(NamedTuple):
    views: tuple[np.ndarray, ...]
    labels: np.ndarray
    ids: np.ndarray


def check_aligned(view1: EmbeddingSet, view2: EmbeddingSet | None) -> None:
    if view2 is not None and not np.array_equal(view1.ids, view2.ids):
        raise DataFormatError("view sets are not aligned by record id")


def batch_iter(view1: EmbeddingSet, view2: EmbeddingSet | None, batch_size: int, shuffle_seed=None) -> Iterator[Batch]:
    """One epoch of aligned batches; the final short batch is emitted."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    check_aligned(view1, view2)
    n = len(view1)
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        views = (view1.vectors[idx],) if view2 is None else (view1.vectors[idx], view2.vectors[idx])
        yield Batch(views, view1.labels[idx], view1.ids[idx])

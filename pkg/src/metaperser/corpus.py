"""Annotated-utterance data model, on-disk formats, splits and episode sampling.

Annotation manifest: one JSON object per line with the keys ``utt_id``,
``annotator_id``, ``session`` (1-5) and ``labels`` (emotion names).

Embedding files (``.mpse``): ``b"MPSE"``, uint16 format version, uint32 L, T,
D, then L*T*D float32 values in (layer, frame, dim) order, all little-endian.
A store is either a directory holding ``<utt_id>.mpse`` files or a single
container file (``b"MPSC"``, uint16 version, uint32 entry count, then per
entry a uint32 name length, the UTF-8 utterance id and one MPSE block).
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from metaperser.errors import ContractError, FormatError

log = logging.getLogger(__name__)

EMOTIONS = (
    "frustrated",
    "angry",
    "sad",
    "disgust",
    "excited",
    "fear",
    "neutral",
    "surprise",
    "happy",
)
NUM_CLASSES = len(EMOTIONS)
EMOTION_INDEX = {name: i for i, name in enumerate(EMOTIONS)}
SESSIONS = (1, 2, 3, 4, 5)

EMBEDDING_MAGIC = b"MPSE"
CONTAINER_MAGIC = b"MPSC"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIII")


def multi_hot(labels):
    """Emotion names -> 0/1 float vector over :data:`EMOTIONS`."""
    vec = np.zeros(NUM_CLASSES)
    for name in labels:
        vec[EMOTION_INDEX[name]] = 1.0
    return vec


def label_names(vec):
    return tuple(EMOTIONS[i] for i in np.flatnonzero(np.asarray(vec) > 0))


@dataclass(frozen=True)
class EmbeddingSequence:
    """Layered frame features (L x T x D) for one utterance."""

    utt_id: str
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 3 or min(values.shape) < 1:
            raise FormatError(f"{self.utt_id}: expected L x T x D values, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise FormatError(f"{self.utt_id}: non-finite embedding values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def layers(self):
        return self.values.shape[0]

    @property
    def frames(self):
        return self.values.shape[1]

    @property
    def dim(self):
        return self.values.shape[2]

    def pooled(self):
        """Per-layer mean over frames, shape (L, D)."""
        return self.values.mean(axis=1)


@dataclass(frozen=True)
class AnnotationRecord:
    utt_id: str
    annotator_id: str
    session: int
    labels: tuple

    def __post_init__(self):
        labels = tuple(self.labels)
        if not labels:
            raise FormatError(f"{self.utt_id}/{self.annotator_id}: record has no labels")
        unknown = [name for name in labels if name not in EMOTION_INDEX]
        if unknown:
            raise FormatError(f"{self.utt_id}/{self.annotator_id}: unknown emotion(s) {unknown}")
        if self.session not in SESSIONS:
            raise FormatError(f"{self.utt_id}/{self.annotator_id}: session {self.session} not in 1-5")
        object.__setattr__(self, "labels", labels)

    def to_json(self):
        return json.dumps(
            {
                "utt_id": self.utt_id,
                "annotator_id": self.annotator_id,
                "session": self.session,
                "labels": list(self.labels),
            }
        )


@dataclass(frozen=True)
class Batch:
    """Model-ready examples: frame-pooled features (N, L, D) and multi-hot labels (N, C)."""

    x: np.ndarray
    y: np.ndarray
    ids: tuple = ()

    def __post_init__(self):
        if self.x.ndim != 3 or self.y.ndim != 2 or len(self.x) != len(self.y):
            raise ContractError(f"inconsistent batch shapes {self.x.shape} / {self.y.shape}")

    def __len__(self):
        return len(self.x)

    def take(self, idx):
        idx = np.asarray(idx, dtype=int)
        ids = tuple(self.ids[i] for i in idx) if self.ids else ()
        return Batch(self.x[idx], self.y[idx], ids)

    @classmethod
    def from_pairs(cls, pairs):
        """Build from (EmbeddingSequence, labels) pairs; labels are names or a 0/1 vector."""
        pairs = list(pairs)
        if not pairs:
            raise ContractError("batch must not be empty")
        xs, ys = [], []
        for seq, lab in pairs:
            xs.append(seq.pooled())
            lab = np.asarray(lab)
            ys.append(multi_hot(lab) if lab.dtype.kind in "US" else lab.astype(np.float64))
        return cls(np.stack(xs), np.stack(ys), tuple(seq.utt_id for seq, _ in pairs))


class EmbeddingStore:
    """In-memory map utt_id -> EmbeddingSequence with cached frame pooling."""

    def __init__(self, sequences=()):
        self._seqs = {}
        self._pooled = {}
        for seq in sequences:
            self.add(seq)

    def add(self, seq):
        self._seqs[seq.utt_id] = seq
        self._pooled.pop(seq.utt_id, None)

    def __getitem__(self, utt_id):
        return self._seqs[utt_id]

    def __contains__(self, utt_id):
        return utt_id in self._seqs

    def __len__(self):
        return len(self._seqs)

    def __iter__(self):
        return iter(self._seqs.values())

    @property
    def ids(self):
        return list(self._seqs)

    def pooled(self, utt_ids):
        out = []
        for u in utt_ids:
            p = self._pooled.get(u)
            if p is None:
                p = self._pooled[u] = self._seqs[u].pooled()
            out.append(p)
        return np.stack(out)

    # -- persistence --------------------------------------------------------

    def save_dir(self, path):
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        for seq in self:
            _check_file_id(seq.utt_id)
            (path / f"{seq.utt_id}.mpse").write_bytes(encode_embedding(seq.values))

    def save_container(self, path):
        parts = [CONTAINER_MAGIC, struct.pack("<HI", FORMAT_VERSION, len(self))]
        for seq in self:
            name = seq.utt_id.encode("utf-8")
            parts += [struct.pack("<I", len(name)), name, encode_embedding(seq.values)]
        Path(path).write_bytes(b"".join(parts))

    @classmethod
    def load(cls, path):
        """Open a store directory or container file."""
        path = Path(path)
        if path.is_dir():
            return cls(
                EmbeddingSequence(p.stem, decode_embedding(p.read_bytes(), source=p))
                for p in sorted(path.glob("*.mpse"))
            )
        if not path.exists():
            raise FileNotFoundError(path)
        data = path.read_bytes()
        if data[:4] == EMBEDDING_MAGIC:
            return cls([EmbeddingSequence(path.stem, decode_embedding(data, source=path))])
        return cls(_decode_container(data, path))


def _check_file_id(utt_id):
    if not utt_id or "/" in utt_id or "\\" in utt_id or utt_id in (".", ".."):
        raise FormatError(f"utterance id {utt_id!r} cannot be used as a file name")


def encode_embedding(values):
    values = np.asarray(values)
    L, T, D = values.shape
    header = _HEADER.pack(EMBEDDING_MAGIC, FORMAT_VERSION, L, T, D)
    return header + np.ascontiguousarray(values, dtype="<f4").tobytes()


def decode_embedding(data, offset=0, source="<bytes>"):
    """Parse one MPSE block into float64 values of shape (L, T, D)."""
    return decode_embedding_at(data, offset, source)[0]


def decode_embedding_at(data, offset, source):
    """Like :func:`decode_embedding`, also returning the offset just past the block."""
    if len(data) - offset < _HEADER.size:
        raise FormatError(f"{source}: truncated embedding header")
    magic, version, L, T, D = _HEADER.unpack_from(data, offset)
    if magic != EMBEDDING_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{source}: unsupported format version {version}")
    start = offset + _HEADER.size
    end = start + 4 * L * T * D
    if end > len(data):
        raise FormatError(f"{source}: truncated embedding payload")
    values = np.frombuffer(data, dtype="<f4", count=L * T * D, offset=start)
    return values.astype(np.float64).reshape(L, T, D), end


def _decode_container(data, source):
    if data[:4] != CONTAINER_MAGIC or len(data) < 10:
        raise FormatError(f"{source}: not an embedding file or container")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{source}: unsupported container version {version}")
    offset = 10
    seqs = []
    for _ in range(count):
        if offset + 4 > len(data):
            raise FormatError(f"{source}: truncated container")
        (n,) = struct.unpack_from("<I", data, offset)
        name = data[offset + 4 : offset + 4 + n].decode("utf-8")
        values, offset = decode_embedding_at(data, offset + 4 + n, source)
        seqs.append(EmbeddingSequence(name, values))
    return seqs


@dataclass(frozen=True)
class AnnotatorTask:
    """All records of one annotator, joined to their embeddings."""

    annotator_id: str
    records: tuple
    store: EmbeddingStore = field(repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        bad = {r.annotator_id for r in self.records} - {self.annotator_id}
        if bad:
            raise ContractError(f"task {self.annotator_id} holds records of {sorted(bad)}")

    def __len__(self):
        return len(self.records)

    @property
    def utt_ids(self):
        return [r.utt_id for r in self.records]

    def labels(self):
        return np.stack([multi_hot(r.labels) for r in self.records])

    def pairs(self):
        return [(self.store[r.utt_id], r.labels) for r in self.records]

    def where(self, keep):
        return AnnotatorTask(self.annotator_id, [r for r in self.records if keep(r)], self.store)

    def batch(self, indices=None):
        recs = self.records if indices is None else [self.records[i] for i in indices]
        if not recs:
            raise ContractError(f"empty batch requested from task {self.annotator_id}")
        ids = tuple(r.utt_id for r in recs)
        y = np.stack([multi_hot(r.labels) for r in recs])
        return Batch(self.store.pooled(ids), y, ids)


@dataclass(frozen=True)
class FewShotSplit:
    train: Batch
    test: Batch
    seed: int
    annotator_id: str = ""


def read_manifest(path):
    """Parse an annotation manifest into records (no embedding join)."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("not a JSON object")
                missing = {"utt_id", "annotator_id", "session", "labels"} - set(obj)
                if missing:
                    raise ValueError(f"missing field(s) {sorted(missing)}")
                if not isinstance(obj["labels"], list) or isinstance(obj["session"], bool):
                    raise ValueError("labels must be a list and session an integer")
                records.append(
                    AnnotationRecord(
                        str(obj["utt_id"]), str(obj["annotator_id"]), int(obj["session"]), tuple(obj["labels"])
                    )
                )
            except (ValueError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return records


def write_manifest(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def group_tasks(records, store, min_records=0):
    """Group records by annotator (first-appearance order) into tasks."""
    missing = sorted({r.utt_id for r in records if r.utt_id not in store})
    if missing:
        shown = ", ".join(missing[:20]) + (" ..." if len(missing) > 20 else "")
        raise FormatError(f"{len(missing)} record(s) reference missing embeddings: {shown}")
    by_annotator = {}
    for r in records:
        by_annotator.setdefault(r.annotator_id, []).append(r)
    tasks = []
    for ann, recs in by_annotator.items():
        if len(recs) < min_records:
            log.warning("excluding annotator %s: %d records < threshold %d", ann, len(recs), min_records)
            continue
        tasks.append(AnnotatorTask(ann, recs, store))
    return tasks


def load_manifest(annotation_path, store, min_records=0):
    """Load annotator tasks from a manifest joined against an embedding store.

    ``store`` may be an :class:`EmbeddingStore` or a path to one. Annotators
    with fewer than ``min_records`` records are dropped with a warning.
    """
    if not isinstance(store, EmbeddingStore):
        store = EmbeddingStore.load(store)
    return group_tasks(read_manifest(annotation_path), store, min_records)


def _find(tasks, annotator_id):
    for t in tasks:
        if t.annotator_id == annotator_id:
            return t
    raise ContractError(f"unknown annotator id {annotator_id!r}")


def split_seen(tasks, test_id, val_id):
    """Annotator-disjoint split; utterances may be shared across the three parts."""
    if test_id == val_id:
        raise ContractError("test and validation annotators must differ")
    test, val = _find(tasks, test_id), _find(tasks, val_id)
    train = [t for t in tasks if t.annotator_id not in (test_id, val_id)]
    return train, val, test


def split_unseen(tasks, test_id, val_id, test_sessions=(5,)):
    """Session-disjoint split: training and validation from sessions 1-4, test from session 5."""
    if test_id == val_id:
        raise ContractError("test and validation annotators must differ")
    _find(tasks, val_id)
    test = _find(tasks, test_id).where(lambda r: r.session in test_sessions)
    test_utts = set(test.utt_ids)

    def keep(r):
        return r.session not in test_sessions and r.utt_id not in test_utts

    val = _find(tasks, val_id).where(keep)
    train = [t.where(keep) for t in tasks if t.annotator_id not in (test_id, val_id)]
    train = [t for t in train if len(t)]
    leaked = test_utts.intersection(u for t in train + [val] for u in t.utt_ids)
    assert not leaked, f"session split leaked utterances {sorted(leaked)[:5]}"
    return train, val, test


def sample_episode(task, k, q, seed):
    """Draw disjoint K-shot adaptation and Q-shot evaluation sets from one annotator."""
    if k < 1 or q < 1:
        raise ContractError(f"K and Q must be positive, got K={k}, Q={q}")
    if len(task) < k + q:
        raise ContractError(
            f"annotator {task.annotator_id} has {len(task)} records, needs K+Q={k + q} "
            f"(short by {k + q - len(task)})"
        )
    perm = np.random.default_rng(seed).permutation(len(task))
    return FewShotSplit(task.batch(perm[:k]), task.batch(perm[k : k + q]), seed, task.annotator_id)

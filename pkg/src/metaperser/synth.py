"""Synthetic annotator corpora with per-annotator label distributions.

Each utterance has a latent emotion drawn from a shared prior. Its embedding
comes from that emotion's Gaussian; every annotator relabels the latent
emotion through its own confusion matrix, chosen so the annotator's label
marginal matches a target distribution.
"""

from dataclasses import dataclass, field

import numpy as np

from metaperser.corpus import (
    EMOTIONS,
    NUM_CLASSES,
    SESSIONS,
    AnnotationRecord,
    EmbeddingSequence,
    EmbeddingStore,
    group_tasks,
)
from metaperser.errors import ConfigError, ContractError

# percentages per emotion, columns in EMOTIONS order
SEEN_ROWS = {
    "C-E1": (38.16, 13.21, 12.73, 0.13, 24.07, 1.68, 5.02, 0.20, 4.79),
    "C-E2": (12.12, 22.83, 17.53, 0.38, 7.01, 0.45, 17.35, 2.85, 19.48),
    "C-E4": (24.66, 9.57, 8.98, 0.08, 11.53, 0.48, 36.78, 1.679, 6.24),
    "C-E5": (16.45, 11.46, 4.07, 5.73, 0.55, 6.10, 48.43, 1.48, 5.73),
    "C-E6": (30.61, 9.87, 9.37, 1.01, 16.21, 1.51, 13.09, 4.43, 13.90),
}
UNSEEN_ROWS = {
    "C-E1": (40.13, 10.33, 14.72, 0.12, 22.06, 1.62, 5.43, 0.23, 5.37),
    "C-E2": (12.44, 21.43, 17.18, 0.37, 7.51, 0.43, 17.92, 2.83, 19.89),
    "C-E4": (26.65, 6.85, 9.33, 0.06, 13.71, 1.52, 35.28, 1.14, 5.46),
    "C-E5": (8.16, 6.12, 13.27, 9.18, 2.04, 27.55, 33.67, 0.00, 0.00),
    "C-E6": (14.48, 3.45, 0.00, 0.00, 37.93, 0.00, 22.76, 2.76, 18.62),
}


def coupling_confusion(prior, target):
    """Row-stochastic M with prior @ M == target that keeps as much mass on the diagonal as possible.

    Matched mass min(prior, target) stays put; the excess of over-represented
    latent classes is spread over the deficits in proportion to their size.
    """
    prior = np.asarray(prior, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    diag = np.minimum(prior, target)
    excess, deficit = prior - diag, target - diag
    joint = np.diag(diag)
    if excess.sum() > 1e-15:
        joint += np.outer(excess, deficit) / excess.sum()
    return joint / prior[:, None]


@dataclass
class AnnotatorProfile:
    annotator_id: str
    distribution: np.ndarray
    confusion: np.ndarray = None


@dataclass
class SynthPreset:
    """Annotator label profiles plus embedding geometry."""

    annotators: list
    layers: int = 2
    frames: int = 8
    dim: int = 32
    separation: float = 2.0
    layer_informativeness: tuple = (0.5, 1.0)
    frame_noise_share: float = 0.25
    second_label_prob: float = 0.05
    prior: np.ndarray = field(default=None)

    def __post_init__(self):
        if not self.annotators:
            raise ConfigError("annotators", "preset needs at least one annotator")
        if len(self.layer_informativeness) != self.layers:
            raise ConfigError("layer_informativeness", f"needs {self.layers} entries")
        if self.dim < NUM_CLASSES:
            raise ConfigError("dim", f"must be >= {NUM_CLASSES} to give every emotion its own direction")
        self.distributions = []
        for a in self.annotators:
            d = np.asarray(a.distribution, dtype=np.float64)
            if d.shape != (NUM_CLASSES,) or np.any(d < 0) or abs(d.sum() - 1) > 1e-3:
                raise ConfigError("distribution", f"annotator {a.annotator_id} row must be 9 non-negative shares summing to 1")
            self.distributions.append(d / d.sum())
        if self.prior is None:
            self.prior = np.mean(self.distributions, axis=0)
        self.prior = np.asarray(self.prior, dtype=np.float64)
        # derived matrices depend on the prior, so they live on the preset, not the profile
        self.confusions = []
        for a, d in zip(self.annotators, self.distributions):
            m = coupling_confusion(self.prior, d) if a.confusion is None else np.asarray(a.confusion, dtype=np.float64)
            if m.shape != (NUM_CLASSES, NUM_CLASSES) or np.any(m < 0):
                raise ConfigError("confusion", f"annotator {a.annotator_id} needs a non-negative 9x9 matrix")
            zero = np.flatnonzero(m.sum(axis=1) == 0)
            if zero.size:
                raise ConfigError("confusion", f"annotator {a.annotator_id} has all-zero rows for {[EMOTIONS[i] for i in zero]}")
            if np.any(np.abs(m.sum(axis=1) - 1) > 1e-9):
                raise ConfigError("confusion", f"annotator {a.annotator_id} rows must sum to 1")
            self.confusions.append(m)

    def subset(self, count):
        """Same geometry and prior, first ``count`` annotators."""
        return SynthPreset(
            self.annotators[:count],
            self.layers,
            self.frames,
            self.dim,
            self.separation,
            self.layer_informativeness,
            self.frame_noise_share,
            self.second_label_prob,
            self.prior,
        )

    @property
    def annotator_ids(self):
        return [a.annotator_id for a in self.annotators]


def _profiles(rows, prefix=None):
    out = []
    for name, row in rows.items():
        aid = name if prefix is None else prefix + name.split("-", 1)[1]
        out.append(AnnotatorProfile(aid, np.asarray(row) / 100.0))
    return out


def preset(name="iemocap-ext", **geometry):
    """Named presets: ``iemocap-ext`` (10 annotators), ``seen`` / ``unseen`` (5 each), ``uniform``."""
    if name == "iemocap-ext":
        profiles = _profiles(SEEN_ROWS) + _profiles(UNSEEN_ROWS, prefix="U-")
    elif name == "seen":
        profiles = _profiles(SEEN_ROWS)
    elif name == "unseen":
        profiles = _profiles(UNSEEN_ROWS)
    elif name == "uniform":
        profiles = [AnnotatorProfile(f"A{i + 1}", np.full(NUM_CLASSES, 1 / NUM_CLASSES)) for i in range(5)]
    else:
        raise ConfigError("preset", f"unknown preset {name!r}")
    return SynthPreset(profiles, **geometry)


def with_permuted_annotator(base, annotator_id, permutation):
    """Copy of ``base`` where ``annotator_id`` maps latent emotion e to permutation[e] deterministically."""
    perm = np.asarray(permutation)
    if sorted(perm.tolist()) != list(range(NUM_CLASSES)):
        raise ConfigError("permutation", "must be a permutation of the 9 class indices")
    if annotator_id not in base.annotator_ids:
        raise ConfigError("annotator", f"unknown annotator {annotator_id!r}")
    profiles = []
    for a, m in zip(base.annotators, base.confusions):
        if a.annotator_id == annotator_id:
            m = np.eye(NUM_CLASSES)[perm]
        profiles.append(AnnotatorProfile(a.annotator_id, base.prior @ m, m))
    return SynthPreset(
        profiles,
        base.layers,
        base.frames,
        base.dim,
        base.separation,
        base.layer_informativeness,
        base.frame_noise_share,
        base.second_label_prob,
        base.prior,
    )


def class_means(p, rng):
    """Orthogonal emotion directions scaled so every pair sits ``separation`` apart."""
    q, _ = np.linalg.qr(rng.normal(size=(p.dim, NUM_CLASSES)))
    return q.T * (p.separation / np.sqrt(2.0))


def _labels(row, rng, second_prob):
    first = int(rng.choice(NUM_CLASSES, p=row))
    labels = [first]
    if rng.random() < second_prob:
        rest = row.copy()
        rest[first] = 0.0
        if rest.sum() > 0:
            labels.append(int(rng.choice(NUM_CLASSES, p=rest / rest.sum())))
    return tuple(EMOTIONS[i] for i in labels)


def generate_records(p, samples, seed, pool=None):
    """Pure function of (preset, counts, seed): annotation records, embedding store, latent classes."""
    if samples < 1:
        raise ConfigError("samples", "must be >= 1")
    pool = samples if pool is None else pool
    if pool < samples:
        raise ConfigError("pool", "utterance pool must hold at least one annotator's samples")
    rng = np.random.default_rng(seed)
    means = class_means(p, rng)
    latent = rng.choice(NUM_CLASSES, size=pool, p=p.prior)
    sessions = rng.choice(SESSIONS, size=pool)
    # split the unit within-class variance of the pooled feature between utterance and frame noise
    utt_sd = np.sqrt(1.0 - p.frame_noise_share)
    frame_sd = np.sqrt(p.frame_noise_share * p.frames)
    store = EmbeddingStore()
    ids = [f"syn{i:05d}" for i in range(pool)]
    for i, e in enumerate(latent):
        scale = np.asarray(p.layer_informativeness)[:, None, None]
        centre = scale * means[e][None, None, :]
        utt = rng.normal(scale=utt_sd, size=(p.layers, 1, p.dim))
        frames = rng.normal(scale=frame_sd, size=(p.layers, p.frames, p.dim))
        store.add(EmbeddingSequence(ids[i], centre + utt + frames))
    records = []
    for a, m in zip(p.annotators, p.confusions):
        chosen = np.sort(rng.choice(pool, size=samples, replace=False)) if pool > samples else np.arange(pool)
        for i in chosen:
            labels = _labels(m[latent[i]], rng, p.second_label_prob)
            records.append(AnnotationRecord(ids[i], a.annotator_id, int(sessions[i]), labels))
    return records, store, latent


def generate_synthetic(p, annotators=None, samples=600, seed=0, pool=None):
    """Annotator tasks and the embedding store for a synthetic corpus.

    ``annotators`` keeps the first n profiles of the preset (all when None).
    """
    if annotators is not None:
        if not 1 <= annotators <= len(p.annotators):
            raise ContractError(f"preset has {len(p.annotators)} annotators, asked for {annotators}")
        p = p.subset(annotators)
    records, store, _ = generate_records(p, samples, seed, pool)
    return group_tasks(records, store), store

"""Downstream emotion head and its class-balanced loss.

The head mixes SSL layers with softmax-normalised weights, mean-pools over
frames, then applies ``linear1 -> ReLU -> linear2 -> softmax``. Because mixing
and pooling are both linear they commute, so the model consumes per-layer
frame means of shape (N, L, D) (see :meth:`EmbeddingSequence.pooled`).
"""

from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from metaperser import autodiff as ad
from metaperser.corpus import Batch, EmbeddingSequence
from metaperser.errors import ContractError, ShapeError

PARAM_NAMES = ("layer_weights", "linear1.weight", "linear1.bias", "linear2.weight", "linear2.bias")
# Order of the "layer" axis of per-layer learning-rate tables.
LAYER_GROUPS = ("layer_weights", "linear1", "linear2")
DEFAULT_HIDDEN = 256
DEFAULT_BETA = 0.999


def layer_group(name):
    return LAYER_GROUPS.index(name.split(".", 1)[0])


class ModelParams(Mapping):
    """Immutable named parameter collection of the head."""

    def __init__(self, tensors):
        missing = set(PARAM_NAMES) - set(tensors)
        extra = set(tensors) - set(PARAM_NAMES)
        if missing or extra:
            raise ContractError(f"bad parameter names: missing {sorted(missing)}, unexpected {sorted(extra)}")
        self._t = {}
        for name in PARAM_NAMES:
            arr = np.array(tensors[name], dtype=np.float64)
            arr.setflags(write=False)
            self._t[name] = arr
        L, D, H, C = self.dims
        expected = {
            "layer_weights": (L,),
            "linear1.weight": (D, H),
            "linear1.bias": (H,),
            "linear2.weight": (H, C),
            "linear2.bias": (C,),
        }
        for name, shape in expected.items():
            if self._t[name].shape != shape:
                raise ShapeError(f"ModelParams[{name}]", self._t[name].shape, shape)

    def __getitem__(self, name):
        return self._t[name]

    def __iter__(self):
        return iter(PARAM_NAMES)

    def __len__(self):
        return len(PARAM_NAMES)

    def __repr__(self):
        L, D, H, C = self.dims
        return f"ModelParams(L={L}, D={D}, H={H}, C={C})"

    @property
    def dims(self):
        """(L, D, H, C)."""
        D, H = self._t["linear1.weight"].shape
        return self._t["layer_weights"].shape[0], D, H, self._t["linear2.weight"].shape[1]

    @property
    def num_parameters(self):
        return sum(a.size for a in self._t.values())

    @classmethod
    def random(cls, layers, dim, hidden=DEFAULT_HIDDEN, classes=9, rng=None):
        """Uniform fan-in initialisation; layer weights start equal."""
        rng = np.random.default_rng(rng)
        b1, b2 = 1 / np.sqrt(dim), 1 / np.sqrt(hidden)
        return cls(
            {
                "layer_weights": np.zeros(layers),
                "linear1.weight": rng.uniform(-b1, b1, (dim, hidden)),
                "linear1.bias": rng.uniform(-b1, b1, hidden),
                "linear2.weight": rng.uniform(-b2, b2, (hidden, classes)),
                "linear2.bias": rng.uniform(-b2, b2, classes),
            }
        )

    @classmethod
    def zeros(cls, layers, dim, hidden=DEFAULT_HIDDEN, classes=9):
        return cls(
            {
                "layer_weights": np.zeros(layers),
                "linear1.weight": np.zeros((dim, hidden)),
                "linear1.bias": np.zeros(hidden),
                "linear2.weight": np.zeros((hidden, classes)),
                "linear2.bias": np.zeros(classes),
            }
        )

    def replace(self, updates):
        return ModelParams({**self._t, **updates})

    def equals(self, other):
        """Bitwise equality of every tensor."""
        return all(np.array_equal(self[n], other[n]) and self[n].shape == other[n].shape for n in PARAM_NAMES)

    def variables(self, names=PARAM_NAMES):
        """Graph nodes for every tensor; those in ``names`` are differentiable leaves."""
        return {n: (ad.variable if n in names else ad.constant)(self._t[n], name=n) for n in PARAM_NAMES}

    def flat(self):
        return np.concatenate([self._t[n].ravel() for n in PARAM_NAMES])

    def from_flat(self, vec):
        out, i = {}, 0
        for n in PARAM_NAMES:
            size = self._t[n].size
            out[n] = np.asarray(vec[i : i + size]).reshape(self._t[n].shape)
            i += size
        return ModelParams(out)


def _features(x):
    if isinstance(x, Batch):
        return x.x
    if isinstance(x, EmbeddingSequence):
        return x.pooled()[None]
    return np.asarray(x, dtype=np.float64)


def _check_input(nodes, x):
    L = nodes["layer_weights"].shape[0]
    D = nodes["linear1.weight"].shape[0]
    if x.ndim != 3 or x.shape[1:] != (L, D):
        raise ShapeError("predict", x.shape, (None, L, D))


def pooled_features(nodes, x):
    """Layer-mixed, frame-pooled features (N, D) before ``linear1``."""
    return ad.layer_mix(ad.softmax(nodes["layer_weights"]), x)


def logits(nodes, x):
    x = _features(x) if not isinstance(x, ad.Node) else x
    _check_input(nodes, x)
    hidden = ad.relu(ad.matmul(pooled_features(nodes, x), nodes["linear1.weight"]) + nodes["linear1.bias"])
    return ad.matmul(hidden, nodes["linear2.weight"]) + nodes["linear2.bias"]


def predict_proba(params, x):
    """Class probabilities (N, C) for a :class:`Batch` or pooled array (N, L, D)."""
    nodes = params.variables(names=())
    return ad.softmax(logits(nodes, _features(x)), axis=1).value


def predict(params, seq):
    """Probability vector (C,) for one utterance (EmbeddingSequence or L x T x D array)."""
    if not isinstance(seq, EmbeddingSequence):
        seq = EmbeddingSequence("<input>", seq)
    return predict_proba(params, seq.pooled()[None])[0]


def embed(params, x):
    """Pre-classifier pooled features f(x), shape (N, D)."""
    nodes = params.variables(names=())
    return pooled_features(nodes, _features(x)).value


@dataclass(frozen=True)
class ClassBalanceWeights:
    """Effective-number class weights, normalised to sum to the class count."""

    beta: float
    counts: np.ndarray
    weights: np.ndarray

    @classmethod
    def from_counts(cls, counts, beta=DEFAULT_BETA):
        if not 0.0 <= beta < 1.0:
            raise ContractError(f"beta must lie in [0, 1), got {beta}")
        counts = np.asarray(counts, dtype=np.float64)
        # unseen classes are weighted as if observed once
        n = np.maximum(counts, 1.0)
        raw = (1.0 - beta) / (1.0 - np.power(beta, n))
        return cls(beta, counts, raw * (len(raw) / raw.sum()))

    @classmethod
    def from_labels(cls, y, beta=DEFAULT_BETA):
        return cls.from_counts(np.asarray(y).sum(axis=0), beta)

    @classmethod
    def uniform(cls, classes):
        return cls(0.0, np.ones(classes), np.ones(classes))


def soft_targets(y):
    y = np.asarray(y, dtype=np.float64)
    totals = y.sum(axis=1, keepdims=True)
    if np.any(totals <= 0):
        raise ContractError("every example needs at least one positive label")
    return y / totals


def loss_node(nodes, batch, weights, targets=None):
    """Graph node of the mean class-balanced soft cross-entropy over ``batch``."""
    if len(batch) == 0:
        raise ContractError("loss over an empty batch")
    t = soft_targets(batch.y) if targets is None else targets
    logp = ad.log_softmax(logits(nodes, batch.x), axis=1)
    return ad.scale(ad.sum(logp * ad.constant(t * weights.weights)), -1.0 / len(batch))


def loss(params, batch, weights):
    if not isinstance(batch, Batch):
        batch = Batch.from_pairs(batch)
    return loss_node(params.variables(names=()), batch, weights).item()


def threshold_predictions(p):
    """Multi-hot predictions: class c is positive iff p_c >= 1/C.

    Works on a single vector or row-wise on a matrix. A row left empty by
    rounding (only possible when p is numerically uniform) keeps its maximal
    entries.
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    pos = p >= 1.0 / p.shape[1]
    empty = ~pos.any(axis=1)
    if empty.any():
        pos[empty] = p[empty] == p[empty].max(axis=1, keepdims=True)
    return pos[0] if single else pos

"""Comparison systems: pooled pretraining, fine-tuning variants, prototypes and chance."""

import logging
from dataclasses import dataclass

import numpy as np

from metaperser import autodiff as ad
from metaperser.corpus import Batch
from metaperser.errors import ContractError
from metaperser.meta import adapt, check_disjoint, evaluate
from metaperser.metrics import score
from metaperser.model import (
    DEFAULT_HIDDEN,
    PARAM_NAMES,
    ClassBalanceWeights,
    ModelParams,
    embed,
    loss_node,
    soft_targets,
    threshold_predictions,
)
from metaperser.optim import AdamW

log = logging.getLogger(__name__)

LINEAR_TRAINABLE = ("layer_weights", "linear2.weight", "linear2.bias")
TRUNK = ("layer_weights", "linear1.weight", "linear1.bias")
HEAD = ("linear2.weight", "linear2.bias")


@dataclass
class PretrainConfig:
    epochs: int = 30
    lr: float = 0.001
    batch_size: int = 64
    hidden: int = DEFAULT_HIDDEN
    weight_decay: float = 0.0
    seed: int = 0


@dataclass
class FinetuneConfig:
    rate: float = 0.001
    steps: int = 50


def union_batch(tasks):
    """Every (utterance, annotator) annotation as one example, plus per-example annotator ids."""
    batches = [t.batch() for t in tasks if len(t)]
    if not batches:
        raise ContractError("pretraining corpus is empty")
    x = np.concatenate([b.x for b in batches])
    y = np.concatenate([b.y for b in batches])
    owners = np.concatenate([np.full(len(b), t.annotator_id, dtype=object) for t, b in zip(tasks, batches)])
    return Batch(x, y), owners


def _train(init, loss_fn, n, trainable, cfg, val_fn, rng):
    """Mini-batch AdamW over ``trainable``; keeps the epoch with the lowest validation loss."""
    opt = AdamW(cfg.lr, weight_decay=cfg.weight_decay)
    params = init
    best = (val_fn(params) if val_fn else np.inf, 0, params)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            nodes = params.variables(names=trainable)
            value = loss_fn(nodes, idx)
            grads = ad.gradient(value, [nodes[k] for k in trainable])
            params = params.replace(opt.step({k: params[k] for k in trainable}, {k: g.value for k, g in zip(trainable, grads)}))
            total += value.item() * len(idx)
        v = val_fn(params) if val_fn else None
        history.append({"epoch": epoch, "train_loss": total / n, "val_loss": v})
        if val_fn is None or v < best[0]:
            best = (v if v is not None else np.inf, epoch, params)
    return best[2], history


def pretrain_base(tasks, val_task=None, cfg=None, weights=None, trainable=PARAM_NAMES, init=None):
    """Train the head on the union of all annotations with the class-balanced loss.

    Returns ``(params, history)``. With a validation task, the epoch with the
    lowest validation loss is kept (epoch 0 being the initialization).
    """
    cfg = cfg or PretrainConfig()
    data, _ = union_batch(tasks)
    weights = weights or ClassBalanceWeights.from_labels(data.y)
    rng = np.random.default_rng(cfg.seed)
    if init is None:
        init = ModelParams.random(data.x.shape[1], data.x.shape[2], cfg.hidden, data.y.shape[1], rng=rng)
    targets = soft_targets(data.y)

    def loss_fn(nodes, idx):
        return loss_node(nodes, data.take(idx), weights, targets[idx])

    val_fn = None
    if val_task is not None:
        val = val_task.batch()
        val_fn = lambda p: loss_node(p.variables(names=()), val, weights).item()  # noqa: E731
    return _train(init, loss_fn, len(data), tuple(trainable), cfg, val_fn, rng)


def pretrain_linear(tasks, val_task=None, cfg=None, weights=None):
    """Pretraining with ``linear1`` frozen at its random initialization."""
    return pretrain_base(tasks, val_task, cfg, weights, trainable=LINEAR_TRAINABLE)


def finetune(base, batch, cfg, weights, trainable=PARAM_NAMES):
    """Plain gradient descent at a fixed rate; tensors outside ``trainable`` stay bitwise equal."""
    return adapt(base, batch, cfg.steps, lambda n, s: cfg.rate, weights, trainable)


def entire_zero(base, few_test):
    return evaluate(base, few_test)


def entire_few(base, few_train, few_test, cfg, weights):
    check_disjoint(few_train, few_test)
    return evaluate(finetune(base, few_train, cfg, weights), few_test)


def linear_few(linear_base, few_train, few_test, cfg, weights):
    """Adapt only the layer weights and the classifier of a linear-probe base."""
    check_disjoint(few_train, few_test)
    return evaluate(finetune(linear_base, few_train, cfg, weights, LINEAR_TRAINABLE), few_test)


def trainable_count(params, names):
    return sum(params[n].size for n in names)


# ---------------------------------------------------------------------------
# per-annotator heads


@dataclass
class MultiHeadParams:
    trunk: dict
    heads: dict

    def __post_init__(self):
        shapes = {tuple(h[n].shape for n in HEAD) for h in self.heads.values()}
        if len(shapes) > 1:
            raise ContractError(f"heads disagree in shape: {sorted(shapes)}")

    def model(self, annotator_id):
        """ModelParams copy combining the trunk with one head."""
        return ModelParams({**self.trunk, **self.heads[annotator_id]})

    def with_head(self, head):
        return ModelParams({**self.trunk, **head})


def _fresh_head(hidden, classes, rng):
    bound = 1.0 / np.sqrt(hidden)
    return {"linear2.weight": rng.uniform(-bound, bound, (hidden, classes)), "linear2.bias": np.zeros(classes)}


def pretrain_multihead(tasks, val_task=None, cfg=None, weights=None):
    """Shared trunk with one classifier per training annotator.

    Validation (if given) scores the trunk with the mean of the trained heads.
    """
    cfg = cfg or PretrainConfig()
    data, owners = union_batch(tasks)
    weights = weights or ClassBalanceWeights.from_labels(data.y)
    rng = np.random.default_rng(cfg.seed)
    base = ModelParams.random(data.x.shape[1], data.x.shape[2], cfg.hidden, data.y.shape[1], rng=rng)
    ids = [t.annotator_id for t in tasks if len(t)]
    trunk = {n: base[n] for n in TRUNK}
    # the first head reuses the base draw, so one annotator reproduces pooled pretraining
    heads = {ids[0]: {n: base[n] for n in HEAD}}
    heads.update({a: _fresh_head(cfg.hidden, data.y.shape[1], rng) for a in ids[1:]})
    targets = soft_targets(data.y)
    opt = AdamW(cfg.lr, weight_decay=cfg.weight_decay)

    def mean_head(h):
        return {n: np.mean([v[n] for v in h.values()], axis=0) for n in HEAD}

    val = val_task.batch() if val_task is not None else None

    def val_loss(tr, h):
        return loss_node(ModelParams({**tr, **mean_head(h)}).variables(names=()), val, weights).item()

    best = (val_loss(trunk, heads) if val is not None else np.inf, trunk, heads)
    for _ in range(cfg.epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(data), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            t_nodes = {n: ad.variable(trunk[n]) for n in TRUNK}
            present = [a for a in ids if np.any(owners[idx] == a)]
            h_nodes = {a: {n: ad.variable(heads[a][n]) for n in HEAD} for a in present}
            total = None
            for a in present:
                sub = idx[owners[idx] == a]
                part = ad.scale(loss_node({**t_nodes, **h_nodes[a]}, data.take(sub), weights, targets[sub]), len(sub) / len(idx))
                total = part if total is None else total + part
            leaves = [t_nodes[n] for n in TRUNK] + [h_nodes[a][n] for a in present for n in HEAD]
            grads = ad.gradient(total, leaves)
            state = {n: trunk[n] for n in TRUNK}
            state.update({f"{a}/{n}": heads[a][n] for a in present for n in HEAD})
            keys = list(TRUNK) + [f"{a}/{n}" for a in present for n in HEAD]
            new = opt.step(state, {k: g.value for k, g in zip(keys, grads)})
            trunk = {n: new[n] for n in TRUNK}
            heads = {**heads, **{a: {n: new[f"{a}/{n}"] for n in HEAD} for a in present}}
        if val is not None:
            v = val_loss(trunk, heads)
            if v < best[0]:
                best = (v, trunk, heads)
        else:
            best = (np.inf, trunk, heads)
    return MultiHeadParams(best[1], best[2])


def multi_few(multihead, few_train, few_test, cfg, weights, seed=0):
    """Attach a fresh random head for the unseen annotator and train only that head."""
    check_disjoint(few_train, few_test)
    hidden, classes = next(iter(multihead.heads.values()))["linear2.weight"].shape
    params = multihead.with_head(_fresh_head(hidden, classes, np.random.default_rng(seed)))
    return evaluate(finetune(params, few_train, cfg, weights, HEAD), few_test)


# ---------------------------------------------------------------------------
# prototype similarity


@dataclass(frozen=True)
class PrototypeSet:
    emotions: tuple  # covered class indices, ascending
    centers: np.ndarray  # (E, D)

    @classmethod
    def from_features(cls, features, y):
        y = np.asarray(y).astype(bool)
        covered = tuple(int(c) for c in np.flatnonzero(y.any(axis=0)))
        if not covered:
            raise ContractError("few-shot set covers no emotion")
        centers = np.stack([features[y[:, c]].mean(axis=0) for c in covered])
        return cls(covered, centers)


def prototype_probabilities(centers, features):
    """Softmax over cosine similarities between each feature row and each center.

    Rows with a zero-norm feature get the uniform distribution.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    fn = np.linalg.norm(f, axis=1)
    cn = np.linalg.norm(centers, axis=1)
    if np.any(cn == 0):
        log.warning("zero-norm prototype; its similarity is taken as 0")
    sim = (f @ centers.T) / np.where(fn == 0, 1.0, fn)[:, None] / np.where(cn == 0, 1.0, cn)[None, :]
    zero = fn == 0
    if zero.any():
        log.warning("%d sample(s) with zero-norm features scored as uniform", int(zero.sum()))
        sim[zero] = 0.0
    e = np.exp(sim - sim.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def entire_sim(base, few_train, few_test):
    """Nearest-prototype scoring over emotions present in the few-shot set."""
    check_disjoint(few_train, few_test)
    protos = PrototypeSet.from_features(embed(base, few_train), few_train.y)
    p = prototype_probabilities(protos.centers, embed(base, few_test))
    preds = np.zeros(few_test.y.shape, dtype=bool)
    preds[:, list(protos.emotions)] = threshold_predictions(p)
    return score(preds, few_test.y)


def random_baseline(few_test, seed):
    """Standard-normal logits per class, softmax, then the 1/C threshold."""
    z = np.random.default_rng(seed).normal(size=few_test.y.shape)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return score(threshold_predictions(e / e.sum(axis=1, keepdims=True)), few_test.y)

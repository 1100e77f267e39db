"""Second-order MAML with combined-set meta-training, derivative annealing and
learned per-layer per-step inner learning rates.

The inner loop is unrolled on the autodiff graph. Steps flagged first-order
wrap their gradient in ``stop_gradient`` so the outer derivative treats the
update direction as a constant; the remaining steps keep full second-order
terms. Rates are graph leaves, so the same backward pass yields their
meta-gradient.
"""

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from metaperser import autodiff as ad
from metaperser.corpus import Batch, sample_episode
from metaperser.errors import ContractError
from metaperser.metrics import score
from metaperser.model import (
    LAYER_GROUPS,
    ClassBalanceWeights,
    PARAM_NAMES,
    ModelParams,
    layer_group,
    loss_node,
    predict_proba,
    soft_targets,
    threshold_predictions,
)
from metaperser.optim import AdamW

log = logging.getLogger(__name__)


@dataclass
class LSLRTable:
    """Inner learning rates indexed by (layer group, step)."""

    rates: np.ndarray
    learnable: bool = True

    def __post_init__(self):
        self.rates = np.array(self.rates, dtype=np.float64)
        if self.rates.ndim != 2 or self.rates.shape[1] < 1:
            raise ContractError(f"rate table must be groups x steps, got {self.rates.shape}")

    @classmethod
    def uniform(cls, steps, rate=0.001, learnable=True, groups=len(LAYER_GROUPS)):
        return cls(np.full((groups, steps), float(rate)), learnable)

    @property
    def steps(self):
        return self.rates.shape[1]

    def column(self, step):
        """Column used at 0-based inner step ``step``; steps past the table reuse the last column."""
        return min(step, self.steps - 1)

    def rate(self, group, step):
        return float(self.rates[group, self.column(step)])


@dataclass(frozen=True)
class AnnealSchedule:
    """Inner step s (1-indexed) is first-order iff s <= ceil(fraction * S)."""

    first_order_fraction: float = 0.3

    def __post_init__(self):
        if not 0.0 <= self.first_order_fraction <= 1.0:
            raise ContractError(f"first_order_fraction must lie in [0, 1], got {self.first_order_fraction}")

    def first_order_steps(self, total):
        # the epsilon keeps e.g. 0.3 * 10 = 3.0000000000000004 from rounding up to 4
        return min(total, max(0, math.ceil(self.first_order_fraction * total - 1e-9)))

    def is_first_order(self, step, total):
        return step <= self.first_order_steps(total)


@dataclass
class MetaConfig:
    s_train: int = 5
    s_test: int = 50
    k: int = 32
    q: int = 128
    meta_batch: int = 4
    outer_steps: int = 1000
    outer_lr: float = 0.00009
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    inner_lr: float = 0.001
    first_order_fraction: float = 0.3
    csmt: bool = True
    da: bool = True
    lslr: bool = True
    val_interval: int = 50
    val_episodes: int = 2
    seed: int = 0

    def __post_init__(self):
        for name in ("s_train", "k", "meta_batch"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.s_test < 0 or self.outer_steps < 0:
            raise ContractError("s_test and outer_steps must be non-negative")

    @property
    def schedule(self):
        return AnnealSchedule(self.first_order_fraction if self.da else 0.0)


@dataclass(frozen=True)
class AdaptedParams:
    params: ModelParams
    task_id: str = ""
    steps: int = 0
    nodes: dict = field(default=None, repr=False, compare=False)


@dataclass
class MetaResult:
    params: ModelParams
    lslr: LSLRTable
    log: list
    best_step: int = 0


# ---------------------------------------------------------------------------
# graph-level unrolling


def unroll(params, loss_fn, rate_for, steps, schedule):
    """Differentiable inner loop.

    ``params`` maps names to nodes, ``loss_fn(params)`` returns the scalar inner
    loss and ``rate_for(name, step)`` the (node or float) rate for a tensor at a
    0-based step. Returns the adapted parameter nodes, still connected to the
    initial nodes and to any rate nodes.
    """
    names = list(params)
    n_first = schedule.first_order_steps(steps)
    for s in range(steps):
        grads = ad.gradient(loss_fn(params), [params[n] for n in names])
        updated = {}
        for n, g in zip(names, grads):
            if s < n_first:
                g = ad.stop_gradient(g)
            updated[n] = params[n] - rate_for(n, s) * g
        params = updated
    return params


def vanilla_unroll(params, loss_fn, alpha, steps):
    """Plain MAML inner loop with one scalar rate and full second-order terms."""
    names = list(params)
    for _ in range(steps):
        grads = ad.gradient(loss_fn(params), [params[n] for n in names])
        params = {n: params[n] - ad.scale(g, alpha) for n, g in zip(names, grads)}
    return params


def _rate_nodes(lslr):
    make = ad.variable if lslr.learnable else ad.constant
    return [[make(lslr.rates[g, c]) for c in range(lslr.steps)] for g in range(lslr.rates.shape[0])]


def _model_rate_for(rate_nodes, lslr):
    return lambda name, s: rate_nodes[layer_group(name)][lslr.column(s)]


def _as_batch(episode):
    return episode if isinstance(episode, Batch) else Batch.from_pairs(episode)


def _weights(weights, theta):
    return ClassBalanceWeights.uniform(theta.dims[3]) if weights is None else weights


def inner_adapt(theta, episode, lslr, schedule, steps, weights=None, task_id=""):
    """Adapt ``theta`` to one episode with per-layer per-step rates.

    The returned :class:`AdaptedParams` carries the numeric parameters and the
    graph nodes (connected to fresh leaves for ``theta`` and the rates).
    """
    if len(episode) == 0:
        raise ContractError("inner_adapt needs a non-empty episode")
    episode = _as_batch(episode)
    weights = _weights(weights, theta)
    if steps < 1:
        raise ContractError("inner_adapt needs at least one step")
    nodes = theta.variables()
    rate_nodes = _rate_nodes(lslr)
    targets = soft_targets(episode.y)
    adapted = unroll(
        nodes,
        lambda p: loss_node(p, episode, weights, targets),
        _model_rate_for(rate_nodes, lslr),
        steps,
        schedule,
    )
    values = ModelParams({n: adapted[n].value for n in PARAM_NAMES})
    return AdaptedParams(values, task_id, steps, adapted)


def meta_gradient(theta, lslr, tasks, schedule, steps, weights=None):
    """Average meta-gradient over ``tasks``, a list of (adapt batch, outer batch) pairs.

    Returns ``(theta_grads, rate_grads, mean_outer_loss)``; rate gradients are
    zero when the table is not learnable. Task contributions are summed in the
    given order.
    """
    if not tasks:
        raise ContractError("meta-gradient over an empty task list")
    weights = _weights(weights, theta)
    tasks = [(_as_batch(a), _as_batch(b)) for a, b in tasks]
    g_theta = {n: np.zeros_like(theta[n]) for n in PARAM_NAMES}
    g_rates = np.zeros_like(lslr.rates)
    total = 0.0
    for support, query in tasks:
        nodes = theta.variables()
        rate_nodes = _rate_nodes(lslr)
        s_targets = soft_targets(support.y)
        adapted = unroll(
            nodes,
            lambda p: loss_node(p, support, weights, s_targets),
            _model_rate_for(rate_nodes, lslr),
            steps,
            schedule,
        )
        outer = loss_node(adapted, query, weights)
        flat_rates = [r for row in rate_nodes for r in row]
        grads = ad.gradient(outer, [nodes[n] for n in PARAM_NAMES] + flat_rates)
        for n, g in zip(PARAM_NAMES, grads):
            g_theta[n] += g.value
        if lslr.learnable:
            g_rates += np.array([g.value for g in grads[len(PARAM_NAMES) :]]).reshape(g_rates.shape)
        total += outer.item()
    n = len(tasks)
    return {k: v / n for k, v in g_theta.items()}, g_rates / n, total / n


def meta_gradient_csmt(theta, lslr, tasks, schedule, steps, weights=None):
    """Combined-set meta-gradient: each sampled set drives both the inner update and the outer loss."""
    return meta_gradient(theta, lslr, [(b, b) for b in tasks], schedule, steps, weights)


# ---------------------------------------------------------------------------
# meta-testing


def adapt(theta, batch, steps, rate_for, weights, trainable=PARAM_NAMES):
    """Plain gradient steps (no graph kept between steps) on one batch.

    ``rate_for(name, step)`` gives the scalar rate; names outside ``trainable``
    stay bitwise unchanged.
    """
    params = theta
    targets = soft_targets(batch.y)
    for s in range(steps):
        nodes = params.variables(names=trainable)
        grads = ad.gradient(loss_node(nodes, batch, weights, targets), [nodes[n] for n in trainable])
        params = params.replace({n: params[n] - rate_for(n, s) * g.value for n, g in zip(trainable, grads)})
    return params


def evaluate(params, batch):
    """Threshold the model's probabilities on ``batch`` and score them."""
    return score(threshold_predictions(predict_proba(params, batch)), batch.y)


def check_disjoint(train, test):
    if train.ids and test.ids:
        shared = set(train.ids) & set(test.ids)
        if shared:
            raise ContractError(f"few-shot train and test sets overlap on {sorted(shared)[:5]}")


def lslr_adapt(theta, lslr, batch, steps, weights):
    return adapt(theta, batch, steps, lambda n, s: lslr.rate(layer_group(n), s), weights)


def meta_test(theta, lslr, few_train, few_test, steps, weights):
    """Adapt on the K-shot set for ``steps`` LSLR steps, then score on the Q-shot set."""
    check_disjoint(few_train, few_test)
    return evaluate(lslr_adapt(theta, lslr, few_train, steps, weights), few_test)


def validation_loss(theta, lslr, episodes, steps, weights):
    """Mean class-balanced loss on each episode's test part after adapting on its train part."""
    losses = []
    for ep in episodes:
        adapted = lslr_adapt(theta, lslr, ep.train, steps, weights)
        losses.append(loss_node(adapted.variables(names=()), ep.test, weights).item())
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# meta-training


def _draw(task, n, rng, warned):
    if len(task) >= n:
        idx = rng.choice(len(task), n, replace=False)
    else:
        if task.annotator_id not in warned:
            log.warning("annotator %s has %d examples < %d; sampling with replacement", task.annotator_id, len(task), n)
            warned.add(task.annotator_id)
        idx = rng.choice(len(task), n, replace=True)
    return task.batch(idx)


def sample_meta_batch(tasks, cfg, rng, warned=None):
    """(adapt, outer) batch pairs for one outer step."""
    warned = set() if warned is None else warned
    chosen = rng.choice(len(tasks), cfg.meta_batch, replace=cfg.meta_batch > len(tasks))
    pairs = []
    for i in chosen:
        if cfg.csmt:
            b = _draw(tasks[i], cfg.k, rng, warned)
            pairs.append((b, b))
        else:
            b = _draw(tasks[i], 2 * cfg.k, rng, warned)
            pairs.append((b.take(range(cfg.k)), b.take(range(cfg.k, 2 * cfg.k))))
    return pairs


def validation_episodes(val_task, cfg, rng):
    if val_task is None:
        return []
    q = min(cfg.q, len(val_task) - cfg.k)
    if q < 1:
        raise ContractError(f"validation annotator {val_task.annotator_id} has too few records")
    seeds = rng.integers(0, 2**31, cfg.val_episodes)
    return [sample_episode(val_task, cfg.k, q, int(s)) for s in seeds]


def meta_train(init, tasks, cfg, weights, val_task=None, callback=None):
    """Meta-train ``init`` over annotator tasks; returns the best-validation state.

    Every outer step samples ``cfg.meta_batch`` tasks and ``cfg.k`` examples per
    task, and applies one AdamW step to the parameters and (when enabled) the
    rate table. With a validation annotator, the state with the lowest
    post-adaptation class-balanced loss (checked every ``cfg.val_interval``
    steps and at step 0) is returned; otherwise the final state.
    """
    if not tasks:
        raise ContractError("meta_train needs at least one training task")
    rng = np.random.default_rng(cfg.seed)
    schedule = cfg.schedule
    lslr = LSLRTable.uniform(cfg.s_train, cfg.inner_lr, learnable=cfg.lslr)
    theta = init
    opt = AdamW(cfg.outer_lr, cfg.betas, cfg.eps, cfg.weight_decay, no_decay=("lslr",))
    episodes = validation_episodes(val_task, cfg, rng)
    warned = set()
    history = []
    best = None
    if episodes:
        v = validation_loss(theta, lslr, episodes, cfg.s_test, weights)
        best = (v, 0, theta, replace(lslr, rates=lslr.rates.copy()))
        history.append({"step": 0, "outer_loss": None, "val_loss": v})
    for step in range(1, cfg.outer_steps + 1):
        pairs = sample_meta_batch(tasks, cfg, rng, warned)
        g_theta, g_rates, outer = meta_gradient(theta, lslr, pairs, schedule, cfg.s_train, weights)
        state = {n: theta[n] for n in PARAM_NAMES}
        grads = dict(g_theta)
        if lslr.learnable:
            state["lslr"], grads["lslr"] = lslr.rates, g_rates
        new = opt.step(state, grads)
        if lslr.learnable:
            lslr = replace(lslr, rates=new.pop("lslr"))
        theta = ModelParams(new)
        entry = {"step": step, "outer_loss": outer, "val_loss": None}
        if episodes and (step % cfg.val_interval == 0 or step == cfg.outer_steps):
            v = validation_loss(theta, lslr, episodes, cfg.s_test, weights)
            entry["val_loss"] = v
            if v < best[0]:
                best = (v, step, theta, replace(lslr, rates=lslr.rates.copy()))
        history.append(entry)
        if callback is not None:
            callback(entry)
    if best is None:
        return MetaResult(theta, lslr, history, cfg.outer_steps)
    return MetaResult(best[2], best[3], history, best[1])

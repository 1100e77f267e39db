"""End-to-end experiment driver shared by the command line and the acceptance suite.

A rotation holds one annotator out for testing and one for validation, trains
every requested system on the rest, then scores each system on seeded
few-shot episodes of the held-out annotator.
"""

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from metaperser import baselines as bl
from metaperser.corpus import sample_episode, split_seen, split_unseen
from metaperser.errors import ContractError
from metaperser.meta import LSLRTable, meta_test, meta_train
from metaperser.metrics import aggregate
from metaperser.model import ClassBalanceWeights, ModelParams
from metaperser.synth import generate_synthetic, preset

log = logging.getLogger(__name__)

TOGGLES = ("ini", "csmt", "da", "lslr")


@dataclass
class RotationModels:
    test_id: str
    val_id: str
    weights: ClassBalanceWeights
    base: ModelParams = None
    meta: ModelParams = None
    lslr: LSLRTable = None
    linear: ModelParams = None
    multihead: bl.MultiHeadParams = None
    logs: dict = field(default_factory=dict)


def synthetic_tasks(cfg):
    tasks, _ = generate_synthetic(preset(cfg.preset, separation=cfg.separation), cfg.annotators, cfg.samples, cfg.seed)
    return tasks


def rotation_pairs(tasks, count=None):
    """(test, validation) annotator pairs: each annotator in turn, validated on the next one."""
    ids = [t.annotator_id for t in tasks]
    count = len(ids) if count is None else min(count, len(ids))
    return [(ids[i], ids[(i + 1) % len(ids)]) for i in range(count)]


def split(tasks, cfg, test_id, val_id):
    fn = split_seen if cfg.scenario == "seen" else split_unseen
    return fn(tasks, test_id, val_id)


def pretrain_config(cfg):
    return bl.PretrainConfig(cfg.pretrain_epochs, cfg.pretrain_lr, cfg.batch_size, cfg.hidden, 0.0, cfg.seed)


def class_weights(train, cfg):
    data, _ = bl.union_batch(train)
    return ClassBalanceWeights.from_labels(data.y, cfg.class_beta)


def train_meta(base, train, val, cfg, weights):
    """Meta-train from ``base`` when INI is on, else from a seeded random head."""
    if cfg.ini:
        if base is None:
            raise ContractError("INI requires a pretrained base model")
        init = base
    else:
        x = train[0].batch([0]).x
        init = ModelParams.random(x.shape[1], x.shape[2], cfg.hidden, weights.weights.size, rng=np.random.default_rng(cfg.seed))
    return meta_train(init, train, cfg.meta_config(), weights, val)


def train_rotation(tasks, cfg, test_id, val_id, methods):
    train, val, test = split(tasks, cfg, test_id, val_id)
    weights = class_weights(train, cfg)
    models = RotationModels(test_id, val_id, weights)
    needs_base = cfg.ini and "meta" in methods or {"entire-few", "entire-zero", "entire-sim"} & set(methods)
    if needs_base:
        models.base, models.logs["pretrain"] = bl.pretrain_base(train, val, pretrain_config(cfg), weights)
    if "meta" in methods:
        result = train_meta(models.base, train, val, cfg, weights)
        models.meta, models.lslr, models.logs["meta"] = result.params, result.lslr, result.log
    if "linear-few" in methods:
        models.linear, models.logs["linear"] = bl.pretrain_linear(train, val, pretrain_config(cfg), weights)
    if "multi-few" in methods:
        models.multihead = bl.pretrain_multihead(train, val, pretrain_config(cfg), weights)
    return models, test


def evaluate_rotation(models, test, cfg, methods, shots, seeds=None):
    """Seeded episodes for every (method, K); returns tagged EpisodeReports in a fixed order."""
    seeds = range(cfg.seeds) if seeds is None else seeds
    ft = bl.FinetuneConfig(cfg.finetune_rate, cfg.s_test)
    w = models.weights
    digest = cfg.digest()
    reports = []
    for k in shots:
        for seed in seeds:
            ep = sample_episode(test, k, cfg.q, seed)
            for m in methods:
                if m == "meta":
                    r = meta_test(models.meta, models.lslr, ep.train, ep.test, cfg.s_test, w)
                elif m == "entire-few":
                    r = bl.entire_few(models.base, ep.train, ep.test, ft, w)
                elif m == "entire-zero":
                    r = bl.entire_zero(models.base, ep.test)
                elif m == "linear-few":
                    r = bl.linear_few(models.linear, ep.train, ep.test, ft, w)
                elif m == "multi-few":
                    r = bl.multi_few(models.multihead, ep.train, ep.test, ft, w, seed)
                elif m == "entire-sim":
                    r = bl.entire_sim(models.base, ep.train, ep.test)
                else:
                    r = bl.random_baseline(ep.test, seed)
                reports.append(
                    r.tagged(
                        seed=seed,
                        annotator=models.test_id,
                        scenario=cfg.scenario,
                        k=k,
                        method=m,
                        upstream=cfg.upstream,
                        digest=digest,
                    )
                )
    return reports


def run_study(tasks, cfg, methods, shots=None, rotations=None):
    """Train and evaluate over annotator rotations; returns (reports, per-rotation models)."""
    shots = (cfg.k,) if shots is None else tuple(shots)
    reports, trained = [], []
    for test_id, val_id in rotation_pairs(tasks, rotations):
        models, test = train_rotation(tasks, cfg, test_id, val_id, methods)
        reports += evaluate_rotation(models, test, cfg, methods, shots)
        trained.append(models)
        log.info("rotation %s done", test_id)
    return reports, trained


def ablation_grid(tasks, cfg, rotations=None, combos=None):
    """Meta-PerSER under every INI/CSMT/DA/LSLR combination.

    The pretrained base is shared by all INI-on rows of a rotation. Returns
    one aggregated row per combination, in grid order.
    """
    combos = list(itertools.product((False, True), repeat=4)) if combos is None else combos
    per_combo = {c: [] for c in combos}
    for test_id, val_id in rotation_pairs(tasks, rotations):
        train, val, test = split(tasks, cfg, test_id, val_id)
        weights = class_weights(train, cfg)
        base = None
        if any(c[0] for c in combos):
            base, _ = bl.pretrain_base(train, val, pretrain_config(cfg), weights)
        for c in combos:
            sub = cfg.override(**dict(zip(TOGGLES, c)))
            result = train_meta(base, train, val, sub, weights)
            models = RotationModels(test_id, val_id, weights, meta=result.params, lslr=result.lslr)
            per_combo[c] += evaluate_rotation(models, test, sub, ("meta",), (cfg.k,))
    rows = []
    for c in combos:
        (row,) = aggregate(per_combo[c], by=("method",))
        rows.append({**dict(zip(TOGGLES, c)), **row})
    return rows

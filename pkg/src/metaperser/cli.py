"""Command line: synth, pretrain, meta-train, evaluate, ablate, study."""

import argparse
import json
import logging
import sys
from pathlib import Path

from metaperser import checkpoint, reports
from metaperser import study as st
from metaperser.baselines import pretrain_base
from metaperser.config import load_config, save_config
from metaperser.corpus import EmbeddingStore, load_manifest, write_manifest
from metaperser.errors import ConfigError, ContractError, FormatError, ShapeError
from metaperser.synth import generate_records, preset

log = logging.getLogger("metaperser")

EXIT_CONFIG, EXIT_DATA, EXIT_CONTRACT = 2, 3, 4

MANIFEST_NAME = "annotations.jsonl"
STORE_NAME = "embeddings.mpsc"


def _out(cfg):
    path = Path(cfg.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_log(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_tasks(cfg):
    if not cfg.manifest:
        raise ConfigError("manifest", "path to an annotation manifest is required")
    if not Path(cfg.manifest).exists():
        raise ConfigError("manifest", f"no such file: {cfg.manifest}")
    if not cfg.store or not Path(cfg.store).exists():
        raise ConfigError("store", f"no such embedding store: {cfg.store!r}")
    tasks = load_manifest(cfg.manifest, EmbeddingStore.load(cfg.store), min_records=cfg.k + cfg.q)
    if len(tasks) < 3:
        raise ContractError(f"need at least 3 usable annotators (train, validation, test), found {len(tasks)}")
    return tasks


def resolve_split(tasks, cfg):
    test_id, val_id = st.rotation_pairs(tasks, 1)[0]
    return cfg.test_annotator or test_id, cfg.val_annotator or val_id


def cmd_synth(cfg, args):
    out = _out(cfg)
    p = preset(cfg.preset, separation=cfg.separation)
    if not 1 <= cfg.annotators <= len(p.annotators):
        raise ConfigError("annotators", f"preset {cfg.preset} has {len(p.annotators)} annotators")
    p = p.subset(cfg.annotators)
    records, store, _ = generate_records(p, cfg.samples, cfg.seed)
    write_manifest(records, out / MANIFEST_NAME)
    store.save_container(out / STORE_NAME)
    print(f"wrote {len(records)} annotations for {len(p.annotators)} annotators to {out / MANIFEST_NAME}")
    print(f"wrote {len(store)} embeddings to {out / STORE_NAME}")


def cmd_pretrain(cfg, args):
    tasks = load_tasks(cfg)
    test_id, val_id = resolve_split(tasks, cfg)
    train, val, _ = st.split(tasks, cfg, test_id, val_id)
    weights = st.class_weights(train, cfg)
    params, history = pretrain_base(train, val, st.pretrain_config(cfg), weights)
    out = _out(cfg)
    best = min(history, key=lambda h: h["val_loss"]) if history else {"epoch": 0}
    checkpoint.save(checkpoint.Checkpoint(params, None, best["epoch"], cfg.digest(), cfg.seed), out / "base.mpck")
    _write_log(history, out / "pretrain_log.jsonl")
    print(f"base model -> {out / 'base.mpck'} (test {test_id}, validation {val_id})")


def cmd_meta_train(cfg, args):
    tasks = load_tasks(cfg)
    test_id, val_id = resolve_split(tasks, cfg)
    train, val, _ = st.split(tasks, cfg, test_id, val_id)
    weights = st.class_weights(train, cfg)
    base = None
    if cfg.ini:
        if not args.init:
            raise ConfigError("init", "INI is on, so --init must name a pretrained checkpoint")
        base = checkpoint.load(args.init).params
    result = st.train_meta(base, train, val, cfg, weights)
    out = _out(cfg)
    ck = checkpoint.Checkpoint(result.params, result.lslr, result.best_step, cfg.digest(), cfg.seed)
    checkpoint.save(ck, out / "meta.mpck")
    _write_log(result.log, out / "meta_log.jsonl")
    print(f"meta model (step {result.best_step}) -> {out / 'meta.mpck'}")


def _emit(reps, out, cfg):
    reports.write_jsonl(reps, out / "reports.jsonl")
    table = reports.method_table(reps)
    (out / "report.txt").write_text(f"scenario {cfg.scenario}  upstream {cfg.upstream}  config {cfg.digest()}\n{table}\n")
    (out / "shots.tsv").write_text(reports.shot_sweep_tsv(reps))
    print(table)


def cmd_evaluate(cfg, args):
    methods = list(cfg.baselines)
    if args.checkpoint:
        methods.insert(0, "meta")
    tasks = load_tasks(cfg)
    test_id, val_id = resolve_split(tasks, cfg)
    train, val, test = st.split(tasks, cfg, test_id, val_id)
    models = st.RotationModels(test_id, val_id, st.class_weights(train, cfg))
    if args.checkpoint:
        ck = checkpoint.load(args.checkpoint)
        if ck.lslr is None:
            raise FormatError(f"{args.checkpoint}: no rate table; is this a meta-trained checkpoint?")
        models.meta, models.lslr = ck.params, ck.lslr
    if {"entire-few", "entire-zero", "entire-sim"} & set(methods):
        if not args.base:
            raise ConfigError("base", "the selected baselines need --base with a pretrained checkpoint")
        models.base = checkpoint.load(args.base).params
    pc = st.pretrain_config(cfg)
    if "linear-few" in methods:
        models.linear, _ = st.bl.pretrain_linear(train, val, pc, models.weights)
    if "multi-few" in methods:
        models.multihead = st.bl.pretrain_multihead(train, val, pc, models.weights)
    _emit(st.evaluate_rotation(models, test, cfg, methods, cfg.shots), _out(cfg), cfg)


def cmd_ablate(cfg, args):
    tasks = load_tasks(cfg)
    rows = st.ablation_grid(tasks, cfg, rotations=args.rotations)
    out = _out(cfg)
    text = reports.ablation_table(rows)
    (out / "ablation.txt").write_text(text + "\n")
    _write_log(rows, out / "ablation.jsonl")
    print(text)


def cmd_study(cfg, args):
    tasks = load_tasks(cfg)
    methods = ["meta"] + [m for m in cfg.baselines if m != "meta"]
    reps, _ = st.run_study(tasks, cfg, methods, cfg.shots, rotations=args.rotations)
    _emit(reps, _out(cfg), cfg)


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic corpus (manifest + embedding container)"),
    "pretrain": (cmd_pretrain, "train the pooled base model"),
    "meta-train": (cmd_meta_train, "meta-train from a base checkpoint (or from scratch with ini=false)"),
    "evaluate": (cmd_evaluate, "score checkpoints and baselines on seeded few-shot episodes"),
    "ablate": (cmd_ablate, "run the INI/CSMT/DA/LSLR toggle grid"),
    "study": (cmd_study, "train and evaluate every system over annotator rotations"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="metaperser", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key = value configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one setting")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, help="global seed (overrides seed)")
        if name == "meta-train":
            p.add_argument("--init", help="pretrained base checkpoint")
        if name == "evaluate":
            p.add_argument("--checkpoint", help="meta-trained checkpoint")
            p.add_argument("--base", help="pretrained base checkpoint for the fine-tuning baselines")
        if name in ("ablate", "study"):
            p.add_argument("--rotations", type=int, help="limit the number of held-out annotators")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.set)
        if args.out:
            overrides.append(f"out_dir={args.out}")
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = load_config(args.config, overrides)
        COMMANDS[args.command][0](cfg, args)
        save_config(cfg, Path(cfg.out_dir) / f"{args.command}.cfg")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ContractError, ShapeError) as exc:
        print(f"contract error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    return 0


if __name__ == "__main__":
    sys.exit(main())

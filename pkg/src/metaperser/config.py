"""Flat ``key = value`` experiment configuration with typed validation."""

import hashlib
from dataclasses import dataclass, fields, replace

from metaperser.errors import ConfigError
from metaperser.meta import MetaConfig

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}

METHODS = ("meta", "entire-few", "entire-zero", "linear-few", "multi-few", "entire-sim", "random")


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "seen"
    upstream: str = "synthetic"
    manifest: str = ""
    store: str = ""
    out_dir: str = "runs"
    test_annotator: str = ""
    val_annotator: str = ""
    # meta-learning
    s_train: int = 5
    s_test: int = 50
    k: int = 32
    q: int = 128
    meta_batch: int = 4
    outer_steps: int = 300
    outer_lr: float = 0.00009
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    inner_lr: float = 0.001
    first_order_fraction: float = 0.3
    val_interval: int = 50
    val_episodes: int = 2
    ini: bool = True
    csmt: bool = True
    da: bool = True
    lslr: bool = True
    # pretraining and baselines
    hidden: int = 256
    pretrain_epochs: int = 20
    pretrain_lr: float = 0.001
    batch_size: int = 64
    class_beta: float = 0.999
    finetune_rate: float = 0.001
    baselines: tuple = ("entire-few", "entire-zero", "random")
    shots: tuple = (2, 4, 8, 16, 32, 64)
    seeds: int = 10
    seed: int = 0
    # synthetic corpus
    preset: str = "iemocap-ext"
    annotators: int = 10
    samples: int = 600
    separation: float = 2.0

    def __post_init__(self):
        if self.scenario not in ("seen", "unseen"):
            raise ConfigError("scenario", f"must be 'seen' or 'unseen', got {self.scenario!r}")
        for name in ("s_train", "k", "q", "meta_batch", "seeds", "hidden", "batch_size", "annotators", "samples", "val_interval"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        for name in ("s_test", "outer_steps", "pretrain_epochs", "val_episodes"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        if not 0.0 <= self.first_order_fraction <= 1.0:
            raise ConfigError("first_order_fraction", "must lie in [0, 1]")
        if not 0.0 <= self.class_beta < 1.0:
            raise ConfigError("class_beta", "must lie in [0, 1)")
        bad = [m for m in self.baselines if m not in METHODS]
        if bad:
            raise ConfigError("baselines", f"unknown method(s) {bad}; choose from {list(METHODS)}")
        if any(s < 1 for s in self.shots):
            raise ConfigError("shots", "shot counts must be >= 1")

    def meta_config(self, seed=None):
        return MetaConfig(
            s_train=self.s_train,
            s_test=self.s_test,
            k=self.k,
            q=self.q,
            meta_batch=self.meta_batch,
            outer_steps=self.outer_steps,
            outer_lr=self.outer_lr,
            betas=(self.beta1, self.beta2),
            eps=self.eps,
            weight_decay=self.weight_decay,
            inner_lr=self.inner_lr,
            first_order_fraction=self.first_order_fraction,
            csmt=self.csmt,
            da=self.da,
            lslr=self.lslr,
            val_interval=self.val_interval,
            val_episodes=self.val_episodes,
            seed=self.seed if seed is None else seed,
        )

    def override(self, **values):
        return replace(self, **values)

    def canonical(self, skip=()):
        return "\n".join(f"{f.name} = {format_value(getattr(self, f.name))}" for f in fields(self) if f.name not in skip)

    def digest(self):
        """Short hash of every setting that can change a result (the output location cannot)."""
        return hashlib.sha256(self.canonical(skip=("out_dir",)).encode()).hexdigest()[:16]


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(key, text):
    if key not in _FIELDS:
        raise ConfigError(key, "unknown configuration key")
    default = _FIELDS[key].default
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [s.strip() for s in text.split(",") if s.strip()]
            return tuple(int(s) for s in items) if key == "shots" else tuple(items)
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r} as {type(default).__name__}") from None
    return text


def parse_pairs(lines, source="<overrides>"):
    values = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", f"expected key = value, got {line!r}")
        key, text = line.split("=", 1)
        key = key.strip().replace("-", "_")
        values[key] = parse_value(key, text)
    return values


def load_config(path=None, overrides=()):
    """Defaults, then the file at ``path`` (if any), then ``key=value`` overrides."""
    values = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                values.update(parse_pairs(fh, str(path)))
        except FileNotFoundError:
            raise ConfigError("config", f"no such file: {path}") from None
    values.update(parse_pairs(overrides))
    return ExperimentConfig(**values)


def save_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(cfg.canonical() + "\n")


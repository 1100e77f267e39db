"""Multi-label maF1 / miF1 / UA and two-level report aggregation."""

from dataclasses import asdict, dataclass, replace

import numpy as np

from metaperser.errors import ContractError

METRICS = ("maF1", "miF1", "UA")


@dataclass(frozen=True)
class ConfusionCounts:
    """Per-class binary confusion counts over a sample set."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @classmethod
    def from_predictions(cls, preds, gold):
        preds = np.asarray(preds).astype(bool)
        gold = np.asarray(gold).astype(bool)
        if preds.shape != gold.shape or preds.ndim != 2:
            raise ContractError(f"predictions {preds.shape} and gold {gold.shape} must be equal-shaped N x C")
        return cls(
            (preds & gold).sum(axis=0),
            (preds & ~gold).sum(axis=0),
            (~preds & gold).sum(axis=0),
            (~preds & ~gold).sum(axis=0),
        )

    @property
    def n(self):
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0])

    def f1(self):
        """Per-class F1, 0 where a class never occurs in either set."""
        denom = 2 * self.tp + self.fp + self.fn
        return np.divide(2 * self.tp, denom, out=np.zeros(len(denom)), where=denom > 0)


@dataclass(frozen=True)
class EpisodeReport:
    maF1: float
    miF1: float
    UA: float
    seed: int = -1
    annotator: str = ""
    scenario: str = ""
    k: int = 0
    method: str = ""
    upstream: str = ""
    digest: str = ""

    def tagged(self, **fields):
        return replace(self, **fields)

    def to_dict(self):
        return asdict(self)


def score(preds, gold):
    """maF1, miF1 and UA of multi-hot predictions against multi-hot gold labels.

    maF1 averages per-class F1 over classes seen in gold or predictions; miF1
    pools counts across classes; UA is the class-averaged binary accuracy.
    """
    if len(preds) != len(gold):
        raise ContractError(f"{len(preds)} predictions vs {len(gold)} gold label sets")
    if len(gold) == 0:
        raise ContractError("cannot score an empty sample set")
    c = ConfusionCounts.from_predictions(preds, gold)
    # reductions run sequentially in class order so results are reproducible bit for bit
    f1 = [float(v) for v, on in zip(c.f1(), (c.tp + c.fp + c.fn) > 0) if on]
    ma = sum(f1) / len(f1) if f1 else 1.0
    tp, fp, fn = int(c.tp.sum()), int(c.fp.sum()), int(c.fn.sum())
    mi = 2 * tp / (2 * tp + fp + fn) if (tp + fp + fn) > 0 else 1.0
    ua = sum(int(a + b) / c.n for a, b in zip(c.tp, c.tn)) / len(c.tp)
    return EpisodeReport(ma, mi, ua)


def aggregate(reports, by=("method", "k")):
    """Two-level means: over seeds within each annotator, then over annotators.

    Returns one row (dict) per distinct value of the ``by`` fields, in first
    appearance order. Annotators are weighted equally regardless of how many
    seeds each contributed.
    """
    reports = list(reports)
    if not reports:
        raise ContractError("nothing to aggregate")
    scenarios = {r.scenario for r in reports}
    if len(scenarios) > 1:
        raise ContractError(f"mixed scenarios in one aggregation: {sorted(scenarios)}")
    groups = {}
    for r in reports:
        key = tuple(getattr(r, f) for f in by)
        groups.setdefault(key, {}).setdefault(r.annotator, []).append(r)
    rows = []
    for key, per_annotator in groups.items():
        row = dict(zip(by, key))
        row["scenario"] = reports[0].scenario
        for m in METRICS:
            annotator_means = [np.mean([getattr(r, m) for r in rs]) for rs in per_annotator.values()]
            row[m] = float(np.mean(annotator_means))
        row["annotators"] = len(per_annotator)
        row["episodes"] = sum(len(rs) for rs in per_annotator.values())
        rows.append(row)
    return rows


def format_table(rows, columns=("method", "k")):
    """Fixed-width text table with metrics as percentages to one decimal."""
    header = list(columns) + list(METRICS)
    body = [[str(r.get(c, "")) for c in columns] + [f"{100 * r[m]:.1f}" for m in METRICS] for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(header)]

    def fmt(cells):
        return "  ".join(c.rjust(w) if i >= len(columns) else c.ljust(w) for i, (c, w) in enumerate(zip(cells, widths)))

    lines = [fmt(header), "  ".join("-" * w for w in widths)] + [fmt(b) for b in body]
    return "\n".join(lines)

"""Report emission: text tables, line-delimited JSON rows and shot-sweep TSV."""

import json

from metaperser.metrics import METRICS, aggregate, format_table


def write_jsonl(reports, path):
    with open(path, "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def method_table(reports):
    return format_table(aggregate(reports, by=("method", "k")), columns=("method", "k"))


def ablation_table(rows):
    """Grid rows: dicts with toggle flags ini/csmt/da/lslr plus metric means."""
    marks = [{**r, **{t: "x" if r[t] else "-" for t in ("ini", "csmt", "da", "lslr")}} for r in rows]
    return format_table(marks, columns=("ini", "csmt", "da", "lslr"))


def shot_sweep_tsv(reports):
    """One line per (method, K) with the three metric means."""
    rows = aggregate(reports, by=("method", "k"))
    lines = ["\t".join(("method", "k") + METRICS)]
    for r in sorted(rows, key=lambda r: (r["method"], r["k"])):
        lines.append("\t".join([r["method"], str(r["k"])] + [f"{r[m]:.6f}" for m in METRICS]))
    return "\n".join(lines) + "\n"

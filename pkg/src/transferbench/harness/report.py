"""Result records and report files.

``report`` writes results.csv (RFC-4180, canonically sorted), results.json
with the same records, summary.json with AA/AAA/WAA/BAA per (method,
backend) group, and optionally static bar-chart PNGs.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, fields

from .metrics import AccuracyMatrix, metrics

CSV_FIELDS = ("substitute", "victim", "method", "backend", "norm", "epsilon",
              "iterations", "seed", "n_examples", "accuracy")


@dataclass(frozen=True)
class ReportRecord:
    substitute: str
    victim: str
    method: str            # "none" for plain back-ends
    backend: str           # canonical combination name, e.g. UN-DP-DI2-TI-PI-FGSM
    norm: str
    epsilon: float
    iterations: int
    seed: int
    n_examples: int
    accuracy: float

    def sort_key(self):
        return tuple(getattr(self, f) for f in CSV_FIELDS)

    @classmethod
    def from_json(cls, obj: dict) -> "ReportRecord":
        return cls(substitute=obj["substitute"], victim=obj["victim"],
                   method=obj["method"], backend=obj["backend"],
                   norm=obj["norm"], epsilon=float(obj["epsilon"]),
                   iterations=int(obj["iterations"]), seed=int(obj["seed"]),
                   n_examples=int(obj["n_examples"]),
                   accuracy=float(obj["accuracy"]))


def _summary(records) -> dict:
    groups = {}
    for r in records:
        groups.setdefault((r.method, r.backend), []).append(r)
    out = {}
    for (method, backend), recs in sorted(groups.items()):
        subs = sorted({r.substitute for r in recs})
        vics = sorted({r.victim for r in recs})
        cells = {(r.substitute, r.victim): r.accuracy for r in recs}
        matrix = AccuracyMatrix.build(subs, vics, cells)
        out[f"{method}|{backend}"] = metrics(matrix).to_json()
    return out


def report(records, out_dir, plots: bool = False) -> dict:
    """Write results.csv / results.json / summary.json; returns file paths."""
    os.makedirs(out_dir, exist_ok=True)
    records = sorted(records, key=ReportRecord.sort_key)
    paths = {"csv": os.path.join(out_dir, "results.csv"),
             "json": os.path.join(out_dir, "results.json"),
             "summary": os.path.join(out_dir, "summary.json")}

    with open(paths["csv"], "w", newline="") as fh:
        writer = csv.writer(fh, quoting=csv.QUOTE_MINIMAL)
        writer.writerow(CSV_FIELDS)
        for r in records:
            writer.writerow([r.substitute, r.victim, r.method, r.backend,
                             r.norm, repr(r.epsilon), r.iterations, r.seed,
                             r.n_examples, repr(r.accuracy)])

    with open(paths["json"], "w") as fh:
        json.dump([asdict(r) for r in records], fh, indent=2, sort_keys=True)
        fh.write("\n")

    with open(paths["summary"], "w") as fh:
        json.dump(_summary(records), fh, indent=2, sort_keys=True)
        fh.write("\n")

    if plots and records:
        paths["plot"] = _plot(records, out_dir)
    return paths


def read_csv(path) -> list:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            out.append(ReportRecord(
                substitute=row["substitute"], victim=row["victim"],
                method=row["method"], backend=row["backend"], norm=row["norm"],
                epsilon=float(row["epsilon"]), iterations=int(row["iterations"]),
                seed=int(row["seed"]), n_examples=int(row["n_examples"]),
                accuracy=float(row["accuracy"])))
    return out


def _plot(records, out_dir):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups = {}
    for r in records:
        groups.setdefault(f"{r.method}|{r.backend}", []).append(r.accuracy)
    labels = sorted(groups)
    means = [sum(groups[k]) / len(groups[k]) for k in labels]
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(labels)), 3.2))
    ax.bar(range(len(labels)), means, color="#4878a8")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("mean victim accuracy")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    path = os.path.join(out_dir, "accuracy_bars.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path

"""Accuracy matrix and the AA / AAA / WAA / BAA aggregates.

AA(s) is the mean victim accuracy over unmasked victims for substitute s;
AAA / WAA / BAA are the mean / max / min of AA over substitutes.  Lower
values mean stronger attacks, so the "worst" average accuracy from the
attacker's perspective is the maximum.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MetricsError(Exception):
    pass


@dataclass
class AccuracyMatrix:
    substitutes: list
    victims: list
    acc: np.ndarray          # (S, V) in [0, 1]
    mask: np.ndarray         # True where the cell is excluded (substitute == victim)

    @classmethod
    def build(cls, substitutes, victims, cells) -> "AccuracyMatrix":
        """cells: {(substitute, victim): accuracy or None for masked}."""
        s, v = len(substitutes), len(victims)
        acc = np.zeros((s, v))
        mask = np.zeros((s, v), dtype=bool)
        for i, sub in enumerate(substitutes):
            for j, vic in enumerate(victims):
                val = cells.get((sub, vic))
                if val is None or sub == vic:
                    mask[i, j] = True
                else:
                    acc[i, j] = float(val)
        return cls(list(substitutes), list(victims), acc, mask)

    def validate(self):
        unmasked = self.acc[~self.mask]
        if unmasked.size and (unmasked.min() < 0.0 or unmasked.max() > 1.0):
            raise MetricsError("accuracies must lie in [0, 1]")


@dataclass
class MetricSummary:
    aa: dict
    aaa: float
    waa: float
    baa: float

    def to_json(self) -> dict:
        return {"AA": self.aa, "AAA": self.aaa, "WAA": self.waa, "BAA": self.baa}


def metrics(matrix: AccuracyMatrix) -> MetricSummary:
    matrix.validate()
    aa = {}
    for i, sub in enumerate(matrix.substitutes):
        keep = ~matrix.mask[i]
        if not keep.any():
            raise MetricsError(f"substitute {sub!r} has no unmasked victim cells")
        aa[sub] = float(matrix.acc[i][keep].mean())
    values = list(aa.values())
    return MetricSummary(aa=aa, aaa=float(np.mean(values)),
                         waa=float(max(values)), baa=float(min(values)))

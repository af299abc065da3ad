"""Combination grid search over initializations, momentum variants,
augmentation subsets and scaling families.

The enumeration follows the exclusion rules: I-FGSM vs PGD init and the
momentum variants are mutually exclusive choices, SI and Admix form a
mutually exclusive scaling family (Admix subsumes SI), and the four
remaining augmentations combine freely: 2 x 4 x 2^4 x 3 = 384 combinations.
Combination names list the augmentations in canonical application order,
then the momentum variant, then FGSM (zeros init) or PGD (random init).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from ..attack import AttackSpec, run_attack
from ..augment import AugmentStack
from ..rng import derive_key
from .metrics import AccuracyMatrix, metrics
from .victims import evaluate

AUG_CHOICES = ("UN", "DP", "DI2", "TI")
SCALE_CHOICES = (None, "SI", "ADMIX")
MOMENTUM_CHOICES = (None, "MI", "NI", "PI")
INIT_CHOICES = ("zeros", "uniform_random")


@dataclass(frozen=True)
class Combination:
    init: str
    optimizer: str | None
    augments: tuple
    scale: str | None

    @property
    def name(self) -> str:
        tokens = [k for k in AUG_CHOICES if k in self.augments]
        if self.scale:
            tokens.append(self.scale)
        if self.optimizer:
            tokens.append(self.optimizer)
        if not tokens and self.init == "zeros":
            return "I-FGSM"
        base = "FGSM" if self.init == "zeros" else "PGD"
        return "-".join(tokens + [base]) if tokens else base

    def stack_kinds(self) -> tuple:
        kinds = tuple(self.augments)
        if self.scale:
            kinds = kinds + (self.scale,)
        return kinds


def enumerate_combinations() -> list:
    """All 384 combinations in a fixed canonical order."""
    combos = []
    for init in INIT_CHOICES:
        for optimizer in MOMENTUM_CHOICES:
            for bits in range(2 ** len(AUG_CHOICES)):
                augs = tuple(k for i, k in enumerate(AUG_CHOICES) if bits >> i & 1)
                for scale in SCALE_CHOICES:
                    combos.append(Combination(init, optimizer, augs, scale))
    return combos


def combination_spec(combo: Combination, base: AttackSpec) -> AttackSpec:
    return replace(
        base,
        init=combo.init,
        optimizer=combo.optimizer or "plain",
        stack=replace(base.stack, kinds=combo.stack_kinds()),
        method=None,
    )


@dataclass
class GridResult:
    ranking: list          # dicts: name, AA per substitute, AAA, WAA, BAA
    truncated: bool
    cells: dict            # (combo name, substitute) -> victim accuracy row


def grid_search(base_spec: AttackSpec, substitutes: dict, registry,
                benign: dict, budget: int | None = None, jobs: int = 1,
                victims=None) -> GridResult:
    """Run every combination on every substitute and rank by AAA ascending.

    ``substitutes`` maps name -> Model; ``benign`` is the selected example
    set.  ``budget`` caps the number of combinations actually attacked; the
    result is flagged truncated when the cap bites.  Cells are independent
    jobs; every attack seed derives from (base seed, combination, substitute),
    so any job count produces identical results.
    """
    combos = enumerate_combinations()
    truncated = budget is not None and budget < len(combos)
    todo = combos[:budget] if budget is not None else combos
    x, y = benign["images"], benign["labels"]
    victim_names = list(victims) if victims is not None else registry.names

    cells = [(combo, sub_name) for combo in todo for sub_name in substitutes]

    def run_cell(cell):
        combo, sub_name = cell
        spec = combination_spec(combo, base_spec)
        spec = replace(spec, seed=derive_key(base_spec.seed, combo.name,
                                             sub_name) & 0x7FFFFFFF)
        x_adv, _ = run_attack(substitutes[sub_name], x, y, spec)
        return evaluate(x_adv, y, sub_name, registry, victims=victim_names)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(run_cell, cells))
    else:
        rows = [run_cell(c) for c in cells]

    cell_rows = {(combo.name, sub): row
                 for (combo, sub), row in zip(cells, rows)}
    ranking = []
    for combo in todo:
        cell_acc = {}
        for sub in substitutes:
            for vic, acc in cell_rows[(combo.name, sub)].items():
                cell_acc[(sub, vic)] = acc
        matrix = AccuracyMatrix.build(list(substitutes), victim_names, cell_acc)
        summary = metrics(matrix)
        ranking.append({"name": combo.name, "AA": summary.aa,
                        "AAA": summary.aaa, "WAA": summary.waa,
                        "BAA": summary.baa})
    ranking.sort(key=lambda r: (r["AAA"], r["name"]))
    return GridResult(ranking=ranking, truncated=truncated, cells=cell_rows)

"""Hyper-parameter tuning on a validation set disjoint from the test set."""

from __future__ import annotations

import itertools
from dataclasses import replace

import numpy as np

from ..attack import AttackSpec, run_attack
from ..methods import MethodParams
from ..rng import derive_key
from .victims import HarnessError, evaluate


def tune_hyperparams(method_kind: str, substitute_name: str, substitute_model,
                     validation_set: dict, search_table: dict, registry=None,
                     attack_base: AttackSpec | None = None,
                     test_indices=None, victims=None, evaluator=None) -> MethodParams:
    """Grid-search MethodParams by average victim accuracy on validation data.

    ``search_table`` maps MethodParams field names to candidate value lists;
    the cartesian product is evaluated and the argmin-AA candidate returned,
    ties broken by smaller layer_index then smaller gamma.  ``evaluator``
    may replace the real attack+evaluate pipeline (used in tests).
    ``test_indices`` enforces validation/test disjointness.
    """
    if not search_table or not all(search_table.values()):
        raise HarnessError("empty hyper-parameter search table")
    if test_indices is not None:
        overlap = set(validation_set.get("indices", ())) & set(test_indices)
        if overlap:
            raise HarnessError(
                f"validation overlaps test on {len(overlap)} indices")

    names = sorted(search_table)
    candidates = [dict(zip(names, combo))
                  for combo in itertools.product(*(search_table[n] for n in names))]

    def default_evaluator(params: MethodParams) -> float:
        spec = replace(attack_base or AttackSpec(), method=params)
        spec = replace(spec, seed=derive_key(spec.seed, "tune", method_kind,
                                             *[f"{k}={v}" for k, v in
                                               sorted(params.to_json().items())
                                               if v is not None]) & 0x7FFFFFFF)
        x_adv, _ = run_attack(substitute_model, validation_set["images"],
                              validation_set["labels"], spec)
        row = evaluate(x_adv, validation_set["labels"], substitute_name,
                       registry, victims=victims)
        vals = [v for v in row.values() if v is not None]
        return float(np.mean(vals))

    evaluate_candidate = evaluator or default_evaluator

    best = None
    for cand in candidates:
        params = MethodParams(method_kind, **cand)
        aa = evaluate_candidate(params)
        key = (aa,
               params.layer_index if params.layer_index is not None else 1 << 30,
               params.gamma if params.gamma is not None else float("inf"))
        if best is None or key < best[0]:
            best = (key, params)
    return best[1]

"""Victim registry, preprocessing pipelines, benign selection, evaluation.

A victim pairs a model with an inference-time preprocessing pipeline
(resize / center-crop).  The pipeline is opaque to attack code: nothing in
the attack modules imports this file, and evaluation is the only place a
pipeline is ever dereferenced.  The registry serializes to an append-only
JSON file so new victims can be added without re-running old cells.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .. import engine as en
from ..models import Model, load_checkpoint
from ..rng import Stream


class HarnessError(Exception):
    pass


@dataclass(frozen=True)
class VictimEntry:
    name: str
    checkpoint_path: str
    pipeline: tuple = ()           # ({"op": "resize", "size": s} | {"op": "center_crop", "size": s}, ...)
    input_size: int = 32

    def to_json(self) -> dict:
        return {"name": self.name, "checkpoint_path": self.checkpoint_path,
                "pipeline": list(self.pipeline), "input_size": self.input_size}

    @classmethod
    def from_json(cls, obj: dict) -> "VictimEntry":
        return cls(name=obj["name"], checkpoint_path=obj["checkpoint_path"],
                   pipeline=tuple(obj.get("pipeline", ())),
                   input_size=int(obj.get("input_size", 32)))


def pipeline_output_size(pipeline, in_size: int) -> int:
    size = in_size
    for step in pipeline:
        size = int(step["size"])
    return size


def validate_entry(entry: VictimEntry, canvas_size: int) -> None:
    for step in entry.pipeline:
        if step.get("op") not in ("resize", "center_crop"):
            raise HarnessError(f"unknown pipeline op {step!r}")
    out = pipeline_output_size(entry.pipeline, canvas_size)
    if out != entry.input_size:
        raise HarnessError(
            f"victim {entry.name}: pipeline output {out} != model input {entry.input_size}")


def preprocess(pipeline, image: np.ndarray) -> np.ndarray:
    """Bit-exact half-pixel bilinear resize and exact center crop, composed
    in pipeline order.  Accepts (3,H,W) or (N,3,H,W)."""
    out = np.asarray(image, dtype=np.float64)
    for step in pipeline:
        size = int(step["size"])
        if step["op"] == "resize":
            out = en.bilinear_resize(en.Tensor(out), size, size).data
        elif step["op"] == "center_crop":
            h, w = out.shape[-2:]
            if size > h or size > w:
                raise HarnessError(f"center_crop {size} larger than input {h}x{w}")
            top = (h - size) // 2
            left = (w - size) // 2
            out = out[..., top:top + size, left:left + size]
        else:
            raise HarnessError(f"unknown pipeline op {step!r}")
    return out


class VictimRegistry:
    """Ordered, append-only collection of victim entries."""

    def __init__(self, entries=()):
        self.entries: list[VictimEntry] = list(entries)
        names = [e.name for e in self.entries]
        if len(names) != len(set(names)):
            raise HarnessError("duplicate victim names in registry")
        self._models: dict[str, Model] = {}

    def add(self, entry: VictimEntry) -> None:
        if any(e.name == entry.name for e in self.entries):
            raise HarnessError(f"victim {entry.name!r} already registered")
        self.entries.append(entry)

    def add_with_model(self, entry: VictimEntry, model: Model) -> None:
        """Register an in-memory model (no checkpoint file on disk)."""
        self.add(entry)
        self._models[entry.name] = model

    def model(self, name: str) -> Model:
        if name not in self._models:
            entry = self.entry(name)
            self._models[name] = load_checkpoint(entry.checkpoint_path)
        return self._models[name]

    def entry(self, name: str) -> VictimEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise HarnessError(f"no victim named {name!r}")

    @property
    def names(self):
        return [e.name for e in self.entries]

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump([e.to_json() for e in self.entries], fh, indent=2,
                      sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "VictimRegistry":
        with open(path) as fh:
            return cls([VictimEntry.from_json(o) for o in json.load(fh)])


def classify(registry: VictimRegistry, name: str, images: np.ndarray,
             chunk: int = 256) -> np.ndarray:
    """Victim predictions after its own preprocessing pipeline."""
    entry = registry.entry(name)
    model = registry.model(name)
    preds = []
    for lo in range(0, len(images), chunk):
        x = preprocess(entry.pipeline, images[lo:lo + chunk])
        preds.append(model.predict(x).argmax(axis=1))
    return np.concatenate(preds)


def select_benign(dataset: dict, registry: VictimRegistry, count: int,
                  seed: int, victims=None) -> dict:
    """Examples correctly classified by every victim, then a seeded sample.

    Returns {"images", "labels", "indices"}; the index list makes the
    selection reproducible and auditable.
    """
    images, labels = dataset["images"], dataset["labels"]
    names = list(victims) if victims is not None else registry.names
    ok = np.ones(len(images), dtype=bool)
    for name in names:
        ok &= classify(registry, name, images) == labels
    qualifying = np.where(ok)[0]
    if len(qualifying) < count:
        raise HarnessError(
            f"only {len(qualifying)} examples qualify (all-victim correct), "
            f"need {count}")
    order = np.argsort(Stream(seed, "benign_select").uniform((len(qualifying),)))
    chosen = np.sort(qualifying[order[:count]])
    return {"images": images[chosen], "labels": labels[chosen],
            "indices": chosen.tolist()}


def evaluate(x_adv: np.ndarray, labels: np.ndarray, substitute_name: str,
             registry: VictimRegistry, victims=None) -> dict:
    """Per-victim accuracy on adversarial examples; the substitute's own cell
    is masked (reported as None)."""
    names = list(victims) if victims is not None else registry.names
    row = {}
    for name in names:
        if name == substitute_name:
            row[name] = None
            continue
        preds = classify(registry, name, x_adv)
        row[name] = float((preds == labels).mean())
    return row

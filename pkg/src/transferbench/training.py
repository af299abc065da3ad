"""Substitute/victim training at toy scale.

Plain SGD with momentum on the cross-entropy loss; optional adversarial
training (each minibatch replaced by inner-attack examples) and LGV-style
snapshot collection along a high-learning-rate trajectory.  Training is
deterministic per (config, seed): batch order and the inner attack use
counter-keyed streams, and models train on a one-time bilinear resize of the
canvas-scale dataset to their input size.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import engine as en
from .attack import AttackSpec, run_attack
from .models import Model, ModelSpec, build_model, cross_entropy
from .rng import Stream, derive_key


class TrainError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 64
    lr: float = 0.05
    schedule: str = "step"          # "constant" | "step" (x0.1 at 2/3 of epochs)
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    adversarial: AttackSpec | None = None
    lgv_high_lr: float = 0.5        # 10x the default base lr
    lgv_snapshots: int = 8
    lgv_interval: int | None = None  # steps between snapshots; default half epoch

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainError("epochs must be >= 1")
        if self.schedule not in ("constant", "step"):
            raise TrainError(f"unknown schedule {self.schedule!r}")
        if self.adversarial is not None:
            inner = self.adversarial
            if inner.norm != "inf" or inner.iterations > 10:
                raise TrainError("inner attack must be l-inf PGD-family with <= 10 iterations")

    def to_json(self) -> dict:
        out = {
            "epochs": self.epochs, "batch_size": self.batch_size, "lr": self.lr,
            "schedule": self.schedule, "momentum": self.momentum,
            "weight_decay": self.weight_decay, "seed": self.seed,
            "adversarial": None if self.adversarial is None else self.adversarial.to_json(),
            "lgv_high_lr": self.lgv_high_lr, "lgv_snapshots": self.lgv_snapshots,
            "lgv_interval": self.lgv_interval,
        }
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        if obj.get("adversarial"):
            obj["adversarial"] = AttackSpec.from_json(obj["adversarial"])
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in obj.items() if k in known})


def resize_images(images: np.ndarray, size: int) -> np.ndarray:
    """Half-pixel bilinear resize of a (N,3,H,W) batch; identity if sized."""
    images = np.asarray(images, dtype=np.float64)
    if images.shape[-1] == size and images.shape[-2] == size:
        return images
    return en.bilinear_resize(en.Tensor(images), size, size).data


def _shuffle(n: int, seed: int, tag: str, epoch: int) -> np.ndarray:
    return np.argsort(Stream(seed, "shuffle", tag, epoch).uniform((n,)))


def _lr_at(cfg: TrainConfig, epoch: int, base_lr: float) -> float:
    if cfg.schedule == "step" and epoch >= (2 * cfg.epochs) // 3:
        return base_lr * 0.1
    return base_lr


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray,
             chunk: int = 256) -> float:
    """Top-1 accuracy; resizes canvas images to the model input size."""
    correct = 0
    for lo in range(0, len(images), chunk):
        xb = resize_images(images[lo:lo + chunk], model.spec.input_size)
        pred = model.predict(xb).argmax(axis=1)
        correct += int((pred == labels[lo:lo + chunk]).sum())
    return correct / len(images)


def _sgd_epochs(model: Model, train_x, train_y, cfg: TrainConfig, epochs,
                base_lr, seed_tag, loss_history, velocity=None,
                snapshot_every=None, max_snapshots=0):
    """Runs SGD in place on model.params; optionally yields snapshots."""
    n = len(train_x)
    if velocity is None:
        velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    snapshots = []
    step_count = 0
    for epoch in range(epochs):
        lr = _lr_at(cfg, epoch, base_lr)
        order = _shuffle(n, cfg.seed, seed_tag, epoch)
        full = n - n % cfg.batch_size
        for lo in range(0, full if full else n, cfg.batch_size):
            sel = order[lo:lo + cfg.batch_size]
            xb, yb = train_x[sel], train_y[sel]
            if cfg.adversarial is not None:
                inner = replace(cfg.adversarial,
                                seed=derive_key(cfg.seed, seed_tag, epoch, lo) & 0xFFFFFFFF)
                xb, _ = run_attack(model, xb, yb, inner)
            tape = en.Tape()
            leaves = model.bind(tape)
            logits, _ = model.forward(tape.leaf(xb, "x"), tape=tape,
                                      params=leaves)
            loss = cross_entropy(logits, yb)
            grads = en.backward(tape, np.asarray(1.0), output=loss,
                                wanted={t.node for t in leaves.values()})
            if not np.isfinite(loss.data):
                raise TrainError(
                    f"training diverged: loss {loss.data} at epoch {epoch}, step {lo}")
            for name, leaf in leaves.items():
                g = grads.get(leaf.node)
                if g is None:
                    continue
                g = g + cfg.weight_decay * model.params[name]
                velocity[name] = cfg.momentum * velocity[name] - lr * g
                model.params[name] += velocity[name]
            loss_history.append(float(loss.data))
            step_count += 1
            if snapshot_every and len(snapshots) < max_snapshots \
                    and step_count % snapshot_every == 0:
                snapshots.append(model.copy())
        if snapshot_every and len(snapshots) >= max_snapshots:
            break
    return snapshots


def train(spec: ModelSpec, dataset: dict, cfg: TrainConfig) -> Model:
    """Standard training; returns the model with metadata filled in.

    ``dataset`` holds canvas-scale arrays train_x/train_y/test_x/test_y.
    """
    model = build_model(spec, cfg.seed)
    train_x = resize_images(dataset["train_x"], spec.input_size)
    train_y = np.asarray(dataset["train_y"], dtype=np.int64)
    history: list = []
    _sgd_epochs(model, train_x, train_y, cfg, cfg.epochs, cfg.lr, "train", history)
    model.meta.update({
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "clean_test_acc": accuracy(model, dataset["test_x"], dataset["test_y"]),
        "adversarial": cfg.adversarial is not None,
    })
    model.meta["loss_history"] = [round(v, 12) for v in history[:64]]
    return model


def adversarial_train(spec: ModelSpec, dataset: dict, cfg: TrainConfig) -> Model:
    """RFA-style training on inner-attack examples; also builds robust victims."""
    if cfg.adversarial is None:
        raise TrainError("adversarial_train needs cfg.adversarial")
    model = train(spec, dataset, cfg)
    test_x = resize_images(dataset["test_x"], spec.input_size)
    test_y = np.asarray(dataset["test_y"], dtype=np.int64)
    adv_correct = 0
    for lo in range(0, len(test_x), 128):
        xb, yb = test_x[lo:lo + 128], test_y[lo:lo + 128]
        inner = replace(cfg.adversarial, seed=derive_key(cfg.seed, "robust_eval", lo) & 0xFFFFFFFF)
        x_adv, _ = run_attack(model, xb, yb, inner)
        adv_correct += int((model.predict(x_adv).argmax(1) == yb).sum())
    model.meta["robust_acc"] = adv_correct / len(test_x)
    return model


def collect_lgv(base: Model, dataset: dict, cfg: TrainConfig) -> list:
    """High-lr fine-tuning snapshots along the trajectory; base excluded."""
    if cfg.lgv_snapshots == 0:
        return []
    model = base.copy()
    train_x = resize_images(dataset["train_x"], model.spec.input_size)
    train_y = np.asarray(dataset["train_y"], dtype=np.int64)
    steps_per_epoch = max(1, len(train_x) // cfg.batch_size)
    interval = cfg.lgv_interval or max(1, steps_per_epoch // 2)
    epochs_needed = int(np.ceil(cfg.lgv_snapshots * interval / steps_per_epoch)) + 1
    history: list = []
    snaps = _sgd_epochs(model, train_x, train_y,
                        replace(cfg, adversarial=None), epochs_needed,
                        cfg.lgv_high_lr, "lgv", history,
                        snapshot_every=interval, max_snapshots=cfg.lgv_snapshots)
    for i, snap in enumerate(snaps):
        snap.meta.update(dict(base.meta))
        snap.meta.update({"lgv_snapshot": i, "lgv_high_lr": cfg.lgv_high_lr})
    return snaps


def ensemble_gradient(models: list, x, delta, y, stream: Stream):
    """CE gradient w.r.t. delta on one uniformly sampled model (sample once)."""
    if not models:
        raise TrainError("ensemble_gradient needs at least one model")
    pick = models[stream.integers(0, len(models))]
    from .attack import chunk_ce_gradient
    from .augment import AugmentStack
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    _, grad = chunk_ce_gradient(pick, None, AugmentStack(), x,
                                np.asarray(delta, dtype=np.float64),
                                np.asarray(y, dtype=np.int64),
                                np.arange(n), (0, "ens"), x, np.ones(n))
    return grad

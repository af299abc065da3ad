"""Iterative perturbation optimizers: init, step rules, projection, the
attack loop, and multi-backprop gradient averaging.

The loop is exactly I-FGSM when the stack is empty, the optimizer is plain,
the init is zeros and no method is configured; uniform-random init makes it
PGD.  Perturbations live at canvas scale; the substitute sees a bilinear
resize to its input size, and gradients flow through that resize back to the
perturbation.  All randomness is keyed by (seed, example index, iteration),
so results do not depend on chunking or thread schedule.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import engine as en
from .augment import AugmentStack, apply_stack
from .models import cross_entropy_vector
from .rng import Stream

CHUNK = 32  # fixed evaluation chunk; not configuration, so runs stay reproducible


class AttackError(Exception):
    pass


@dataclass(frozen=True)
class AttackSpec:
    """Complete attack configuration."""

    norm: str = "inf"                 # "inf" | "two"
    epsilon: float = 8.0 / 255.0      # 5.0 is the customary l2 budget
    step_size: float = 1.0 / 255.0    # 1.0 for l2
    iterations: int = 100
    init: str = "zeros"               # "zeros" (I-FGSM family) | "uniform_random" (PGD family)
    optimizer: str = "plain"          # "plain" | "MI" | "NI" | "PI"
    momentum: float = 1.0
    stack: AugmentStack = field(default_factory=AugmentStack)
    method: object | None = None      # methods.MethodParams
    n_backprops_per_iter: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.norm not in ("inf", "two"):
            raise AttackError(f"unknown norm {self.norm!r}")
        if self.init not in ("zeros", "uniform_random"):
            raise AttackError(f"unknown init {self.init!r}")
        if self.optimizer not in ("plain", "MI", "NI", "PI"):
            raise AttackError(f"unknown optimizer {self.optimizer!r}")
        if self.epsilon < 0 or self.step_size <= 0 or self.iterations < 0:
            raise AttackError("need epsilon >= 0, step_size > 0, iterations >= 0")
        if self.n_backprops_per_iter < 1:
            raise AttackError("n_backprops_per_iter must be >= 1")

    def un_amplitude(self, h: int, w: int) -> float:
        if self.norm == "inf":
            return self.epsilon
        return self.epsilon / np.sqrt(h * w)

    def to_json(self) -> dict:
        return {
            "norm": self.norm,
            "epsilon": self.epsilon,
            "step_size": self.step_size,
            "iterations": self.iterations,
            "init": self.init,
            "optimizer": self.optimizer,
            "momentum": self.momentum,
            "augment": self.stack.to_json(),
            "method": None if self.method is None else self.method.to_json(),
            "n_backprops_per_iter": self.n_backprops_per_iter,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AttackSpec":
        method = obj.get("method")
        if method is not None:
            from .methods import MethodParams
            method = MethodParams.from_json(method)
        return cls(
            norm=obj.get("norm", "inf"),
            epsilon=float(obj.get("epsilon", 8.0 / 255.0)),
            step_size=float(obj.get("step_size", 1.0 / 255.0)),
            iterations=int(obj.get("iterations", 100)),
            init=obj.get("init", "zeros"),
            optimizer=obj.get("optimizer", "plain"),
            momentum=float(obj.get("momentum", 1.0)),
            stack=AugmentStack.from_json(obj.get("augment", [])),
            method=method,
            n_backprops_per_iter=int(obj.get("n_backprops_per_iter", 1)),
            seed=int(obj.get("seed", 0)),
        )


@dataclass
class OptimizerState:
    """Per-example accumulated momentum and previous update direction."""

    g: np.ndarray
    prev_dir: np.ndarray
    zero_grad_events: int = 0

    @classmethod
    def fresh(cls, shape) -> "OptimizerState":
        return cls(np.zeros(shape), np.zeros(shape))


@dataclass
class AttackTrace:
    rows: list = field(default_factory=list)
    aborted: list = field(default_factory=list)
    deltas: list | None = None
    losses: list = field(default_factory=list)

    def log(self, iteration, loss, grad_norm, backprops, zero_grads):
        self.rows.append({"iteration": iteration, "loss": loss,
                          "grad_norm": grad_norm, "backprops": backprops,
                          "zero_grad": zero_grads})

    @property
    def backprops_per_iter(self):
        return [r["backprops"] for r in self.rows]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss", "grad_norm"])
            for r in self.rows:
                w.writerow([r["iteration"], repr(r["loss"]), repr(r["grad_norm"])])


def init_perturbation(spec: AttackSpec, shape, stream: Stream) -> np.ndarray:
    """Zero or uniform-in-ball initial perturbation for one example."""
    if spec.init == "zeros":
        return np.zeros(shape)
    if spec.norm == "inf":
        return stream.uniform(shape, -spec.epsilon, spec.epsilon)
    direction = stream.normal(shape)
    nrm = np.sqrt((direction * direction).sum())
    if nrm == 0.0:
        return np.zeros(shape)
    n = int(np.prod(shape))
    radius = spec.epsilon * stream.uniform() ** (1.0 / n)
    return direction * (radius / nrm)


def step(state: OptimizerState, grad: np.ndarray, spec: AttackSpec) -> np.ndarray:
    """One optimizer update for one example; returns the delta increment.

    For NI and PI the caller has already evaluated ``grad`` at the lookahead
    point; the accumulation rule here is shared MI-style momentum.
    """
    if spec.optimizer == "plain":
        d = grad
    else:
        l1 = np.abs(grad).sum()
        if l1 > 0.0:
            state.g = spec.momentum * state.g + grad / l1
        else:
            state.g = spec.momentum * state.g
            state.zero_grad_events += 1
        d = state.g
        if spec.optimizer == "PI":
            state.prev_dir = d.copy()
    if spec.norm == "inf":
        return spec.step_size * np.sign(d)
    l2 = np.sqrt((d * d).sum())
    return spec.step_size * d / max(l2, 1e-12)


def lookahead_point(state: OptimizerState, delta: np.ndarray, spec: AttackSpec) -> np.ndarray:
    """Where the gradient is evaluated: NI shifts by the momentum, PI by the
    previous direction (beta = step size); plain/MI evaluate in place."""
    if spec.optimizer == "NI":
        return delta + spec.step_size * spec.momentum * state.g
    if spec.optimizer == "PI":
        return delta + spec.step_size * state.prev_dir
    return delta


def project(delta: np.ndarray, spec: AttackSpec, x: np.ndarray) -> np.ndarray:
    """Ball projection then box feasibility; bitwise idempotent."""
    if spec.norm == "inf":
        out = np.clip(delta, -spec.epsilon, spec.epsilon)
    else:
        out = delta
        nrm = np.sqrt((out * out).sum())
        while nrm > spec.epsilon:  # repeat in the rare ulp-overshoot case
            out = out * (spec.epsilon / nrm)
            nrm = np.sqrt((out * out).sum())
    return np.clip(out, -x, 1.0 - x)


def _unwrap(substitute):
    model = getattr(substitute, "model", substitute)
    hooks = getattr(substitute, "hooks", None)
    return model, hooks


def forward_chunk(model, hooks, stack: AugmentStack, x_chunk, delta_vals,
                  ex_indices, key_prefix, batch_for_admix):
    """One tape: per-example augmentation -> batch -> substitute-side resize
    -> model forward.  Returns (tape, delta leaf, logits, live features)."""
    tape = en.Tape(hooks)
    dleaf = tape.leaf(delta_vals, "delta")
    parts = []
    for row, ex in enumerate(ex_indices):
        x_i = en.Tensor(x_chunk[row])
        d_i = en.take_index(dleaf, row, axis=0)
        parts.append(_augment_example(stack, x_i, d_i, key_prefix + (int(ex),),
                                      batch_for_admix, int(ex)))
    batch = en.stack(parts, axis=0)
    size = model.spec.input_size
    if batch.shape[-1] != size or batch.shape[-2] != size:
        batch = en.bilinear_resize(batch, size, size)
    logits, features = model.forward(batch, tape=tape)
    return tape, dleaf, logits, features


def _augment_example(stack, x_i, d_i, key, batch_for_admix, ex):
    return apply_stack(stack, x_i, d_i, key, batch=batch_for_admix, example_index=ex)


def chunk_ce_gradient(model, hooks, stack, x_chunk, delta_vals, y_chunk,
                      ex_indices, key_prefix, batch_for_admix, active):
    """Per-example CE loss and gradient of the summed active loss w.r.t. delta."""
    tape, dleaf, logits, _ = forward_chunk(model, hooks, stack, x_chunk,
                                           delta_vals, ex_indices, key_prefix,
                                           batch_for_admix)
    loss_vec = cross_entropy_vector(logits, y_chunk)
    grads = en.backward(tape, active.astype(np.float64), output=loss_vec,
                        wanted={dleaf.node})
    return loss_vec.data, grads[dleaf.node]


def averaged_gradient(substitute, x_chunk, delta_vals, y_chunk, n_copies,
                      stack, key_prefix, ex_indices=None, batch_for_admix=None,
                      active=None):
    """Mean over n_copies of the CE gradient with independent augmentation
    draws; realizes the VT/IR/TAIG fair baselines at backprop-count parity."""
    if n_copies < 1:
        raise AttackError("n_copies must be >= 1")
    model, hooks = _unwrap(substitute)
    n = len(x_chunk)
    if ex_indices is None:
        ex_indices = np.arange(n)
    if active is None:
        active = np.ones(n)
    if batch_for_admix is None:
        batch_for_admix = x_chunk
    total = np.zeros_like(delta_vals)
    loss0 = None
    for c in range(n_copies):
        loss_vec, g = chunk_ce_gradient(model, hooks, stack, x_chunk, delta_vals,
                                        y_chunk, ex_indices,
                                        key_prefix + ("copy", c), batch_for_admix,
                                        active)
        total += g
        if c == 0:
            loss0 = loss_vec
    return loss0, total / n_copies


def run_attack(substitutes, x_batch, y_batch, spec: AttackSpec,
               record_deltas: bool = False):
    """Craft adversarial examples; returns (x_adv, trace).

    ``substitutes`` is a model, a hooked-model handle, or a list of either
    (ensembles sample one member per iteration).  ``x_batch`` is canvas-scale
    (N,3,H,W) in [0,1]; the returned x_adv has the same shape and satisfies
    the budget and box constraints exactly.
    """
    subs = substitutes if isinstance(substitutes, (list, tuple)) else [substitutes]
    if not subs:
        raise AttackError("need at least one substitute")
    x_batch = np.asarray(x_batch, dtype=np.float64)
    y_batch = np.asarray(y_batch, dtype=np.int64)
    n, _, hc, wc = x_batch.shape
    stack = spec.stack.with_amplitude(spec.un_amplitude(hc, wc)) \
        if "UN" in spec.stack.kinds else spec.stack

    method_runner = None
    if spec.method is not None:
        from . import methods
        if len(subs) != 1:
            raise AttackError("gradient-computation methods need a single substitute")
        method_runner = methods.make_runner(spec.method, subs[0], spec)

    delta = np.stack([
        project(init_perturbation(spec, x_batch.shape[1:],
                                  Stream(spec.seed, "init", i)), spec, x_batch[i])
        for i in range(n)])
    states = [OptimizerState.fresh(x_batch.shape[1:]) for _ in range(n)]
    active = np.ones(n)
    trace = AttackTrace(deltas=[] if record_deltas else None)

    if method_runner is not None:
        method_runner.prepare(x_batch, y_batch)

    for it in range(spec.iterations):
        if len(subs) == 1:
            sub_it = subs[0]
        else:  # sample-once-per-iteration ensemble rule
            sub_it = subs[Stream(spec.seed, "ensemble", it).integers(0, len(subs))]
        model, hooks = _unwrap(sub_it)

        eval_pts = np.stack([lookahead_point(states[i], delta[i], spec)
                             for i in range(n)])
        bp_before = en.backward_call_count()
        losses = np.zeros(n)
        grads = np.zeros_like(delta)
        for lo in range(0, n, CHUNK):
            sel = slice(lo, min(lo + CHUNK, n))
            idx = np.arange(lo, min(lo + CHUNK, n))
            if method_runner is not None:
                lv, gv = method_runner.gradient(
                    stack, x_batch[sel], eval_pts[sel],
                    y_batch[sel], idx, it, x_batch, active[sel])
            elif spec.n_backprops_per_iter > 1:
                lv, gv = averaged_gradient(
                    sub_it, x_batch[sel], eval_pts[sel], y_batch[sel],
                    spec.n_backprops_per_iter, stack,
                    (spec.seed, "aug", it), ex_indices=idx,
                    batch_for_admix=x_batch, active=active[sel])
            else:
                lv, gv = chunk_ce_gradient(
                    model, hooks, stack, x_batch[sel], eval_pts[sel],
                    y_batch[sel], idx, (spec.seed, "aug", it), x_batch,
                    active[sel])
            losses[sel] = lv
            grads[sel] = gv
        bp_count = en.backward_call_count() - bp_before

        bad = ~np.isfinite(losses)
        for i in np.where(bad & (active > 0))[0]:
            trace.aborted.append((int(i), it))
            active[i] = 0.0

        zero_grads = 0
        for i in range(n):
            if active[i] == 0.0:
                continue
            before = states[i].zero_grad_events
            inc = step(states[i], grads[i], spec)
            zero_grads += states[i].zero_grad_events - before
            delta[i] = project(delta[i] + inc, spec, x_batch[i])

        live = active > 0
        mean_loss = float(losses[live].mean()) if live.any() else float("nan")
        gn = float(np.sqrt((grads[live] ** 2).sum(axis=(1, 2, 3))).mean()) \
            if live.any() else float("nan")
        trace.log(it, mean_loss, gn, bp_count, zero_grads)
        trace.losses.append(mean_loss)
        if record_deltas:
            trace.deltas.append(delta.copy())

    x_adv = np.clip(x_batch + delta, 0.0, 1.0)
    return x_adv, trace

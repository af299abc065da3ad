"""Input augmentations applied to the perturbed image, one copy per call.

Kinds: UN (uniform noise), DP (perturbation patch dropping), DI2 (random
resize + pad), TI (random integer translation), SI (power-of-two input
scaling), ADMIX (scaling plus mixing in another batch image; subsumes SI, so
the two are mutually exclusive in a stack).  Stacks apply in the canonical
order UN -> DP -> DI2 -> TI -> SI/ADMIX regardless of construction order.

Each stage transforms the current perturbed input; DP is defined on the
perturbation itself, so it subtracts the dropped patches of delta from the
running value.  All random draws are keyed by (attack seed, example index,
iteration index, kind), so results are independent of evaluation order, and
the draw values are treated as constants: gradients flow to delta through
every transform.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import engine as en
from .rng import Stream

KINDS = ("UN", "DP", "DI2", "TI", "SI", "ADMIX")
ORDER = {k: i for i, k in enumerate(KINDS)}


class AugmentError(Exception):
    pass


@dataclass(frozen=True)
class AugmentStack:
    """Augmentation kinds plus per-kind parameters.

    ``un_amplitude`` depends on the attack norm and budget and is filled in
    by the attack loop (epsilon for l-inf, epsilon/sqrt(H*W) for l2).
    """

    kinds: tuple = ()
    un_amplitude: float = 0.0
    dp_patch_size: int = 4
    dp_drop_prob: float = 0.5
    di2_min_resize: int = 26
    di2_apply_prob: float = 0.7
    ti_max_shift: int = 1
    si_exponents: tuple = (0, 1, 2, 3, 4)
    admix_eta: float = 0.2

    def __post_init__(self):
        kinds = tuple(self.kinds)
        for k in kinds:
            if k not in KINDS:
                raise AugmentError(f"unknown augmentation kind {k!r}")
        if len(set(kinds)) != len(kinds):
            raise AugmentError(f"duplicate kinds in stack: {kinds}")
        if "SI" in kinds and "ADMIX" in kinds:
            raise AugmentError("SI and ADMIX are mutually exclusive (ADMIX subsumes SI)")
        object.__setattr__(self, "kinds", tuple(sorted(kinds, key=ORDER.__getitem__)))

    def with_amplitude(self, amp: float) -> "AugmentStack":
        return replace(self, un_amplitude=amp)

    def to_json(self) -> list:
        out = []
        for k in self.kinds:
            entry = {"kind": k}
            if k == "UN":
                entry["amplitude"] = self.un_amplitude
            elif k == "DP":
                entry.update(patch_size=self.dp_patch_size, drop_prob=self.dp_drop_prob)
            elif k == "DI2":
                entry.update(min_resize=self.di2_min_resize, apply_prob=self.di2_apply_prob)
            elif k == "TI":
                entry["max_shift"] = self.ti_max_shift
            elif k == "SI":
                entry["exponents"] = list(self.si_exponents)
            elif k == "ADMIX":
                entry.update(eta=self.admix_eta, exponents=list(self.si_exponents))
            out.append(entry)
        return out

    @classmethod
    def from_json(cls, entries: list) -> "AugmentStack":
        kw = {"kinds": tuple(e["kind"] for e in entries)}
        for e in entries:
            k = e["kind"]
            if k == "UN" and "amplitude" in e:
                kw["un_amplitude"] = float(e["amplitude"])
            elif k == "DP":
                kw["dp_patch_size"] = int(e.get("patch_size", 4))
                kw["dp_drop_prob"] = float(e.get("drop_prob", 0.5))
            elif k == "DI2":
                kw["di2_min_resize"] = int(e.get("min_resize", 26))
                kw["di2_apply_prob"] = float(e.get("apply_prob", 0.7))
            elif k == "TI":
                kw["ti_max_shift"] = int(e.get("max_shift", 1))
            elif k in ("SI", "ADMIX") and "exponents" in e:
                kw["si_exponents"] = tuple(int(v) for v in e["exponents"])
            if k == "ADMIX" and "eta" in e:
                kw["admix_eta"] = float(e["eta"])
        return cls(**kw)


def _stage(kind, cur, x, delta, stack: AugmentStack, stream: Stream,
           batch=None, example_index=None):
    """Apply one augmentation to the running perturbed input ``cur``."""
    h, w = cur.shape[-2:]
    draws = {}
    if kind == "UN":
        amp = stack.un_amplitude
        u = stream.uniform(cur.shape, -amp, amp) if amp else np.zeros(cur.shape)
        draws["noise"] = u
        cur = en.clip(en.add(cur, u), 0.0, 1.0)
    elif kind == "DP":
        p = stack.dp_patch_size
        if h % p or w % p:
            raise AugmentError(f"DP patch size {p} does not divide image size {h}x{w}")
        keep = stream.bernoulli(1.0 - stack.dp_drop_prob, (h // p, w // p))
        mask = np.repeat(np.repeat(keep, p, axis=0), p, axis=1).astype(np.float64)
        draws["keep_mask"] = mask
        # cur - (1 - M) * delta == x + M * delta when cur == x + delta
        cur = en.add(cur, en.mul(delta, mask - 1.0))
    elif kind == "DI2":
        apply = stream.uniform() < stack.di2_apply_prob
        draws["apply"] = apply
        if apply:
            r = stream.integers(stack.di2_min_resize, h + 1)
            oy = stream.integers(0, h - r + 1)
            ox = stream.integers(0, w - r + 1)
            draws.update(resize=r, offset=(oy, ox))
            cur = en.bilinear_resize(cur, r, r)
            cur = en.pad2d(cur, oy, h - r - oy, ox, w - r - ox)
    elif kind == "TI":
        m = stack.ti_max_shift
        dy = stream.integers(-m, m + 1)
        dx = stream.integers(-m, m + 1)
        draws["shift"] = (dy, dx)
        cur = en.translate2d(cur, dy, dx)
    elif kind == "SI":
        i = stack.si_exponents[stream.integers(0, len(stack.si_exponents))]
        draws["exponent"] = i
        cur = en.mul(cur, 2.0 ** -i)
    elif kind == "ADMIX":
        if batch is None or len(batch) < 2:
            raise AugmentError("ADMIX needs a batch of at least 2 images")
        i = stack.si_exponents[stream.integers(0, len(stack.si_exponents))]
        n = len(batch)
        partner = (example_index + 1 + stream.integers(0, n - 1)) % n
        draws.update(exponent=i, partner=int(partner))
        cur = en.add(en.mul(cur, 2.0 ** -i),
                     np.asarray(batch[partner], dtype=np.float64) * stack.admix_eta)
    else:
        raise AugmentError(f"unknown augmentation kind {kind!r}")
    return cur, draws


def augment_one(kind, x, delta, stack: AugmentStack, stream: Stream,
                batch=None, example_index=None):
    """Single-kind augmentation of (x, delta); returns (x_aug, draws)."""
    x = x if isinstance(x, en.Tensor) else en.Tensor(x)
    delta = delta if isinstance(delta, en.Tensor) else en.Tensor(delta)
    if x.shape != delta.shape:
        raise en.ShapeError("augment_one", x.shape, delta.shape)
    cur = en.add(x, delta)
    return _stage(kind, cur, x, delta, stack, stream, batch, example_index)


def apply_stack(stack: AugmentStack, x, delta, rng_key: tuple,
                batch=None, example_index=None):
    """Apply the whole stack in canonical order; exactly one augmented copy.

    ``rng_key`` is the (seed, example, iteration, ...) tuple identifying this
    call's draw streams; each kind gets its own stream keyed by the kind name.
    An empty stack returns clip(x + delta, 0, 1).
    """
    x = x if isinstance(x, en.Tensor) else en.Tensor(x)
    delta = delta if isinstance(delta, en.Tensor) else en.Tensor(delta)
    if x.shape != delta.shape:
        raise en.ShapeError("apply_stack", x.shape, delta.shape)
    cur = en.add(x, delta)
    if not stack.kinds:
        return en.clip(cur, 0.0, 1.0)
    for kind in stack.kinds:
        cur, _ = _stage(kind, cur, x, delta, stack, Stream(*rng_key, kind),
                        batch, example_index)
    return cur

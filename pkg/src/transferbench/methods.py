"""Gradient-computation methods on a fixed substitute.

Three families:

* backward-pass modifications (SGM, LinBP, ConBP, PNA) installed as hooks on
  an attack-local registry; forward outputs are never changed;
* intermediate-feature losses (NRDM, TAP, FDA, ILA, ILA++, FIA, NAA) with
  their precomputed aggregates;
* output-space gradient estimators (VT, TAIG, SE) and the fair baselines
  (VT_baseline, IR_baseline, TAIG_baseline) that match their augmentation
  type and per-iteration backpropagation count.

Feature losses are written to be maximized by the attack loop and return one
value per example.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from importlib import resources

import numpy as np

from . import engine as en
from .attack import averaged_gradient, forward_chunk
from .augment import AugmentStack, apply_stack
from .models import Model, cross_entropy_vector
from .rng import Stream

METHOD_KINDS = (
    "SGM", "LinBP", "ConBP", "PNA", "SE",
    "NRDM", "TAP", "FDA", "ILA", "ILA++", "FIA", "NAA",
    "VT", "TAIG", "VT_baseline", "IR_baseline", "TAIG_baseline",
)
HOOK_METHODS = ("SGM", "LinBP", "ConBP", "PNA")
FEATURE_METHODS = ("NRDM", "TAP", "FDA", "ILA", "ILA++", "FIA", "NAA")
OUTPUT_METHODS = ("VT", "TAIG", "SE", "VT_baseline", "IR_baseline", "TAIG_baseline")

REFERENCE_ITERATIONS = 10  # plain I-FGSM reference run for ILA / ILA++
FDA_STATS_IMAGES = 512
_EPS_NORM = 1e-12


class MethodError(Exception):
    pass


@dataclass(frozen=True)
class MethodParams:
    """Method kind plus hyper-parameters; unset fields resolve per-arch."""

    kind: str
    layer_index: int | None = None
    gamma: float | None = None
    lambda_ridge: float = 1.0
    n_agg: int = 10
    drop_prob_fia: float = 0.3
    alpha_tap: float = 0.5
    eta_tap: float = 0.01
    lambda_tap: float = 0.005
    beta_vt: float = 1.5
    taig_random: bool = False

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise MethodError(f"unknown method kind {self.kind!r}")
        if self.lambda_ridge <= 0:
            raise MethodError("lambda_ridge must be > 0")
        if self.n_agg < 0:
            raise MethodError("n_agg must be >= 0")

    def to_json(self) -> dict:
        return {
            "kind": self.kind, "layer_index": self.layer_index,
            "gamma": self.gamma, "lambda_ridge": self.lambda_ridge,
            "n_agg": self.n_agg, "drop_prob_fia": self.drop_prob_fia,
            "alpha_tap": self.alpha_tap, "eta_tap": self.eta_tap,
            "lambda_tap": self.lambda_tap, "beta_vt": self.beta_vt,
            "taig_random": self.taig_random,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MethodParams":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in obj.items() if k in known})


def default_layer_index(kind: str, arch_kind: str, depth: int) -> int:
    """Tuned middle-layer table shipped with the package; midpoint fallback."""
    try:
        text = resources.files("transferbench").joinpath(
            "data/default_layers.json").read_text()
        return int(json.loads(text)[kind][arch_kind])
    except (FileNotFoundError, KeyError, ModuleNotFoundError):
        return depth // 2


_DEFAULT_GAMMA = {"toy_resnet": 0.5, "toy_vit": 0.6, "toy_mixer": 0.6}


def resolve(params: MethodParams, model_spec) -> MethodParams:
    """Fill unset layer_index / gamma from the per-arch defaults."""
    out = params
    if out.layer_index is None:
        out = replace(out, layer_index=default_layer_index(
            out.kind, model_spec.arch_kind, model_spec.depth))
    if out.gamma is None:
        out = replace(out, gamma=_DEFAULT_GAMMA.get(model_spec.arch_kind, 0.5))
    return out


def check_compatible(params: MethodParams, model_spec) -> None:
    kind, arch = params.kind, model_spec.arch_kind
    if kind == "SGM" and not model_spec.skip_labels:
        raise MethodError(f"SGM needs skip connections; {arch} has none")
    if kind in ("LinBP", "ConBP") and not model_spec.relu_labels:
        raise MethodError(f"{kind} needs ReLU layers; {arch} has none")
    if kind in ("PNA", "SE") and arch != "toy_vit":
        raise MethodError(f"{kind} targets attention models; got {arch}")
    if kind in FEATURE_METHODS or kind in ("LinBP", "ConBP"):
        li = params.layer_index
        if li is not None and not (0 <= li < len(model_spec.capture_points)):
            raise MethodError(
                f"layer_index {li} out of range for {arch} "
                f"(has {len(model_spec.capture_points)} capture points)")


class HookedModel:
    """Attack-local pairing of a model with its backward-modification hooks."""

    __slots__ = ("model", "hooks", "params")

    def __init__(self, model, hooks, params=None):
        self.model = model
        self.hooks = hooks
        self.params = params


def _relus_from(model_spec, layer_index: int) -> frozenset:
    """ReLU labels of blocks from the chosen block onward."""
    block = layer_index + 1
    out = set()
    for lbl in model_spec.relu_labels:
        if lbl.startswith("block") and int(lbl[5:lbl.index(".")]) >= block:
            out.add(lbl)
    return frozenset(out)


def install_backward_method(model: Model, params: MethodParams) -> HookedModel:
    """Validate compatibility and build the hook registry for a hook method."""
    params = resolve(params, model.spec)
    check_compatible(params, model.spec)
    kind = params.kind
    if kind == "SGM":
        descs = [en.HookDescriptor("scale_branch_grad",
                                   frozenset(model.spec.skip_labels),
                                   gamma=params.gamma)]
    elif kind == "LinBP":
        descs = [en.HookDescriptor("identity_relu_grad",
                                   _relus_from(model.spec, params.layer_index))]
    elif kind == "ConBP":
        descs = [en.HookDescriptor("softplus_relu_grad",
                                   _relus_from(model.spec, params.layer_index))]
    elif kind == "PNA":
        descs = [en.HookDescriptor("skip_attention_grad",
                                   frozenset(model.spec.attention_labels))]
    else:
        descs = []
    for d in descs:
        missing = d.layer_labels - set(model.spec.layer_labels)
        if missing:
            raise MethodError(f"hook labels not in model: {sorted(missing)}")
    return HookedModel(model, en.Hooks(descs), params)


# ---------------------------------------------------------------------------
# aggregates for the feature losses

@dataclass
class Aggregates:
    benign_features: np.ndarray | None = None   # f_l(x) per example
    ila_direction: np.ndarray | None = None     # ILA reference direction
    ilapp_map: np.ndarray | None = None         # ILA++ ridge-regression map
    fia_gradient: np.ndarray | None = None      # FIA aggregate gradient (normalized)
    naa_attribution: np.ndarray | None = None   # NAA attribution
    fda_channel_mean: np.ndarray | None = None  # FDA per-channel activation means
    tap_benign_power: np.ndarray | None = None  # sign(f)|f|^alpha at the benign point


def _plain_features(model: Model, x_batch, label, chunk=64):
    """f_l over a batch through the substitute-side resize, no augmentation."""
    outs = []
    size = model.spec.input_size
    for lo in range(0, len(x_batch), chunk):
        xb = np.asarray(x_batch[lo:lo + chunk], dtype=np.float64)
        t = en.Tensor(xb)
        if xb.shape[-1] != size:
            t = en.bilinear_resize(t, size, size)
        _, feats = model.forward(t)
        outs.append(feats[label].data)
    return np.concatenate(outs, axis=0)


def _feature_grad(model: Model, x_batch, y_batch, label):
    """dCE/df_l at the given (already canvas-scale) inputs, one backprop."""
    size = model.spec.input_size
    tape = en.Tape()
    t = tape.leaf(np.asarray(x_batch, dtype=np.float64), "x")
    if x_batch.shape[-1] != size:
        t = en.bilinear_resize(t, size, size)
    logits, feats = model.forward(t, tape=tape)
    loss = cross_entropy_vector(logits, y_batch)
    feat = feats[label]
    grads = en.backward(tape, np.ones(len(x_batch)), output=loss,
                        wanted={feat.node})
    return grads[feat.node]


def _flat_norm(a, axes):
    return np.sqrt((a * a).sum(axis=axes, keepdims=True))


def precompute_aggregates(params: MethodParams, model: Model, x, y,
                          reference_trace=None, stats_batch=None) -> Aggregates:
    """Build the per-method constants consumed by feature_loss."""
    params = resolve(params, model.spec)
    check_compatible(params, model.spec)
    label = model.spec.capture_points[params.layer_index]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    agg = Aggregates()
    agg.benign_features = _plain_features(model, x, label)
    feat_axes = tuple(range(1, agg.benign_features.ndim))
    kind = params.kind

    if kind == "TAP":
        agg.tap_benign_power = (np.sign(agg.benign_features)
                                * np.abs(agg.benign_features) ** params.alpha_tap)
    elif kind == "ILA":
        if reference_trace is None or not reference_trace.deltas:
            raise MethodError("ILA needs a completed reference attack trace")
        x_ref = np.clip(x + reference_trace.deltas[-1], 0.0, 1.0)
        agg.ila_direction = _plain_features(model, x_ref, label) - agg.benign_features
    elif kind == "ILA++":
        if reference_trace is None or not reference_trace.deltas:
            raise MethodError("ILA++ needs a completed reference attack trace")
        prev_loss = _ce_values(model, x, y)
        rows, incs = [], []
        for delta_t in reference_trace.deltas:
            x_t = np.clip(x + delta_t, 0.0, 1.0)
            rows.append(_plain_features(model, x_t, label) - agg.benign_features)
            loss_t = _ce_values(model, x_t, y)
            incs.append(loss_t - prev_loss)
            prev_loss = loss_t
        h = np.stack(rows, axis=1)                 # (N, T, *feat)
        r = np.stack(incs, axis=1)                 # (N, T)
        n, t = r.shape
        hf = h.reshape(n, t, -1)
        maps = np.empty((n, hf.shape[2]))
        for i in range(n):
            gram = hf[i] @ hf[i].T + params.lambda_ridge * np.eye(t)
            maps[i] = hf[i].T @ np.linalg.solve(gram, r[i])
        agg.ilapp_map = maps.reshape(agg.benign_features.shape)
    elif kind == "FIA":
        total = np.zeros_like(agg.benign_features)
        for k in range(params.n_agg):
            keep = Stream(params.n_agg, "fia_mask", k).bernoulli(
                1.0 - params.drop_prob_fia, x.shape).astype(np.float64)
            total += _feature_grad(model, x * keep, y, label)
        norm = _flat_norm(total, feat_axes)
        agg.fia_gradient = total / np.maximum(norm, _EPS_NORM)
    elif kind == "NAA":
        base = np.zeros_like(x)
        mean_grad = np.zeros_like(agg.benign_features)
        for k in range(1, params.n_agg + 1):
            point = base + (k / params.n_agg) * (x - base)
            mean_grad += _feature_grad(model, point, y, label)
        mean_grad /= params.n_agg
        base_feat = _plain_features(model, base, label)
        agg.naa_attribution = (agg.benign_features - base_feat) * mean_grad
    elif kind == "FDA":
        if stats_batch is None:
            raise MethodError("FDA needs a statistics batch")
        feats = _plain_features(model, stats_batch, label)
        if feats.ndim == 4:       # conv features: per channel over (N, H, W)
            agg.fda_channel_mean = feats.mean(axis=(0, 2, 3), keepdims=True)[0]
        else:                     # token features: per channel over (N, T)
            agg.fda_channel_mean = feats.mean(axis=(0, 1), keepdims=True)[0]
    return agg


def _ce_values(model: Model, x_batch, y_batch, chunk=64):
    out = []
    size = model.spec.input_size
    for lo in range(0, len(x_batch), chunk):
        xb = np.asarray(x_batch[lo:lo + chunk], np.float64)
        t = en.Tensor(xb)
        if xb.shape[-1] != size:
            t = en.bilinear_resize(t, size, size)
        logits, _ = model.forward(t)
        out.append(cross_entropy_vector(logits, y_batch[lo:lo + chunk]).data)
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# feature losses (per-example, maximized by the attack)

def _sum_all_but_first(t):
    out = t
    for ax in range(t.ndim - 1, 0, -1):
        out = en.sum_(out, axis=ax)
    return out


def feature_loss(params: MethodParams, agg: Aggregates, captured, logits=None,
                 delta=None, labels=None):
    """Per-example loss on the captured middle-layer features.

    ``captured`` is the live feature tensor for the current (augmented)
    input rows; aggregate arrays must already be sliced to the same rows.
    TAP additionally needs the live logits, the perturbation rows, and the
    labels.
    """
    kind = params.kind
    if kind == "NRDM":
        if agg.benign_features is None:
            raise MethodError("NRDM needs benign features")
        diff = en.sub(captured, agg.benign_features)
        return en.sqrt(_sum_all_but_first(en.mul(diff, diff)))
    if kind == "TAP":
        if agg.tap_benign_power is None or delta is None or labels is None:
            raise MethodError("TAP needs benign powers, delta and labels")
        ce = cross_entropy_vector(logits, labels)
        sp = en.signed_pow(captured, params.alpha_tap)
        d = en.sub(sp, agg.tap_benign_power)
        dist = _sum_all_but_first(en.mul(d, d))
        smooth = _sum_all_but_first(en.absolute(en.avg_pool(delta, 3, stride=1, pad=1)))
        return en.add(en.add(ce, en.mul(dist, params.lambda_tap)),
                      en.mul(smooth, -params.eta_tap))
    if kind == "FDA":
        if agg.fda_channel_mean is None:
            raise MethodError("FDA needs channel means")
        mu = agg.fda_channel_mean
        if captured.ndim == 4:
            mu = mu.reshape(1, -1, 1, 1)
        below = (captured.data < mu).astype(np.float64)
        low = en.mul(captured, below)
        high = en.mul(captured, 1.0 - below)
        ln_low = en.log(en.clip(en.sqrt(_sum_all_but_first(en.mul(low, low))),
                                _EPS_NORM, 1e300))
        ln_high = en.log(en.clip(en.sqrt(_sum_all_but_first(en.mul(high, high))),
                                 _EPS_NORM, 1e300))
        return en.sub(ln_low, ln_high)
    if kind == "ILA":
        if agg.ila_direction is None or agg.benign_features is None:
            raise MethodError("ILA needs a reference direction")
        diff = en.sub(captured, agg.benign_features)
        return _sum_all_but_first(en.mul(diff, agg.ila_direction))
    if kind == "ILA++":
        if agg.ilapp_map is None or agg.benign_features is None:
            raise MethodError("ILA++ needs the ridge map")
        diff = en.sub(captured, agg.benign_features)
        return _sum_all_but_first(en.mul(diff, agg.ilapp_map))
    if kind == "FIA":
        if agg.fia_gradient is None:
            raise MethodError("FIA needs the aggregate gradient")
        return en.neg(_sum_all_but_first(en.mul(captured, agg.fia_gradient)))
    if kind == "NAA":
        if agg.naa_attribution is None:
            raise MethodError("NAA needs the attribution")
        a = agg.naa_attribution
        pos, negp = np.maximum(a, 0.0), np.maximum(-a, 0.0)
        return en.add(en.neg(_sum_all_but_first(en.mul(captured, pos))),
                      _sum_all_but_first(en.mul(captured, negp)))
    raise MethodError(f"{kind} is not a feature-loss method")


# ---------------------------------------------------------------------------
# runner used by attack.run_attack

class MethodRunner:
    """Per-attack state: hooks, aggregates, VT variance, parity bookkeeping."""

    def __init__(self, params: MethodParams, substitute, spec):
        model = getattr(substitute, "model", substitute)
        given_hooks = getattr(substitute, "hooks", None)
        self.params = resolve(params, model.spec)
        check_compatible(self.params, model.spec)
        if self.params.kind in HOOK_METHODS:
            handle = install_backward_method(model, self.params)
            self.hooks = handle.hooks
        else:
            self.hooks = given_hooks
        self.model = model
        self.spec = spec
        self.agg = None
        self._vt_v = None

    # -- preparation ---------------------------------------------------
    def prepare(self, x_batch, y_batch, stats_batch=None):
        kind = self.params.kind
        if kind in ("ILA", "ILA++"):
            from .attack import AttackSpec, run_attack
            ref_spec = AttackSpec(
                norm=self.spec.norm, epsilon=self.spec.epsilon,
                step_size=self.spec.step_size,
                iterations=REFERENCE_ITERATIONS, init="zeros",
                optimizer="plain", stack=AugmentStack(), method=None,
                seed=self.spec.seed)
            _, ref_trace = run_attack(self.model, x_batch, y_batch, ref_spec,
                                      record_deltas=True)
            self.agg = precompute_aggregates(self.params, self.model, x_batch,
                                             y_batch, reference_trace=ref_trace)
        elif kind == "FDA":
            if stats_batch is None:
                stats_batch = _fda_stats_batch(x_batch)
            self.agg = precompute_aggregates(self.params, self.model, x_batch,
                                             y_batch, stats_batch=stats_batch)
        elif kind in FEATURE_METHODS:
            self.agg = precompute_aggregates(self.params, self.model, x_batch,
                                             y_batch)
        if kind == "VT":
            self._vt_v = np.zeros_like(np.asarray(x_batch, dtype=np.float64))

    # -- per-iteration gradient ----------------------------------------
    def gradient(self, stack, x_chunk, delta_vals, y_chunk, ex_indices,
                 iteration, full_batch, active):
        kind = self.params.kind
        key = (self.spec.seed, "aug", iteration)
        if kind in HOOK_METHODS or kind in FEATURE_METHODS or kind == "SE":
            tape, dleaf, logits, feats = forward_chunk(
                self.model, self.hooks, stack, x_chunk, delta_vals, ex_indices,
                key, full_batch)
            if kind in FEATURE_METHODS:
                label = self.model.spec.capture_points[self.params.layer_index]
                agg = _slice_agg(self.agg, ex_indices)
                if kind == "TAP":
                    loss = feature_loss(self.params, agg, feats[label],
                                        logits=logits, delta=dleaf,
                                        labels=y_chunk)
                else:
                    loss = feature_loss(self.params, agg, feats[label])
            elif kind == "SE":
                per_block = [cross_entropy_vector(
                    self.model.apply_head(feats[f"block{i}.cls"]), y_chunk)
                    for i in range(1, self.model.spec.depth + 1)]
                total = per_block[0]
                for extra in per_block[1:]:
                    total = en.add(total, extra)
                loss = en.mul(total, 1.0 / len(per_block))
            else:
                loss = cross_entropy_vector(logits, y_chunk)
            grads = en.backward(tape, active.astype(np.float64), output=loss,
                                wanted={dleaf.node})
            return loss.data, grads[dleaf.node]

        if kind == "VT":
            return self._vt_gradient(stack, x_chunk, delta_vals, y_chunk,
                                     ex_indices, iteration, full_batch, active)
        if kind == "TAIG":
            return self._taig_gradient(stack, x_chunk, delta_vals, y_chunk,
                                       ex_indices, iteration, full_batch, active)
        if kind in ("VT_baseline", "IR_baseline", "TAIG_baseline"):
            extra = {"VT_baseline": ("UN",), "IR_baseline": ("DP",),
                     "TAIG_baseline": ("SI", "UN")}[kind]
            bstack = _extend_stack(stack, extra, self.spec)
            copies = self.params.n_agg + 1 if kind == "VT_baseline" else max(1, self.params.n_agg)
            return averaged_gradient(
                HookedModel(self.model, self.hooks), x_chunk, delta_vals,
                y_chunk, copies, bstack, key, ex_indices=ex_indices,
                batch_for_admix=full_batch, active=active)
        raise MethodError(f"no gradient rule for {kind}")

    def _plain_chunk_grad(self, stack, x_chunk, delta_vals, y_chunk,
                          ex_indices, key, full_batch, active):
        tape, dleaf, logits, _ = forward_chunk(
            self.model, self.hooks, stack, x_chunk, delta_vals, ex_indices,
            key, full_batch)
        loss = cross_entropy_vector(logits, y_chunk)
        grads = en.backward(tape, active.astype(np.float64), output=loss,
                            wanted={dleaf.node})
        return loss.data, grads[dleaf.node]

    def _vt_gradient(self, stack, x_chunk, delta_vals, y_chunk, ex_indices,
                     iteration, full_batch, active):
        key = (self.spec.seed, "aug", iteration)
        loss, g = self._plain_chunk_grad(stack, x_chunk, delta_vals, y_chunk,
                                         ex_indices, key, full_batch, active)
        out = g + self._vt_v[ex_indices]
        radius = self.params.beta_vt * self.spec.epsilon
        if self.params.n_agg > 0:
            acc = np.zeros_like(g)
            for s in range(self.params.n_agg):
                noise = np.stack([
                    Stream(self.spec.seed, "vt_noise", int(ex), iteration, s)
                    .uniform(delta_vals.shape[1:], -radius, radius)
                    for ex in ex_indices])
                _, gs = self._plain_chunk_grad(
                    stack, x_chunk, delta_vals + noise, y_chunk, ex_indices,
                    key + ("vt", s), full_batch, active)
                acc += gs
            self._vt_v[ex_indices] = acc / self.params.n_agg - g
        return loss, out

    def _taig_gradient(self, stack, x_chunk, delta_vals, y_chunk, ex_indices,
                       iteration, full_batch, active):
        n = max(1, self.params.n_agg)
        key = (self.spec.seed, "aug", iteration)
        total = np.zeros_like(delta_vals)
        loss0 = None
        for k in range(n, 0, -1):
            scale = k / n
            tape, dleaf, logits, _ = forward_chunk_scaled(
                self.model, self.hooks, stack, x_chunk, delta_vals, ex_indices,
                key + ("taig", k), full_batch, scale,
                noise_key=(self.spec.seed, "taig_noise", iteration, k)
                if self.params.taig_random else None,
                amplitude=stack.un_amplitude)
            loss = cross_entropy_vector(logits, y_chunk)
            grads = en.backward(tape, active.astype(np.float64), output=loss,
                                wanted={dleaf.node})
            total += grads[dleaf.node]
            if k == n:
                loss0 = loss.data
        return loss0, total / n


def forward_chunk_scaled(model, hooks, stack, x_chunk, delta_vals, ex_indices,
                         key_prefix, batch_for_admix, scale, noise_key=None,
                         amplitude=0.0):
    """forward_chunk variant that scales the augmented input (TAIG path)."""
    tape = en.Tape(hooks)
    dleaf = tape.leaf(delta_vals, "delta")
    parts = []
    for row, ex in enumerate(ex_indices):
        x_i = en.Tensor(x_chunk[row])
        d_i = en.take_index(dleaf, row, axis=0)
        cur = apply_stack(stack, x_i, d_i, key_prefix + (int(ex),),
                          batch=batch_for_admix, example_index=int(ex))
        cur = en.mul(cur, scale)
        if noise_key is not None and amplitude:
            u = Stream(*noise_key, int(ex)).uniform(cur.shape, -amplitude, amplitude)
            cur = en.add(cur, u)
        parts.append(cur)
    batch = en.stack(parts, axis=0)
    size = model.spec.input_size
    if batch.shape[-1] != size or batch.shape[-2] != size:
        batch = en.bilinear_resize(batch, size, size)
    logits, features = model.forward(batch, tape=tape)
    return tape, dleaf, logits, features


def _extend_stack(stack: AugmentStack, extra_kinds, spec) -> AugmentStack:
    kinds = list(stack.kinds)
    for k in extra_kinds:
        if k not in kinds and not (k == "SI" and "ADMIX" in kinds):
            kinds.append(k)
    out = replace(stack, kinds=tuple(kinds))
    if "UN" in out.kinds and out.un_amplitude == 0.0:
        out = replace(out, un_amplitude=spec.epsilon)
    return out


def _slice_agg(agg: Aggregates, ex_indices) -> Aggregates:
    def pick(a):
        return None if a is None else a[ex_indices]

    return Aggregates(
        benign_features=pick(agg.benign_features),
        ila_direction=pick(agg.ila_direction),
        ilapp_map=pick(agg.ilapp_map),
        fia_gradient=pick(agg.fia_gradient),
        naa_attribution=pick(agg.naa_attribution),
        fda_channel_mean=agg.fda_channel_mean,
        tap_benign_power=pick(agg.tap_benign_power),
    )


def _fda_stats_batch(x_batch):
    """Statistics images synthesized from the attack batch when the harness
    does not supply a held-out set: jittered copies, counter-keyed."""
    x = np.asarray(x_batch, dtype=np.float64)
    reps = int(np.ceil(FDA_STATS_IMAGES / len(x)))
    outs = []
    for r in range(reps):
        noise = Stream(88, "fda_stats", r).uniform(x.shape, -0.05, 0.05)
        outs.append(np.clip(x + noise, 0.0, 1.0))
    return np.concatenate(outs)[:FDA_STATS_IMAGES]


def make_runner(params: MethodParams, substitute, spec) -> MethodRunner:
    return MethodRunner(params, substitute, spec)


def output_space_gradient(params: MethodParams, substitute, x, delta, y,
                          spec, iteration=0):
    """One-shot convenience wrapper around the runner for tests."""
    runner = MethodRunner(params, substitute, spec)
    runner.prepare(x, y)
    n = len(x)
    stack = spec.stack.with_amplitude(spec.un_amplitude(x.shape[-2], x.shape[-1])) \
        if "UN" in spec.stack.kinds else spec.stack
    return runner.gradient(stack, x, delta, y, np.arange(n), iteration, x,
                           np.ones(n))

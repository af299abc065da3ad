"""The four toy classifier architectures and the classification loss.

Every architecture is expressed through the engine's primitive ops so that
attacks can differentiate through it.  Weights live in an ordered dict of
float64 arrays; during attacks they are passed as constants (no gradient),
during training they are bound to the tape as leaves.  Layer labels are
emitted via ``engine.mark`` / labeled ReLUs at the sites listed in
``ModelSpec.layer_labels``.
"""

from __future__ import annotations

import numpy as np

from .. import engine as en
from ..rng import Stream
from .spec import PATCH, ModelError, ModelSpec


def _dense(x, w, b):
    return en.add(en.matmul(x, w), b)


def _chan_bias(b):
    """Reshape a (C,) bias for NCHW broadcasting, Tensor or array alike."""
    if isinstance(b, en.Tensor):
        return en.reshape(b, (1, -1, 1, 1))
    return np.asarray(b).reshape(1, -1, 1, 1)


def _param_table(spec: ModelSpec):
    """Ordered (name, shape, fan_in) table.

    fan_in None means zeros, "one" means ones; "zero" marks branch-final
    weights that start at zero so residual blocks begin as identities (these
    nets carry no normalization layers, and He-scaled branches are
    untrainable with plain SGD at useful learning rates).
    """
    w, d, k = spec.width, spec.depth, spec.num_classes
    rows = []
    if spec.arch_kind == "toy_cnn":
        cin = 3
        for i in range(1, d + 1):
            rows.append((f"block{i}.conv.w", (w, cin, 3, 3), cin * 9))
            rows.append((f"block{i}.conv.b", (w,), None))
            cin = w
        flat = w * (spec.input_size // 2 ** d) ** 2
        rows.append(("head.w", (flat, k), flat))
        rows.append(("head.b", (k,), None))
    elif spec.arch_kind == "toy_resnet":
        rows.append(("stem.conv.w", (w, 3, 3, 3), 27))
        rows.append(("stem.conv.b", (w,), None))
        for i in range(1, d + 1):
            rows.append((f"block{i}.conv1.w", (w, w, 3, 3), w * 9))
            rows.append((f"block{i}.conv1.b", (w,), None))
            rows.append((f"block{i}.conv2.w", (w, w, 3, 3), "zero"))
            rows.append((f"block{i}.conv2.b", (w,), None))
        rows.append(("head.w", (w, k), w))
        rows.append(("head.b", (k,), None))
    elif spec.arch_kind == "toy_vit":
        e, t = w, spec.tokens
        rows.append(("patch.w", (e, 3, PATCH, PATCH), 3 * PATCH * PATCH))
        rows.append(("patch.b", (e,), None))
        rows.append(("cls", (1, 1, e), e))
        rows.append(("pos", (1, t + 1, e), e))
        for i in range(1, d + 1):
            p = f"block{i}."
            rows.append((p + "ln1.gain", (e,), "one"))
            rows.append((p + "ln1.bias", (e,), None))
            for nm in ("wq", "wk", "wv", "wo"):
                fan = "zero" if nm == "wo" else e
                rows.append((p + "attn." + nm, (e, e), fan))
                rows.append((p + "attn.b" + nm[1], (e,), None))
            rows.append((p + "ln2.gain", (e,), "one"))
            rows.append((p + "ln2.bias", (e,), None))
            rows.append((p + "mlp.w1", (e, 2 * e), e))
            rows.append((p + "mlp.b1", (2 * e,), None))
            rows.append((p + "mlp.w2", (2 * e, e), "zero"))
            rows.append((p + "mlp.b2", (e,), None))
        rows.append(("norm.gain", (e,), "one"))
        rows.append(("norm.bias", (e,), None))
        rows.append(("head.w", (e, k), e))
        rows.append(("head.b", (k,), None))
    elif spec.arch_kind == "toy_mixer":
        e, t = w, spec.tokens
        th, ch = t, 2 * e
        rows.append(("patch.w", (e, 3, PATCH, PATCH), 3 * PATCH * PATCH))
        rows.append(("patch.b", (e,), None))
        for i in range(1, d + 1):
            p = f"block{i}."
            rows.append((p + "ln1.gain", (e,), "one"))
            rows.append((p + "ln1.bias", (e,), None))
            rows.append((p + "token.w1", (t, th), t))
            rows.append((p + "token.b1", (th,), None))
            rows.append((p + "token.w2", (th, t), "zero"))
            rows.append((p + "token.b2", (t,), None))
            rows.append((p + "ln2.gain", (e,), "one"))
            rows.append((p + "ln2.bias", (e,), None))
            rows.append((p + "channel.w1", (e, ch), e))
            rows.append((p + "channel.b1", (ch,), None))
            rows.append((p + "channel.w2", (ch, e), "zero"))
            rows.append((p + "channel.b2", (e,), None))
        rows.append(("norm.gain", (e,), "one"))
        rows.append(("norm.bias", (e,), None))
        rows.append(("head.w", (e, k), e))
        rows.append(("head.b", (k,), None))
    return rows


def _init_params(spec: ModelSpec, seed: int) -> dict:
    """Uniform He-style fan-in init keyed by (seed, parameter index)."""
    params = {}
    for idx, (name, shape, fan) in enumerate(_param_table(spec)):
        if fan is None or fan == "zero":
            params[name] = np.zeros(shape, dtype=np.float64)
        elif fan == "one":
            params[name] = np.ones(shape, dtype=np.float64)
        else:
            bound = np.sqrt(6.0 / fan)
            params[name] = Stream(seed, "init", idx).uniform(shape, -bound, bound)
    return params


def _patch_tokens(x, params):
    emb = en.conv2d(x, params["patch.w"], stride=PATCH)
    emb = en.add(emb, _chan_bias(params["patch.b"]))
    n, e = emb.shape[0], emb.shape[1]
    t = emb.shape[2] * emb.shape[3]
    return en.transpose(en.reshape(emb, (n, e, t)), (0, 2, 1))


def _forward_cnn(spec, params, x, features):
    z = x
    for i in range(1, spec.depth + 1):
        zw = en.conv2d(z, params[f"block{i}.conv.w"], stride=1, pad=1)
        z = en.relu(en.add(zw, _chan_bias(params[f"block{i}.conv.b"])),
                    label=f"block{i}.relu")
        z = en.max_pool2(z)
        z = en.mark(z, f"block{i}.out")
        features[f"block{i}.out"] = z
    n = z.shape[0]
    flat = en.reshape(z, (n, -1))
    return _dense(flat, params["head.w"], params["head.b"])


def _forward_resnet(spec, params, x, features):
    def conv(z, name):
        zw = en.conv2d(z, params[name + ".w"], stride=1, pad=1)
        return en.add(zw, _chan_bias(params[name + ".b"]))

    z = en.relu(conv(x, "stem.conv"), label="stem.relu")
    z = en.max_pool2(z)
    for i in range(1, spec.depth + 1):
        br = en.relu(conv(z, f"block{i}.conv1"), label=f"block{i}.relu1")
        br = conv(br, f"block{i}.conv2")
        br = en.mark(br, f"block{i}.skip")
        z = en.relu(en.add(z, br), label=f"block{i}.relu2")
        if i < spec.depth:
            z = en.max_pool2(z)
        z = en.mark(z, f"block{i}.out")
        features[f"block{i}.out"] = z
    pooled = en.mean(en.mean(z, axis=3), axis=2)
    return _dense(pooled, params["head.w"], params["head.b"])


def _forward_vit(spec, params, x, features):
    e, t = spec.width, spec.tokens
    z = _patch_tokens(x, params)
    n = z.shape[0]
    cls = en.broadcast_to(params["cls"], (n, 1, e)) if isinstance(params["cls"], en.Tensor) \
        else en.Tensor(np.broadcast_to(params["cls"], (n, 1, e)).copy())
    z = en.concat([cls, z], axis=1)
    z = en.add(z, params["pos"])
    scale = 1.0 / np.sqrt(e)
    for i in range(1, spec.depth + 1):
        p = f"block{i}."
        h = en.layer_norm(z, params[p + "ln1.gain"], params[p + "ln1.bias"])
        q = _dense(h, params[p + "attn.wq"], params[p + "attn.bq"])
        k = _dense(h, params[p + "attn.wk"], params[p + "attn.bk"])
        v = _dense(h, params[p + "attn.wv"], params[p + "attn.bv"])
        scores = en.mul(en.matmul(q, en.transpose(k, (0, 2, 1))), scale)
        attn = en.mark(en.softmax(scores, axis=-1), p + "attn.weights")
        out = _dense(en.matmul(attn, v), params[p + "attn.wo"], params[p + "attn.bo"])
        z = en.add(z, en.mark(out, p + "attn_skip"))
        h2 = en.layer_norm(z, params[p + "ln2.gain"], params[p + "ln2.bias"])
        m = _dense(en.gelu(_dense(h2, params[p + "mlp.w1"], params[p + "mlp.b1"])),
                   params[p + "mlp.w2"], params[p + "mlp.b2"])
        z = en.add(z, en.mark(m, p + "mlp_skip"))
        z = en.mark(z, p + "out")
        features[p + "out"] = z
        cls_i = en.take_index(z, 0, axis=1)
        features[p + "cls"] = cls_i
        en.mark(cls_i, p + "cls")
    zf = en.layer_norm(z, params["norm.gain"], params["norm.bias"])
    return _dense(en.take_index(zf, 0, axis=1), params["head.w"], params["head.b"])


def _vit_head(spec, params, cls_token):
    h = en.layer_norm(cls_token, params["norm.gain"], params["norm.bias"])
    return _dense(h, params["head.w"], params["head.b"])


def _forward_mixer(spec, params, x, features):
    z = _patch_tokens(x, params)
    for i in range(1, spec.depth + 1):
        p = f"block{i}."
        h = en.layer_norm(z, params[p + "ln1.gain"], params[p + "ln1.bias"])
        ht = en.transpose(h, (0, 2, 1))
        mix = _dense(en.gelu(_dense(ht, params[p + "token.w1"], params[p + "token.b1"])),
                     params[p + "token.w2"], params[p + "token.b2"])
        z = en.add(z, en.mark(en.transpose(mix, (0, 2, 1)), p + "token_skip"))
        h2 = en.layer_norm(z, params[p + "ln2.gain"], params[p + "ln2.bias"])
        cm = _dense(en.gelu(_dense(h2, params[p + "channel.w1"], params[p + "channel.b1"])),
                    params[p + "channel.w2"], params[p + "channel.b2"])
        z = en.add(z, en.mark(cm, p + "channel_skip"))
        z = en.mark(z, p + "out")
        features[p + "out"] = z
    zf = en.layer_norm(z, params["norm.gain"], params["norm.bias"])
    pooled = en.mean(zf, axis=1)
    return _dense(pooled, params["head.w"], params["head.b"])


_FORWARDS = {
    "toy_cnn": _forward_cnn,
    "toy_resnet": _forward_resnet,
    "toy_vit": _forward_vit,
    "toy_mixer": _forward_mixer,
}


class Model:
    """Immutable toy classifier: a spec plus an ordered weight dict."""

    def __init__(self, spec: ModelSpec, params: dict, meta: dict | None = None):
        self.spec = spec
        self.params = params
        self.meta = dict(meta or {})

    def forward(self, x, tape=None, params=None):
        """Compute logits; returns (logits, live feature tensors by label).

        ``x`` may be a Tensor on ``tape`` or a plain array (wrapped as a
        constant).  ``params`` overrides the stored weights, e.g. with tape
        leaves during training; by default weights enter as constants.
        """
        if not isinstance(x, en.Tensor):
            x = tape.leaf(x, "input") if tape is not None else en.Tensor(x)
        n, c, h, w = x.shape
        if (c, h, w) != (3, self.spec.input_size, self.spec.input_size):
            raise ModelError(
                f"input {x.shape} does not match model input size "
                f"(3, {self.spec.input_size}, {self.spec.input_size}); "
                "resizing is the harness's job")
        features: dict[str, en.Tensor] = {}
        logits = _FORWARDS[self.spec.arch_kind](
            self.spec, params if params is not None else self.params, x, features)
        return logits, features

    def predict(self, batch: np.ndarray) -> np.ndarray:
        """Pure logits for a (N,3,H,W) batch in [0,1]; no tape, no hooks."""
        logits, _ = self.forward(np.asarray(batch, dtype=np.float64))
        return logits.data

    def apply_head(self, token):
        """Run the final norm + classification head on a (N,width) tensor."""
        if self.spec.arch_kind != "toy_vit":
            raise ModelError("apply_head is only defined for toy_vit")
        return _vit_head(self.spec, self.params, token)

    def bind(self, tape) -> dict:
        """Register every weight as a tape leaf; returns name -> Tensor."""
        return {name: tape.leaf(arr, name) for name, arr in self.params.items()}

    def param_names(self):
        return [name for name, _, _ in _param_table(self.spec)]

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for _, s, _ in _param_table(self.spec))

    def copy(self) -> "Model":
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()},
                     dict(self.meta))


def build_model(spec: ModelSpec, seed: int) -> Model:
    """Deterministically initialized model for (spec, seed)."""
    return Model(spec, _init_params(spec, seed), {"seed": seed})


def predict(model: Model, batch: np.ndarray) -> np.ndarray:
    return model.predict(batch)


def cross_entropy_vector(logits, labels):
    """Per-example -log softmax(logits)[label]; differentiable Tensor."""
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[-1]
    if labels.min() < 0 or labels.max() >= k:
        raise ModelError(f"label out of range [0, {k})")
    return en.neg(en.gather_rows(en.log_softmax(logits), labels))


def cross_entropy(logits, labels):
    """Mean cross-entropy over the batch."""
    return en.mean(cross_entropy_vector(logits, labels))

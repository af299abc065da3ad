import numpy as np
import pytest

from conftest import densify

from transferbench import engine as en
from transferbench import models as md
from transferbench.rng import Stream


def rand_batch(n, size, tag="batch"):
    return Stream(0, "test_models", tag).uniform((n, 3, size, size), 0.0, 1.0)


@pytest.mark.parametrize("arch", md.ARCH_KINDS)
def test_build_is_deterministic(arch):
    spec = md.ModelSpec(arch, width=8, depth=2, input_size=16)
    m1 = md.build_model(spec, seed=5)
    m2 = md.build_model(spec, seed=5)
    for k in m1.params:
        assert m1.params[k].tobytes() == m2.params[k].tobytes()
    m3 = md.build_model(spec, seed=6)
    assert any(m1.params[k].tobytes() != m3.params[k].tobytes() for k in m1.params)


def test_resnet_depth2_has_two_skip_labels():
    spec = md.ModelSpec("toy_resnet", width=8, depth=2, input_size=16)
    import fnmatch
    skips = [l for l in spec.layer_labels if fnmatch.fnmatch(l, "block*.skip")]
    assert len(skips) == 2


def test_labels_unique_and_pure_function_of_spec():
    a = md.ModelSpec("toy_vit", width=16, depth=2, input_size=16).layer_labels
    b = md.ModelSpec("toy_vit", width=16, depth=2, input_size=16).layer_labels
    assert a == b
    assert len(a) == len(set(a))


def test_cnn_param_count_closed_form():
    # layer dims documented in README: conv blocks (w,cin,3,3)+(w,), head
    # (w*(s/2^d)^2, k)+(k,)
    w, d, s, k = 8, 3, 32, 8
    spec = md.ModelSpec("toy_cnn", width=w, depth=d, input_size=s, num_classes=k)
    model = md.build_model(spec, 0)
    expected = (w * 3 * 9 + w) + 2 * (w * w * 9 + w) + (w * (s // 2**d) ** 2 * k + k)
    assert model.num_params == expected


@pytest.mark.parametrize("arch", md.ARCH_KINDS)
def test_predict_pure_and_finite(arch):
    spec = md.ModelSpec(arch, width=8, depth=2, input_size=16)
    model = md.build_model(spec, 1)
    batch = rand_batch(3, 16)
    batch[2] = batch[0]
    logits = model.predict(batch)
    assert logits.shape == (3, 8)
    assert np.all(np.isfinite(logits))
    assert np.array_equal(logits[0], logits[2])  # duplicated row, identical logits
    zero = model.predict(np.zeros((1, 3, 16, 16)))
    assert np.all(np.isfinite(zero))


def test_predict_rejects_wrong_size():
    model = md.build_model(md.ModelSpec("toy_cnn", width=4, depth=2, input_size=16), 0)
    with pytest.raises(md.ModelError):
        model.predict(np.zeros((1, 3, 40, 40)))


def test_cross_entropy_uniform_logits():
    logits = en.Tensor(np.zeros((4, 8)))
    loss = md.cross_entropy(logits, np.array([0, 1, 2, 3]))
    assert abs(float(loss.data) - np.log(8)) < 1e-12


def test_cross_entropy_margin_limit():
    labels = np.array([2])
    losses = []
    for margin in (5.0, 20.0, 80.0):
        z = np.zeros((1, 8))
        z[0, 2] = margin
        losses.append(float(md.cross_entropy(en.Tensor(z), labels).data))
    assert losses[0] > losses[1] > losses[2]
    assert losses[2] < 1e-12


def test_cross_entropy_label_range_error():
    with pytest.raises(md.ModelError):
        md.cross_entropy(en.Tensor(np.zeros((2, 4))), np.array([0, 4]))


def test_cross_entropy_gradcheck():
    logits = Stream(3, "ce").uniform((4, 6), -2.0, 2.0)
    labels = np.array([0, 5, 2, 3])
    err = en.check_gradient(
        lambda z: md.cross_entropy(z, labels), [logits], h=1e-5)
    assert err <= 1e-6


def model_gradcheck(model, x, labels, seed=0, h=1e-5):
    """check_gradient on CE(model(x)) plus a sign-pattern linear probe.

    The probe lifts every coordinate's derivative away from zero so the
    central-difference quotient is well conditioned everywhere; the model's
    whole backward path is still exercised, any VJP error shows up.
    """
    def ce_graph(t):
        logits, _ = model.forward(t)
        return md.cross_entropy(logits, labels)

    tape = en.Tape()
    en.forward(ce_graph, [x], tape)
    g = en.backward(tape, np.asarray(1.0))[0]
    c = 8.0 * max(float(np.abs(g).max()), 1e-3)
    signs = np.where(Stream(seed, "probe").bernoulli(0.5, x.shape), 1.0, -1.0) * c

    def graph(t):
        return en.add(ce_graph(t), en.sum_(en.mul(t, signs)))

    return en.check_gradient(graph, [x], h=h, seed=seed)


@pytest.mark.parametrize("arch", md.ARCH_KINDS)
def test_full_model_gradcheck(arch):
    spec = md.ModelSpec(arch, width=4, depth=2, input_size=8, num_classes=4)
    model = densify(md.build_model(spec, 2))
    labels = np.array([1, 3])
    x = Stream(11, "fullgrad", arch).uniform((2, 3, 8, 8), 0.05, 0.95)
    err = model_gradcheck(model, x, labels)
    assert err <= 1e-6, f"{arch}: {err}"


def test_checkpoint_roundtrip_bitexact(tmp_path):
    spec = md.ModelSpec("toy_resnet", width=8, depth=2, input_size=16)
    model = md.build_model(spec, 7)
    model.meta.update({"seed": 7, "epochs": 0, "clean_test_acc": 0.5})
    p1 = tmp_path / "a.tabx"
    p2 = tmp_path / "b.tabx"
    md.save_checkpoint(model, p1)
    loaded = md.load_checkpoint(p1)
    md.save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    batch = rand_batch(2, 16)
    assert model.predict(batch).tobytes() == loaded.predict(batch).tobytes()


def test_checkpoint_header_only_read(tmp_path):
    model = md.build_model(md.ModelSpec("toy_cnn", width=4, depth=2, input_size=16), 0)
    model.meta["clean_test_acc"] = 0.93
    path = tmp_path / "m.tabx"
    md.save_checkpoint(model, path)
    header = md.read_header(path)
    assert header["meta"]["clean_test_acc"] == 0.93
    assert header["spec"]["arch_kind"] == "toy_cnn"


def test_checkpoint_distinct_errors(tmp_path):
    model = md.build_model(md.ModelSpec("toy_cnn", width=4, depth=2, input_size=16), 0)
    path = tmp_path / "m.tabx"
    md.save_checkpoint(model, path)
    raw = path.read_bytes()

    bad_magic = tmp_path / "bad.tabx"
    bad_magic.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(md.BadMagicError):
        md.read_header(bad_magic)

    truncated = tmp_path / "trunc.tabx"
    truncated.write_bytes(raw[:-16])
    with pytest.raises(md.TruncatedBlobError):
        md.load_checkpoint(truncated)

    # rewrite blob-length field to a mismatching but available size
    head_end = raw.index(b"\n") + 1
    nbytes = int.from_bytes(raw[head_end:head_end + 8], "little")
    mismatched = tmp_path / "mismatch.tabx"
    mismatched.write_bytes(raw[:head_end] + (nbytes - 8).to_bytes(8, "little")
                           + raw[head_end + 8:])
    with pytest.raises(md.LengthMismatchError):
        md.load_checkpoint(mismatched)


def test_vit_forward_unchanged_by_skip_attention_hook():
    spec = md.ModelSpec("toy_vit", width=16, depth=2, input_size=16)
    model = densify(md.build_model(spec, 3))
    x = rand_batch(2, 16)
    plain = model.predict(x)
    hooks = en.Hooks([en.HookDescriptor("skip_attention_grad",
                                        frozenset(spec.attention_labels))])
    tape = en.Tape(hooks)
    logits, _ = model.forward(tape.leaf(x), tape=tape)
    assert logits.data.tobytes() == plain.tobytes()


@pytest.mark.parametrize("arch", md.ARCH_KINDS)
def test_every_label_is_a_valid_hook_target(arch):
    spec = md.ModelSpec(arch, width=8, depth=2, input_size=16)
    model = md.build_model(spec, 0)
    hooks = en.Hooks([en.HookDescriptor("capture_forward", frozenset(spec.layer_labels))])
    tape = en.Tape(hooks)
    model.forward(tape.leaf(rand_batch(2, 16)), tape=tape)
    # every capture point and cls label actually fires during forward
    for label in spec.capture_points + spec.cls_labels:
        assert label in tape.captures

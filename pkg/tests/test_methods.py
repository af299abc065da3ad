import numpy as np
import pytest

from conftest import densify

from transferbench import engine as en
from transferbench import methods as mt
from transferbench import models as md
from transferbench.attack import AttackSpec, run_attack
from transferbench.augment import AugmentStack
from transferbench.rng import Stream


def resnet2(width=6, size=16, seed=4):
    return densify(md.build_model(md.ModelSpec("toy_resnet", width=width, depth=2,
                                               input_size=size, num_classes=4), seed))


def cnn(width=4, depth=2, size=8, seed=0):
    return md.build_model(md.ModelSpec("toy_cnn", width=width, depth=depth,
                                       input_size=size, num_classes=4), seed)


def vit(width=16, depth=2, size=16, seed=1):
    return densify(md.build_model(md.ModelSpec("toy_vit", width=width, depth=depth,
                                               input_size=size, num_classes=4), seed))


def batch(n, size, tag="x"):
    x = Stream(0, "test_methods", tag).uniform((n, 3, size, size), 0.1, 0.9)
    return x, np.arange(n) % 4


# ---------------------------------------------------------------------------
# compatibility and installation

def test_incompatible_pairs_error_names_both():
    with pytest.raises(mt.MethodError) as ei:
        mt.install_backward_method(cnn(), mt.MethodParams("SGM"))
    assert "SGM" in str(ei.value) and "toy_cnn" in str(ei.value)
    with pytest.raises(mt.MethodError):
        mt.install_backward_method(vit(), mt.MethodParams("ConBP"))
    with pytest.raises(mt.MethodError):
        mt.install_backward_method(cnn(), mt.MethodParams("PNA"))
    with pytest.raises(mt.MethodError):
        mt.MethodRunner(mt.MethodParams("SE"), cnn(), AttackSpec())


def test_layer_index_range_checked():
    with pytest.raises(mt.MethodError):
        mt.check_compatible(mt.MethodParams("ILA", layer_index=5), cnn().spec)


def input_gradient(model, hooks, x, seed_vec):
    tape = en.Tape(hooks)
    leaf = tape.leaf(x)
    logits, _ = model.forward(leaf, tape=tape)
    grads = en.backward(tape, seed_vec, output=logits, wanted={leaf.node})
    return logits.data, grads[leaf.node]


def test_sgm_gamma_one_bit_identical_to_unhooked():
    model = resnet2()
    x, _ = batch(2, 16)
    seed = Stream(1, "seedvec").uniform((2, 4), -1.0, 1.0)
    handle = mt.install_backward_method(model, mt.MethodParams("SGM", gamma=1.0))
    out_h, g_h = input_gradient(model, handle.hooks, x, seed)
    out_p, g_p = input_gradient(model, None, x, seed)
    assert out_h.tobytes() == out_p.tobytes()
    assert g_h.tobytes() == g_p.tobytes()


def test_sgm_matches_gamma_weighted_chain_rule():
    # surrogate graph: branch replaced by gamma*b + (1-gamma)*stop_grad(b);
    # same forward (gamma=0.5 is dyadic), backward carries the gamma factor
    gamma = 0.5
    model = resnet2()
    x, _ = batch(2, 16)
    seed = Stream(2, "seedvec2").uniform((2, 4), -1.0, 1.0)
    handle = mt.install_backward_method(model, mt.MethodParams("SGM", gamma=gamma))
    _, g_hooked = input_gradient(model, handle.hooks, x, seed)

    p = model.params

    def conv(z, name):
        zw = en.conv2d(z, p[name + ".w"], stride=1, pad=1)
        return en.add(zw, np.asarray(p[name + ".b"]).reshape(1, -1, 1, 1))

    def surrogate(t):
        z = en.relu(conv(t, "stem.conv"))
        z = en.max_pool2(z)
        for i in (1, 2):
            br = en.relu(conv(z, f"block{i}.conv1"))
            br = conv(br, f"block{i}.conv2")
            blended = en.add(en.mul(br, gamma),
                             en.mul(en.stop_gradient(br), 1.0 - gamma))
            z = en.relu(en.add(z, blended))
            if i < 2:
                z = en.max_pool2(z)
        pooled = en.mean(en.mean(z, axis=3), axis=2)
        return en.add(en.matmul(pooled, p["head.w"]), p["head.b"])

    tape = en.Tape()
    out = en.forward(surrogate, [x], tape)
    g_ref = en.backward(tape, seed, output=out)[0]
    assert np.abs(g_hooked - g_ref).max() <= 1e-12


def test_linbp_matches_explicitly_linearized_graph():
    # last-block linearization on toy_resnet: everything downstream of the
    # hooked ReLUs is linear, so the linearized graph's input gradient agrees
    model = resnet2()
    x, _ = batch(2, 16)
    seed = Stream(3, "seedvec3").uniform((2, 4), -1.0, 1.0)
    handle = mt.install_backward_method(model, mt.MethodParams("LinBP", layer_index=1))
    _, g_hooked = input_gradient(model, handle.hooks, x, seed)

    p = model.params

    def conv(z, name):
        zw = en.conv2d(z, p[name + ".w"], stride=1, pad=1)
        return en.add(zw, np.asarray(p[name + ".b"]).reshape(1, -1, 1, 1))

    def linearized(t):
        z = en.relu(conv(t, "stem.conv"))
        z = en.max_pool2(z)
        br = en.relu(conv(z, "block1.conv1"))
        z = en.relu(en.add(z, conv(br, "block1.conv2")))
        z = en.max_pool2(z)
        br = conv(z, "block2.conv1")          # relu -> identity
        z = en.add(z, conv(br, "block2.conv2"))  # relu2 -> identity
        pooled = en.mean(en.mean(z, axis=3), axis=2)
        return en.add(en.matmul(pooled, p["head.w"]), p["head.b"])

    tape = en.Tape()
    out = en.forward(linearized, [x], tape)
    g_ref = en.backward(tape, seed, output=out)[0]
    assert np.abs(g_hooked - g_ref).max() <= 1e-12


def test_pna_forward_bit_identical_and_backward_differs():
    model = vit()
    x, _ = batch(2, 16)
    seed = Stream(4, "seedvec4").uniform((2, 4), -1.0, 1.0)
    handle = mt.install_backward_method(model, mt.MethodParams("PNA"))
    out_h, g_h = input_gradient(model, handle.hooks, x, seed)
    out_p, g_p = input_gradient(model, None, x, seed)
    assert out_h.tobytes() == out_p.tobytes()
    assert not np.array_equal(g_h, g_p)


def test_conbp_uses_softplus_derivative():
    model = cnn(depth=2, size=8)
    x, y = batch(2, 8)
    handle = mt.install_backward_method(model, mt.MethodParams("ConBP", layer_index=0))
    seed = np.ones((2, 4))
    _, g_soft = input_gradient(model, handle.hooks, x, seed)
    _, g_plain = input_gradient(model, None, x, seed)
    assert not np.array_equal(g_soft, g_plain)


# ---------------------------------------------------------------------------
# aggregates

def test_ila_direction_zero_for_benign_reference():
    model = cnn()
    x, y = batch(3, 8)

    class FakeTrace:
        deltas = [np.zeros_like(x)]

    agg = mt.precompute_aggregates(mt.MethodParams("ILA", layer_index=0),
                                   model, x, y, reference_trace=FakeTrace())
    assert np.allclose(agg.ila_direction, 0.0, atol=1e-15)


def test_ilapp_single_row_closed_form():
    model = cnn()
    x, y = batch(2, 8)
    lam = 0.7
    d0 = Stream(5, "refdelta").uniform(x.shape, -0.01, 0.01)

    class FakeTrace:
        deltas = [d0]

    params = mt.MethodParams("ILA++", layer_index=0, lambda_ridge=lam)
    agg = mt.precompute_aggregates(params, model, x, y, reference_trace=FakeTrace())

    benign = mt._plain_features(model, x, "block1.out")
    ref = mt._plain_features(model, np.clip(x + d0, 0, 1), "block1.out")
    dy = (ref - benign).reshape(2, -1)
    r1 = (mt._ce_values(model, np.clip(x + d0, 0, 1), y)
          - mt._ce_values(model, x, y))
    expect = dy * (r1 / ((dy * dy).sum(axis=1) + lam))[:, None]
    assert np.abs(agg.ilapp_map.reshape(2, -1) - expect).max() <= 1e-10


def test_fia_degenerate_mask_is_normalized_plain_gradient():
    model = cnn()
    x, y = batch(2, 8)
    params = mt.MethodParams("FIA", layer_index=0, n_agg=1, drop_prob_fia=0.0)
    agg = mt.precompute_aggregates(params, model, x, y)
    plain = mt._feature_grad(model, x, y, "block1.out")
    norm = np.sqrt((plain ** 2).sum(axis=(1, 2, 3), keepdims=True))
    assert np.abs(agg.fia_gradient - plain / norm).max() <= 1e-12


def test_lambda_ridge_must_be_positive():
    with pytest.raises(mt.MethodError):
        mt.MethodParams("ILA++", lambda_ridge=0.0)


# ---------------------------------------------------------------------------
# feature-loss oracles: independent recomputation from captured arrays

def make_feature_case(tag, model, x, y, params):
    label = model.spec.capture_points[params.layer_index]
    tape = en.Tape()
    leaf = tape.leaf(x)
    logits, feats = model.forward(leaf, tape=tape)
    return tape, logits, feats[label]


def test_nrdm_zero_at_benign_point():
    model = cnn()
    x, y = batch(2, 8)
    params = mt.MethodParams("NRDM", layer_index=0)
    agg = mt.precompute_aggregates(params, model, x, y)
    _, _, feat = make_feature_case("nrdm", model, x, y, params)
    loss = mt.feature_loss(params, agg, feat)
    assert np.allclose(loss.data, 0.0, atol=1e-12)


def test_ila_loss_matches_bruteforce_dot():
    model = cnn()
    x, y = batch(3, 8)
    d0 = Stream(6, "ilad").uniform(x.shape, -0.02, 0.02)

    class FakeTrace:
        deltas = [d0]

    params = mt.MethodParams("ILA", layer_index=1)
    agg = mt.precompute_aggregates(params, model, x, y, reference_trace=FakeTrace())
    x_now = np.clip(x + 0.5 * d0, 0, 1)
    _, _, feat = make_feature_case("ila", model, x_now, y, params)
    loss = mt.feature_loss(params, agg, feat)
    brute = ((feat.data - agg.benign_features) * agg.ila_direction) \
        .reshape(3, -1).sum(axis=1)
    assert np.abs(loss.data - brute).max() <= 1e-10


def test_ila_loss_linear_in_features():
    params = mt.MethodParams("ILA", layer_index=0)
    agg = mt.Aggregates(
        benign_features=np.zeros((2, 3, 4, 4)),
        ila_direction=Stream(7, "dir").uniform((2, 3, 4, 4), -1, 1))
    f = Stream(7, "feat").uniform((2, 3, 4, 4), -1, 1)
    l1 = mt.feature_loss(params, agg, en.Tensor(f)).data
    l3 = mt.feature_loss(params, agg, en.Tensor(3.0 * f)).data
    assert np.abs(3.0 * l1 - l3).max() <= 1e-10


def test_fda_degenerate_mask_stays_finite():
    params = mt.MethodParams("FDA", layer_index=0)
    feat = np.full((2, 3, 4, 4), -1.0)  # everything below the channel mean
    agg = mt.Aggregates(fda_channel_mean=np.zeros((3, 1, 1)))
    loss = mt.feature_loss(params, agg, en.Tensor(feat))
    assert np.all(np.isfinite(loss.data))


def test_feature_loss_oracles_random_cases():
    # NRDM, ILA, ILA++, FIA, NAA, FDA recomputed with plain numpy
    for case in range(10):
        n, c, h, w = 2, 3, 4, 4
        f = Stream(case, "oracle_f").uniform((n, c, h, w), -1.0, 1.0)
        benign = Stream(case, "oracle_b").uniform((n, c, h, w), -1.0, 1.0)
        aux = Stream(case, "oracle_a").uniform((n, c, h, w), -1.0, 1.0)
        ft = en.Tensor(f)

        agg = mt.Aggregates(benign_features=benign, ila_direction=aux,
                            ilapp_map=aux, fia_gradient=aux,
                            naa_attribution=aux,
                            fda_channel_mean=benign.mean(axis=(0, 2, 3))[:, None, None])

        val = mt.feature_loss(mt.MethodParams("NRDM", layer_index=0), agg, ft).data
        ref = np.sqrt(((f - benign) ** 2).reshape(n, -1).sum(1))
        assert np.abs(val - ref).max() <= 1e-10

        val = mt.feature_loss(mt.MethodParams("ILA", layer_index=0), agg, ft).data
        ref = ((f - benign) * aux).reshape(n, -1).sum(1)
        assert np.abs(val - ref).max() <= 1e-10

        val = mt.feature_loss(mt.MethodParams("ILA++", layer_index=0), agg, ft).data
        assert np.abs(val - ref).max() <= 1e-10

        val = mt.feature_loss(mt.MethodParams("FIA", layer_index=0), agg, ft).data
        ref = -(aux * f).reshape(n, -1).sum(1)
        assert np.abs(val - ref).max() <= 1e-10

        val = mt.feature_loss(mt.MethodParams("NAA", layer_index=0), agg, ft).data
        apos, aneg = np.maximum(aux, 0), np.maximum(-aux, 0)
        ref = (-(apos * f) + aneg * f).reshape(n, -1).sum(1)
        assert np.abs(val - ref).max() <= 1e-10

        mu = agg.fda_channel_mean.reshape(1, c, 1, 1)
        below = f < mu
        val = mt.feature_loss(mt.MethodParams("FDA", layer_index=0), agg, ft).data
        lo = np.sqrt(((f * below) ** 2).reshape(n, -1).sum(1))
        hi = np.sqrt(((f * ~below) ** 2).reshape(n, -1).sum(1))
        ref = np.log(np.maximum(lo, 1e-12)) - np.log(np.maximum(hi, 1e-12))
        assert np.abs(val - ref).max() <= 1e-10


def test_tap_loss_matches_recomputation():
    model = cnn()
    x, y = batch(2, 8)
    params = mt.MethodParams("TAP", layer_index=0, alpha_tap=0.5,
                             lambda_tap=0.01, eta_tap=0.02)
    agg = mt.precompute_aggregates(params, model, x, y)
    delta = Stream(8, "tapd").uniform(x.shape, -0.02, 0.02)
    x_now = np.clip(x + delta, 0, 1)
    tape = en.Tape()
    dleaf = tape.leaf(delta)
    leaf = tape.leaf(x_now)
    logits, feats = model.forward(leaf, tape=tape)
    loss = mt.feature_loss(params, agg, feats["block1.out"], logits=logits,
                           delta=dleaf, labels=y)

    # independent recomputation
    f = feats["block1.out"].data
    sp = np.sign(f) * np.abs(f) ** 0.5
    dist = ((sp - agg.tap_benign_power) ** 2).reshape(2, -1).sum(1)
    zp = np.pad(delta, ((0, 0), (0, 0), (1, 1), (1, 1)))
    pooled = np.zeros_like(delta)
    for i in range(3):
        for j in range(3):
            pooled += zp[:, :, i:i + 8, j:j + 8]
    pooled /= 9.0
    smooth = np.abs(pooled).reshape(2, -1).sum(1)
    lsm = logits.data - logits.data.max(axis=1, keepdims=True)
    lsm = lsm - np.log(np.exp(lsm).sum(axis=1, keepdims=True))
    ce = -lsm[np.arange(2), y]
    ref = ce + 0.01 * dist - 0.02 * smooth
    assert np.abs(loss.data - ref).max() <= 1e-10


# ---------------------------------------------------------------------------
# output-space estimators and fair-baseline parity

def test_vt_with_zero_samples_is_plain_gradient():
    model = cnn()
    x, y = batch(2, 8)
    delta = np.zeros_like(x)
    spec = AttackSpec(iterations=1, seed=5)
    params = mt.MethodParams("VT", n_agg=0)
    _, g_vt = mt.output_space_gradient(params, model, x, delta, y, spec)

    runner = mt.MethodRunner(mt.MethodParams("VT", n_agg=0), model, spec)
    lv, g_plain = runner._plain_chunk_grad(
        AugmentStack(), x, delta, y, np.arange(2), (5, "aug", 0), x, np.ones(2))
    assert g_vt.tobytes() == g_plain.tobytes()


def test_taig_single_step_is_full_scale_gradient():
    model = cnn()
    x, y = batch(2, 8)
    delta = np.zeros_like(x)
    spec = AttackSpec(iterations=1, seed=6)
    params = mt.MethodParams("TAIG", n_agg=1, taig_random=False)
    _, g_taig = mt.output_space_gradient(params, model, x, delta, y, spec)
    runner = mt.MethodRunner(params, model, spec)
    _, g_plain = runner._plain_chunk_grad(
        AugmentStack(), x, delta, y, np.arange(2), (6, "aug", 0, "taig", 1),
        x, np.ones(2))
    assert np.abs(g_taig - g_plain).max() <= 1e-15


@pytest.mark.parametrize("method,baseline", [("VT", "VT_baseline"),
                                             ("TAIG", "TAIG_baseline")])
def test_backprop_parity_method_vs_baseline(method, baseline):
    model = cnn()
    x, y = batch(2, 8)
    delta = np.zeros_like(x)
    n_agg = 3
    spec = AttackSpec(iterations=1, seed=7)

    counts = {}
    for kind in (method, baseline):
        runner = mt.MethodRunner(mt.MethodParams(kind, n_agg=n_agg), model, spec)
        runner.prepare(x, y)
        before = en.backward_call_count()
        runner.gradient(AugmentStack(), x, delta, y, np.arange(2), 0, x, np.ones(2))
        counts[kind] = en.backward_call_count() - before
    assert counts[method] == counts[baseline]
    expected = n_agg + 1 if method == "VT" else n_agg
    assert counts[method] == expected


def test_ir_baseline_uses_dp_and_counts():
    model = cnn()
    x, y = batch(2, 8)
    spec = AttackSpec(iterations=1, seed=8)
    runner = mt.MethodRunner(mt.MethodParams("IR_baseline", n_agg=4), model, spec)
    runner.prepare(x, y)
    before = en.backward_call_count()
    runner.gradient(AugmentStack(), x, np.zeros_like(x), y, np.arange(2), 0,
                    x, np.ones(2))
    assert en.backward_call_count() - before == 4


def test_se_runs_on_vit_and_counts_one_backprop():
    model = vit()
    x, y = batch(2, 16)
    spec = AttackSpec(iterations=1, seed=9)
    runner = mt.MethodRunner(mt.MethodParams("SE"), model, spec)
    runner.prepare(x, y)
    before = en.backward_call_count()
    loss, grad = runner.gradient(AugmentStack(), x, np.zeros_like(x), y,
                                 np.arange(2), 0, x, np.ones(2))
    assert en.backward_call_count() - before == 1
    assert np.all(np.isfinite(grad)) and grad.shape == x.shape


def test_hooked_attack_end_to_end_invariants():
    model = resnet2()
    x, y = batch(4, 16)
    spec = AttackSpec(iterations=3, epsilon=8 / 255, step_size=2 / 255,
                      method=mt.MethodParams("SGM", gamma=0.5), seed=10)
    x_adv, trace = run_attack(model, x, y, spec)
    assert np.abs(x_adv - x).max() <= 8 / 255 + 1e-12
    assert x_adv.min() >= 0.0 and x_adv.max() <= 1.0


def test_feature_method_attack_end_to_end():
    model = cnn()
    x, y = batch(4, 8)
    spec = AttackSpec(iterations=3, epsilon=8 / 255, step_size=2 / 255,
                      method=mt.MethodParams("ILA", layer_index=0), seed=11)
    x_adv, trace = run_attack(model, x, y, spec)
    assert np.abs(x_adv - x).max() <= 8 / 255 + 1e-12
    # reference run (10 iters) plus 3 x 1 attack backprops
    assert sum(trace.backprops_per_iter) == 3


def test_method_params_json_roundtrip():
    p = mt.MethodParams("ILA++", layer_index=2, lambda_ridge=0.5, n_agg=7)
    assert mt.MethodParams.from_json(p.to_json()) == p

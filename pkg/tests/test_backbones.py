import math

import numpy as np
import pytest

from hmdn.backbones import DNNBackbone, DWBackbone, MoEBackbone, build_backbone, dnn_forward, dw_forward, moe_forward
from hmdn.exceptions import ShapeError, UsageError
from hmdn.nn import MLP, gradcheck, sigmoid

from oracles import dw_loop, mlp_loop, moe_loop

SMALL = (6, 5, 4)


def _randomize_biases(params, rng):
    for name, p in params.items():
        if ".b" in name:
            p[...] = rng.normal(scale=0.3, size=p.shape)


def test_moe_uniform_gate(rng):
    bb = MoEBackbone.init(5, 3, rng, n_experts=4, hidden_units=SMALL)
    bb.gate_weight[...] = 0.0
    x, g = rng.normal(size=(7, 5)), rng.normal(size=(7, 3))
    np.testing.assert_allclose(bb.gate_weights(g), 0.25, atol=1e-15)
    _, cache = bb.forward(x, g)
    mean = np.mean([e.forward(x)[0] for e in bb.experts], axis=0)
    np.testing.assert_allclose(np.einsum("bn,bnh->bh", cache["weights"], cache["outs"]), mean, atol=1e-14)


def test_moe_single_expert(rng):
    bb = MoEBackbone.init(5, 3, rng, n_experts=1, hidden_units=SMALL)
    x, g = rng.normal(size=(4, 5)), rng.normal(size=(4, 3))
    p, cache = moe_forward(bb, x, g)
    np.testing.assert_array_equal(cache["weights"], 1.0)
    expected = sigmoid(bb.tower.forward(bb.experts[0].forward(x)[0])[0][:, 0])
    np.testing.assert_allclose(p, expected, atol=1e-15)


def test_moe_matches_loop_oracle(rng):
    bb = MoEBackbone.init(5, 3, rng, n_experts=3, hidden_units=SMALL)
    _randomize_biases(bb.params(), rng)
    x, g = rng.normal(size=(4, 5)), rng.normal(size=(4, 3))
    np.testing.assert_allclose(moe_forward(bb, x, g)[0], moe_loop(bb, x, g), rtol=0, atol=1e-12)


def test_moe_gate_is_simplex(rng):
    bb = MoEBackbone.init(5, 3, rng)
    w = bb.gate_weights(rng.normal(size=(50, 3)) * 10)
    assert np.all(w >= 0)
    assert np.max(np.abs(w.sum(axis=1) - 1.0)) <= 1e-12


def test_moe_permutation_invariance(rng):
    bb = MoEBackbone.init(5, 3, rng, n_experts=3, hidden_units=SMALL)
    x, g = rng.normal(size=(6, 5)), rng.normal(size=(6, 3))
    perm = [2, 0, 1]
    permuted = MoEBackbone([bb.experts[i] for i in perm], bb.gate_weight[:, perm], bb.tower)
    np.testing.assert_allclose(permuted.forward(x, g)[0], bb.forward(x, g)[0], atol=1e-14)


def test_moe_shape_error(rng):
    bb = MoEBackbone.init(5, 3, rng, hidden_units=SMALL)
    with pytest.raises(ShapeError):
        bb.forward(rng.normal(size=(2, 5)), rng.normal(size=(2, 4)))
    with pytest.raises(ShapeError):
        bb.forward(rng.normal(size=(2, 6)), rng.normal(size=(2, 3)))


def test_dw_zero_gate_is_identity(rng):
    bb = DWBackbone.init(6, 3, rng, hidden_units=SMALL)
    for p in bb.gate_nu.params().values():
        p[...] = 0.0
    x, g = rng.normal(size=(5, 6)), rng.normal(size=(5, 3))
    p, delta, cache = dw_forward(bb, x, g)
    np.testing.assert_array_equal(delta, 1.0)
    np.testing.assert_array_equal(cache["tower_cache"]["inputs"][0], x)
    np.testing.assert_allclose(p, sigmoid(bb.tower.forward(x)[0][:, 0]), atol=0)


def test_dw_saturated_gate_annihilates(rng):
    bb = DWBackbone.init(6, 3, rng, hidden_units=SMALL)
    bb.gate_nu.weights[-1][...] = 0.0
    bb.gate_nu.biases[-1][...] = -800.0
    x, g = rng.normal(size=(5, 6)), rng.normal(size=(5, 3))
    p, delta, _ = dw_forward(bb, x, g)
    np.testing.assert_array_equal(delta, 0.0)
    np.testing.assert_allclose(p, sigmoid(bb.tower.forward(np.zeros_like(x))[0][:, 0]), atol=0)


def test_dw_matches_oracle_and_range(rng):
    bb = DWBackbone.init(6, 3, rng, hidden_units=SMALL)
    _randomize_biases(bb.params(), rng)
    x, g = rng.normal(size=(4, 6)), rng.normal(size=(4, 3))
    p, delta, _ = dw_forward(bb, x, g)
    p_loop, d_loop = dw_loop(bb, x, g)
    np.testing.assert_allclose(p, p_loop, rtol=0, atol=1e-12)
    np.testing.assert_allclose(delta, d_loop, rtol=0, atol=1e-12)
    assert np.all((delta > 0) & (delta < 2))
    assert bb.gate_nu.dims == [3, 3, 6]


def test_dnn_zero_weights():
    bb = DNNBackbone.init(4, 1, np.random.default_rng(0), hidden_units=SMALL)
    for p in bb.params().values():
        p[...] = 0.0
    np.testing.assert_array_equal(dnn_forward(bb, np.ones((3, 4))), 0.5)


def test_dnn_hand_computed():
    net = MLP([(np.array([[2.0]]), np.array([-1.0])), (np.array([[-3.0]]), np.array([0.5]))], "relu", "none")
    p = dnn_forward(DNNBackbone(net), np.array([[1.5]]))
    h = max(2.0 * 1.5 - 1.0, 0.0)
    assert p[0] == pytest.approx(1.0 / (1.0 + math.exp(-(-3.0 * h + 0.5))), abs=1e-15)


def test_dnn_matches_matmul_oracle(rng):
    bb = DNNBackbone.init(5, 1, rng, hidden_units=SMALL)
    _randomize_biases(bb.params(), rng)
    x = rng.normal(size=(3, 5))
    logits = mlp_loop(bb.mlp, x)[:, 0]
    np.testing.assert_allclose(dnn_forward(bb, x), sigmoid(logits), atol=1e-12)


@pytest.mark.parametrize("kind", ["moe", "dw", "dnn"])
def test_zero_upstream(kind, rng):
    bb = build_backbone(kind, 5, 3, rng, hidden_units=SMALL)
    _, cache = bb.forward(rng.normal(size=(4, 5)), rng.normal(size=(4, 3)))
    grads, gx, gg = bb.backward(cache, np.zeros(4))
    assert not np.any(gx)
    assert gg is None or not np.any(gg)
    assert all(not np.any(g) for g in grads.values())


def test_cache_kind_mismatch(rng):
    moe = build_backbone("moe", 5, 3, rng, hidden_units=SMALL)
    dw = build_backbone("dw", 5, 3, rng, hidden_units=SMALL)
    _, cache = moe.forward(rng.normal(size=(2, 5)), rng.normal(size=(2, 3)))
    with pytest.raises(UsageError):
        dw.backward(cache, np.zeros(2))


def test_moe_single_expert_backward_reduces_to_mlp(rng):
    bb = MoEBackbone.init(5, 3, rng, n_experts=1, hidden_units=SMALL)
    x, g = rng.normal(size=(4, 5)), rng.normal(size=(4, 3))
    up = rng.normal(size=4)
    _, cache = bb.forward(x, g)
    _, gx, gg = bb.backward(cache, up)
    h, ec = bb.experts[0].forward(x)
    _, tc = bb.tower.forward(h)
    _, dh = bb.tower.backward(tc, up[:, None])
    _, gx_ref = bb.experts[0].backward(ec, dh)
    np.testing.assert_allclose(gx, gx_ref, atol=1e-15)
    np.testing.assert_allclose(gg, 0.0, atol=1e-15)


@pytest.mark.parametrize("kind", ["moe", "dw", "dnn"])
def test_backward_matches_finite_differences(kind):
    rng = np.random.default_rng(11)
    bb = build_backbone(kind, 5, 3, rng, hidden_units=SMALL)
    _randomize_biases(bb.params(), rng)
    x, g = rng.normal(size=(4, 5)), rng.normal(size=(4, 3))
    up = rng.normal(size=4)
    _, cache = bb.forward(x, g)
    grads, gx, gg = bb.backward(cache, up)
    params = dict(bb.params(), _x=x, _g=g)
    all_grads = dict(grads, _x=gx, _g=np.zeros_like(g) if gg is None else gg)
    report = gradcheck(lambda: float(bb.forward(x, g)[0] @ up), params, all_grads, tolerance=1e-5)
    assert report.passed, report.format()

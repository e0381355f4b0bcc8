import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import scalar_oracle
from hroute import reference
from hroute import tensor as tn
from hroute.errors import ContractError, NumericError
from hroute.hmodel import (
    HModel,
    HModelConfig,
    StateBundle,
    aggregate,
    alpha_at,
    chain_plan,
    force_routing,
    forward,
    norm_by_contributors,
    run,
    sparsify_topk,
)
from hroute.tensor import Tensor
from hroute.trace import RoutingRecorder


def small_cfg(**kw):
    base = dict(I=1, H=2, O=1, T=2, d=8, ff=16, heads=2, seq=6, vocab=7)
    base.update(kw)
    return HModelConfig(**base)


def ids(b=3, s=5, vocab=7, seed=0):
    return np.random.default_rng(seed).integers(0, vocab, size=(b, s))


def randomize_routing(model, rng, scale=1.0):
    for layer in model.inputs + model.hidden:
        layer.head.weight.data = rng.normal(0, scale, layer.head.weight.shape).astype(layer.head.weight.dtype)
        layer.head.bias.data = rng.normal(0, scale, layer.head.bias.shape).astype(layer.head.bias.dtype)


# ---------------------------------------------------------------- alpha schedule


@pytest.mark.parametrize(
    "alpha0,rate,j,expected",
    [(1.0, 1.0, 0, 1.0), (1.0, 1.0, 3, 1.0), (1.0, 0.5, 2, 0.25), (0.1, 2.0, 3, 0.8)],
)
def test_alpha_at(alpha0, rate, j, expected):
    cfg = small_cfg(T=4, alpha0=alpha0, alpha_rate=rate)
    assert alpha_at(cfg, j) == pytest.approx(expected, rel=1e-12)


def test_alpha_at_out_of_range():
    with pytest.raises(ContractError):
        alpha_at(small_cfg(T=2), 2)


# ---------------------------------------------------------------- aggregation


def sub(seed, b=2, s=3, d=4):
    return Tensor(np.random.default_rng(seed).normal(size=(b, s, d)))


def test_single_contributor_weight_one_is_exact():
    x = sub(0)
    con = Tensor(np.array([[1.0, 0.0, 0.3], [1.0, 0.2, 0.0]]))
    bundle = aggregate([(x, con)])
    np.testing.assert_array_equal(bundle.slots.data[:, 0], x.data)
    np.testing.assert_array_equal(bundle.weight_sum.data, con.data)


def test_two_identical_contributors_double():
    x = sub(1)
    con = Tensor(np.ones((2, 2)))
    bundle = aggregate([(x, con), (x, con)])
    np.testing.assert_array_equal(bundle.slots.data[:, 1], 2 * x.data)
    np.testing.assert_array_equal(bundle.weight_sum.data, np.full((2, 2), 2.0))


def test_zero_weights_give_zero_slot():
    con = Tensor(np.array([[0.0, 1.0], [0.0, 1.0]]))
    bundle = aggregate([(sub(2), con), (sub(3), con)])
    np.testing.assert_array_equal(bundle.slots.data[:, 0], 0.0)


def test_empty_aggregation_is_zero_bundle():
    bundle = aggregate([], empty_shape=(2, 3, 4, 5))
    assert bundle.slots.shape == (2, 3, 4, 5)
    assert not bundle.slots.data.any() and not bundle.weight_sum.data.any()
    with pytest.raises(ContractError):
        aggregate([])


def _bundle(slot_values, weight):
    slots = Tensor(np.asarray(slot_values, dtype=np.float64).reshape(1, 1, 1, -1), dtype=np.float64)
    return StateBundle(slots, Tensor([[weight]], dtype=np.float64))


@pytest.mark.parametrize(
    "values,weight,expected",
    [([2.0, 4.0], 2.0, [1.0, 2.0]), ([2.0, 4.0], 0.5, [2.0, 4.0]), ([0.0, 0.0], 0.0, [0.0, 0.0])],
)
def test_norm_by_contributors(values, weight, expected):
    out = norm_by_contributors(_bundle(values, weight))
    np.testing.assert_array_equal(out.slots.data.reshape(-1), expected)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 6), L=st.integers(1, 5))
def test_normalized_slot_bounded_by_largest_contributor(seed, n, L):
    rng = np.random.default_rng(seed)
    contribs = [
        (Tensor(rng.normal(0, rng.uniform(0.1, 5), (2, 3, 4)), dtype=np.float64),
         Tensor(rng.uniform(0, 1, (2, L)), dtype=np.float64))
        for _ in range(n)
    ]
    bundle = norm_by_contributors(aggregate(contribs))
    norms = np.stack([np.linalg.norm(s.data.reshape(2, -1), axis=1) for s, _ in contribs])  # (n, b)
    slot_norms = np.linalg.norm(bundle.slots.data.reshape(2, L, -1), axis=2)  # (b, L)
    assert np.all(slot_norms <= norms.max(axis=0)[:, None] * (1 + 1e-12))


# ---------------------------------------------------------------- top-k


def test_topk_full_is_identity():
    con = Tensor(np.random.default_rng(0).uniform(size=(4, 5)))
    assert sparsify_topk(con, 5).data.tobytes() == con.data.tobytes()


def test_topk_one():
    out = sparsify_topk(Tensor([[0.9, 0.1, 0.5]], dtype=np.float64), 1)
    np.testing.assert_array_equal(out.data, [[0.9, 0.0, 0.0]])


def test_topk_tie_keeps_lowest_index():
    out = sparsify_topk(Tensor([[0.5, 0.5]]), 1)
    np.testing.assert_array_equal(out.data, [[0.5, 0.0]])


@pytest.mark.parametrize("k", [0, 4])
def test_topk_out_of_range(k):
    with pytest.raises(ContractError):
        sparsify_topk(Tensor(np.ones((1, 3))), k)


def test_topk_only_applies_in_inference():
    cfg = small_cfg(topk=1)
    model = HModel(cfg, 0)
    randomize_routing(model, np.random.default_rng(1))
    x = [ids()]
    dense_model = HModel(small_cfg(), 0)
    dense_model.load_state_dict(model.state_dict())
    np.testing.assert_array_equal(model(x, "train")[0].data, dense_model(x, "train")[0].data)
    assert not np.array_equal(model(x, "infer")[0].data, dense_model(x, "infer")[0].data)


# ---------------------------------------------------------------- forward vs oracles


def test_t0_forward_matches_scalar_oracle():
    cfg = HModelConfig(I=1, H=1, O=1, T=0, d=4, ff=6, heads=1, seq=3, vocab=5, hidden_kinds=["feedforward"])
    model = HModel(cfg, 3).astype(np.float64)
    randomize_routing(model, np.random.default_rng(4))
    x = ids(2, 3, 5, seed=5)
    got = model([x])[0].data
    want = np.array(scalar_oracle.hmodel_forward(model, x.tolist()))
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


def test_zero_routing_t1_matches_scalar_oracle():
    cfg = HModelConfig(I=1, H=1, O=1, T=1, d=4, ff=6, heads=1, seq=3, vocab=5, hidden_kinds=["feedforward"])
    model = HModel(cfg, 6).astype(np.float64)
    x = ids(2, 3, 5, seed=7)
    rec = RoutingRecorder()
    got = model([x], trace=rec)[0].data
    for _, _, con in rec._buffer:
        np.testing.assert_array_equal(con, 0.5)
    want = np.array(scalar_oracle.hmodel_forward(model, x.tolist()))
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("alpha_rate", [1.0, 0.5])
def test_multi_layer_forward_matches_scalar_oracle(alpha_rate):
    cfg = HModelConfig(I=1, H=2, O=1, T=3, d=4, ff=6, heads=1, seq=3, vocab=5,
                       hidden_kinds=["feedforward"] * 2, alpha0=0.8, alpha_rate=alpha_rate)
    model = HModel(cfg, 8).astype(np.float64)
    randomize_routing(model, np.random.default_rng(9), scale=2.0)
    x = ids(2, 3, 5, seed=10)
    got = model([x])[0].data
    want = np.array(scalar_oracle.hmodel_forward(model, x.tolist()))
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


def test_chain_plan_equals_stacked_reference():
    cfg = small_cfg(H=3, T=3, d=16, ff=32)
    model = HModel(cfg, 11)
    x = ids(4, 6, seed=12)
    routed = force_routing(model, chain_plan(cfg))([x], mode="infer")[0].data
    stacked = reference.stacked_forward(model, x)
    assert np.abs(routed - stacked).max() <= 1e-5


def test_zero_plan_gives_head_of_zero_state():
    cfg = small_cfg()
    model = HModel(cfg, 0)
    plan = [np.zeros((1, 3)), np.zeros((2, 3)), np.zeros((2, 3))]
    out = force_routing(model, plan)([ids()], mode="infer")[0].data
    head_zero = model.outputs[0](Tensor(np.zeros((3, 5, 8)))).data
    np.testing.assert_array_equal(out, head_zero)


def test_self_loop_plan_keeps_layers_independent():
    cfg = small_cfg()
    plan = [np.array([[1.0, 0.0, 0.0]]), np.array([[1.0, 0, 0], [0, 1.0, 0]]), np.array([[1.0, 0, 0], [0, 1.0, 0]])]
    a = HModel(cfg, 0)
    b = HModel(cfg, 0)
    for p in b.hidden[1].parameters():  # perturb layer 1 only
        p.data = p.data + 0.5
    x = [ids()]
    sa = run(a, x, "infer", plan=plan).state.slots.data
    sb = run(b, x, "infer", plan=plan).state.slots.data
    np.testing.assert_array_equal(sa[:, 0], sb[:, 0])
    assert not np.array_equal(sa[:, 1], sb[:, 1])
    # slot 0 is layer 0 applied T times to the embedded input
    h = reference.embed(a.inputs[0].block, x[0])
    for j in range(cfg.T):
        h = reference.hidden_block(a.hidden[0].block, h) + a.iter_emb.data[j]
    np.testing.assert_allclose(sa[:, 0], h, atol=1e-5)


def test_plan_shape_is_checked():
    model = HModel(small_cfg(), 0)
    with pytest.raises(ContractError):
        force_routing(model, [np.zeros((1, 3))] * 3)
    with pytest.raises(ContractError):
        force_routing(model, [np.zeros((1, 3)), np.zeros((2, 3))])
    with pytest.raises(ContractError):
        force_routing(model, [np.full((1, 3), 1.5), np.zeros((2, 3)), np.zeros((2, 3))])


def test_chain_plan_needs_t_equal_h():
    with pytest.raises(ContractError):
        chain_plan(small_cfg(H=2, T=3))


# ---------------------------------------------------------------- contracts and invariants


def test_input_count_checked():
    model = HModel(small_cfg(), 0)
    with pytest.raises(ContractError):
        model([ids(), ids()])


def test_non_finite_activation_names_stage_and_layer():
    model = HModel(small_cfg(), 0)
    model.inputs[0].block.tokens.data[...] = 3e38
    model.inputs[0].block.positions.data[...] = 3e38
    with pytest.raises(NumericError, match="stage 0, input layer 0"):
        model([ids()])


def test_non_finite_in_hidden_layer():
    model = HModel(small_cfg(), 0)
    model.hidden[1].block.b2.data[...] = 3e38
    model.hidden[1].block.w2.data[...] = 3e38
    with pytest.raises(NumericError, match="stage 1, hidden layer 1"):
        model([ids()])


def test_multiple_inputs_and_outputs():
    cfg = small_cfg(I=2, O=2, T=1)
    model = HModel(cfg, 0)
    randomize_routing(model, np.random.default_rng(0))
    outs = model([ids(seed=1), ids(seed=2)])
    assert len(outs) == 2 and all(o.shape == (3, 5, 7) for o in outs)


def test_trace_contains_i_plus_h_times_t_vectors():
    for I, H, T in [(1, 2, 2), (2, 3, 4), (1, 1, 0)]:
        cfg = small_cfg(I=I, H=H, T=T)
        rec = RoutingRecorder()
        HModel(cfg, 0)([ids()] * I, "infer", trace=rec)
        records = rec.flush()
        assert len(records) == 3
        assert all(len(r.stages) == I + H * T for r in records)


def test_topk_l_matches_dense_inference_bitwise():
    for seed in range(5):
        cfg = small_cfg(T=3)
        dense = HModel(cfg, seed)
        randomize_routing(dense, np.random.default_rng(seed))
        sparse = HModel(small_cfg(T=3, topk=cfg.L), seed)
        sparse.load_state_dict(dense.state_dict())
        x = [ids(seed=seed)]
        assert dense(x, "infer")[0].data.tobytes() == sparse(x, "infer")[0].data.tobytes()


def test_forward_is_deterministic():
    cfg = small_cfg()

    def once():
        model = HModel(cfg, 42)
        randomize_routing(model, np.random.default_rng(1))
        rec = RoutingRecorder()
        out = model([ids()], trace=rec)[0].data
        return out, [c.tobytes() for _, _, c in rec._buffer]

    (o1, t1), (o2, t2) = once(), once()
    assert o1.tobytes() == o2.tobytes() and t1 == t2


def test_routing_heads_receive_finite_gradients():
    model = HModel(small_cfg(), 0)
    randomize_routing(model, np.random.default_rng(2))
    loss = model([ids()])[0].mean()
    tn.backward(loss)
    for name, p in model.named_parameters():
        assert p.grad is not None and np.isfinite(p.grad).all(), name
    assert np.abs(model.hidden[0].head.weight.grad).sum() > 0


def test_classification_pooling_shape():
    cfg = small_cfg(n_out=2, pooling="last", causal=False)
    out = forward(HModel(cfg, 0), [ids()])
    assert out[0].shape == (3, 2)


def test_config_validation():
    with pytest.raises(ContractError):
        small_cfg(T=-1)
    with pytest.raises(ContractError):
        small_cfg(alpha0=0.0)
    with pytest.raises(ContractError):
        small_cfg(topk=4)
    with pytest.raises(ContractError):
        small_cfg(hidden_kinds=["conv", "transformer"])


def test_full_model_gradients_match_finite_differences():
    from hroute.gradcheck import check_gradients

    cfg = HModelConfig(I=1, H=2, O=1, T=2, d=8, ff=8, heads=2, seq=4, vocab=5, alpha0=0.7, alpha_rate=0.5)
    model = HModel(cfg, 0).astype(np.float64)
    randomize_routing(model, np.random.default_rng(1), scale=0.5)
    x = [ids(2, 4, 5, seed=2)]
    w = np.random.default_rng(3).normal(size=(2, 4, 5))
    errs = check_gradients(lambda: (model(x, "train")[0] * w).sum(), dict(model.named_parameters()))
    assert max(errs.values()) <= 1e-3, errs

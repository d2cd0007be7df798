import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moetune import autodiff as ad
from moetune.autodiff import Tensor
from moetune.model import (
    DenseTransformer, ModelConfig, MoETransformer, count_parameters, desk_config, gate, generate,
    llama_3b_like, top_k, upcycle_from_dense,
)


def tiny(**kw):
    base = dict(n_layers=2, d_model=16, n_heads=2, d_ff=24, vocab_size=11, max_seq_len=12)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(autouse=True)
def f64():
    with ad.precision(64):
        yield


# ---------------------------------------------------------------- config


@pytest.mark.parametrize("kw", [
    dict(d_model=15), dict(active_experts=3, total_experts=2), dict(ffn_style="relu"),
    dict(n_kv_heads=3, n_heads=2), dict(n_layers=0),
])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        tiny(**kw)


def test_config_round_trip():
    c = tiny(total_experts=4, active_experts=2, n_kv_heads=1)
    assert ModelConfig.from_dict(c.to_dict()) == c


# ---------------------------------------------------------------- gating


def test_gate_equal_logits_tie_break():
    idx, w = gate(np.zeros(3), np.zeros((3, 2)), 2)
    assert idx == [0, 1]
    assert w == pytest.approx([0.5, 0.5])


def test_gate_hand_softmax():
    x = np.array([1.0, 0.0])
    router = np.array([[1.0, 2.0, 3.0, 0.0], [0.0, 0.0, 0.0, 0.0]])
    idx, w = gate(x, router, 2)
    assert idx == [2, 1]
    assert w == pytest.approx([0.73106, 0.26894], abs=1e-4)


def test_gate_k1_is_argmax():
    idx, w = gate(np.array([1.0]), np.array([[0.3, 0.9, 0.1]]), 1)
    assert idx == [1] and w == [1.0]


def test_gate_k_too_large():
    with pytest.raises(ValueError):
        gate(np.ones(2), np.ones((2, 2)), 3)


def test_top_k_rejects_nan():
    with pytest.raises(ad.NonFiniteError):
        top_k(np.array([0.0, np.nan]), 1)


@settings(max_examples=50)
@given(st.lists(st.integers(-3, 3), min_size=2, max_size=8), st.data())
def test_top_k_matches_sorted_order(vals, data):
    k = data.draw(st.integers(1, len(vals)))
    got = top_k(np.array(vals, float), k).tolist()
    expected = sorted(range(len(vals)), key=lambda i: (-vals[i], i))[:k]
    assert got == expected


# ---------------------------------------------------------------- MoE layer


def _rigged_layer():
    """Two scalar experts f1(x)=x and f2(x)=2x with gate weights (0.25, 0.75)."""
    cfg = ModelConfig(n_layers=1, d_model=1, n_heads=1, d_ff=1, vocab_size=3, max_seq_len=2,
                      total_experts=2, active_experts=2, ffn_style="two-matrix")
    m = MoETransformer(cfg, seed=0)
    P = m.params
    P["layers.0.moe.router"].data[:] = [[0.0, np.log(3.0)]]
    # silu(h*w_in) * w_out with a huge w_in is a linear map for h > 0
    big = 1e3
    P["layers.0.moe.experts.0.w_in"].data[:] = big
    P["layers.0.moe.experts.0.w_out"].data[:] = 1.0 / big
    P["layers.0.moe.experts.1.w_in"].data[:] = big
    P["layers.0.moe.experts.1.w_out"].data[:] = 2.0 / big
    return m


def test_rigged_two_expert_layer():
    m = _rigged_layer()
    out, rec = m.moe_layer_forward(Tensor(np.array([[1.0]])), 0)
    assert rec.indices.tolist() == [[1, 0]]
    np.testing.assert_allclose(rec.weights, [[0.75, 0.25]], atol=1e-12)
    assert out.data[0, 0] == pytest.approx(1.75, rel=1e-9)


def test_identical_experts_any_k_equals_single_expert():
    m = MoETransformer(tiny(total_experts=4, active_experts=1), seed=1)
    for e in range(1, 4):
        for w in ("w_gate", "w_up", "w_down"):
            m.params[f"layers.0.moe.experts.{e}.{w}"].data[:] = m.params[f"layers.0.moe.experts.0.{w}"].data
    h = Tensor(np.random.default_rng(0).normal(size=(5, 16)))
    ref = m.expert_ffn(h, "layers.0.moe.experts.0").data
    for k in range(1, 5):
        out, _ = m.moe_layer_forward(h, 0, k=k)
        np.testing.assert_allclose(out.data, ref, atol=1e-12)


def test_single_expert_equals_dense():
    dense = DenseTransformer(tiny(), seed=3)
    moe = upcycle_from_dense(dense, 1, 1)
    ids = np.random.default_rng(0).integers(0, 11, (2, 7))
    np.testing.assert_array_equal(moe.forward(ids)[0].data, dense.forward(ids)[0].data)


def test_routing_records_cover_every_token():
    m = MoETransformer(tiny(total_experts=4, active_experts=2), seed=0)
    _, routing = m.forward(np.zeros((3, 5), int), token_mask=np.array([[1] * 5, [1] * 3 + [0] * 2, [1] * 5]))
    assert len(routing) == 2
    r = routing[0]
    assert r.indices.shape == (15, 2)
    assert r.valid.sum() == 13
    np.testing.assert_allclose(r.weights.sum(1), 1.0)
    assert len(list(r.traces())) == 13


# ---------------------------------------------------------------- attention and forward


def test_zero_output_projection_is_identity():
    m = DenseTransformer(tiny(), seed=0)
    m.params["layers.0.attn.wo"].data[:] = 0
    x = Tensor(np.random.default_rng(0).normal(size=(1, 4, 16)))
    np.testing.assert_array_equal(m.attention_block(x, 0).data, x.data)


def test_single_token_attends_to_itself():
    cfg = tiny(n_heads=1)
    m = DenseTransformer(cfg, seed=0)
    x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 16)))
    # with one position the attention weight is 1, so the block adds v @ wo
    P = m.params
    h = ad.layer_norm(x, P["layers.0.ln1.weight"], P["layers.0.ln1.bias"]).data
    expected = h @ P["layers.0.attn.wv"].data @ P["layers.0.attn.wo"].data + x.data
    np.testing.assert_allclose(m.attention_block(x, 0).data, expected, atol=1e-12)


@pytest.mark.parametrize("kv", [None, 1])
def test_causality(kv):
    m = MoETransformer(tiny(n_heads=2, n_kv_heads=kv, total_experts=4, active_experts=2), seed=2)
    rng = np.random.default_rng(0)
    a = rng.integers(0, 11, 6)
    b = a.copy()
    b[4:] = (b[4:] + 1) % 11
    la, lb = m.forward(a)[0].data, m.forward(b)[0].data
    np.testing.assert_array_equal(la[:4], lb[:4])
    assert not np.allclose(la[4:], lb[4:])


def test_forward_shapes_and_errors():
    m = DenseTransformer(tiny(), seed=0)
    logits, routing = m.forward([1, 2, 3])
    assert logits.shape == (3, 11)
    assert routing == []
    with pytest.raises(ValueError):
        m.forward([11])
    with pytest.raises(ValueError):
        m.forward(np.zeros(13, int))


def test_tied_embeddings_have_no_head():
    m = DenseTransformer(tiny(tie_embeddings=True), seed=0)
    assert "lm_head" not in m.params
    assert m.forward([1, 2])[0].shape == (2, 11)


# ---------------------------------------------------------------- upcycling


@pytest.mark.parametrize("k", [1, 2, 4])
def test_upcycle_matches_dense(k):
    dense = DenseTransformer(tiny(), seed=5)
    moe = upcycle_from_dense(dense, 4, k, seed=1)
    ids = np.random.default_rng(k).integers(0, 11, (3, 8))
    diff = np.abs(moe.forward(ids)[0].data - dense.forward(ids)[0].data).max()
    assert diff < 1e-9


def test_upcycle_freeze_mask():
    moe = upcycle_from_dense(DenseTransformer(tiny(), seed=0), 4, 2)
    for name, frozen in moe.freeze_mask.items():
        assert frozen == (".moe." not in name), name
    assert {n for n, p in moe.params.items() if p.requires_grad} == {n for n in moe.params if ".moe." in n}


def test_upcycle_router_scale():
    moe = upcycle_from_dense(DenseTransformer(desk_config(), seed=0), 8, 2, seed=0)
    w = np.concatenate([moe.params[f"layers.{i}.moe.router"].data.ravel() for i in range(4)])
    assert abs(w.std() - 0.02) < 0.002
    assert abs(w.mean()) < 0.002


def test_upcycle_multiplies_ffn_params():
    dense = DenseTransformer(tiny(), seed=0)
    moe = upcycle_from_dense(dense, 8, 2)
    ffn = 3 * 16 * 24 * 2
    assert moe.num_parameters() - dense.num_parameters() == 7 * ffn + 2 * 16 * 8


# ---------------------------------------------------------------- accounting


def test_count_matches_instantiated_model():
    for cfg in (tiny(), tiny(total_experts=4, active_experts=2, n_kv_heads=1), tiny(tie_embeddings=True)):
        model = MoETransformer(cfg, seed=0)
        assert count_parameters(cfg)[0] == model.num_parameters()


def test_count_single_expert_is_dense_plus_router():
    cfg = tiny()
    total, active = count_parameters(cfg)
    assert total == active == DenseTransformer(cfg, seed=0).num_parameters() + 2 * 16


def test_count_doubling_experts():
    a, b = tiny(total_experts=4), tiny(total_experts=8)
    diff = count_parameters(b)[0] - count_parameters(a)[0]
    assert diff == 4 * (3 * 16 * 24) * 2 + 2 * 16 * 4


def test_llama_like_counts():
    total, active = count_parameters(llama_3b_like(8, 2))
    assert abs(total - 18e9) / 18e9 < 0.15
    assert abs(active - 5e9) / 5e9 < 0.15


# ---------------------------------------------------------------- decoding


def _chain_model():
    """Vocabulary of 3 whose greedy chain is 0 -> 1 -> 2 -> 0 regardless of position."""
    cfg = ModelConfig(n_layers=1, d_model=3, n_heads=1, d_ff=1, vocab_size=3, max_seq_len=8,
                      ffn_style="two-matrix")
    m = DenseTransformer(cfg, seed=0)
    for name, p in m.params.items():
        p.data[:] = 0.0
    m.params["tok_emb"].data[:] = np.eye(3) * 10
    m.params["ln_f.weight"].data[:] = 1.0
    m.params["lm_head"].data[:] = np.roll(np.eye(3), 1, axis=1)
    return m


def test_rigged_greedy_chain():
    (g,) = generate(_chain_model(), [0], 5)
    assert g.tokens == [1, 2, 0, 1, 2]
    assert not g.truncated


def test_greedy_votes_identical_and_eos():
    m = _chain_model()
    outs = generate(m, [0], 5, n_votes=5, eos_id=2)
    assert all(o.tokens == [1, 2] for o in outs)
    assert generate(m, [0], 1, eos_id=2)[0].truncated


def test_sampling_is_seeded():
    m = DenseTransformer(tiny(), seed=0)
    a = generate(m, [1, 2], 4, n_votes=3, temperature=1.0, seed=7)
    b = generate(m, [1, 2], 4, n_votes=3, temperature=1.0, seed=7)
    assert [g.tokens for g in a] == [g.tokens for g in b]


def test_generate_length_guard():
    with pytest.raises(ValueError):
        generate(DenseTransformer(tiny(), seed=0), [1] * 10, 5)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flexilora import numcore as nc
from flexilora.adapters import (
    AdapterSet,
    LoraPair,
    RankAssignment,
    alpha_of,
    count_params,
    expected_active_params,
    init_pair,
    lora_forward,
    lora_forward_sliced,
    merge_delta,
    rank_mask,
    truncate_view,
)
from flexilora.model import ModelConfig

TOY = ModelConfig(vocab_size=40, d_model=32, n_layers=2, n_heads=2, d_ff=64)


def _pair(d_in, d_out, r_max, seed=0, b_std=0.1):
    rng = np.random.default_rng(seed)
    p = init_pair(d_in, d_out, r_max, rng)
    p.B.data[...] = rng.normal(0, b_std, size=p.B.shape).astype(p.B.data.dtype)
    return p


def test_hand_worked_example(f64):
    # d=2, r_max=2, alpha_base=16, rank 1: only A row 0 and B column 0 matter
    pair = LoraPair(
        nc.tensor(np.array([[1.0, 0.0], [5.0, 5.0]]), requires_grad=True),
        nc.tensor(np.array([[1.0, 9.0], [0.0, 9.0]]), requires_grad=True),
        r_max=2,
    )
    w = nc.tensor(np.eye(2))
    h = nc.tensor(np.array([[[1.0, 1.0]]]))
    out = lora_forward(h, w, pair, RankAssignment([1]))
    np.testing.assert_array_equal(out.data[0, 0], [17.0, 1.0])


def test_alpha_scaling():
    assert alpha_of(16.0, 1) == 16.0
    assert alpha_of(16.0, 8) == 2.0
    with pytest.raises(ValueError):
        alpha_of(16.0, 0)


def test_rank_mask_layout():
    m = rank_mask(np.array([1, 3]), 4, 16.0)
    np.testing.assert_allclose(m, [[16, 0, 0, 0], [16 / 3, 16 / 3, 16 / 3, 0]])


def test_initial_update_is_zero():
    p = init_pair(8, 8, 4, np.random.default_rng(0))
    assert not p.B.data.any()
    assert 0.01 < p.A.data.std() < 0.03


def test_masked_matches_sliced_on_random_batches():
    rng = np.random.default_rng(11)
    worst = 0.0
    for trial in range(100):
        pair = _pair(16, 12, 8, seed=trial)
        w = nc.tensor(rng.normal(size=(12, 16)))
        n = int(rng.integers(1, 6))
        h = nc.tensor(rng.normal(size=(n, 3, 16)))
        ranks = rng.choice([1, 2, 4, 8], size=n)
        nc.new_graph()
        a = lora_forward(h, w, pair, RankAssignment(ranks)).data
        b = lora_forward_sliced(h, w, pair, ranks).data
        worst = max(worst, float(np.abs(a - b).max()))
    assert worst <= 1e-6


def test_masked_matches_sliced_gradients(f64):
    rng = np.random.default_rng(2)
    pair = _pair(6, 5, 4, seed=2)
    w = nc.tensor(rng.normal(size=(5, 6)))
    h = nc.tensor(rng.normal(size=(3, 2, 6)))
    ranks = [1, 4, 2]
    grads = []
    for fwd in (lambda: lora_forward(h, w, pair, RankAssignment(ranks)), lambda: lora_forward_sliced(h, w, pair, ranks)):
        nc.new_graph()
        loss = nc.sum_all(nc.mul(fwd(), nc.constant(np.linspace(-1, 1, 30).reshape(3, 2, 5))))
        nc.backward(loss)
        grads.append((pair.A.grad.copy(), pair.B.grad.copy()))
        pair.A.zero_grad(), pair.B.zero_grad()
    for g1, g2 in zip(*grads):
        np.testing.assert_allclose(g1, g2, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 7), st.integers(0, 10_000))
def test_tail_perturbation_has_no_effect(r, seed):
    rng = np.random.default_rng(seed)
    pair = _pair(8, 8, 8, seed=seed)
    w = nc.tensor(rng.normal(size=(8, 8)))
    h = nc.tensor(rng.normal(size=(2, 3, 8)))
    assign = RankAssignment([r, r])
    before = lora_forward(h, w, pair, assign).data.copy()
    pair.A.data[r:] += rng.normal(size=pair.A.data[r:].shape).astype(pair.A.data.dtype)
    pair.B.data[:, r:] += rng.normal(size=pair.B.data[:, r:].shape).astype(pair.B.data.dtype)
    np.testing.assert_array_equal(lora_forward(h, w, pair, assign).data, before)


def test_gradient_locality():
    pair = _pair(8, 8, 8)
    w = nc.tensor(np.eye(8))
    h = nc.tensor(np.random.default_rng(0).normal(size=(2, 3, 8)))
    nc.new_graph()
    nc.backward(nc.sum_all(lora_forward(h, w, pair, RankAssignment([2, 3]))))
    assert not pair.A.grad[3:].any() and not pair.B.grad[:, 3:].any()
    assert pair.A.grad[:3].any() and pair.B.grad[:, :3].any()


def test_truncate_view_shares_storage_values():
    pair = _pair(4, 5, 4)
    a, b = truncate_view(pair, 2)
    assert a.shape == (2, 4) and b.shape == (5, 2)
    np.testing.assert_array_equal(a.data, pair.A.data[:2])


def test_merge_delta_matches_forward(f64):
    pair = _pair(6, 6, 4, seed=4)
    w = nc.tensor(np.zeros((6, 6)))
    h = np.random.default_rng(5).normal(size=(1, 1, 6))
    out = lora_forward(nc.tensor(h), w, pair, RankAssignment([3])).data[0, 0]
    np.testing.assert_allclose(out, merge_delta(pair, 3) @ h[0, 0], atol=1e-12)


def test_rank_errors():
    pair = _pair(4, 4, 4)
    w = nc.tensor(np.eye(4))
    h = nc.tensor(np.ones((2, 1, 4)))
    with pytest.raises(ValueError):
        lora_forward(h, w, pair, RankAssignment([1, 5]))
    with pytest.raises(ValueError):
        lora_forward(h, w, pair, RankAssignment([0, 1]))
    with pytest.raises(ValueError):
        lora_forward(h, w, pair, RankAssignment([1]))
    with pytest.raises(ValueError):
        RankAssignment([1], phase="eval")
    with pytest.raises(ValueError):
        truncate_view(pair, 9)


def test_count_params_toy():
    assert count_params(TOY, ("q", "v"), 2) == 2 * 2 * (32 + 32) * 2
    assert count_params(TOY, ("q", "v"), 2) == 512
    cfg = ModelConfig(vocab_size=40, d_model=64, n_layers=4, n_heads=4, d_ff=128)
    assert count_params(cfg, ("q", "v"), 2) == 2048


@given(st.integers(1, 64))
def test_count_params_linear_in_rank(r):
    assert count_params(TOY, ("q", "v"), 2 * r) == 2 * count_params(TOY, ("q", "v"), r)


def test_expected_active_params_mix():
    cfg = ModelConfig(vocab_size=40, d_model=64, n_layers=4, n_heads=4, d_ff=128)
    assert expected_active_params(cfg, ("q", "v"), {2: 0.5, 8: 0.5}) == 5120
    assert expected_active_params(cfg, ("q", "v"), {4: 1.0}) == count_params(cfg, ("q", "v"), 4)
    with pytest.raises(ValueError):
        expected_active_params(cfg, ("q", "v"), {2: 0.5, 8: 0.4})


def test_adapter_set_state_roundtrip():
    s = AdapterSet.create(16, 2, 4, np.random.default_rng(0))
    assert len(s.parameters()) == 8
    assert "adapter.layers.1.v.B" in s.state()
    t = AdapterSet.from_state(s.state())
    assert t.r_max == 4
    for k, v in s.state().items():
        np.testing.assert_array_equal(t.state()[k], v)
    c = s.copy()
    c.get(0, "q").A.data[0, 0] += 1
    assert s.get(0, "q").A.data[0, 0] != c.get(0, "q").A.data[0, 0]

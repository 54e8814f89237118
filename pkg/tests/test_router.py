import numpy as np
import pytest

from flexilora import numcore as nc
from flexilora.model import ModelConfig, build_tokenizer, init_weights
from flexilora.router import (
    EASY,
    HARD,
    DifficultyLabel,
    RouterWeights,
    balance_classes,
    classify,
    constant_router,
    group_by_length,
    label_difficulty,
    pool_embedding,
    pooled_embeddings,
    read_labels,
    route,
    router_loss,
    train_router,
    write_labels,
)
from flexilora.tasks import ALPHABET, gen_fixed_knob

TOK = build_tokenizer(ALPHABET)
SMALL = ModelConfig(vocab_size=TOK.vocab_size, d_model=16, n_layers=1, n_heads=2, d_ff=32, max_seq_len=48)


def _clusters(n, d=8, gap=4.0, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    centers = np.zeros((2, d))
    centers[1, 0] = gap
    return centers[y] + rng.normal(size=(n, d)), y


def test_pool_example():
    h = nc.tensor(np.array([[[1.0, 0.0], [0.0, 1.0], [2.0, 2.0], [9.0, 9.0]]]))
    out = pool_embedding(h, np.array([[1, 1, 1, 0]]))
    np.testing.assert_allclose(out.data[0], [1.0, 1.0])


def test_pool_rejects_empty_mask():
    with pytest.raises(ValueError):
        pool_embedding(nc.tensor(np.ones((1, 2, 2))), np.zeros((1, 2)))


def test_separable_clusters_are_learned():
    x, y = _clusters(600)
    fit = train_router(x, y, sigma=0.1, epochs=30, seed=0)
    assert fit.router.held_out_accuracy >= 0.99
    assert fit.loss_trace[-1] < fit.loss_trace[0]


def test_shuffled_labels_give_chance():
    x, y = _clusters(600, seed=1)
    y = nc.stream(0, "test/shuffle").permutation(y)
    accs = [train_router(x, y, epochs=30, seed=s).router.held_out_accuracy for s in range(3)]
    assert abs(float(np.median(accs)) - 0.5) <= 0.1


def test_training_is_deterministic():
    x, y = _clusters(200)
    a = train_router(x, y, epochs=5, seed=3)
    b = train_router(x, y, epochs=5, seed=3)
    assert a.loss_trace == b.loss_trace
    np.testing.assert_array_equal(a.router.w1.data, b.router.w1.data)


def test_negative_sigma_rejected():
    x, y = _clusters(20)
    with pytest.raises(ValueError):
        train_router(x, y, sigma=-0.1)


def test_zero_noise_loss_has_correct_gradient():
    with nc.precision("f64"):
        x, y = _clusters(16, d=4)
        fit = train_router(x, y, epochs=1, seed=0, holdout=0.0)
        r = fit.router
        for p in r.parameters():
            p.requires_grad = True
        err = nc.grad_check(lambda: router_loss(r, r.standardise(x), y), r.parameters())
    assert err <= 1e-4


def _forced(logits_bias):
    d = 3
    return RouterWeights(
        nc.tensor(np.zeros((4, d))),
        nc.tensor(np.zeros(4)),
        nc.tensor(np.zeros((2, 4))),
        nc.tensor(np.asarray(logits_bias, dtype=float)),
        np.zeros(d),
        np.ones(d),
    )


def test_ties_go_to_lower_class():
    r = _forced([0.0, 0.0])
    assert classify(r, np.ones((3, 3))).tolist() == [0, 0, 0]
    assert route(r, np.ones((2, 3))).ranks.tolist() == [2, 2]


def test_route_maps_classes_through_table():
    r = _forced([0.0, 0.0])
    r.w1.data[0, 0] = 1.0
    r.w2.data[1, 0] = 5.0
    r.w2.data[0, 0] = -5.0
    h = np.array([[-1.0, 0, 0], [1.0, 0, 0]])
    assert route(r, h).ranks.tolist() == [2, 8]


def test_router_input_width_checked():
    with pytest.raises(ValueError):
        classify(_forced([0, 0]), np.ones((1, 5)))


def test_rank_table_must_ascend():
    with pytest.raises(ValueError):
        RouterWeights(*_forced([0, 0]).parameters(), np.zeros(3), np.ones(3), rank_table=(8, 2))


def test_state_roundtrip():
    x, y = _clusters(50)
    r = train_router(x, y, epochs=2, seed=0).router
    r2 = RouterWeights.from_state(r.state())
    np.testing.assert_array_equal(classify(r2, x), classify(r, x))
    assert r2.rank_table == r.rank_table and r2.sigma == r.sigma


def _labels(n_easy, n_hard):
    return [DifficultyLabel(f"e{i}", EASY, 1.0, "accuracy") for i in range(n_easy)] + [
        DifficultyLabel(f"h{i}", HARD, 0.0, "accuracy") for i in range(n_hard)
    ]


def test_balance_downsamples_majority():
    out = balance_classes(_labels(70, 30), seed=0)
    assert len(out) == 60
    assert sum(lab.cls == EASY for lab in out) == 30
    assert out == balance_classes(_labels(70, 30), seed=0)


def test_balance_needs_both_classes():
    with pytest.raises(ValueError, match="tau"):
        balance_classes(_labels(5, 0), seed=0)


def test_labels_roundtrip(tmp_path):
    labs = _labels(2, 3)
    write_labels(labs, tmp_path / "l.jsonl")
    assert read_labels(tmp_path / "l.jsonl") == labs


def test_label_difficulty_thresholds():
    w = init_weights(SMALL, 0)
    samples = gen_fixed_knob("mod_chain", 2, 10, seed=0)
    hi = label_difficulty(w, TOK, samples, "accuracy", tau=0.0)
    assert all(lab.cls == EASY for lab in hi)
    lo = label_difficulty(w, TOK, samples, "accuracy", tau=1.01)
    assert all(lab.cls == HARD for lab in lo)
    assert [lab.sample_id for lab in lo] == [s.id for s in samples]


def test_pooled_embeddings_shape_and_grouping():
    w = init_weights(SMALL, 0)
    samples = gen_fixed_knob("mod_chain", 1, 3, seed=0) + gen_fixed_knob("mod_chain", 4, 2, seed=0)
    h = pooled_embeddings(w, TOK, samples)
    assert h.shape == (5, SMALL.d_model) and h.dtype == np.float64
    assert group_by_length(TOK, [s.prompt for s in samples]) == [[0, 1, 2], [3, 4]]


def test_constant_router_ignores_input():
    h = np.random.default_rng(0).normal(size=(5, 6))
    for cls, r in ((0, 2), (1, 8)):
        assert route(constant_router(6, cls), h).ranks.tolist() == [r] * 5
    with pytest.raises(ValueError):
        constant_router(6, 2)

import math

import numpy as np
import pytest

from flexilora import numcore as nc
from flexilora.adapters import AdapterSet, RankAssignment
from flexilora.model import (
    BOS,
    EOS,
    PAD,
    ModelConfig,
    TokenizerError,
    TransformerWeights,
    build_tokenizer,
    forward,
    forward_base,
    greedy_decode,
    greedy_decode_batch,
    init_weights,
    make_batch,
    pretrain_base,
    pretrain_corpus,
    task_loss,
)
from flexilora.tasks import ALPHABET, gen_fixed_knob

TOK = build_tokenizer(ALPHABET)
SMALL = ModelConfig(vocab_size=TOK.vocab_size, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=32)


def test_tokenizer_roundtrip_and_specials():
    assert (PAD, BOS, EOS) == (0, 1, 2)
    text = "a:47 c=?"
    ids = TOK.encode(text)
    assert min(ids) >= 3
    assert TOK.decode(ids) == text
    assert TOK.decode([BOS] + ids + [EOS, PAD]) == text
    with pytest.raises(TokenizerError):
        TOK.encode("Z")


def test_make_batch_targets_cover_answer_only():
    b = make_batch(TOK, ["1+2=?", "3=?"], ["3", "3"])
    assert b.ids.shape == (2, 7)
    assert b.ids[0, 0] == BOS and b.ids[1, 5:].tolist() == [PAD] * 2
    live = b.targets[0][b.targets[0] != nc.IGNORE_INDEX].tolist()
    assert live == TOK.encode("3") + [EOS]
    assert b.mask[1].tolist() == [1, 1, 1, 1, 1, 0, 0]


def test_random_init_loss_near_log_vocab():
    w = init_weights(SMALL, 0)
    b = make_batch(TOK, ["ab|", "cd3|"], ["ab", "cd3"], supervise_prompt=True)
    loss = task_loss(b, w).item()
    assert abs(loss - math.log(SMALL.vocab_size)) <= 0.15 * math.log(SMALL.vocab_size)


def test_causality():
    w = init_weights(SMALL, 1)
    rng = np.random.default_rng(0)
    ids = rng.integers(3, SMALL.vocab_size, size=(1, 10))
    base = forward(ids, w).data
    ids2 = ids.copy()
    ids2[0, 6:] = rng.integers(3, SMALL.vocab_size, size=4)
    np.testing.assert_array_equal(forward(ids2, w).data[0, :6], base[0, :6])


def test_batch_permutation_invariance():
    w = init_weights(SMALL, 2)
    ids = np.random.default_rng(3).integers(3, SMALL.vocab_size, size=(4, 7))
    perm = [2, 0, 3, 1]
    np.testing.assert_allclose(forward(ids[perm], w).data, forward(ids, w).data[perm], atol=1e-6)


def test_padding_does_not_change_real_positions():
    w = init_weights(SMALL, 3)
    b1 = make_batch(TOK, ["1+2=?"], ["3"])
    b2 = make_batch(TOK, ["1+2=?", "1+2*3*4=?"], ["3", "6"])
    t = b1.ids.shape[1]
    np.testing.assert_allclose(forward(b2.ids, w).data[0, :t], forward(b1.ids, w).data[0], atol=1e-5)


def test_zero_init_adapters_reproduce_base_exactly():
    with nc.precision("f64"):
        w = init_weights(SMALL, 4)
        ad = AdapterSet.create(SMALL.d_model, SMALL.n_layers, 8, nc.stream(0, "adapters"))
        ids = np.random.default_rng(1).integers(3, SMALL.vocab_size, size=(3, 6))
        base = forward_base(ids, w).data
        out = forward(ids, w, ad, RankAssignment([1, 4, 8])).data
    np.testing.assert_array_equal(out, base)


def test_sequence_too_long():
    w = init_weights(SMALL, 0)
    with pytest.raises(ValueError):
        forward(np.full((1, 33), 3), w)


def test_weights_state_roundtrip_and_hash():
    w = init_weights(SMALL, 5)
    h = w.content_hash()
    w2 = TransformerWeights.from_state(SMALL, w.state())
    assert w2.content_hash() == h
    assert all(k.startswith("base.") for k in w.state())
    c = w.copy()
    c["head"].data[0, 0] += 1
    assert c.content_hash() != h and w.content_hash() == h


def test_init_is_seeded():
    assert init_weights(SMALL, 0).content_hash() == init_weights(SMALL, 0).content_hash()
    assert init_weights(SMALL, 0).content_hash() != init_weights(SMALL, 1).content_hash()


def test_pretraining_reduces_loss_and_freezes():
    corpus = pretrain_corpus(0, 400, gen_fixed_knob("mod_chain", 1, 50, seed=0))
    w, trace = pretrain_base(SMALL, TOK, corpus, 120, 3e-3, 0, batch_size=16, warmup=20)
    assert len(trace) == 120
    assert np.mean(trace[-20:]) < 0.95 * np.mean(trace[:20])
    assert not any(p.requires_grad for p in w.params.values())


def test_greedy_decode_deterministic_and_batched():
    w = init_weights(SMALL, 6)
    prompts = ["1+2=?", "3*4=?", "5-1=?"]
    one = [greedy_decode(w, TOK, p, 3) for p in prompts]
    many = greedy_decode_batch(w, TOK, prompts, 3)
    assert one == many
    assert many == greedy_decode_batch(w, TOK, prompts, 3)
    with pytest.raises(ValueError):
        greedy_decode_batch(w, TOK, ["1=?", "12+3=?"], 2)


def test_zero_new_tokens_decode_to_empty():
    w = init_weights(SMALL, 6)
    assert greedy_decode_batch(w, TOK, ["1+2=?", "3*4=?"], 0) == ["", ""]


def test_zero_pretrain_steps_return_init():
    corpus = pretrain_corpus(0, 10, [])
    w, trace = pretrain_base(SMALL, TOK, corpus, 0, 3e-3, 3)
    assert trace == []
    assert w.content_hash() == init_weights(SMALL, 3).content_hash()

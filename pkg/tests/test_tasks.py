import numpy as np
import pytest
from hypothesis import given, strategies as st

from flexilora.tasks import (
    ALPHABET,
    KNOB_RANGE,
    Sample,
    TaskSpec,
    gen_copy,
    gen_fixed_knob,
    gen_kv_recall,
    gen_mod_chain,
    generate,
    metric_answer_accuracy,
    metric_exact_match,
    metric_token_f1,
    read_samples,
    score,
    solve,
    solve_mod_chain,
    write_samples,
)


def test_single_step_chain():
    assert solve_mod_chain("3+4=?") == "7"


def test_chain_is_left_to_right():
    assert solve_mod_chain("3+4*2=?") == "4"


def test_chain_subtraction_wraps():
    assert solve_mod_chain("2-5=?") == "7"


@pytest.mark.parametrize("family", ["kv_recall", "mod_chain"])
def test_reference_solver_agrees_on_every_sample(family):
    lo, hi = KNOB_RANGE[family]
    for knob in range(lo, hi + 1):
        for s in gen_fixed_knob(family, knob, 60, seed=3):
            assert s.knob == knob
            assert solve(s) == s.answer


def test_kv_single_pair_answer_present():
    for s in gen_fixed_knob("kv_recall", 1, 20, seed=0):
        assert s.prompt.count(":") == 1
        assert s.answer in s.prompt


def test_kv_format():
    s = gen_fixed_knob("kv_recall", 4, 1, seed=5)[0]
    pairs, query = s.prompt.rsplit(" ", 1)
    assert len(pairs.split(" ")) == 4
    assert query.endswith("=?") and len(s.answer) == 2


def test_generation_is_deterministic():
    spec = TaskSpec("mod_chain")
    assert gen_mod_chain(spec, 7) == gen_mod_chain(spec, 7)
    assert gen_mod_chain(spec, 7) != gen_mod_chain(spec, 8)


def test_mixed_split_is_half_low_half_high():
    spec = TaskSpec("kv_recall", low=(1, 2), high=(6, 7), n_train=100)
    samples = gen_kv_recall(spec, 0)
    low = sum(s.knob in (1, 2) for s in samples)
    assert low == 50


def test_train_and_eval_differ():
    spec = TaskSpec("mod_chain", n_train=20, n_eval=20)
    assert [s.prompt for s in generate(spec, "train")] != [s.prompt for s in generate(spec, "eval")]


def test_knob_out_of_range_rejected():
    with pytest.raises(ValueError):
        TaskSpec("kv_recall", high=(13,))
    with pytest.raises(ValueError):
        TaskSpec("mod_chain", low=(0,))


def test_wrong_family_generator_rejected():
    with pytest.raises(ValueError):
        gen_kv_recall(TaskSpec("mod_chain"), 0)


def test_alphabet_covers_all_text():
    chars = set(ALPHABET)
    for fam in KNOB_RANGE:
        for s in gen_fixed_knob(fam, KNOB_RANGE[fam][1], 20, seed=1):
            assert set(s.prompt + s.answer) <= chars
    for c in gen_copy(20, 0):
        assert set(c) <= chars
        a, b = c.split("|")
        assert a == b


def test_f1_examples():
    assert metric_token_f1("a b c", "a b c") == 1.0
    assert metric_token_f1("a b c", "b c d") == pytest.approx(2 / 3)
    assert metric_token_f1("x y", "a b") == 0.0
    assert metric_token_f1("", "") == 1.0
    assert metric_token_f1("", "a") == 0.0
    assert metric_token_f1("a", "") == 0.0


def test_f1_counts_multiplicity():
    # overlap of {a,a} with {a} is one token
    assert metric_token_f1("a a", "a") == pytest.approx(2 * 0.5 * 1 / 1.5)


def test_exact_match_examples():
    assert metric_exact_match(" 7 ", "7") == 1
    assert metric_exact_match("7", "17") == 0
    assert metric_exact_match("A  b", "a b") == 1


@given(st.text(alphabet="ab 7", max_size=8), st.text(alphabet="ab 7", max_size=8))
def test_exact_match_implies_f1_one(p, g):
    if metric_exact_match(p, g):
        assert metric_token_f1(p, g) == 1.0


def test_accuracy_examples():
    assert metric_answer_accuracy("the answer is 4", "4") == 1
    assert metric_answer_accuracy("no digits", "4") == 0
    assert metric_answer_accuracy("14", "4") == 0
    assert metric_answer_accuracy("3 then 4", "4") == 1


def test_accuracy_rejects_bad_gold():
    with pytest.raises(ValueError):
        metric_answer_accuracy("4", "four")


def test_score_dispatch():
    assert score("token_f1", "12", "12") == 1.0
    with pytest.raises(KeyError):
        score("bleu", "a", "a")


def test_dataset_roundtrip(tmp_path):
    samples = gen_fixed_knob("mod_chain", 3, 5, seed=0) + gen_fixed_knob("kv_recall", 2, 5, seed=0)
    path = tmp_path / "d.jsonl"
    write_samples(samples, path)
    assert read_samples(path) == samples
    first = path.read_text().splitlines()[0]
    assert '"format": 1' in first and '"gold"' in first


def test_sample_is_frozen():
    s = Sample("1+1=?", "2", 1, "mod_chain", "x")
    with pytest.raises(Exception):
        s.answer = "3"


def test_chain_lengths_fit_budget():
    s = gen_fixed_knob("mod_chain", 8, 1, seed=0)[0]
    assert len(s.prompt) == 2 * 8 + 1 + 2
    kv = gen_fixed_knob("kv_recall", 12, 1, seed=0)[0]
    assert len(kv.prompt) + 1 + 3 <= 96

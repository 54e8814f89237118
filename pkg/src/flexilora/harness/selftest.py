"""Built-in invariant suites, runnable without pytest (``flexilora selftest``)."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import numcore as nc
from ..adapters import AdapterSet, RankAssignment, count_params, expected_active_params, lora_forward, lora_forward_sliced
from ..methods import Fixed, Flexi, evaluate, finetune
from ..model import ModelConfig, build_tokenizer, forward, forward_base, init_weights, make_batch, task_loss
from ..router import constant_router, router_loss, train_router
from ..tasks import ALPHABET, TaskSpec, generate
from .checkpoint import CheckpointError, decode, encode

SEEDS = (0, 1, 2)
TOK = build_tokenizer(ALPHABET)
TINY = ModelConfig(vocab_size=TOK.vocab_size, d_model=8, n_layers=2, n_heads=2, d_ff=16, max_seq_len=32)

PRIMITIVES: dict[str, tuple[Callable, list[tuple[int, ...]]]] = {
    "add": (lambda a, b: nc.add(a, b), [(3, 4), (3, 4)]),
    "sub": (lambda a, b: nc.sub(a, b), [(3, 4), (3, 4)]),
    "add_bias": (lambda a, b: nc.add_bias(a, b), [(2, 3, 4), (4,)]),
    "scale": (lambda a: nc.scale(a, -2.5), [(3, 4)]),
    "mul": (lambda a, b: nc.mul(a, b), [(3, 4), (3, 4)]),
    "matmul": (lambda a, b: nc.matmul(a, b), [(2, 3, 4), (4, 5)]),
    "linear": (lambda a, b: nc.linear(a, b), [(2, 3, 4), (5, 4)]),
    "bmm": (lambda a, b: nc.bmm(a, b), [(2, 3, 4), (2, 4, 5)]),
    "reshape": (lambda a: nc.reshape(a, (6, 2)), [(3, 4)]),
    "transpose": (lambda a: nc.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
    "concat": (lambda a, b: nc.concat([a, b], axis=1), [(2, 3), (2, 5)]),
    "prefix": (lambda a: nc.prefix(a, 2, axis=1), [(3, 4)]),
    "embedding": (lambda t: nc.embedding(t, np.array([[0, 2], [2, 1]])), [(4, 3)]),
    "mean_pool": (lambda h: nc.mean_pool(h, np.array([[1, 1, 0], [1, 0, 0]])), [(2, 3, 4)]),
    "softmax": (lambda a: nc.softmax(a), [(3, 5)]),
    "tanh": (lambda a: nc.tanh(a), [(3, 4)]),
    "relu": (lambda a: nc.relu(nc.add(a, nc.constant(np.full(a.shape, 0.05)))), [(3, 4)]),
    "gelu": (lambda a: nc.gelu(a), [(3, 4)]),
    "layer_norm": (lambda a, g, b: nc.layer_norm(a, g, b), [(2, 3, 6), (6,), (6,)]),
    "causal_attention": (lambda q, k: nc.causal_attention(q, k), [(2, 5, 4), (2, 5, 4)]),
}


@dataclass
class Check:
    name: str
    ok: bool
    detail: str
    seconds: float


def _leaves(rng, shapes):
    return [nc.tensor(rng.normal(size=s), requires_grad=True) for s in shapes]


def primitive_error(name: str, seed: int) -> float:
    """Max relative error of one primitive under a random output weighting."""
    fn, shapes = PRIMITIVES[name]
    rng = np.random.default_rng(seed)
    params = _leaves(rng, shapes)
    if name == "relu":  # keep probes away from the kink
        for p in params:
            p.data[np.abs(p.data + 0.05) < 1e-3] += 0.01
    with nc.no_grad():
        shape = fn(*params).shape
    w = nc.tensor(rng.normal(size=shape))
    return nc.grad_check(lambda: nc.sum_all(nc.mul(fn(*params), w)), params)


def cross_entropy_error(seed: int) -> float:
    rng = np.random.default_rng(seed)
    logits = nc.tensor(rng.normal(size=(3, 4, 5)), requires_grad=True)
    labels = rng.integers(0, 5, size=(3, 4))
    labels[0, :2] = nc.IGNORE_INDEX
    return nc.grad_check(lambda: nc.cross_entropy(logits, labels), [logits])


def adapter_loss_error(seed: int) -> float:
    """Full model loss with mixed-rank adapters, differentiated w.r.t. every A and B."""
    weights = init_weights(TINY, seed).freeze()
    adapters = AdapterSet.create(TINY.d_model, TINY.n_layers, 4, nc.stream(seed, "selftest/adapters"))
    rng = np.random.default_rng(seed)
    for p in adapters.pairs.values():  # nonzero B so that A receives gradient
        p.B.data[...] = rng.normal(0, 0.1, size=p.B.shape)
    samples = generate(TaskSpec("mod_chain", low=(1,), high=(2,), n_train=3), "train", seed)
    batch = make_batch(TOK, [s.prompt for s in samples], [s.answer for s in samples])
    assign = RankAssignment([1, 4, 2])
    return nc.grad_check(lambda: task_loss(batch, weights, adapters, assign), adapters.parameters())


def router_error(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(12, 6))
    y = np.arange(12) % 2
    r = train_router(x, y, sigma=0.0, epochs=2, seed=seed, hidden=8, holdout=0.0).router
    for p in r.parameters():
        p.requires_grad = True
    z = r.standardise(x)
    return nc.grad_check(lambda: router_loss(r, z, y), r.parameters())


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------


def suite_grad_primitives() -> str:
    worst = 0.0
    with nc.precision("f64"):
        for seed in SEEDS:
            for name in PRIMITIVES:
                worst = max(worst, primitive_error(name, seed))
            worst = max(worst, cross_entropy_error(seed))
    assert worst <= 1e-6, f"max rel err {worst:.2e} > 1e-6"
    return f"max rel err {worst:.2e} over {len(PRIMITIVES) + 1} ops x {len(SEEDS)} seeds"


def suite_grad_adapter_loss() -> str:
    with nc.precision("f64"):
        worst = max(adapter_loss_error(s) for s in SEEDS)
    assert worst <= 1e-4, f"max rel err {worst:.2e} > 1e-4"
    return f"max rel err {worst:.2e}"


def suite_grad_router() -> str:
    with nc.precision("f64"):
        worst = max(router_error(s) for s in SEEDS)
    assert worst <= 1e-4, f"max rel err {worst:.2e} > 1e-4"
    return f"max rel err {worst:.2e}"


def suite_grad_negative_control() -> str:
    with nc.precision("f64"), nc.corrupt_gradient("linear", 1.1):
        err = primitive_error("linear", 0)
    assert err > 1e-2, f"corrupted rule went unnoticed (err {err:.2e})"
    return f"corrupted rule flagged at {err:.2e}"


def suite_truncation() -> str:
    rng = np.random.default_rng(0)
    worst = 0.0
    for trial in range(100):
        ad = AdapterSet.create(12, 1, 8, nc.stream(trial, "selftest/trunc"))
        pair = ad.get(0, "q")
        pair.B.data[...] = rng.normal(0, 0.1, size=pair.B.shape)
        w = nc.tensor(rng.normal(size=(12, 12)))
        n = int(rng.integers(1, 6))
        h = nc.tensor(rng.normal(size=(n, 3, 12)))
        ranks = rng.choice([1, 2, 4, 8], size=n)
        with nc.no_grad():
            a = lora_forward(h, w, pair, RankAssignment(ranks)).data
            b = lora_forward_sliced(h, w, pair, ranks).data
            worst = max(worst, float(np.abs(a - b).max()))
            r = int(rng.integers(1, 8))
            before = lora_forward(h, w, pair, RankAssignment([r] * n)).data.copy()
            pair.A.data[r:] += 1.0
            pair.B.data[:, r:] += 1.0
            after = lora_forward(h, w, pair, RankAssignment([r] * n)).data
        assert np.array_equal(before, after), "tail perturbation changed the output"
    assert worst <= 1e-6, f"masked vs sliced differ by {worst:.2e}"
    return f"masked vs sliced max diff {worst:.2e} on 100 batches; tails inert"


def suite_zero_init_and_frozen_base() -> str:
    with nc.precision("f64"):
        weights = init_weights(TINY, 0).freeze()
        ad = AdapterSet.create(TINY.d_model, TINY.n_layers, 8, nc.stream(0, "selftest/zero"))
        ids = np.random.default_rng(0).integers(3, TINY.vocab_size, size=(3, 7))
        with nc.no_grad():
            same = np.array_equal(forward(ids, weights, ad, RankAssignment([1, 4, 8])).data, forward_base(ids, weights).data)
    assert same, "zero-init adapters changed the base forward"
    weights = init_weights(TINY, 0).freeze()
    h = weights.content_hash()
    ad = AdapterSet.create(TINY.d_model, TINY.n_layers, 8, nc.stream(0, "selftest/frozen"))
    train = generate(TaskSpec("mod_chain", n_train=16), "train", 0)
    finetune(weights, ad, Fixed(4), train, TOK, 3, 0.1, 8, 0)
    assert weights.content_hash() == h, "fine-tuning modified the base weights"
    return "zero-init forward bit-exact in 64-bit; base hash unchanged by fine-tuning"


def suite_accounting() -> str:
    cfg = ModelConfig(vocab_size=40, d_model=64, n_layers=4, n_heads=4, d_ff=128)
    p4, p8 = count_params(cfg, ("q", "v"), 4), count_params(cfg, ("q", "v"), 8)
    assert p8 == 2 * p4, f"{p8} != 2 * {p4}"
    mix = expected_active_params(cfg, ("q", "v"), {2: 0.5, 8: 0.5})
    assert mix == 5120, f"50/50 mix gives {mix}, expected 5120"
    return f"P(8)={p8} = 2 P(4); 50/50 mix {mix:.0f}"


def suite_checkpoint() -> str:
    rng = np.random.default_rng(0)
    tensors = {
        "a": rng.normal(size=(3, 4)).astype(np.float32),
        "b": rng.normal(size=(5,)),
        "c": np.arange(6, dtype=np.int64).reshape(2, 3),
        "d": np.zeros((0, 4), dtype=np.float32),
    }
    blob = encode(tensors)
    back = decode(blob)
    assert all(np.array_equal(back[k], v) and back[k].dtype == v.dtype for k, v in tensors.items())
    assert encode(back) == blob, "save-load-save is not byte-identical"
    bad = bytearray(blob)
    bad[-1] ^= 1
    for broken in (bytes(bad), blob[:-3], b"NOPE" + blob[4:]):
        try:
            decode(broken)
        except CheckpointError:
            continue
        raise AssertionError("corrupt checkpoint accepted")
    assert decode(encode({})) == {}
    return "round-trip bit-exact; corruption, truncation and bad magic refused"


def suite_policy_equivalence() -> str:
    weights = init_weights(TINY, 1).freeze()
    ad = AdapterSet.create(TINY.d_model, TINY.n_layers, 8, nc.stream(0, "selftest/equiv"))
    spec = TaskSpec("mod_chain", n_train=16, n_eval=12)
    finetune(weights, ad, Fixed(8), generate(spec, "train", 0), TOK, 3, 0.3, 8, 0)
    ev = generate(spec, "eval", 0)
    for cls, r in ((0, 2), (1, 8)):
        router = constant_router(TINY.d_model, cls)
        a = evaluate(weights, ad, Flexi(router), ev, TOK, seed=3)
        b = evaluate(weights, ad, Fixed(r), ev, TOK, seed=3)
        assert a.scores == b.scores and a.predictions == b.predictions, f"constant router differs from Fixed({r})"
    return "constant-output router reproduces Fixed(2) and Fixed(8) exactly"


SUITES: dict[str, Callable[[], str]] = {
    "grad-primitives": suite_grad_primitives,
    "grad-adapter-loss": suite_grad_adapter_loss,
    "grad-router": suite_grad_router,
    "grad-negative-control": suite_grad_negative_control,
    "truncation": suite_truncation,
    "zero-init-frozen-base": suite_zero_init_and_frozen_base,
    "accounting": suite_accounting,
    "checkpoint": suite_checkpoint,
    "policy-equivalence": suite_policy_equivalence,
}


def run_selftest(names: list[str] | None = None) -> list[Check]:
    results = []
    for name in names or list(SUITES):
        started = time.perf_counter()
        try:
            detail, ok = SUITES[name](), True
        except Exception as exc:
            detail, ok = f"{type(exc).__name__}: {exc}", False
        results.append(Check(name, ok, detail, time.perf_counter() - started))
    return results

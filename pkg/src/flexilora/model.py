"""Character tokenizer and a small decoder-only transformer.

The base weights are pretrained once and then frozen; fine-tuning only ever
touches LoRA pairs attached to the query and value projections.
"""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc
from .adapters import AdapterSet, RankAssignment, lora_forward
from .numcore import Tensor

log = logging.getLogger(__name__)

PAD, BOS, EOS = 0, 1, 2
SPECIALS = ("<pad>", "<bos>", "<eos>")


class TokenizerError(ValueError):
    pass


class Tokenizer:
    """Sorted unique characters after the specials PAD=0, BOS=1, EOS=2."""

    def __init__(self, chars: Sequence[str]):
        self.chars = tuple(chars)
        self.stoi = {c: i + len(SPECIALS) for i, c in enumerate(self.chars)}

    @property
    def vocab_size(self) -> int:
        return len(SPECIALS) + len(self.chars)

    def encode(self, text: str) -> list[int]:
        out = []
        for ch in text:
            idx = self.stoi.get(ch)
            if idx is None:
                raise TokenizerError(f"character {ch!r} is not in the vocabulary")
            out.append(idx)
        return out

    def decode(self, ids: Sequence[int]) -> str:
        base = len(SPECIALS)
        return "".join(self.chars[i - base] for i in ids if i >= base)


def build_tokenizer(corpus: Sequence[str] | str) -> Tokenizer:
    texts = [corpus] if isinstance(corpus, str) else list(corpus)
    chars = sorted(set("".join(texts)))
    if not chars:
        raise ValueError("cannot build a tokenizer from an empty corpus")
    return Tokenizer(chars)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 40
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 128
    max_seq_len: int = 96

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class TransformerWeights:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def freeze(self) -> TransformerWeights:
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self) -> TransformerWeights:
        for p in self.params.values():
            p.requires_grad = True
        return self

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            arr = self.params[name].data
            h.update(f"{name}:{arr.dtype.str}:{arr.shape}".encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def state(self) -> dict[str, np.ndarray]:
        return {f"base.{k}": v.data for k, v in self.params.items()}

    @classmethod
    def from_state(cls, config: ModelConfig, state: dict[str, np.ndarray]) -> TransformerWeights:
        params = {k[len("base.") :]: nc.tensor(v, name=k[len("base.") :]) for k, v in state.items() if k.startswith("base.")}
        return cls(config, params)

    def copy(self) -> TransformerWeights:
        return TransformerWeights(self.config, {k: nc.tensor(v.data.copy(), v.requires_grad, k) for k, v in self.params.items()})


def init_weights(config: ModelConfig, seed: int) -> TransformerWeights:
    rng = nc.stream(seed, "model/init")
    d, f = config.d_model, config.d_ff
    out_std = 1.0 / math.sqrt(d) / math.sqrt(2 * config.n_layers)

    def normal(shape, std):
        return rng.normal(0.0, std, size=shape)

    raw: dict[str, np.ndarray] = {"tok_emb": normal((config.vocab_size, d), 0.5)}
    for i in range(config.n_layers):
        p = f"layers.{i}."
        raw[p + "ln1.g"] = np.ones(d)
        raw[p + "ln1.b"] = np.zeros(d)
        for name in ("wq", "wk", "wv"):
            raw[p + name] = normal((d, d), 1.0 / math.sqrt(d))
        raw[p + "wo"] = normal((d, d), out_std)
        raw[p + "ln2.g"] = np.ones(d)
        raw[p + "ln2.b"] = np.zeros(d)
        raw[p + "w1"] = normal((f, d), 1.0 / math.sqrt(d))
        raw[p + "w2"] = normal((d, f), 1.0 / math.sqrt(f) / math.sqrt(2 * config.n_layers))
    raw["ln_f.g"] = np.ones(d)
    raw["ln_f.b"] = np.zeros(d)
    raw["head"] = normal((config.vocab_size, d), 0.02)
    return TransformerWeights(config, {k: nc.tensor(v, requires_grad=True, name=k) for k, v in raw.items()})


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class TokenBatch:
    ids: np.ndarray  # [n, T] inputs
    mask: np.ndarray  # [n, T], 1 on real tokens
    targets: np.ndarray  # [n, T], IGNORE_INDEX where unsupervised

    @property
    def n(self) -> int:
        return self.ids.shape[0]


def make_batch(
    tokenizer: Tokenizer,
    prompts: Sequence[str],
    answers: Sequence[str] | None = None,
    supervise_prompt: bool = False,
) -> TokenBatch:
    """Right-padded teacher-forcing batch of ``BOS prompt answer EOS``.

    Targets cover the answer and EOS; with ``supervise_prompt`` every next
    token is a target (plain language modelling).
    """
    seqs, starts = [], []
    for i, prompt in enumerate(prompts):
        p = tokenizer.encode(prompt)
        a = tokenizer.encode(answers[i]) + [EOS] if answers is not None else []
        seqs.append([BOS] + p + a)
        starts.append(len(p))  # index into inputs whose target is the first answer token
    t = max(len(s) for s in seqs) - (1 if answers is not None else 0)
    n = len(seqs)
    ids = np.full((n, t), PAD, dtype=np.int64)
    mask = np.zeros((n, t), dtype=np.int64)
    targets = np.full((n, t), nc.IGNORE_INDEX, dtype=np.int64)
    for i, s in enumerate(seqs):
        if answers is None:
            ids[i, : len(s)] = s
            mask[i, : len(s)] = 1
            continue
        inp, tgt = s[:-1], s[1:]
        ids[i, : len(inp)] = inp
        mask[i, : len(inp)] = 1
        lo = 0 if supervise_prompt else starts[i]
        targets[i, lo : len(tgt)] = tgt[lo:]
    return TokenBatch(ids, mask, targets)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def positional_encoding(t: int, d: int) -> np.ndarray:
    pos = np.arange(t)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
    pe = np.zeros((t, d))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)
    return pe


def embed(ids: np.ndarray, weights: TransformerWeights) -> Tensor:
    """H0 = token embedding + sinusoidal position, shape [n, T, d_model]."""
    ids = np.asarray(ids)
    cfg = weights.config
    if ids.ndim != 2:
        raise ValueError(f"ids must be [n, T], got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValueError(f"token id outside [0, {cfg.vocab_size})")
    n, t = ids.shape
    pe = np.broadcast_to(positional_encoding(t, cfg.d_model), (n, t, cfg.d_model))
    return nc.add(nc.embedding(weights["tok_emb"], ids), nc.constant(pe))


def _heads(x: Tensor, n: int, t: int, cfg: ModelConfig) -> Tensor:
    return nc.transpose(nc.reshape(x, (n, t, cfg.n_heads, cfg.head_dim)), (0, 2, 1, 3))


def forward(
    ids: np.ndarray,
    weights: TransformerWeights,
    adapters: AdapterSet | None = None,
    assignment: RankAssignment | None = None,
) -> Tensor:
    """Causal decoder forward; returns logits [n, T, vocab]."""
    cfg = weights.config
    ids = np.asarray(ids)
    n, t = ids.shape
    if t > cfg.max_seq_len:
        raise ValueError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
    x = embed(ids, weights)
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        pq = adapters.get(i, "q") if adapters is not None else None
        pv = adapters.get(i, "v") if adapters is not None else None
        h = nc.layer_norm(x, weights[p + "ln1.g"], weights[p + "ln1.b"])
        q = lora_forward(h, weights[p + "wq"], pq, assignment)
        k = nc.linear(h, weights[p + "wk"])
        v = lora_forward(h, weights[p + "wv"], pv, assignment)
        att = nc.causal_attention(_heads(q, n, t, cfg), _heads(k, n, t, cfg))
        o = nc.bmm(att, _heads(v, n, t, cfg))
        o = nc.reshape(nc.transpose(o, (0, 2, 1, 3)), (n, t, cfg.d_model))
        x = nc.add(x, nc.linear(o, weights[p + "wo"]))
        h = nc.layer_norm(x, weights[p + "ln2.g"], weights[p + "ln2.b"])
        x = nc.add(x, nc.linear(nc.gelu(nc.linear(h, weights[p + "w1"])), weights[p + "w2"]))
    x = nc.layer_norm(x, weights["ln_f.g"], weights["ln_f.b"])
    return nc.linear(x, weights["head"])


def forward_base(batch: TokenBatch | np.ndarray, weights: TransformerWeights) -> Tensor:
    ids = batch.ids if isinstance(batch, TokenBatch) else batch
    return forward(ids, weights)


def task_loss(
    batch: TokenBatch,
    weights: TransformerWeights,
    adapters: AdapterSet | None = None,
    assignment: RankAssignment | None = None,
) -> Tensor:
    """Mean next-token cross entropy over supervised positions."""
    return nc.cross_entropy(forward(batch.ids, weights, adapters, assignment), batch.targets)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.98), eps: float = 1e-8, clip: float = 1.0):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.clip = lr, betas, eps, clip
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.betas
        grads = [p.grad for p in self.params]
        norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
        factor = min(1.0, self.clip / (norm + 1e-12)) if self.clip else 1.0
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g * factor
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)
            p.grad = None


def pretrain_corpus(seed: int, n_copy: int, task_samples) -> list[tuple[str, str]]:
    """(prompt, answer) pairs: copy warm-up ``s|`` -> ``s`` plus task samples."""
    from .tasks import gen_copy

    pairs = []
    for text in gen_copy(n_copy, seed):
        s, _ = text.split("|")
        pairs.append((s + "|", s))
    pairs += [(s.prompt, s.answer) for s in task_samples]
    return pairs


def pretrain_base(
    config: ModelConfig,
    tokenizer: Tokenizer,
    corpus: Sequence[tuple[str, str]],
    steps: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
    warmup: int = 100,
    log_every: int = 0,
    supervise_prompt: bool = False,
) -> tuple[TransformerWeights, list[float]]:
    """Pretraining with Adam and cosine decay; returns frozen weights and the loss trace.

    By default only answer tokens are supervised, which keeps unpredictable
    prompt symbols (random keys, operands) from dominating the loss.
    """
    weights = init_weights(config, seed)
    trace: list[float] = []
    if steps <= 0:
        return weights.freeze(), trace
    if not corpus:
        raise ValueError("pretraining corpus is empty")
    rng = nc.stream(seed, "pretrain/batches")
    opt = Adam(list(weights.params.values()), lr)
    started = time.perf_counter()
    for step in range(steps):
        idx = rng.integers(0, len(corpus), size=batch_size)
        batch = make_batch(tokenizer, [corpus[i][0] for i in idx], [corpus[i][1] for i in idx], supervise_prompt)
        nc.new_graph()
        loss = task_loss(batch, weights)
        value = loss.item()
        if not math.isfinite(value):
            raise FloatingPointError(f"pretraining diverged at step {step} (seed {seed})")
        nc.backward(loss)
        warm = min(1.0, (step + 1) / warmup)
        cosine = 0.5 * (1 + math.cos(math.pi * step / steps))
        opt.step(lr * warm * (0.1 + 0.9 * cosine))
        trace.append(value)
        if log_every and (step + 1) % log_every == 0:
            log.info("pretrain step %d loss %.4f (%.1fs)", step + 1, np.mean(trace[-log_every:]), time.perf_counter() - started)
    return weights.freeze(), trace


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


def greedy_decode_batch(
    weights: TransformerWeights,
    tokenizer: Tokenizer,
    prompts: Sequence[str],
    max_new: int,
    adapters: AdapterSet | None = None,
    ranks: Sequence[int] | None = None,
) -> list[str]:
    """Argmax decoding of equal-length prompts in lockstep; ties go to the lowest id."""
    if not prompts:
        return []
    encoded = [[BOS] + tokenizer.encode(p) for p in prompts]
    if len({len(e) for e in encoded}) != 1:
        raise ValueError("greedy_decode_batch needs prompts of equal token length")
    ids = np.array(encoded, dtype=np.int64)
    assignment = None
    if adapters is not None:
        if ranks is None:
            raise ValueError("adapters given without ranks")
        assignment = RankAssignment(np.asarray(ranks), "inference")
    n = len(prompts)
    out: list[list[int]] = [[] for _ in range(n)]
    done = np.zeros(n, dtype=bool)
    for _ in range(max_new):
        if ids.shape[1] > weights.config.max_seq_len:
            break
        with nc.no_grad():
            logits = forward(ids, weights, adapters, assignment).data[:, -1, :]
        nxt = logits.argmax(axis=-1)
        for i in range(n):
            if not done[i]:
                if nxt[i] == EOS:
                    done[i] = True
                else:
                    out[i].append(int(nxt[i]))
        if done.all():
            break
        ids = np.concatenate([ids, nxt[:, None]], axis=1)
    return [tokenizer.decode(o) for o in out]


def greedy_decode(
    weights: TransformerWeights,
    tokenizer: Tokenizer,
    prompt: str,
    max_new: int,
    adapters: AdapterSet | None = None,
    rank: int | None = None,
) -> str:
    ranks = None if rank is None else [rank]
    return greedy_decode_batch(weights, tokenizer, [prompt], max_new, adapters, ranks)[0]

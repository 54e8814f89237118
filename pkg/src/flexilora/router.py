"""Difficulty router: pooled input embedding -> difficulty class -> LoRA rank.

Training samples are labelled easy/hard by how well the frozen base model
answers them zero-shot, balanced, and used to fit a small classifier whose
inputs are perturbed with Gaussian noise during training.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .adapters import RankAssignment
from .model import Adam, Tokenizer, TransformerWeights, embed, greedy_decode_batch, make_batch
from .numcore import Tensor
from .tasks import Sample, score

log = logging.getLogger(__name__)

EASY, HARD = "easy", "hard"
CLASSES = (EASY, HARD)
LABEL_FORMAT = 1


@dataclass(frozen=True)
class DifficultyLabel:
    sample_id: str
    cls: str
    metric_value: float
    metric_kind: str


@dataclass
class RouterWeights:
    """Two-layer tanh classifier over standardised pooled embeddings."""

    w1: Tensor  # hidden x d
    b1: Tensor
    w2: Tensor  # n_classes x hidden
    b2: Tensor
    mean: np.ndarray
    std: np.ndarray
    sigma: float = 0.1
    rank_table: tuple[int, ...] = (2, 8)
    held_out_accuracy: float = float("nan")

    def __post_init__(self):
        table = tuple(int(r) for r in self.rank_table)
        if len(set(table)) != len(table) or list(table) != sorted(table):
            raise ValueError(f"rank table {table} must be strictly ascending")
        if self.w2.shape[0] != len(table):
            raise ValueError(f"{self.w2.shape[0]} classes but rank table has {len(table)} entries")
        self.rank_table = table

    @property
    def d_in(self) -> int:
        return self.w1.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def standardise(self, h: np.ndarray) -> np.ndarray:
        return (np.asarray(h, dtype=np.float64) - self.mean) / self.std

    def logits(self, z: Tensor) -> Tensor:
        """Class logits for already-standardised features ``z`` [n, d]."""
        hidden = nc.tanh(nc.add_bias(nc.linear(z, self.w1), self.b1))
        return nc.add_bias(nc.linear(hidden, self.w2), self.b2)

    def state(self) -> dict[str, np.ndarray]:
        return {
            "router.w1": self.w1.data,
            "router.b1": self.b1.data,
            "router.w2": self.w2.data,
            "router.b2": self.b2.data,
            "router.mean": self.mean,
            "router.std": self.std,
            "router.meta": np.array([self.sigma, self.held_out_accuracy, *self.rank_table], dtype=np.float64),
        }

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> RouterWeights:
        meta = state["router.meta"]
        return cls(
            nc.tensor(state["router.w1"]),
            nc.tensor(state["router.b1"]),
            nc.tensor(state["router.w2"]),
            nc.tensor(state["router.b2"]),
            np.asarray(state["router.mean"], dtype=np.float64),
            np.asarray(state["router.std"], dtype=np.float64),
            float(meta[0]),
            tuple(int(r) for r in meta[2:]),
            float(meta[1]),
        )


def init_router(
    d_in: int,
    rng: np.random.Generator,
    hidden: int = 32,
    rank_table: Sequence[int] = (2, 8),
    sigma: float = 0.1,
) -> RouterWeights:
    n_classes = len(rank_table)
    return RouterWeights(
        nc.tensor(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(hidden, d_in)), requires_grad=True),
        nc.tensor(np.zeros(hidden), requires_grad=True),
        nc.tensor(rng.normal(0.0, 0.01, size=(n_classes, hidden)), requires_grad=True),
        nc.tensor(np.zeros(n_classes), requires_grad=True),
        np.zeros(d_in),
        np.ones(d_in),
        sigma,
        tuple(rank_table),
    )


def constant_router(d_in: int, cls: int, rank_table: Sequence[int] = (2, 8)) -> RouterWeights:
    """A router that ignores its input and always picks class ``cls``."""
    n = len(rank_table)
    if not 0 <= cls < n:
        raise ValueError(f"class {cls} outside rank table of size {n}")
    bias = np.zeros(n)
    bias[cls] = 1.0
    return RouterWeights(
        nc.tensor(np.zeros((1, d_in))), nc.tensor(np.zeros(1)), nc.tensor(np.zeros((n, 1))), nc.tensor(bias),
        np.zeros(d_in), np.ones(d_in), 0.0, tuple(rank_table),
    )


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


def pool_embedding(h: Tensor, mask: np.ndarray) -> Tensor:
    """sum_i m_i H_i / sum_i m_i over the token axis."""
    return nc.mean_pool(h, mask)


def pooled_embeddings(
    weights: TransformerWeights, tokenizer: Tokenizer, samples: Sequence[Sample], chunk: int = 256
) -> np.ndarray:
    """Pooled layer-0 embeddings of each sample's prompt, [n, d_model] in 64-bit."""
    out = []
    with nc.no_grad():
        for lo in range(0, len(samples), chunk):
            part = samples[lo : lo + chunk]
            batch = make_batch(tokenizer, [s.prompt for s in part])
            h = pool_embedding(embed(batch.ids, weights), batch.mask)
            out.append(h.data.astype(np.float64))
    if not out:
        return np.zeros((0, weights.config.d_model))
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# labelling and balancing
# ---------------------------------------------------------------------------


def group_by_length(tokenizer: Tokenizer, prompts: Sequence[str]) -> list[list[int]]:
    """Index groups of equal token length, in order of first appearance."""
    groups: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        groups.setdefault(len(tokenizer.encode(p)), []).append(i)
    return list(groups.values())


def label_difficulty(
    weights: TransformerWeights,
    tokenizer: Tokenizer,
    samples: Sequence[Sample],
    metric_kind: str,
    tau: float,
    seed: int = 0,
    max_new: int = 4,
) -> list[DifficultyLabel]:
    """Zero-shot greedy decode with the frozen base; easy iff metric >= tau.

    Decoding is deterministic, so ``seed`` does not change the result; it is
    kept so labelling runs are keyed like every other stage.
    """
    preds: list[str | None] = [None] * len(samples)
    for group in group_by_length(tokenizer, [s.prompt for s in samples]):
        try:
            outs = greedy_decode_batch(weights, tokenizer, [samples[i].prompt for i in group], max_new)
        except Exception as exc:  # a labelling sweep never aborts
            log.warning("decode failed for %d samples (%s); labelling them hard", len(group), exc)
            continue
        for i, o in zip(group, outs):
            preds[i] = o
    labels = []
    for s, p in zip(samples, preds):
        value = 0.0 if p is None else score(metric_kind, p, s.answer)
        labels.append(DifficultyLabel(s.id, EASY if value >= tau else HARD, value, metric_kind))
    return labels


def balance_classes(labels: Sequence[DifficultyLabel], seed: int) -> list[DifficultyLabel]:
    """Downsample the majority class to the minority count, then shuffle."""
    easy = [lab for lab in labels if lab.cls == EASY]
    hard = [lab for lab in labels if lab.cls == HARD]
    if not easy or not hard:
        raise ValueError(
            f"cannot balance: {len(easy)} easy / {len(hard)} hard labels; adjust the threshold tau"
        )
    rng = nc.stream(seed, "router/balance")
    n = min(len(easy), len(hard))
    keep = []
    for group in (easy, hard):
        idx = np.sort(rng.choice(len(group), size=n, replace=False))
        keep += [group[i] for i in idx]
    order = rng.permutation(len(keep))
    return [keep[i] for i in order]


def write_labels(labels: Sequence[DifficultyLabel], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for lab in labels:
            fh.write(json.dumps({"format": LABEL_FORMAT, **asdict(lab)}, sort_keys=True) + "\n")


def read_labels(path: str | Path) -> list[DifficultyLabel]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.pop("format", None) != LABEL_FORMAT:
                raise ValueError(f"{path}: unsupported label format")
            out.append(DifficultyLabel(**rec))
    return out


# ---------------------------------------------------------------------------
# training and routing
# ---------------------------------------------------------------------------


def router_loss(router: RouterWeights, z: np.ndarray, classes: np.ndarray, noise: np.ndarray | None = None) -> Tensor:
    """Cross entropy of the router's softmax on (z + noise)."""
    x = z if noise is None else z + noise
    return nc.cross_entropy(router.logits(nc.constant(x)), classes)


@dataclass
class RouterFit:
    router: RouterWeights
    loss_trace: list[float] = field(default_factory=list)
    train_accuracy: float = float("nan")


def train_router(
    embeddings: np.ndarray,
    classes: np.ndarray,
    sigma: float = 0.1,
    epochs: int = 60,
    lr: float = 1e-2,
    seed: int = 0,
    hidden: int = 32,
    rank_table: Sequence[int] = (2, 8),
    holdout: float = 0.2,
    batch_size: int = 32,
) -> RouterFit:
    """Fit the router with the noise-added cross-entropy objective.

    ``classes`` holds class indices (0 = easiest). A seeded ``holdout`` share
    of the rows is kept back to report held-out accuracy.
    """
    if sigma < 0:
        raise ValueError(f"noise scale sigma must be >= 0, got {sigma}")
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(classes, dtype=np.int64)
    if len(x) != len(y) or len(x) < 2:
        raise ValueError("need at least two labelled embeddings")
    rng = nc.stream(seed, "router/train")
    order = rng.permutation(len(x))
    n_hold = int(round(holdout * len(x))) if holdout > 0 else 0
    hold, fit = order[:n_hold], order[n_hold:]

    router = init_router(x.shape[1], nc.stream(seed, "router/init"), hidden, rank_table, sigma)
    router.mean = x[fit].mean(axis=0)
    router.std = x[fit].std(axis=0) + 1e-6
    z = router.standardise(x)
    opt = Adam(router.parameters(), lr, clip=0.0)
    trace = []
    for _ in range(epochs):
        perm = rng.permutation(fit)
        for lo in range(0, len(perm), batch_size):
            idx = perm[lo : lo + batch_size]
            noise = rng.normal(0.0, sigma, size=(len(idx), x.shape[1])) if sigma > 0 else None
            nc.new_graph()
            loss = router_loss(router, z[idx], y[idx], noise)
            if not np.isfinite(loss.item()):
                raise FloatingPointError("router loss is not finite")
            nc.backward(loss)
            opt.step()
            trace.append(loss.item())
    for p in router.parameters():
        p.requires_grad = False
    fit_acc = float(np.mean(classify(router, x[fit]) == y[fit]))
    if n_hold:
        router.held_out_accuracy = float(np.mean(classify(router, x[hold]) == y[hold]))
    return RouterFit(router, trace, fit_acc)


def router_logits(router: RouterWeights, h: np.ndarray) -> np.ndarray:
    h = np.atleast_2d(np.asarray(h))
    if h.shape[1] != router.d_in:
        raise ValueError(f"embedding width {h.shape[1]} does not match router input {router.d_in}")
    with nc.no_grad():
        return router.logits(nc.constant(router.standardise(h))).data


def classify(router: RouterWeights, h: np.ndarray) -> np.ndarray:
    """Class index per row: argmax of logits, ties to the lower class."""
    return router_logits(router, h).argmax(axis=1)


def route(router: RouterWeights, h: np.ndarray, phase: str = "inference") -> RankAssignment:
    """Noise-free routing of pooled embeddings to ranks."""
    table = np.asarray(router.rank_table)
    return RankAssignment(table[classify(router, h)], phase, "flexi")

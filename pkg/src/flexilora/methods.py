"""Rank policies and the fine-tuning / evaluation loops that apply them.

=========  ==============  ======  ==================
policy     train ranks     level   inference ranks
=========  ==============  ======  ==================
lora       fixed           all     fixed
dylora     random          batch   fixed
dylora+    random          batch   random
flexi      router          sample  router
=========  ==============  ======  ==================
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc
from .adapters import AdapterSet, RankAssignment, count_params, expected_active_params
from .model import Tokenizer, TransformerWeights, greedy_decode_batch, make_batch, task_loss
from .router import RouterWeights, group_by_length, pooled_embeddings, route
from .tasks import FAMILY_METRIC, Sample, score

KINDS = ("lora", "dylora", "dylora+", "flexi")


@dataclass
class RankPolicy:
    kind: str
    rank: int | None = None  # lora
    low: int | None = None  # dylora / dylora+ range, inclusive
    high: int | None = None
    inference_rank: int | None = None  # dylora
    router: RouterWeights | None = None  # flexi
    rank_table: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind == "lora" and (self.rank is None or self.rank < 1):
            raise ValueError("lora policy needs a positive rank")
        if self.kind in ("dylora", "dylora+"):
            if self.low is None or self.high is None or not 1 <= self.low <= self.high:
                raise ValueError(f"{self.kind} needs a nonempty range, got {self.low}..{self.high}")
            if self.kind == "dylora":
                if self.inference_rank is None:
                    self.inference_rank = self.high
                if not self.low <= self.inference_rank <= self.high:
                    raise ValueError("dylora inference rank must lie in its training range")
        if self.kind == "flexi" and self.router is not None:
            self.rank_table = self.router.rank_table

    @property
    def name(self) -> str:
        if self.kind == "lora":
            return f"lora-{self.rank}"
        if self.kind == "dylora":
            return f"dylora-{self.low}..{self.high}@{self.inference_rank}"
        if self.kind == "dylora+":
            return f"dylora+-{self.low}..{self.high}"
        return "flexi-" + ",".join(str(r) for r in self.rank_table)

    @property
    def train_key(self) -> str:
        """Identifies training behaviour; policies sharing it train identical adapters."""
        if self.kind == "lora":
            return f"fixed-{self.rank}"
        if self.kind == "flexi":
            return "routed-" + ",".join(str(r) for r in self.rank_table)
        return f"random-{self.low}..{self.high}"

    @property
    def max_rank(self) -> int:
        if self.kind == "lora":
            return self.rank
        if self.kind == "flexi":
            return max(self.rank_table)
        return self.high


def Fixed(r: int) -> RankPolicy:
    return RankPolicy("lora", rank=r)


def DyLoRA(low: int, high: int, inference_rank: int | None = None) -> RankPolicy:
    return RankPolicy("dylora", low=low, high=high, inference_rank=inference_rank)


def DyLoRAPlus(low: int, high: int) -> RankPolicy:
    return RankPolicy("dylora+", low=low, high=high)


def Flexi(router: RouterWeights) -> RankPolicy:
    return RankPolicy("flexi", router=router, rank_table=router.rank_table)


def assign_ranks(
    policy: RankPolicy,
    n: int,
    phase: str,
    rng: np.random.Generator | None = None,
    pooled: np.ndarray | None = None,
) -> RankAssignment:
    """Per-sample ranks for a batch of ``n`` under ``policy`` in ``phase``.

    ``rng`` drives the random policies; ``pooled`` holds the batch's pooled
    embeddings for the router.
    """
    if n < 1:
        raise ValueError("cannot assign ranks to an empty batch")
    kind = policy.kind
    if kind == "lora":
        ranks = np.full(n, policy.rank)
    elif kind == "dylora" and phase == "inference":
        ranks = np.full(n, policy.inference_rank)
    elif kind in ("dylora", "dylora+"):
        if rng is None:
            raise ValueError(f"{kind} needs a random stream")
        ranks = np.full(n, int(rng.integers(policy.low, policy.high + 1)))
    else:
        if policy.router is None:
            raise ValueError("flexi policy has no router")
        if pooled is None or len(pooled) != n:
            raise ValueError("flexi routing needs one pooled embedding per sample")
        ranks = route(policy.router, pooled, phase).ranks
    return RankAssignment(ranks, phase, policy.name)


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------


@dataclass
class FinetuneReport:
    policy: str
    seed: int
    steps: int
    loss_trace: list[float] = field(default_factory=list)
    rank_counts: dict[int, int] = field(default_factory=dict)
    wall_clock: float = 0.0
    checkpoint: str = ""

    def to_record(self) -> dict:
        return {
            "policy": self.policy,
            "seed": self.seed,
            "steps": self.steps,
            "loss_trace": [float(x) for x in self.loss_trace],
            "rank_counts": {str(k): v for k, v in sorted(self.rank_counts.items())},
            "checkpoint": self.checkpoint,
        }


class SGD:
    """Momentum SGD with global gradient-norm clipping."""

    def __init__(self, params: Sequence[nc.Tensor], lr: float, momentum: float = 0.9, clip: float = 1.0):
        self.params = list(params)
        self.lr, self.momentum, self.clip = lr, momentum, clip
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> float:
        grads = [p.grad for p in self.params]
        norm = math.sqrt(sum(float(np.dot(g.reshape(-1).astype(np.float64), g.reshape(-1))) for g in grads))
        factor = min(1.0, self.clip / (norm + 1e-12)) if self.clip else 1.0
        for p, g, v in zip(self.params, grads, self.velocity):
            v *= self.momentum
            v += g * factor
            p.data -= self.lr * v
            p.grad = None
        return norm


def finetune(
    weights: TransformerWeights,
    adapters: AdapterSet,
    policy: RankPolicy,
    train: Sequence[Sample],
    tokenizer: Tokenizer,
    steps: int,
    lr: float,
    batch_size: int,
    seed: int,
    momentum: float = 0.9,
    clip: float = 1.0,
) -> FinetuneReport:
    """Train only the adapter pairs under ``policy``'s training-phase ranks.

    The base must be frozen; any gradient landing on a base tensor aborts.
    """
    if any(p.requires_grad for p in weights.params.values()):
        raise ValueError("base weights must be frozen before fine-tuning")
    if policy.max_rank > adapters.r_max:
        raise ValueError(f"policy {policy.name} needs rank {policy.max_rank} > r_max {adapters.r_max}")
    report = FinetuneReport(policy.name, seed, steps)
    if steps <= 0:
        return report
    pooled = pooled_embeddings(weights, tokenizer, train) if policy.kind == "flexi" else None
    batch_rng = nc.stream(seed, "finetune/batches")
    rank_rng = nc.stream(seed, "finetune/ranks")
    opt = SGD(adapters.parameters(), lr, momentum, clip)
    base = list(weights.params.values())
    started = time.perf_counter()
    for step in range(steps):
        idx = batch_rng.choice(len(train), size=min(batch_size, len(train)), replace=False)
        samples = [train[i] for i in idx]
        assignment = assign_ranks(
            policy, len(samples), "train", rank_rng, None if pooled is None else pooled[idx]
        )
        for r in assignment.ranks:
            report.rank_counts[int(r)] = report.rank_counts.get(int(r), 0) + 1
        batch = make_batch(tokenizer, [s.prompt for s in samples], [s.answer for s in samples])
        nc.new_graph()
        loss = task_loss(batch, weights, adapters, assignment)
        value = loss.item()
        if not math.isfinite(value):
            raise FloatingPointError(f"fine-tuning loss is not finite at step {step} (seed {seed})")
        nc.backward(loss)
        assert all(p.grad is None for p in base), "gradient reached a frozen base weight"
        opt.step()
        report.loss_trace.append(value)
    report.wall_clock = time.perf_counter() - started
    return report


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalSummary:
    policy: str
    metric: str
    mean: float
    n: int
    by_split: dict[str, float]
    by_knob: dict[int, float]
    rank_histogram: dict[int, int]
    expected_active_params: float
    capacity_params: int
    scores: list[float] = field(default_factory=list, repr=False)
    predictions: list[str] = field(default_factory=list, repr=False)
    extra: dict[str, float] = field(default_factory=dict)


def _decode_group(args):
    weights, tokenizer, prompts, max_new, adapters, ranks = args
    return greedy_decode_batch(weights, tokenizer, prompts, max_new, adapters, ranks)


def evaluate(
    weights: TransformerWeights,
    adapters: AdapterSet | None,
    policy: RankPolicy,
    samples: Sequence[Sample],
    tokenizer: Tokenizer,
    metric: str | None = None,
    seed: int = 0,
    batch_size: int = 32,
    max_new: int = 4,
    threads: int = 1,
    high_knobs: Sequence[int] = (),
    targets: Sequence[str] = ("q", "v"),
    extra_metrics: Sequence[str] = (),
) -> EvalSummary:
    """Greedy-decode every sample under the policy's inference ranks and score it.

    Ranks are drawn per consecutive block of ``batch_size`` samples; within a
    block, prompts of equal length decode together. Work units are fixed before
    any thread runs, so results do not depend on ``threads``.
    """
    if not samples:
        raise ValueError("evaluation set is empty")
    metric = metric or FAMILY_METRIC[samples[0].family]
    rank_rng = nc.stream(seed, "eval/ranks")
    pooled = pooled_embeddings(weights, tokenizer, samples) if policy.kind == "flexi" else None
    ranks = np.zeros(len(samples), dtype=np.int64)
    units = []
    for lo in range(0, len(samples), batch_size):
        block = list(range(lo, min(lo + batch_size, len(samples))))
        a = assign_ranks(policy, len(block), "inference", rank_rng, None if pooled is None else pooled[block])
        ranks[block] = a.ranks
        for group in group_by_length(tokenizer, [samples[i].prompt for i in block]):
            idx = [block[g] for g in group]
            units.append(idx)
    jobs = [
        (weights, tokenizer, [samples[i].prompt for i in idx], max_new, adapters, ranks[idx] if adapters else None)
        for idx in units
    ]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outputs = list(pool.map(_decode_group, jobs))
    else:
        outputs = [_decode_group(j) for j in jobs]
    preds = [""] * len(samples)
    for idx, outs in zip(units, outputs):
        for i, o in zip(idx, outs):
            preds[i] = o

    scores = [score(metric, p, s.answer) for p, s in zip(preds, samples)]
    total = math.fsum(scores)
    by_knob: dict[int, list[float]] = {}
    for s, v in zip(samples, scores):
        by_knob.setdefault(s.knob, []).append(v)
    high = set(high_knobs)
    split: dict[str, list[float]] = {"low": [], "high": []}
    for s, v in zip(samples, scores):
        split["high" if s.knob in high else "low"].append(v)
    hist: dict[int, int] = {}
    for r in ranks:
        hist[int(r)] = hist.get(int(r), 0) + 1
    n = len(samples)
    dist = {r: c / n for r, c in hist.items()}
    # probabilities are exact ratios of counts; renormalise rounding residue
    s = math.fsum(dist.values())
    dist = {r: p / s for r, p in dist.items()}
    extra = {m: math.fsum(score(m, p, smp.answer) for p, smp in zip(preds, samples)) / n for m in extra_metrics}
    return EvalSummary(
        policy=policy.name,
        metric=metric,
        mean=total / n,
        n=n,
        by_split={k: (math.fsum(v) / len(v) if v else float("nan")) for k, v in split.items()},
        by_knob={k: math.fsum(v) / len(v) for k, v in sorted(by_knob.items())},
        rank_histogram=dict(sorted(hist.items())),
        expected_active_params=expected_active_params(weights.config, targets, dist),
        capacity_params=count_params(weights.config, targets, policy.max_rank),
        scores=scores,
        predictions=preds,
        extra=extra,
    )


def consistency_gap(
    weights: TransformerWeights,
    adapters: AdapterSet,
    trained_with: RankPolicy,
    evaluated_with: RankPolicy,
    samples: Sequence[Sample],
    tokenizer: Tokenizer,
    seed: int = 0,
    **kwargs,
) -> float:
    """metric(evaluated_with) - metric(trained_with's native inference) on one checkpoint."""
    for p in (trained_with, evaluated_with):
        if p.max_rank > adapters.r_max:
            raise ValueError(f"policy {p.name} exceeds checkpoint r_max {adapters.r_max}")
    native = evaluate(weights, adapters, trained_with, samples, tokenizer, seed=seed, **kwargs)
    if evaluated_with == trained_with:
        return 0.0
    other = evaluate(weights, adapters, evaluated_with, samples, tokenizer, seed=seed, **kwargs)
    return other.mean - native.mean

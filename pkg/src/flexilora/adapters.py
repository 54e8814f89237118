"""Dynamic-rank LoRA adapters.

Each adapted projection owns one :class:`LoraPair` stored at full capacity
``r_max``. A sample routed to rank ``r`` uses only the first ``r`` rows of ``A``
and the first ``r`` columns of ``B``, scaled by ``alpha_base / r``. Batches with
mixed ranks share one product: the ``r_max``-wide intermediate is multiplied by
a per-sample mask that zeroes columns ``>= r`` and carries the scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import numcore as nc
from .numcore import Tensor

DEFAULT_TARGETS = ("q", "v")
DEFAULT_ALPHA = 16.0
INIT_STD = 0.02


@dataclass
class LoraPair:
    A: Tensor  # r_max x d_in
    B: Tensor  # d_out x r_max
    r_max: int
    alpha_base: float = DEFAULT_ALPHA
    layer: int = 0
    target: str = "q"

    @property
    def name(self) -> str:
        return f"layers.{self.layer}.{self.target}"

    def check_rank(self, r: int) -> None:
        if not 1 <= r <= self.r_max:
            raise ValueError(f"{self.name}: rank {r} outside [1, {self.r_max}]")


def init_pair(
    d_in: int,
    d_out: int,
    r_max: int,
    rng: np.random.Generator,
    layer: int = 0,
    target: str = "q",
    alpha_base: float = DEFAULT_ALPHA,
) -> LoraPair:
    """A ~ N(0, 0.02^2), B = 0, so the initial update is exactly zero."""
    a = nc.tensor(rng.normal(0.0, INIT_STD, size=(r_max, d_in)), requires_grad=True, name=f"layers.{layer}.{target}.A")
    b = nc.tensor(np.zeros((d_out, r_max)), requires_grad=True, name=f"layers.{layer}.{target}.B")
    return LoraPair(a, b, r_max, alpha_base, layer, target)


@dataclass(frozen=True)
class RankAssignment:
    ranks: np.ndarray
    phase: str = "train"
    provenance: str = ""

    def __post_init__(self):
        ranks = np.asarray(self.ranks, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "ranks", ranks)
        if self.phase not in ("train", "inference"):
            raise ValueError(f"phase must be train or inference, got {self.phase!r}")

    def __len__(self) -> int:
        return len(self.ranks)

    def validate(self, r_max: int) -> None:
        if len(self.ranks) and (self.ranks.min() < 1 or self.ranks.max() > r_max):
            raise ValueError(f"ranks {sorted(set(self.ranks.tolist()))} outside [1, {r_max}]")


def truncate_view(pair: LoraPair, r: int) -> tuple[Tensor, Tensor]:
    """(first r rows of A, first r columns of B), sharing storage with the pair."""
    pair.check_rank(r)
    return nc.prefix(pair.A, r, axis=0), nc.prefix(pair.B, r, axis=1)


def alpha_of(pair: LoraPair | float, r: int) -> float:
    base = pair.alpha_base if isinstance(pair, LoraPair) else float(pair)
    if r < 1:
        raise ValueError(f"rank must be positive, got {r}")
    return base / r


def rank_mask(ranks: np.ndarray, r_max: int, alpha_base: float) -> np.ndarray:
    """[n, r_max] matrix whose row i is alpha_{r_i} on columns < r_i and 0 elsewhere."""
    ranks = np.asarray(ranks)
    cols = np.arange(r_max)
    live = cols[None, :] < ranks[:, None]
    return np.where(live, (alpha_base / ranks)[:, None], 0.0)


def lora_forward(h: Tensor, weight: Tensor, pair: LoraPair | None, assignment: RankAssignment | None) -> Tensor:
    """W h + alpha_r B_r A_r h per sample, for h of shape [n, T, d_in]."""
    base = nc.linear(h, weight)
    if pair is None:
        return base
    n = h.shape[0]
    if assignment is None or len(assignment) != n:
        got = None if assignment is None else len(assignment)
        raise ValueError(f"rank assignment length {got} does not match batch size {n}")
    assignment.validate(pair.r_max)
    m = rank_mask(assignment.ranks, pair.r_max, pair.alpha_base)
    mask = nc.constant(np.broadcast_to(m[:, None, :], (n, h.shape[1], pair.r_max)))
    u = nc.mul(nc.linear(h, pair.A), mask)
    return nc.add(base, nc.linear(u, pair.B))


def lora_forward_sliced(h: Tensor, weight: Tensor, pair: LoraPair, ranks: Sequence[int]) -> Tensor:
    """Reference path: physically slice A/B per sample and concatenate.

    Semantically identical to :func:`lora_forward`; used as its oracle.
    """
    if len(ranks) != h.shape[0]:
        raise ValueError(f"{len(ranks)} ranks for a batch of {h.shape[0]}")
    outs = []
    for i, r in enumerate(ranks):
        r = int(r)
        hi = _row(h, i)
        a_r, b_r = truncate_view(pair, r)
        delta = nc.scale(nc.linear(nc.linear(hi, a_r), b_r), alpha_of(pair, r))
        outs.append(nc.add(nc.linear(hi, weight), delta))
    return nc.concat(outs, axis=0)


def _row(h: Tensor, i: int) -> Tensor:
    """h[i:i+1] as a differentiable gather."""
    flat = nc.reshape(h, (h.shape[0], -1))
    return nc.reshape(nc.embedding(flat, np.array([i])), (1,) + h.shape[1:])


def merge_delta(pair: LoraPair, r: int) -> np.ndarray:
    """Dense alpha_r * B_r A_r of shape [d_out, d_in]."""
    pair.check_rank(r)
    return alpha_of(pair, r) * (pair.B.data[:, :r] @ pair.A.data[:r])


# ---------------------------------------------------------------------------
# adapter collections
# ---------------------------------------------------------------------------


@dataclass
class AdapterSet:
    """All LoRA pairs of one model, keyed by (layer, target)."""

    pairs: dict[tuple[int, str], LoraPair] = field(default_factory=dict)
    r_max: int = 8
    alpha_base: float = DEFAULT_ALPHA

    @classmethod
    def create(
        cls,
        d_model: int,
        n_layers: int,
        r_max: int,
        rng: np.random.Generator,
        targets: Iterable[str] = DEFAULT_TARGETS,
        alpha_base: float = DEFAULT_ALPHA,
    ) -> AdapterSet:
        pairs = {}
        for layer in range(n_layers):
            for t in targets:
                pairs[(layer, t)] = init_pair(d_model, d_model, r_max, rng, layer, t, alpha_base)
        return cls(pairs, r_max, alpha_base)

    def get(self, layer: int, target: str) -> LoraPair | None:
        return self.pairs.get((layer, target))

    def parameters(self) -> list[Tensor]:
        out = []
        for key in sorted(self.pairs):
            out += [self.pairs[key].A, self.pairs[key].B]
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {f"adapter.{p.name}.{m}": getattr(p, m).data for p in self.pairs.values() for m in ("A", "B")}

    @classmethod
    def from_state(cls, state: Mapping[str, np.ndarray], alpha_base: float = DEFAULT_ALPHA) -> AdapterSet:
        pairs = {}
        for key, arr in state.items():
            if not key.startswith("adapter.") or not key.endswith(".A"):
                continue
            _, _, layer, target, _ = key.split(".")
            a = nc.tensor(arr, requires_grad=True, name=key)
            b = nc.tensor(state[key[:-1] + "B"], requires_grad=True, name=key[:-1] + "B")
            pairs[(int(layer), target)] = LoraPair(a, b, a.shape[0], alpha_base, int(layer), target)
        r_max = next(iter(pairs.values())).r_max if pairs else 0
        return cls(pairs, r_max, alpha_base)

    def copy(self) -> AdapterSet:
        return AdapterSet.from_state({k: v.copy() for k, v in self.state().items()}, self.alpha_base)


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------


def adapted_shapes(config, targets: Iterable[str] = DEFAULT_TARGETS) -> list[tuple[int, int]]:
    """(d_out, d_in) of every adapted matrix; all attention projections are d_model square."""
    return [(config.d_model, config.d_model) for _ in range(config.n_layers) for _ in targets]


def count_params(config, targets: Iterable[str] = DEFAULT_TARGETS, r: int = 1) -> int:
    """Trainable parameters at rank ``r``: sum over adapted matrices of (d_in + d_out) * r."""
    if r < 0:
        raise ValueError(f"rank must be non-negative, got {r}")
    return sum((d_in + d_out) * r for d_out, d_in in adapted_shapes(config, tuple(targets)))


def expected_active_params(
    config,
    targets: Iterable[str],
    distribution: Mapping[int, float] | Iterable[tuple[int, float]],
) -> float:
    """Expected trainable parameters in use under a rank distribution {rank: probability}."""
    items = list(distribution.items()) if isinstance(distribution, Mapping) else list(distribution)
    total = sum(p for _, p in items)
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"rank probabilities sum to {total}, not 1")
    targets = tuple(targets)
    return float(sum(p * count_params(config, targets, int(r)) for r, p in items))

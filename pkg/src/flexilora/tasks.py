"""Synthetic task families with a difficulty knob, reference solvers, and metrics.

``kv_recall`` is the retrieval-style family: ``k`` key:value pairs are listed and
one key is queried. ``mod_chain`` is the sequential family: a chain of ``L``
operations over digits evaluated strictly left to right modulo 10.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .numcore import stream

FAMILIES = ("kv_recall", "mod_chain")
KEY_CHARS = "abcdefghijklmnop"
OPS = "+-*"
MODULUS = 10
KNOB_RANGE = {"kv_recall": (1, 12), "mod_chain": (1, 8)}
DATASET_FORMAT = 1

# every character any generator can emit; the tokenizer is built from this
ALPHABET = "".join(sorted(set("0123456789" + KEY_CHARS + OPS + ":=? |")))


@dataclass(frozen=True)
class Sample:
    prompt: str
    answer: str
    knob: int
    family: str
    id: str = ""


@dataclass(frozen=True)
class TaskSpec:
    """One task family's generation settings.

    Training splits mix ``low`` and ``high`` knob values 50/50; evaluation
    splits use the same mix so both difficulty classes are represented.
    """

    family: str
    low: tuple[int, ...] = (1, 2)
    high: tuple[int, ...] = (6, 7, 8)
    n_train: int = 512
    n_eval: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown task family {self.family!r}")
        lo, hi = KNOB_RANGE[self.family]
        for k in self.low + self.high:
            if not lo <= k <= hi:
                raise ValueError(f"{self.family}: knob {k} outside [{lo}, {hi}]")
        if not self.low or not self.high:
            raise ValueError("both low and high knob sets must be nonempty")


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


def _kv_sample(k: int, rng: np.random.Generator) -> tuple[str, str]:
    keys = rng.choice(len(KEY_CHARS), size=k, replace=False)
    values = rng.integers(0, 100, size=k)
    pairs = " ".join(f"{KEY_CHARS[key]}:{val:02d}" for key, val in zip(keys, values))
    q = int(rng.integers(0, k))
    return f"{pairs} {KEY_CHARS[keys[q]]}=?", f"{values[q]:02d}"


def _chain_sample(length: int, rng: np.random.Generator) -> tuple[str, str]:
    digits = rng.integers(0, MODULUS, size=length + 1)
    ops = rng.integers(0, len(OPS), size=length)
    acc = int(digits[0])
    text = [str(digits[0])]
    for op, d in zip(ops, digits[1:]):
        d = int(d)
        if OPS[op] == "+":
            acc = (acc + d) % MODULUS
        elif OPS[op] == "-":
            acc = (acc - d) % MODULUS
        else:
            acc = (acc * d) % MODULUS
        text.append(OPS[op] + str(d))
    return "".join(text) + "=?", str(acc)


_MAKERS = {"kv_recall": _kv_sample, "mod_chain": _chain_sample}


def _generate(spec: TaskSpec, seed: int, n: int, split: str) -> list[Sample]:
    rng = stream(seed, f"tasks/{spec.family}/{split}")
    maker = _MAKERS[spec.family]
    out = []
    for i in range(n):
        pool = spec.low if i % 2 == 0 else spec.high
        knob = int(pool[int(rng.integers(0, len(pool)))])
        prompt, answer = maker(knob, rng)
        out.append(Sample(prompt, answer, knob, spec.family, f"{spec.family}-{split}-{i}"))
    return out


def gen_kv_recall(spec: TaskSpec, seed: int, split: str = "train", n: int | None = None) -> list[Sample]:
    if spec.family != "kv_recall":
        raise ValueError("gen_kv_recall needs a kv_recall spec")
    return _generate(spec, seed, spec.n_train if n is None else n, split)


def gen_mod_chain(spec: TaskSpec, seed: int, split: str = "train", n: int | None = None) -> list[Sample]:
    if spec.family != "mod_chain":
        raise ValueError("gen_mod_chain needs a mod_chain spec")
    return _generate(spec, seed, spec.n_train if n is None else n, split)


def generate(spec: TaskSpec, split: str, seed: int | None = None) -> list[Sample]:
    """``split`` in {"train", "eval"}; sizes come from the spec."""
    n = spec.n_train if split == "train" else spec.n_eval
    return _generate(spec, spec.seed if seed is None else seed, n, split)


def gen_fixed_knob(family: str, knob: int, n: int, seed: int, split: str = "probe") -> list[Sample]:
    """``n`` samples all at one knob value (difficulty sweeps, pretraining corpora)."""
    spec = TaskSpec(family, low=(knob,), high=(knob,))
    return _generate(spec, seed, n, f"{split}-k{knob}")


def gen_copy(n: int, seed: int, min_len: int = 3, max_len: int = 8) -> list[str]:
    """Copy warm-up strings ``s|s``."""
    rng = stream(seed, "tasks/copy")
    chars = "0123456789" + KEY_CHARS
    out = []
    for _ in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        s = "".join(chars[i] for i in rng.integers(0, len(chars), size=length))
        out.append(f"{s}|{s}")
    return out


# ---------------------------------------------------------------------------
# reference solvers (independent of the generators)
# ---------------------------------------------------------------------------

_KV_PAIR = re.compile(r"([a-p]):(\d\d)")
_KV_QUERY = re.compile(r" ([a-p])=\?$")


def solve_kv_recall(prompt: str) -> str:
    table = dict(_KV_PAIR.findall(prompt))
    m = _KV_QUERY.search(prompt)
    if m is None or m.group(1) not in table:
        raise ValueError(f"malformed kv_recall prompt: {prompt!r}")
    return table[m.group(1)]


def solve_mod_chain(prompt: str) -> str:
    """Exact integer arithmetic left to right, reduced once at the end."""
    if not prompt.endswith("=?"):
        raise ValueError(f"malformed mod_chain prompt: {prompt!r}")
    tokens = re.findall(r"\d|[+\-*]", prompt[:-2])
    acc = int(tokens[0])
    for op, d in zip(tokens[1::2], tokens[2::2]):
        acc = acc + int(d) if op == "+" else acc - int(d) if op == "-" else acc * int(d)
    return str(acc % MODULUS)


def solve(sample: Sample) -> str:
    return solve_kv_recall(sample.prompt) if sample.family == "kv_recall" else solve_mod_chain(sample.prompt)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def metric_token_f1(prediction: str, gold: str) -> float:
    pred = prediction.split()
    ref = gold.split()
    if not pred and not ref:
        return 1.0
    if not pred or not ref:
        return 0.0
    overlap = sum((Counter(pred) & Counter(ref)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred)
    recall = overlap / len(ref)
    return 2 * precision * recall / (precision + recall)


def normalize(text: str) -> str:
    return " ".join(text.split()).lower()


def metric_exact_match(prediction: str, gold: str) -> int:
    return int(normalize(prediction) == normalize(gold))


_INT = re.compile(r"-?\d+")


def metric_answer_accuracy(prediction: str, gold: str) -> int:
    try:
        target = int(gold.strip())
    except ValueError as exc:
        raise ValueError(f"gold answer {gold!r} is not an integer") from exc
    found = _INT.findall(prediction)
    return int(bool(found) and int(found[-1]) == target)


METRICS = {
    "token_f1": metric_token_f1,
    "exact_match": metric_exact_match,
    "accuracy": metric_answer_accuracy,
}
# the metric each family is scored and labelled with
FAMILY_METRIC = {"kv_recall": "token_f1", "mod_chain": "accuracy"}


def score(metric: str, prediction: str, gold: str) -> float:
    return float(METRICS[metric](prediction, gold))


# ---------------------------------------------------------------------------
# persistence: one JSON object per line
# ---------------------------------------------------------------------------


def write_samples(samples: Iterable[Sample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            rec = {"format": DATASET_FORMAT, **asdict(s), "gold": s.answer}
            rec.pop("answer")
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_samples(path: str | Path) -> list[Sample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.get("format") != DATASET_FORMAT:
                raise ValueError(f"{path}: unsupported dataset format {rec.get('format')!r}")
            out.append(Sample(rec["prompt"], rec["gold"], int(rec["knob"]), rec["family"], rec["id"]))
    return out

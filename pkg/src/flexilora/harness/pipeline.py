"""End-to-end experiment orchestration with content-keyed stage caching.

Stage order: base model, task data, difficulty labels, router, then per
policy fine-tune and evaluate, then the comparison report. Every stage writes
an artifact whose file name carries the hash of the config slice it depends
on, alongside a ``.meta.json`` sidecar recording that key. A rerun with an
unchanged slice reuses the artifact; a sidecar that disagrees with its file
name is treated as stale and refused.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import numcore as nc
from ..adapters import AdapterSet
from ..methods import DyLoRA, DyLoRAPlus, EvalSummary, Fixed, Flexi, RankPolicy, evaluate, finetune
from ..model import ModelConfig, Tokenizer, TransformerWeights, build_tokenizer, pretrain_base, pretrain_corpus
from ..router import (
    EASY,
    HARD,
    DifficultyLabel,
    RouterWeights,
    balance_classes,
    label_difficulty,
    pooled_embeddings,
    read_labels,
    train_router,
    write_labels,
)
from ..tasks import ALPHABET, FAMILY_METRIC, Sample, TaskSpec, gen_fixed_knob, generate, read_samples, write_samples
from .checkpoint import encode, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, PolicySection, TaskSection
from .report import ReportRow, emit_report

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, seed: int, cause: BaseException):
        super().__init__(f"stage {stage!r} failed (seed {seed}): {cause}")
        self.stage, self.seed = stage, seed


class StaleArtifactError(RuntimeError):
    pass


def tokenizer() -> Tokenizer:
    return build_tokenizer(ALPHABET)


def model_config(cfg: ExperimentConfig, tok: Tokenizer) -> ModelConfig:
    m = cfg.model
    return ModelConfig(tok.vocab_size, m.d_model, m.n_layers, m.n_heads, m.d_ff, m.max_seq_len)


def make_policy(p: PolicySection, router: RouterWeights | None = None) -> RankPolicy:
    if p.kind == "lora":
        return Fixed(p.rank)
    if p.kind == "dylora":
        return DyLoRA(p.low, p.high, p.inference_rank or p.high)
    if p.kind == "dylora+":
        return DyLoRAPlus(p.low, p.high)
    if router is None:
        raise ValueError("flexi policy requested but no router was trained")
    return Flexi(router)


def task_spec(t: TaskSection, seed: int) -> TaskSpec:
    return TaskSpec(t.family, tuple(t.low), tuple(t.high), t.n_train, t.n_eval, seed)


# ---------------------------------------------------------------------------
# cache plumbing
# ---------------------------------------------------------------------------


class Stage:
    """One cached artifact: ``<dir>/<name>-<key>.<ext>`` plus a key sidecar."""

    def __init__(self, directory: Path, name: str, key: str, ext: str):
        self.path = directory / f"{name}-{key}.{ext}"
        self.meta = directory / f"{name}-{key}.meta.json"
        self.name, self.key = name, key

    def ready(self) -> bool:
        if not (self.path.exists() and self.meta.exists()):
            return False
        recorded = json.loads(self.meta.read_text()).get("key")
        if recorded != self.key:
            raise StaleArtifactError(f"{self.path}: recorded key {recorded} does not match {self.key}; delete it to rebuild")
        log.info("reusing %s", self.path.name)
        return True

    def done(self, **info) -> None:
        self.meta.write_text(json.dumps({"key": self.key, "stage": self.name, **info}, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def pretrain_stage(cfg: ExperimentConfig, cache: Path, tok: Tokenizer) -> TransformerWeights:
    mc = model_config(cfg, tok)
    st = Stage(cache, "base", cfg.slice_hash("model", "pretrain", "precision"), "flxl")
    if st.ready():
        return TransformerWeights.from_state(mc, load_checkpoint(st.path)).freeze()
    p = cfg.pretrain
    samples: list[Sample] = []
    for k in p.kv_knobs:
        samples += gen_fixed_knob("kv_recall", k, p.n_per_knob, p.seed, "pretrain")
    for k in p.mod_knobs:
        samples += gen_fixed_knob("mod_chain", k, p.n_per_knob, p.seed, "pretrain")
    corpus = pretrain_corpus(p.seed, p.n_copy, samples)
    weights, trace = pretrain_base(mc, tok, corpus, p.steps, p.lr, p.seed, p.batch_size, p.warmup, log_every=500)
    save_checkpoint(weights.state(), st.path)
    st.done(final_loss=float(np.mean(trace[-100:])) if trace else None, content_hash=weights.content_hash())
    return weights


def data_stage(cfg: ExperimentConfig, out: Path, t: TaskSection) -> tuple[list[Sample], list[Sample]]:
    key = cfg.slice_hash(extra={"task": vars(t), "seed": cfg.seed})
    splits = []
    for split in ("train", "eval"):
        st = Stage(out, f"data-{t.family}-{split}", key, "jsonl")
        if st.ready():
            splits.append(read_samples(st.path))
            continue
        samples = generate(task_spec(t, cfg.seed), split)
        write_samples(samples, st.path)
        st.done(n=len(samples))
        splits.append(samples)
    return splits[0], splits[1]


def _router_key(cfg: ExperimentConfig, t: TaskSection, weights: TransformerWeights) -> str:
    return cfg.slice_hash("router", extra={"task": vars(t), "seed": cfg.seed, "base": weights.content_hash()})


def label_stage(
    cfg: ExperimentConfig, out: Path, t: TaskSection, weights: TransformerWeights, tok: Tokenizer, train: list[Sample]
) -> list[DifficultyLabel]:
    r = cfg.router
    st = Stage(out, f"labels-{t.family}", _router_key(cfg, t, weights), "jsonl")
    if st.ready():
        return read_labels(st.path)
    if r.label_by == "knob":
        low = set(t.low)
        labels = [DifficultyLabel(s.id, EASY if s.knob in low else HARD, float(s.knob in low), "knob") for s in train]
    else:
        labels = label_difficulty(weights, tok, train, t.metric or FAMILY_METRIC[t.family], r.tau, cfg.seed)
    write_labels(labels, st.path)
    st.done(n=len(labels), easy=sum(lab.cls == EASY for lab in labels))
    return labels


def router_stage(
    cfg: ExperimentConfig,
    out: Path,
    t: TaskSection,
    weights: TransformerWeights,
    tok: Tokenizer,
    train: list[Sample],
    labels: list[DifficultyLabel],
) -> RouterWeights:
    r = cfg.router
    st = Stage(out, f"router-{t.family}", _router_key(cfg, t, weights), "flxl")
    if st.ready():
        return RouterWeights.from_state(load_checkpoint(st.path))
    balanced = balance_classes(labels, cfg.seed)
    by_id = {s.id: s for s in train}
    x = pooled_embeddings(weights, tok, [by_id[lab.sample_id] for lab in balanced])
    y = np.array([0 if lab.cls == EASY else 1 for lab in balanced])
    fit = train_router(x, y, r.sigma, r.epochs, r.lr, cfg.seed, r.hidden, tuple(r.rank_table), r.holdout)
    save_checkpoint(fit.router.state(), st.path)
    st.done(held_out_accuracy=fit.router.held_out_accuracy, train_accuracy=fit.train_accuracy, n=len(balanced))
    log.info("router for %s: held-out accuracy %.3f", t.family, fit.router.held_out_accuracy)
    return fit.router


def finetune_stage(
    cfg: ExperimentConfig,
    out: Path,
    t: TaskSection,
    policy: RankPolicy,
    weights: TransformerWeights,
    tok: Tokenizer,
    train: list[Sample],
    router_key: str,
) -> AdapterSet:
    extra = {"task": vars(t), "seed": cfg.seed, "base": weights.content_hash(), "train": policy.train_key}
    if policy.kind == "flexi":
        extra["router"] = router_key
    key = cfg.slice_hash("adapters", "finetune", extra=extra)
    st = Stage(out, f"adapters-{t.family}-{policy.train_key}", key, "flxl")
    if st.ready():
        return AdapterSet.from_state(load_checkpoint(st.path), cfg.adapters.alpha)
    a = cfg.adapters
    adapters = AdapterSet.create(
        weights.config.d_model, weights.config.n_layers, a.r_max, nc.stream(cfg.seed, "adapters/init"), a.targets, a.alpha
    )
    f = cfg.finetune
    rep = finetune(weights, adapters, policy, train, tok, f.steps, f.lr, f.batch_size, cfg.seed, f.momentum, f.clip)
    save_checkpoint(adapters.state(), st.path)
    record = rep.to_record()
    record["checkpoint"] = st.path.name
    (out / f"finetune-{t.family}-{policy.train_key}-{key}.json").write_text(json.dumps(record, sort_keys=True) + "\n")
    st.done(final_loss=float(np.mean(rep.loss_trace[-20:])) if rep.loss_trace else None)
    log.info("finetuned %s on %s in %.1fs", policy.name, t.family, rep.wall_clock)
    return adapters


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    out: Path
    rows: list[ReportRow] = field(default_factory=list)
    summaries: dict[tuple[str, str], EvalSummary] = field(default_factory=dict)
    routers: dict[str, RouterWeights] = field(default_factory=dict)


STAGES = ("pretrain", "gen-tasks", "label", "train-router", "finetune", "eval")


def cache_path(cfg: ExperimentConfig) -> Path:
    return Path(cfg.cache) if cfg.cache else Path(cfg.out) / "cache"


def run_experiment(cfg: ExperimentConfig, until: str = "eval", threads: int | None = None) -> RunResult:
    """Run (or resume) the pipeline through stage ``until``.

    A full run ends by writing the comparison report into ``cfg.out``.
    """
    if until not in STAGES:
        raise ValueError(f"unknown stage {until!r}")
    stop = STAGES.index(until)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cache = cache_path(cfg)
    cache.mkdir(parents=True, exist_ok=True)
    threads = threads or cfg.eval.threads
    result = RunResult(out)
    tok = tokenizer()
    with nc.precision(cfg.precision):
        weights = _stage("pretrain", cfg.seed, pretrain_stage, cfg, cache, tok)
        if stop < 1:
            return result
        for t in cfg.tasks:
            train, ev = _stage("gen-tasks", cfg.seed, data_stage, cfg, out, t)
            if stop < 2:
                continue
            router = None
            if any(p.kind == "flexi" for p in cfg.policies) or until in ("label", "train-router"):
                labels = _stage("label", cfg.seed, label_stage, cfg, out, t, weights, tok, train)
                if stop < 3:
                    continue
                router = _stage("train-router", cfg.seed, router_stage, cfg, out, t, weights, tok, train, labels)
                result.routers[t.family] = router
            if stop < 4:
                continue
            router_key = hashlib.sha256(encode(router.state())).hexdigest()[:16] if router else ""
            metric = t.metric or FAMILY_METRIC[t.family]
            for p in cfg.policies:
                policy = _stage("finetune", cfg.seed, make_policy, p, router)
                adapters = _stage("finetune", cfg.seed, finetune_stage, cfg, out, t, policy, weights, tok, train, router_key)
                if stop < 5:
                    continue
                summary = _stage(
                    "eval",
                    cfg.seed,
                    evaluate,
                    weights,
                    adapters,
                    policy,
                    ev,
                    tok,
                    metric,
                    cfg.seed,
                    cfg.eval.batch_size,
                    cfg.eval.max_new,
                    threads,
                    t.high,
                    cfg.adapters.targets,
                )
                result.summaries[(t.family, policy.name)] = summary
                result.rows.append(ReportRow.from_summary(t.family, policy.train_key, summary))
    if result.rows:
        emit_report(result.rows, out)
    return result


def _stage(name: str, seed: int, fn, *args):
    try:
        return fn(*args)
    except (StaleArtifactError, KeyboardInterrupt):
        raise
    except Exception as exc:
        raise StageError(name, seed, exc) from exc

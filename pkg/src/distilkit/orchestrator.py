"""Training orchestration: stage loops, optimizer, teacher policies and chains."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import autograd as ag
from .data import Batch, SyntheticCorpus
from .errors import (ChainError, ConfigValidationError, NonFiniteError, PolicyError,
                     SourceError, TrainingAborted)
from .hooks import (AuxiliaryModel, DistanceSpec, IterState, LossTerm, StageHooks, TapSet,
                    apply_operation_hooks, compose_loss, feature_requests, hard_label_ce,
                    hybrid_forward, interchange_forward, soft_logits)
from .methods import MethodDescriptor, Orchestration, validate
from .model import (ModelSpec, TapBundle, TransformerModel, count_params, forward_with_taps,
                    init_student, load_checkpoint, save_checkpoint)
from .rng import Rng
from .telemetry import SNAPSHOT_FEATURES, DistanceRecord, TelemetrySink, snapshot_distances

# Table 8-derived optimisation defaults
DEFAULTS = {
    "dropout": 0.1, "warmup": 0.1, "weight_decay": 0.1, "decay": "linear",
    "adam_eps": 1e-8, "adam_betas": (0.9, 0.999), "clip": 0.1,
}


@dataclass(frozen=True)
class StageConfig:
    stage: str = "task"
    batch_size: int = 16
    micro_batch: int | None = None
    grad_accum: int | None = None
    iterations: int | None = 200
    epochs: int | None = None
    lr: float = 1e-3
    warmup: float = DEFAULTS["warmup"]
    weight_decay: float = DEFAULTS["weight_decay"]
    betas: tuple = DEFAULTS["adam_betas"]
    eps: float = DEFAULTS["adam_eps"]
    clip: float | None = DEFAULTS["clip"]
    seed: int = 0
    dropout: float = DEFAULTS["dropout"]
    max_batches: int | None = None     # cap on batches per epoch
    snapshot_every: int = 10

    def __post_init__(self):
        if self.stage not in ("pretraining", "task"):
            raise ConfigValidationError("stage", f"unknown stage kind {self.stage!r}")
        if not self.lr > 0:
            raise ConfigValidationError("lr", "must be positive")
        if self.batch_size <= 0:
            raise ConfigValidationError("batch_size", "must be positive")
        micro = self.micro
        if micro <= 0 or self.batch_size % micro:
            raise ConfigValidationError("micro_batch", f"{micro} does not divide batch size {self.batch_size}")
        if self.grad_accum is not None and self.grad_accum * micro != self.batch_size:
            raise ConfigValidationError("grad_accum", "micro_batch * grad_accum must equal batch_size")
        if self.iterations is None and self.epochs is None:
            raise ConfigValidationError("iterations", "give iterations or epochs")
        if (self.iterations or 0) < 0 or (self.epochs or 0) < 0:
            raise ConfigValidationError("iterations", "must be non-negative")
        if not 0 <= self.warmup < 1:
            raise ConfigValidationError("warmup", "must lie in [0, 1)")
        if not 0 <= self.dropout < 1:
            raise ConfigValidationError("dropout", "must lie in [0, 1)")

    @property
    def micro(self) -> int:
        if self.micro_batch is not None:
            return self.micro_batch
        if self.grad_accum:
            return self.batch_size // self.grad_accum
        return self.batch_size

    @property
    def accum_steps(self) -> int:
        return self.batch_size // self.micro

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["betas"] = list(self.betas)
        return d


def lr_at(it: int, total: int, peak: float, warmup: float) -> float:
    """Linear warmup over ``warmup*total`` steps, then linear decay to zero."""
    warm = int(warmup * total)
    if it < warm:
        return peak * (it + 1) / warm
    return peak * (total - it) / max(total - warm, 1)


class Adam:
    """Adam with decoupled weight decay; state is keyed by parameter name."""

    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, named: Sequence[tuple[str, ag.Tensor]], grads: dict[str, np.ndarray], lr: float):
        for name, p in named:
            g = grads.get(name)
            if g is None:
                continue
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
                self.t[name] = 0
            v = self.v[name]
            self.t[name] += 1
            t = self.t[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mh = m / (1 - self.b1 ** t)
            vh = v / (1 - self.b2 ** t)
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * mh / (np.sqrt(vh) + self.eps)


# -- teacher selection ------------------------------------------------------------------------
@dataclass
class PolicyState:
    """Bandit state for reward-driven teacher selection."""

    ema: np.ndarray
    decay: float = 0.9
    beta: float = 5.0
    picks: list = field(default_factory=list)


def _entropy(logits: np.ndarray, T: float = 1.0) -> float:
    z = logits / T
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    return float(np.mean(-np.sum(p * np.log(np.maximum(p, 1e-300)), axis=-1)))


def select_teachers(policy: str, teacher_logits: Sequence[np.ndarray], gold: np.ndarray | None = None,
                    state: PolicyState | None = None, rng: Rng | None = None) -> np.ndarray:
    """Weights over teachers for one batch.

    TMKD averages soft targets (uniform weights); MT-BERT sums per-teacher
    losses (all weights 1); Uncertainty weights teachers by inverse mean
    prediction entropy; RL-KD samples one teacher from a softmax over the
    moving-average reward and updates the reward with that teacher's batch
    accuracy.
    """
    n = len(teacher_logits)
    if n < 2:
        raise PolicyError(f"policy {policy!r} needs at least two teachers, got {n}")
    if policy == "TMKD":
        return np.full(n, 1.0 / n)
    if policy == "MT-BERT":
        return np.ones(n)
    if policy == "Uncertainty":
        inv = np.array([1.0 / (_entropy(np.asarray(z)) + 1e-12) for z in teacher_logits])
        return inv / inv.sum()
    if policy == "RL-KD":
        if state is None:
            raise PolicyError("RL-KD needs a policy state")
        if rng is None or gold is None:
            raise PolicyError("RL-KD needs an rng and gold labels")
        logits = state.beta * state.ema
        p = np.exp(logits - logits.max())
        p /= p.sum()
        pick = min(int(np.searchsorted(np.cumsum(p), rng.uniform())), n - 1)
        reward = float(np.mean(np.argmax(teacher_logits[pick], axis=-1) == gold))
        state.ema[pick] = state.decay * state.ema[pick] + (1 - state.decay) * reward
        state.picks.append(pick)
        w = np.zeros(n)
        w[pick] = 1.0
        return w
    raise PolicyError(f"unknown teacher policy {policy!r}")


# -- a single stage --------------------------------------------------------------------------------
@dataclass
class StageResult:
    student: TransformerModel
    losses: list
    breakdowns: list
    records: list
    iterations: int
    checkpoint: Path | None = None


def _forward_all(plan, student, teachers, batch: Batch, s_req, t_reqs, drop_rng, aux, cf_needed):
    teacher_taps = []
    with ag.no_grad():
        for t, req in zip(teachers, t_reqs):
            teacher_taps.append(forward_with_taps(t, batch.tokens, req)[1])
    if plan.replace is not None and any(plan.replace):
        extra = {k for k in s_req if k[0] != "Soft"}
        if extra:
            raise TrainingAborted(f"block replacement only provides Soft features, terms need {sorted(extra)}")
        logits = hybrid_forward(student, teachers[0], batch.tokens, plan.replace, aux, drop_rng)
        student_taps = TapBundle({("Soft", None): logits})
    else:
        _, student_taps = forward_with_taps(student, batch.tokens, s_req, rng=drop_rng)
    cf_student = cf_teachers = None
    if cf_needed:
        ic = plan.interchange
        if ic is None:
            raise TrainingAborted("interchange view requested but no interchange hook is active")
        source = batch.tokens[ic["perm"]]
        with ag.no_grad():
            cf_teachers = [interchange_forward(teachers[0], batch.tokens, source, ic["teacher_layer"],
                                               ic["positions"], ["Soft"])[1]]
        cf_student = interchange_forward(student, batch.tokens, source, ic["student_layer"],
                                         ic["positions"], ["Soft"])[1]
    return student_taps, teacher_taps, cf_student, cf_teachers


def validation_metric(model: TransformerModel, corpus: SyntheticCorpus, stage: str, limit: int = 64) -> tuple[float, float]:
    """``(perplexity, accuracy)`` on the validation split: exp(mean CE) and argmax accuracy."""
    batches = corpus.batches(stage, "valid", limit)[:1]
    ce, acc, n = 0.0, 0.0, 0
    with ag.no_grad():
        for b in batches:
            z = soft_logits(model.forward(b.tokens), b)
            k = len(b.targets)
            ce += hard_label_ce(z, b.targets).item() * k
            acc += float(np.sum(np.argmax(z.data, axis=-1) == b.targets))
            n += k
    return math.exp(ce / n), acc / n


def accuracy(model: TransformerModel, corpus: SyntheticCorpus, split: str = "valid") -> float:
    correct, n = 0, 0
    with ag.no_grad():
        for b in corpus.task_batches(split, 64):
            z = soft_logits(model.forward(b.tokens), b)
            correct += int(np.sum(np.argmax(z.data, axis=-1) == b.targets))
            n += len(b.targets)
    return correct / n


def train_stage(student: TransformerModel, teachers: Sequence[TransformerModel], hooks: StageHooks,
                cfg: StageConfig, corpus: SyntheticCorpus, *, policy: str | None = None,
                telemetry: TelemetrySink | None = None, checkpoint_path: Path | None = None,
                tag: str = "") -> StageResult:
    """Train ``student`` in place for one stage and return its loss series."""
    batches = corpus.batches(cfg.stage, "train", cfg.batch_size)
    if cfg.max_batches is not None:
        batches = batches[:cfg.max_batches]
    if not batches:
        raise TrainingAborted("no training batches: corpus smaller than the batch size")
    bpe = len(batches)
    total = cfg.iterations if cfg.iterations is not None else cfg.epochs * bpe
    total_epochs = max(1, -(-total // bpe))
    rng = Rng(cfg.seed)
    op_rng, drop_rng, pol_rng, sub_rng = rng.spawn(1), rng.spawn(2), rng.spawn(3), rng.spawn(4)
    drop_rng = drop_rng if cfg.dropout > 0 else None
    student.dropout = cfg.dropout
    aux = AuxiliaryModel(seed=cfg.seed * 31 + 7)
    opt = Adam(cfg.betas, cfg.eps, cfg.weight_decay)
    terms = hooks.loss_terms
    Ls = student.spec.layers
    s_req, t_reqs = set(), []
    for i, t in enumerate(teachers):
        sr, tr = feature_requests([x for x in terms if x.teacher in (i, "ensemble")
                                   or (x.feature == "Hard")], Ls, t.spec.layers)
        s_req |= sr
        t_reqs.append(tr)
    if not teachers:
        s_req, _ = feature_requests(terms, Ls, Ls)
    cf_needed = any(t.view == "interchange" for t in terms)
    needs_subset = any(t.combiner == "random_subset" for t in terms)
    reduction = "sum" if policy == "MT-BERT" else "mixture"
    pstate = PolicyState(np.zeros(len(teachers))) if policy == "RL-KD" else None
    teacher_specs = [t.spec for t in teachers]

    losses, breakdowns, records = [], [], []
    layer_subset, subset_epoch = None, -1
    for it in range(total):
        epoch = it // bpe
        batch = batches[it % bpe]
        state = IterState(it, epoch, total, total_epochs)
        if needs_subset and epoch != subset_epoch:
            # intermediate teacher layers only, kept in depth order
            pool = max(1, teachers[0].spec.layers - 1)
            layer_subset = tuple(sorted(int(x) + 1 for x in sub_rng.choice(pool, min(Ls, pool))))
            subset_epoch = epoch
        plan = apply_operation_hooks(student, teachers, hooks, state, op_rng,
                                     batch.tokens.shape[1], len(batch))
        grads: dict[str, np.ndarray] = {}
        step_loss, step_break = 0.0, {}
        n_micro = cfg.accum_steps
        for m in range(n_micro):
            mb = batch if n_micro == 1 else batch.select(np.arange(m * cfg.micro, (m + 1) * cfg.micro))
            try:
                s_taps, t_taps, cf_s, cf_t = _forward_all(plan, student, teachers, mb, s_req, t_reqs,
                                                          drop_rng, aux, cf_needed)
                weights = None
                if policy is not None:
                    tz = [soft_logits(tb[("Soft", None)], mb).data for tb in t_taps]
                    weights = select_teachers(policy, tz, mb.targets, pstate, pol_rng)
                taps = TapSet(s_taps, t_taps, mb, student.spec, teacher_specs, weights, reduction,
                              cf_s, cf_t, plan.active_layers, layer_subset)
                loss, br = compose_loss(terms, taps, hooks, state, aux)
            except NonFiniteError as exc:
                raise TrainingAborted(f"{tag}iteration {it}: non-finite loss ({exc})") from None
            if not math.isfinite(loss.item()):
                raise TrainingAborted(f"{tag}iteration {it}: non-finite loss")
            step_loss += loss.item() / n_micro
            for k, v in br.items():
                step_break[k] = step_break.get(k, 0.0) + v / n_micro
            if loss.requires_grad:
                named = _named_trainables(student, aux)
                for _, p in named:
                    p.zero_grad()
                ag.backward(loss * (1.0 / n_micro))
                for name, p in named:
                    if p._grad is not None:
                        grads[name] = grads[name] + p._grad if name in grads else p._grad.copy()
        named = _named_trainables(student, aux)
        for name in list(grads):
            if any(name.startswith("student." + pre) for pre in plan.frozen):
                del grads[name]
            elif not np.all(np.isfinite(grads[name])):
                raise TrainingAborted(f"{tag}iteration {it}: non-finite gradient for {name}")
        if cfg.clip is not None and grads:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > cfg.clip:
                scale = cfg.clip / norm
                grads = {k: g * scale for k, g in grads.items()}
        opt.step(named, grads, lr_at(it, total, cfg.lr, cfg.warmup))
        losses.append(step_loss)
        breakdowns.append(step_break)
        if telemetry is not None and teachers and (it % cfg.snapshot_every == 0 or it == total - 1):
            rec = _snapshot(student, teachers[0], batch, corpus, cfg.stage, it, step_loss, tag)
            telemetry.append(rec)
            records.append(rec)
    for _, p in _named_trainables(student, aux):
        p.zero_grad()
    student.dropout = 0.0
    ckpt = None
    if checkpoint_path is not None:
        ckpt = save_checkpoint(student, checkpoint_path, {"stage": cfg.stage, "iterations": total, "tag": tag})
    return StageResult(student, losses, breakdowns, records, total, ckpt)


def _named_trainables(student: TransformerModel, aux: AuxiliaryModel):
    out = [("student." + n, p) for n, p in student.named_parameters() if p.requires_grad]
    out += [("aux." + n, aux.params[n]) for n in sorted(aux.params)]
    return out


def _snapshot(student, teacher, batch, corpus, stage, it, loss, tag) -> DistanceRecord:
    with ag.no_grad():
        _, st = forward_with_taps(student, batch.tokens, SNAPSHOT_FEATURES)
        _, tt = forward_with_taps(teacher, batch.tokens, SNAPSHOT_FEATURES)
        dist = snapshot_distances(st, tt, student.spec, teacher.spec, batch)
    ppl, _ = validation_metric(student, corpus, stage)
    return DistanceRecord(it, dist, loss, ppl, tag.rstrip(":"))


# -- teachers ---------------------------------------------------------------------------------------
HARD_ONLY = StageHooks("task", (), (LossTerm("Hard", DistanceSpec("CE"), teacher="gold"),), ())


@dataclass
class TeacherPair:
    """A teacher after pre-training and after task fine-tuning."""

    pretrained: TransformerModel
    finetuned: TransformerModel

    def for_stage(self, stage: str) -> TransformerModel:
        return self.pretrained if stage == "pretraining" else self.finetuned


_TEACHER_CACHE: dict[tuple, TeacherPair] = {}


def corpus_fingerprint(corpus: SyntheticCorpus) -> tuple:
    return (corpus.seed, corpus.vocab, corpus.seq_len, corpus.num_labels, len(corpus.train),
            int(corpus.train.sum()), int(corpus.valid.sum()))


def train_plain(spec: ModelSpec, corpus: SyntheticCorpus, cfg: StageConfig, seed: int,
                init: TransformerModel | None = None) -> TransformerModel:
    """Train a model on gold labels only (no teacher)."""
    model = init.clone() if init is not None else TransformerModel.random(spec, seed)
    hooks = replace(HARD_ONLY, stage=cfg.stage)
    train_stage(model, [], hooks, cfg, corpus)
    return model


def prepare_teacher(spec: ModelSpec, corpus: SyntheticCorpus, seed: int = 0, pre_iters: int = 200,
                    task_iters: int = 300, lr: float = 1e-3, cache_dir: str | Path | None = None) -> TeacherPair:
    """Pre-train on masked tokens, then fine-tune on the task.

    Results are cached per process and, when ``cache_dir`` is given, as
    checkpoints on disk keyed by a digest of every input.
    """
    key = (spec, corpus_fingerprint(corpus), seed, pre_iters, task_iters, lr)
    if key in _TEACHER_CACHE:
        return _TEACHER_CACHE[key]
    paths = None
    if cache_dir is not None:
        digest = hashlib.sha256(repr(key).encode()).hexdigest()[:16]
        paths = [Path(cache_dir) / f"teacher-{spec.name}-{digest}-{k}.ckpt" for k in ("pre", "task")]
        if all(p.exists() for p in paths):
            pair = TeacherPair(load_checkpoint(paths[0]).freeze(), load_checkpoint(paths[1]).freeze())
            _TEACHER_CACHE[key] = pair
            return pair
    base = dict(lr=lr, dropout=0.0, clip=1.0, weight_decay=0.01, seed=seed)
    pre = train_plain(spec, corpus, StageConfig("pretraining", iterations=pre_iters, **base), seed)
    fine = train_plain(spec, corpus, StageConfig("task", iterations=task_iters, **base), seed, init=pre)
    if paths is not None:
        # round-trip through the checkpoint format so cached and fresh teachers are identical
        save_checkpoint(pre, paths[0])
        save_checkpoint(fine, paths[1])
        pre, fine = load_checkpoint(paths[0]), load_checkpoint(paths[1])
    pair = TeacherPair(pre.freeze(), fine.freeze())
    _TEACHER_CACHE[key] = pair
    return pair


# -- pipelines -----------------------------------------------------------------------------------------
@dataclass
class PipelineRun:
    """Everything needed to run one method end to end.

    ``teachers`` may be given as ready :class:`TeacherPair` objects; when
    omitted they are trained from ``teacher_specs`` on the corpus.
    ``stage_configs`` align with the descriptor's stages (one config is
    reused for every stage).
    """

    descriptor: MethodDescriptor
    student_spec: ModelSpec
    teacher_specs: list
    corpus: SyntheticCorpus
    stage_configs: list = field(default_factory=lambda: [StageConfig()])
    assistant_specs: list = field(default_factory=list)
    teachers: list | None = None
    checkpoint_dir: Path | None = None
    telemetry: TelemetrySink | None = None
    seed: int = 0
    init_source: Any = None
    teacher_iterations: tuple = (200, 300)
    teacher_cache: Path | None = None


@dataclass
class PipelineResult:
    student: TransformerModel
    stages: list          # StageResult per executed stage, in order
    links: list           # model spec names per chain link


def _stage_configs(run: PipelineRun, desc: MethodDescriptor) -> list[StageConfig]:
    cfgs = list(run.stage_configs)
    if len(cfgs) == 1:
        cfgs = cfgs * len(desc.stages)
    if len(cfgs) != len(desc.stages):
        raise ConfigValidationError("stages", f"{len(cfgs)} stage configs for {len(desc.stages)} descriptor stages")
    return [replace(c, stage=s.stage) for c, s in zip(cfgs, desc.stages)]


def _teacher_pairs(run: PipelineRun) -> list[TeacherPair]:
    if run.teachers is not None:
        return list(run.teachers)
    pre, task = run.teacher_iterations
    return [prepare_teacher(s, run.corpus, run.seed + 1000 * i, pre, task, cache_dir=run.teacher_cache)
            for i, s in enumerate(run.teacher_specs)]


def run_stage(run: PipelineRun, stage_index: int = 0, student: TransformerModel | None = None,
              teachers: Sequence[TeacherPair] | None = None) -> StageResult:
    """Run one descriptor stage of ``run`` (the student defaults to a fresh initialisation)."""
    desc = run.descriptor
    cfg = _stage_configs(run, desc)[stage_index]
    pairs = list(teachers) if teachers is not None else _teacher_pairs(run)
    if student is None:
        student = _init(run, desc, pairs, cfg)
    policy = desc.orchestration.policy if desc.orchestration.mode == "multi_teacher" else None
    return train_stage(student, [p.for_stage(cfg.stage) for p in pairs], desc.stages[stage_index], cfg,
                       run.corpus, policy=policy, telemetry=run.telemetry,
                       checkpoint_path=_ckpt(run, f"stage{stage_index}-{cfg.stage}"), tag=f"stage{stage_index}:")


def _ckpt(run: PipelineRun, name: str) -> Path | None:
    return None if run.checkpoint_dir is None else Path(run.checkpoint_dir) / f"{name}.ckpt"


def _init(run: PipelineRun, desc: MethodDescriptor, pairs, cfg: StageConfig, spec: ModelSpec | None = None):
    spec = spec or run.student_spec
    strategy = desc.init_strategy
    seed = run.seed * 7 + 3
    source = run.init_source
    if strategy == "truncate-teacher" and source is None:
        source = pairs[0].for_stage(cfg.stage)
    if strategy == "pretrained-student" and source is None:
        # no checkpoint given: pre-train the student on masked tokens without a teacher
        pre_cfg = replace(cfg, stage="pretraining", dropout=0.0)
        source = train_plain(spec, run.corpus, pre_cfg, seed)
    if strategy == "distilled-student" and source is None:
        raise SourceError("distilled-student init needs a checkpoint path")
    return init_student(strategy, spec, source, seed=seed, dropout=cfg.dropout)


def _run_stages(run, desc, student, pairs, policy, cfgs, prefix) -> list[StageResult]:
    results = []
    for i, (stage, cfg) in enumerate(zip(desc.stages, cfgs)):
        tag = f"{prefix}stage{i}-{stage.stage}"
        results.append(train_stage(student, [p.for_stage(cfg.stage) for p in pairs], stage, cfg, run.corpus,
                                   policy=policy, telemetry=run.telemetry, checkpoint_path=_ckpt(run, tag),
                                   tag=tag + ":"))
    return results


def run_pipeline(run: PipelineRun) -> PipelineResult:
    desc = run.descriptor
    problems = validate(desc, run.student_spec.layers)
    if problems:
        raise ConfigValidationError("descriptor", "; ".join(problems))
    cfgs = _stage_configs(run, desc)
    orch = desc.orchestration
    if orch.mode == "assistant_chain":
        return _run_chain(run, desc, cfgs)
    pairs = _teacher_pairs(run)
    policy = orch.policy if orch.mode == "multi_teacher" else None
    if policy is not None and len(pairs) < 2:
        raise PolicyError(f"{desc.name} needs at least two teachers, got {len(pairs)}")
    student = _init(run, desc, pairs, cfgs[0])
    results = _run_stages(run, desc, student, pairs, policy, cfgs, "")
    _final(run, student)
    return PipelineResult(student, results, [run.student_spec.name])


def _final(run, student):
    path = _ckpt(run, "student")
    if path is not None:
        save_checkpoint(student, path, {"final": True})


def _run_chain(run: PipelineRun, desc: MethodDescriptor, cfgs) -> PipelineResult:
    specs = [run.teacher_specs[0]] + list(run.assistant_specs) + [run.student_spec]
    sizes = [count_params(s) for s in specs]
    if len(specs) < 3:
        raise ChainError("assistant chain needs at least one assistant")
    if any(b >= a for a, b in zip(sizes, sizes[1:])):
        raise ChainError("chain sizes must strictly decrease: "
                         + " > ".join(f"{s.name}({n})" for s, n in zip(specs, sizes)))
    pairs = _teacher_pairs(run)[:1]
    results, links = [], []
    student = None
    for k, spec in enumerate(specs[1:], start=1):
        teachers = pairs if desc.orchestration.dense else pairs[-1:]
        student = _init(run, desc, teachers, cfgs[0], spec)
        results += _run_stages(run, desc, student, teachers, None, cfgs, f"link{k}-")
        links.append(spec.name)
        trained = student.clone().freeze()
        pairs.append(TeacherPair(trained, trained))
    _final(run, student)
    return PipelineResult(student, results, links)

"""Losses, Adam with step decay, the task-switching schedule and curriculum."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as tn
from .data import TASKS, SplitManifest, World, answer_targets
from .model import MultiTaskModel
from .tensor import Tensor

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


class StarvationError(ValueError):
    """Some task would get no update slot in a cycle."""


# ------------------------------------------------------------------ losses


def bce(y, p: Tensor, weights=None) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` against (soft) targets ``y``.

    ``weights`` masks out padding cells; the mean runs over the cells kept.
    """
    p = tn.as_tensor(p)
    y = np.broadcast_to(np.asarray(y, dtype=np.float64), p.shape)
    pc = tn.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    cell = tn.add(tn.mul(tn.log(pc), y), tn.mul(tn.log(tn.sub(1.0, pc)), 1.0 - y))
    if weights is None:
        return tn.mul(tn.mean(cell), -1.0)
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), p.shape)
    return tn.mul(tn.tsum(tn.mul(cell, w)), -1.0 / w.sum())


def icr_loss_from_scores(pos: Tensor, neg: Tensor) -> Tensor:
    """Mean BCE over B positives (label 1) and B negatives (label 0)."""
    return bce(np.r_[np.ones(pos.shape[0]), np.zeros(neg.shape[0])], tn.concat([pos, neg], axis=0))


def icr_loss(worlds: Sequence[World], model: MultiTaskModel, training=True, rng=None) -> Tensor:
    if len(worlds) < 2:
        raise ValueError("ICR batches need at least two worlds for in-batch negatives")
    pos, neg = model.icr_forward(worlds, training, rng)
    return icr_loss_from_scores(pos, neg)


def vqa_loss(worlds: Sequence[World], model: MultiTaskModel, training=True, rng=None) -> Tensor:
    if not worlds:
        raise ValueError("empty batch")
    return bce(answer_targets(worlds), model.vqa_forward(worlds, training, rng))


def vg_loss(worlds: Sequence[World], model: MultiTaskModel, training=True, rng=None) -> Tensor:
    if not worlds:
        raise ValueError("empty batch")
    scores, gb, ib = model.vg_forward(worlds, training, rng)
    cells = gb.phrase_mask[:, :, None] * ib.mask[:, None, :]
    return bce(gb.targets, scores, cells)


LOSSES: dict[str, Callable] = {"ICR": icr_loss, "VQA": vqa_loss, "VG": vg_loss}


# ------------------------------------------------------------------ optimizer


def lr_schedule(iteration: int, total_step: int, base: float = 0.001, decay: float = 0.5) -> float:
    """Step decay: multiply by ``decay`` after every ``total_step`` iterations."""
    if total_step < 1:
        raise ValueError("step size must be >= 1")
    return base * decay ** (iteration // total_step)


@dataclass
class Adam:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    steps: dict = field(default_factory=dict)

    def step(self, params: Mapping[str, Tensor], lr: float | None = None) -> None:
        """Update every parameter holding a gradient, then clear all gradients.

        Parameters without a gradient (off the active path) keep their values
        and moments.
        """
        lr = self.lr if lr is None else lr
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                bad = int(np.sum(~np.isfinite(g)))
                raise FloatingPointError(f"non-finite gradient in {name}: {bad} of {g.size} entries")
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
                self.steps[name] = 0
            v = self.v[name]
            t = self.steps[name] = self.steps[name] + 1
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
        for p in params.values():
            p.grad = None

    def reset(self) -> None:
        self.m.clear()
        self.v.clear()
        self.steps.clear()


def adam_step(params: Mapping[str, Tensor], state: Adam, lr: float | None = None) -> Adam:
    state.step(params, lr)
    return state


# ------------------------------------------------------------------ plans


@dataclass(frozen=True)
class TaskSpec:
    task: str
    tap: int
    batch_size: int
    iters: int
    step: int

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.batch_size < 1 or self.iters < 1 or self.step < 1:
            raise ValueError(f"{self.task}: batch size, iterations and step must all be >= 1")

    @property
    def loss(self) -> str:
        return "bce"


@dataclass(frozen=True)
class TrainPlan:
    tasks: tuple[TaskSpec, ...]
    total_iter: int
    total_step: int
    alphas: tuple[Fraction, ...]
    cycle: int
    slots: tuple[int, ...]

    @property
    def num_cycle(self) -> int:
        return self.total_iter // self.cycle


def allocate_slots(alphas: Sequence[Fraction], cycle: int) -> list[int]:
    """Nearest-integer split of ``cycle * alpha_i`` that sums to ``cycle`` (largest remainder)."""
    exact = [a * cycle for a in alphas]
    slots = [int(x) for x in exact]  # floors; exact values are non-negative
    short = cycle - sum(slots)
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - slots[i]), i))
    for i in order[:short]:
        slots[i] += 1
    return slots


def derive_joint_plan(specs: Sequence[TaskSpec], cycle: int = 10) -> TrainPlan:
    """Sum iterations and decay steps over tasks; ``alpha_i = iter_i / sum(iter)``."""
    if not specs:
        raise ValueError("no tasks to plan")
    if len(specs) > len(TASKS) or len({s.task for s in specs}) != len(specs):
        raise ValueError("a plan holds each of the three tasks at most once")
    if cycle < 1:
        raise ValueError("cycle length must be >= 1")
    total_iter = sum(s.iters for s in specs)
    total_step = sum(s.step for s in specs)
    alphas = tuple(Fraction(s.iters, total_iter) for s in specs)
    slots = allocate_slots(alphas, cycle)
    starved = [s.task for s, n in zip(specs, slots) if n < 1]
    if starved:
        raise StarvationError(f"tasks {starved} get no update in a cycle of {cycle}")
    if total_iter < cycle:
        raise StarvationError(f"{total_iter} iterations do not fill one cycle of {cycle}")
    return TrainPlan(tuple(specs), total_iter, total_step, alphas, cycle, tuple(slots))


def build_task_sequence(plan: TrainPlan) -> list[int]:
    """Task numbers (1-based, plan order) for every iteration: per-cycle blocks, repeated."""
    if any(n < 1 for n in plan.slots):
        raise StarvationError("a task has no slot in the cycle")
    block: list[int] = []
    for i, n in enumerate(plan.slots, start=1):
        block += [i] * n
    return block * plan.num_cycle


# ------------------------------------------------------------------ loop


class EpochSampler:
    """Shuffled epochs without replacement."""

    def __init__(self, worlds: Sequence[World], batch_size: int, rng: np.random.Generator):
        if not worlds:
            raise ValueError("empty training pool")
        self.worlds = list(worlds)
        self.batch_size = min(batch_size, len(self.worlds))
        self.rng = rng
        self._order: list[int] = []

    def next(self) -> list[World]:
        batch = []
        while len(batch) < self.batch_size:
            if not self._order:
                self._order = self.rng.permutation(len(self.worlds)).tolist()
            batch.append(self.worlds[self._order.pop()])
        return batch


@dataclass
class LogRecord:
    iter: int
    task: str
    lr: float
    loss: float

    def format(self) -> str:
        return f"iter={self.iter} task={self.task} lr={self.lr:.6g} loss={self.loss:.17g}"


@dataclass
class TrainResult:
    log: list[LogRecord]
    updates: dict[str, int]
    metrics: list[dict] = field(default_factory=list)


def training_pools(worlds: Sequence[World], manifest: SplitManifest) -> dict[str, list[World]]:
    by_id = {w.world_id: w for w in worlds}
    return {t: [by_id[i] for i in manifest.pools[t]["train"]] for t in manifest.pools}


def train(plan: TrainPlan, model: MultiTaskModel, pools: Mapping[str, Sequence[World]], seed: int = 0,
          optimizer: Adam | None = None, base_lr: float = 0.001, decay: float = 0.5,
          manifest: SplitManifest | None = None, log_sink: Callable[[str], None] | None = None,
          evaluate: Callable[[int], dict] | None = None, eval_every: int = 0,
          start_iter: int = 0) -> TrainResult:
    """Task-switching training: each iteration samples one batch of the scheduled task,
    runs the encoder only up to that task's tap, its decoder and loss, and takes one
    Adam step on the parameters that received gradients."""
    if manifest is not None:
        manifest.check_contamination()
    for spec in plan.tasks:
        if model.config.taps[spec.task] != spec.tap:
            raise ValueError(f"{spec.task}: plan tap {spec.tap} != model tap {model.config.taps[spec.task]}")
    optimizer = optimizer or Adam(lr=base_lr)
    sched_rng = tn.stream(seed, "scheduler")
    drop_rng = tn.stream(seed, "dropout")
    samplers = {s.task: EpochSampler(pools[s.task], s.batch_size, sched_rng) for s in plan.tasks}
    params = model.named_parameters()
    sequence = build_task_sequence(plan)
    log: list[LogRecord] = []
    updates = {s.task: 0 for s in plan.tasks}
    metrics = []
    for it, task_no in enumerate(sequence):
        spec = plan.tasks[task_no - 1]
        lr = lr_schedule(it, plan.total_step, base_lr, decay)
        batch = samplers[spec.task].next()
        loss = LOSSES[spec.task](batch, model, True, drop_rng)
        value = loss.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite {spec.task} loss at iteration {it}")
        tn.backward(loss)
        optimizer.step(params, lr)
        updates[spec.task] += 1
        rec = LogRecord(start_iter + it, spec.task, lr, value)
        log.append(rec)
        if log_sink is not None:
            log_sink(rec.format())
        if evaluate is not None and eval_every and (it + 1) % eval_every == 0:
            metrics.append({"iter": start_iter + it + 1, **evaluate(it + 1)})
    return TrainResult(log, updates, metrics)


@dataclass
class CurriculumResult:
    stages: list[TrainResult]
    plans: list[TrainPlan]
    checksums: list[tuple[str, str]]  # (before, after) per stage


def curriculum_run(specs: Mapping[str, TaskSpec] | Sequence[TaskSpec], cycle: int,
                   stages: Sequence[Sequence[str]], model: MultiTaskModel,
                   pools: Mapping[str, Sequence[World]], seed: int = 0, reset_optimizer: bool = False,
                   **train_kw) -> CurriculumResult:
    """Train on growing task sets (e.g. single, then pairs, then all), carrying
    parameters and, unless ``reset_optimizer``, Adam moments between stages."""
    if not isinstance(specs, Mapping):
        specs = {s.task: s for s in specs}
    prev = 0
    for stage in stages:
        unknown = [t for t in stage if t not in specs]
        if unknown:
            raise KeyError(f"stage references unknown task(s) {unknown}")
        if not stage or len(stage) < prev:
            raise ValueError("stages must be non-empty and ordered by task count")
        prev = len(stage)
    opt = Adam(lr=train_kw.get("base_lr", 0.001))
    results, plans, sums = [], [], []
    offset = 0
    for k, stage in enumerate(stages):
        if reset_optimizer:
            opt.reset()
        plan = derive_joint_plan([specs[t] for t in stage], cycle)
        before = model.checksum()
        res = train(plan, model, pools, seed=seed + k, optimizer=opt, start_iter=offset, **train_kw)
        offset += len(res.log)
        sums.append((before, model.checksum()))
        results.append(res)
        plans.append(plan)
        logger.info("stage %d %s done: %d iterations", k + 1, "+".join(stage), len(res.log))
    return CurriculumResult(results, plans, sums)

"""Two-stage optimization.

Stage ``pretrain`` trains only the prototype extractor and projector on caption
records; stage ``finetune`` trains adapters in both towers plus those two, on
conversations.  Both minimize masked next-token NLL.  In fine-tuning the loss
mask is the union of self-questioning targets (questions in ``[vusr]`` turns)
and answer targets, so one backward pass covers both objectives; the report
still splits the value into its question and answer parts.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Graph, Tensor, cross_entropy, log_softmax_np
from .data import TurnSequence
from .model import ExampleTargets, VisionLanguageModel, param_group

log = logging.getLogger(__name__)

PRETRAIN, FINETUNE = "pretrain", "finetune"
STAGE_GROUPS = {PRETRAIN: ("proto", "projector"), FINETUNE: ("adapters", "proto", "projector")}
SCHEDULES = ("constant", "cosine")


class NumericAbort(RuntimeError):
    pass


@dataclass
class TrainPlan:
    stage: str = FINETUNE
    lr_groups: dict[str, float] = field(default_factory=dict)
    schedule: str = "constant"
    warmup_ratio: float = 0.03
    batch_size: int = 128
    epochs: int = 1
    seed: int = 0
    grad_clip: float | None = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    max_steps: int | None = None
    target_loss: float | None = None

    def __post_init__(self):
        if self.stage not in STAGE_GROUPS:
            raise ValueError(f"unknown stage {self.stage!r}")
        if not self.lr_groups:
            self.lr_groups = default_lr_groups(self.stage)
        if set(self.lr_groups) != set(STAGE_GROUPS[self.stage]):
            raise ValueError(f"{self.stage} trains groups {STAGE_GROUPS[self.stage]}, "
                             f"got learning rates for {sorted(self.lr_groups)}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        self.betas = tuple(self.betas)

    @classmethod
    def pretrain(cls, **kw) -> "TrainPlan":
        kw.setdefault("batch_size", 256)
        return cls(stage=PRETRAIN, **kw)

    @classmethod
    def finetune(cls, **kw) -> "TrainPlan":
        kw.setdefault("batch_size", 128)
        return cls(stage=FINETUNE, **kw)

    @property
    def trainable_groups(self) -> tuple[str, ...]:
        return STAGE_GROUPS[self.stage]

    def partition(self, model: VisionLanguageModel) -> tuple[list[str], list[str]]:
        """(trainable names, frozen names) for this stage."""
        train, frozen = [], []
        for name, _ in model.named_parameters():
            (train if param_group(name) in self.trainable_groups else frozen).append(name)
        return train, frozen

    def to_json(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def default_lr_groups(stage: str) -> dict[str, float]:
    if stage == PRETRAIN:
        return {"proto": 2e-3, "projector": 2e-3}
    return {"adapters": 2e-4, "proto": 2e-5, "projector": 2e-5}


def lr_multiplier(plan: TrainPlan, step: int, total_steps: int) -> float:
    if plan.schedule == "constant":
        return 1.0
    warm = max(1, math.ceil(plan.warmup_ratio * total_steps))
    if step < warm:
        return (step + 1) / warm
    span = max(1, total_steps - warm)
    return 0.5 * (1.0 + math.cos(math.pi * min(step - warm, span) / span))


# ---------------------------------------------------------------------------
# AdamW


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)


def adamw_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, state: AdamWState | None = None) -> AdamWState:
    """In-place decoupled-weight-decay Adam step with bias-corrected moments."""
    state = AdamWState() if state is None else state
    b1, b2 = betas
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.t[name] = 0
        v = state.v[name]
        t = state.t[name] = state.t[name] + 1
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        if weight_decay:
            p -= lr * weight_decay * p
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


# ---------------------------------------------------------------------------
# training


@dataclass
class Example:
    seq: TurnSequence
    pixels: np.ndarray

    @property
    def id(self) -> str:
        return self.seq.conv_id


@dataclass
class LossReport:
    step: int
    stage: str
    loss_total: float
    loss_q: float
    loss_a: float
    lr: dict[str, float]

    def to_json_line(self) -> str:
        return json.dumps({"step": self.step, "stage": self.stage, "loss_total": self.loss_total,
                           "loss_q": self.loss_q, "loss_a": self.loss_a, "lr": self.lr})


def split_loss(logits: np.ndarray, tg: ExampleTargets) -> tuple[float, float]:
    """Question and answer parts of the masked mean NLL (they sum to the total)."""
    n = int(tg.mask.sum())
    if n == 0:
        return 0.0, 0.0
    logp = log_softmax_np(logits)
    nll = -logp[np.arange(len(tg.targets)), np.where(tg.mask, tg.targets, 0)]
    return float(nll[tg.question_mask].sum() / n), float(nll[tg.answer_mask].sum() / n)


def epoch_order(seed: int, epoch: int, n: int) -> tuple[np.ndarray, dict]:
    """Shuffle for one epoch from a generator keyed by (seed, epoch)."""
    gen = np.random.Generator(np.random.PCG64([seed, epoch]))
    state = gen.bit_generator.state
    return gen.permutation(n), state


class Trainer:
    def __init__(self, model: VisionLanguageModel, plan: TrainPlan):
        if plan.stage == FINETUNE and not model.adapter_sets:
            raise ValueError("fine-tuning needs adapters attached to the model")
        self.model = model
        self.plan = plan
        self.opt = AdamWState()
        self.step_count = 0
        self.rng_state: dict = {}
        train, frozen = plan.partition(model)
        params = model.parameters()
        self.trainable = {n: params[n] for n in train}
        self.frozen = {n: params[n] for n in frozen}
        for p in self.trainable.values():
            p.requires_grad = True
        for p in self.frozen.values():
            p.requires_grad = False
            p.grad = None

    def steps_per_epoch(self, n: int) -> int:
        return math.ceil(n / self.plan.batch_size)

    def total_steps(self, n: int) -> int:
        total = self.plan.epochs * self.steps_per_epoch(n)
        return total if self.plan.max_steps is None else min(total, self.plan.max_steps)

    def current_lrs(self, total_steps: int) -> dict[str, float]:
        mult = lr_multiplier(self.plan, self.step_count, total_steps)
        return {g: lr * mult for g, lr in sorted(self.plan.lr_groups.items())}

    def sample_loss(self, ex: Example) -> tuple[Tensor, Graph, ExampleTargets, Tensor]:
        """Masked NLL of one sample; the head only runs on loss-target rows."""
        tg = self.model.targets(ex.seq)
        rows = np.flatnonzero(tg.mask)
        if rows.size:
            tg = ExampleTargets(tg.targets[rows], tg.mask[rows], tg.question_mask[rows], tg.answer_mask[rows])
        else:
            rows = None
        with Graph() as g:
            logits = self.model.forward_example(ex.seq, ex.pixels, rows)
            loss = cross_entropy(logits, tg.targets, tg.mask)
        return loss, g, tg, logits

    def step(self, batch: Sequence[Example], total_steps: int | None = None) -> LossReport:
        """One forward/backward per sample in fixed order, then one update."""
        total_steps = self.step_count + 1 if total_steps is None else total_steps
        for p in self.trainable.values():
            p.grad = None
        n = len(batch)
        tot = q_sum = a_sum = 0.0
        for ex in batch:
            loss, g, tg, logits = self.sample_loss(ex)
            val = loss.item()
            if not math.isfinite(val):
                raise NumericAbort(f"non-finite loss {val} on sample {ex.id!r} at step {self.step_count + 1}")
            g.backward(loss, seed=1.0 / n)
            q, a = split_loss(logits.data, tg)
            tot += val / n
            q_sum += q / n
            a_sum += a / n
        grads = {}
        for name, p in self.trainable.items():
            grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(grads[name])):
                raise NumericAbort(f"non-finite gradient for {name} at step {self.step_count + 1}")
        if self.plan.grad_clip is not None:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > self.plan.grad_clip:
                c = self.plan.grad_clip / norm
                grads = {k: g * c for k, g in grads.items()}
        lrs = self.current_lrs(total_steps)
        for group, lr in lrs.items():
            names = [k for k in self.trainable if param_group(k) == group]
            adamw_update({k: self.trainable[k].data for k in names}, {k: grads[k] for k in names},
                         lr, self.plan.betas, self.plan.eps, self.plan.weight_decay, self.opt)
        self.step_count += 1
        return LossReport(self.step_count, self.plan.stage, tot, q_sum, a_sum, lrs)

    def train(self, dataset: Sequence[Example], metrics_path: str | Path | None = None,
              on_step: Callable[[LossReport], None] | None = None) -> list[LossReport]:
        """Run (or resume) the plan; deterministic given seed, data and plan."""
        n = len(dataset)
        if n == 0:
            return []
        spe = self.steps_per_epoch(n)
        total = self.total_steps(n)
        bs = self.plan.batch_size
        reports = []
        sink = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
        try:
            while self.step_count < total:
                epoch, b = divmod(self.step_count, spe)
                order, state = epoch_order(self.plan.seed, epoch, n)
                self.rng_state = {"epoch": epoch, "pcg64": state}
                batch = [dataset[i] for i in order[b * bs:(b + 1) * bs]]
                rep = self.step(batch, total)
                reports.append(rep)
                if sink:
                    sink.write(rep.to_json_line() + "\n")
                    sink.flush()
                if on_step:
                    on_step(rep)
                if self.plan.target_loss is not None and rep.loss_total < self.plan.target_loss:
                    log.info("target loss reached at step %d", rep.step)
                    break
        finally:
            if sink:
                sink.close()
        return reports

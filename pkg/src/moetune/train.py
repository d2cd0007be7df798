"""Two-stage training: continual pre-training of the dense model, then
expert/router tuning of the upcycled MoE model with everything else frozen."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint
from .data import InstructionExample, SpanLabeledBatch, pack_batch, pack_text_batch
from .model import DenseTransformer, MoETransformer
from .objectives import balance_loss, balance_stats, combined_loss, task_loss_from_logits

log = logging.getLogger(__name__)

STAGES = ("continual-pretrain", "moe-tune")
CURVE_COLUMNS = ("step", "stage", "task_loss", "balance_loss", "combined", "lr")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 3e-3
    schedule: str = "cosine"
    warmup_steps: int = 0
    batch_size: int = 8
    grad_accum: int = 1
    epochs: int = 1
    cutoff_len: int = 256
    alpha: float = 0.01
    seed: int = 0
    stage: str = "continual-pretrain"
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.99)
    eps: float = 1e-8
    # optional cap on optimizer steps; the cosine horizon follows it
    max_steps: int | None = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if self.schedule != "cosine":
            raise ValueError("only the cosine schedule is supported")
        if self.lr <= 0 or self.batch_size < 1 or self.grad_accum < 1 or self.cutoff_len < 1:
            raise ValueError("lr, batch_size, grad_accum and cutoff_len must be positive")
        if self.epochs < 0 or self.warmup_steps < 0 or self.alpha < 0 or self.weight_decay < 0:
            raise ValueError("epochs, warmup_steps, alpha and weight_decay must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


# Full-scale reference settings.
FULL_SCALE_DEFAULTS = {
    "continual-pretrain": TrainConfig(lr=1e-5, batch_size=64, grad_accum=16, epochs=2, cutoff_len=2048,
                                      warmup_steps=0, stage="continual-pretrain"),
    "moe-tune": TrainConfig(lr=1e-5, batch_size=8, grad_accum=8, epochs=3, cutoff_len=2048,
                            warmup_steps=0, stage="moe-tune"),
}

DESK_DEFAULTS = {
    "continual-pretrain": TrainConfig(lr=3e-3, batch_size=8, epochs=4, cutoff_len=256, stage="continual-pretrain"),
    "moe-tune": TrainConfig(lr=2e-3, batch_size=8, epochs=8, cutoff_len=256, alpha=0.01, stage="moe-tune"),
}


def cosine_lr(step: int, total: int, base: float, warmup: int = 0) -> float:
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    span = max(total - warmup, 1)
    progress = min(max(step - warmup, 0) / span, 1.0)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam moments with decoupled weight decay; parameters without a grad are skipped."""

    def __init__(self, params: dict[str, ad.Tensor], lr: float = 1e-3, betas=(0.9, 0.99),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            dt = p.data.dtype.type
            m, v = self.m[name], self.v[name]
            m *= dt(self.b1)
            m += dt(1.0 - self.b1) * g
            v *= dt(self.b2)
            v += dt(1.0 - self.b2) * g * g
            if self.weight_decay:
                p.data *= dt(1.0 - lr * self.weight_decay)
            p.data -= dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(self.eps))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for slot in ("m", "v"):
            store = getattr(self, slot)
            for name in store:
                if name in state[slot]:
                    store[name] = np.array(state[slot][name], dtype=store[name].dtype)


def optimizer_step(params, grads, state: AdamW, lr: float | None = None) -> None:
    """Apply ``grads`` (name -> array) through ``state``; names outside it are ignored."""
    for name, g in grads.items():
        if name in params:
            params[name].grad = g
    state.step(lr)


# ---------------------------------------------------------------- loop


@dataclass
class _Loss:
    combined: ad.Tensor
    task: float
    balance: float


# Loss functions yield one micro-batch at a time: the tape holds a single graph.
def _pretrain_loss(model, batches: Sequence[SpanLabeledBatch], cfg: TrainConfig) -> Iterator[_Loss]:
    total = float(sum(b.token_mask.sum() for b in batches))
    for b in batches:
        logits, _ = model.forward(b.inputs, token_mask=b.input_mask)
        loss = ad.cross_entropy(logits, b.targets, b.token_mask, normalizer=total)
        yield _Loss(loss, loss.item(), 0.0)


def _moe_loss(model, batches: Sequence[SpanLabeledBatch], cfg: TrainConfig) -> Iterator[_Loss]:
    norms = (float(sum(b.detection_mask.sum() for b in batches)),
             float(sum(b.explanation_mask.sum() for b in batches)))
    for b in batches:
        logits, routing = model.forward(b.inputs, token_mask=b.input_mask)
        task = task_loss_from_logits(logits, b, normalizers=norms)
        bal = ad.scale(balance_loss(balance_stats(routing)), 1.0 / len(batches))
        yield _Loss(combined_loss(task, bal, cfg.alpha), task.item(), bal.item())


def _run(model: DenseTransformer, items: Sequence, make_batch: Callable, loss_fn: Callable,
         cfg: TrainConfig, resume: Checkpoint | None, curve_path=None,
         on_step: Callable | None = None) -> Checkpoint:
    params = model.trainable()
    opt = AdamW(params, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    n = len(items)
    per_step = cfg.batch_size * cfg.grad_accum
    steps_per_epoch = math.ceil(n / per_step) if n else 0
    total = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    rng = np.random.default_rng(cfg.seed)
    step = 0
    curve: list[dict] = []
    if resume is not None:
        step = resume.step
        if resume.optimizer:
            opt.load_state_dict(resume.optimizer)
        if resume.rng_state:
            rng.bit_generator.state = resume.rng_state
        curve = list(resume.extra.get("curve", []))
    epoch_state = rng.bit_generator.state
    writer = None
    fh = None
    if curve_path is not None:
        fh = open(curve_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS)
        writer.writeheader()
        for row in curve:
            writer.writerow(row)
    stop = False
    try:
        while step < total and not stop:
            epoch_state = rng.bit_generator.state
            perm = rng.permutation(n)
            first = step % steps_per_epoch
            for s in range(first, steps_per_epoch):
                if step >= total:
                    break
                chosen = [items[i] for i in perm[s * per_step:(s + 1) * per_step]]
                micro = [make_batch(chosen[j:j + cfg.batch_size]) for j in range(0, len(chosen), cfg.batch_size)]
                lr = cosine_lr(step, total, cfg.lr, cfg.warmup_steps)
                task = bal = comb = 0.0
                try:
                    for term in loss_fn(model, micro, cfg):
                        ad.backward(term.combined)
                        task += term.task
                        bal += term.balance
                        comb += term.combined.item()
                except ad.NonFiniteError as exc:
                    raise TrainingDivergedError(f"{cfg.stage}: non-finite values at step {step}: {exc}") from exc
                if not math.isfinite(comb):
                    raise TrainingDivergedError(f"{cfg.stage}: loss is {comb} at step {step}")
                opt.step(lr)
                opt.zero_grad()
                row = {"step": step, "stage": cfg.stage, "task_loss": task, "balance_loss": bal,
                       "combined": comb, "lr": lr}
                curve.append(row)
                if writer:
                    writer.writerow(row)
                step += 1
                # a truthy return from on_step ends training after this step
                if on_step and on_step(step - 1, row):
                    stop = True
                    break
    finally:
        if fh:
            fh.close()
    resume_state = epoch_state if step % max(steps_per_epoch, 1) else rng.bit_generator.state
    return Checkpoint(
        model=model,
        step=step,
        stage=cfg.stage,
        train_config=cfg.to_dict(),
        rng_state=resume_state,
        optimizer=opt.state_dict(),
        extra={"curve": curve, "total_steps": total},
    )


def continual_pretrain(model: DenseTransformer, corpus: Sequence[str], cfg: TrainConfig,
                       resume: Checkpoint | None = None, curve_path=None, on_step=None) -> Checkpoint:
    """Next-token training of every parameter on raw text."""
    if cfg.stage != "continual-pretrain":
        raise ValueError("continual_pretrain needs stage == 'continual-pretrain'")
    return _run(model, list(corpus), lambda docs: pack_text_batch(docs, cfg.cutoff_len), _pretrain_loss,
                cfg, resume, curve_path, on_step)


def moe_tune(model: MoETransformer, dataset: Sequence[InstructionExample], cfg: TrainConfig,
             resume: Checkpoint | None = None, curve_path=None, on_step=None) -> Checkpoint:
    """Task + alpha * balance training of experts and routers only.

    ``on_step(step, row)`` is called after every optimizer step; returning a
    truthy value stops training early.
    """
    if cfg.stage != "moe-tune":
        raise ValueError("moe_tune needs stage == 'moe-tune'")
    if not isinstance(model, MoETransformer):
        raise TypeError("moe_tune expects an upcycled MoETransformer")
    for ex in dataset:
        ex.validate_for_training()
    if cfg.cutoff_len > model.config.max_seq_len:
        raise ValueError("cutoff_len exceeds the model's max_seq_len")
    model.apply_freeze_mask()
    return _run(model, list(dataset), lambda exs: pack_batch(exs, cfg.cutoff_len), _moe_loss,
                cfg, resume, curve_path, on_step)

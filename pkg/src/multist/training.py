"""Training loop shared by every model kind."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .data import bucket_batches
from .models import checkpoint_of, model_loss
from .numerics import backward, clip_grad_norm, make_optimizer, no_grad, optimizer_step

log = logging.getLogger(__name__)


@dataclass
class TrainingConfig:
    ctc_weight: float = 0.3
    label_smoothing: float = 0.1
    dropout: float = 0.2
    sampling_max: float = 0.4
    weight_decay: float = 0.0
    batch_size: int = 8
    epochs: int = 15
    seed: int = 0
    optimizer: str = "adadelta"
    lr: float = 1.0
    rho: float = 0.95
    eps: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    clip_norm: float = 5.0
    max_ratio: float = 1.5
    criterion: float = 0.0
    stop_at_criterion: bool = False

    def __post_init__(self):
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ValueError("ctc_weight must lie in [0, 1]")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if not 0.0 <= self.sampling_max <= 1.0:
            raise ValueError("sampling_max must lie in [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.optimizer not in ("adadelta", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def sampling_prob(self, epoch):
        """Linear ramp from 0 at the first epoch to ``sampling_max`` at the last."""
        if self.epochs <= 1:
            return 0.0
        return self.sampling_max * epoch / (self.epochs - 1)

    def make_optimizer(self):
        if self.optimizer == "adadelta":
            return make_optimizer("adadelta", rho=self.rho, eps=self.eps, lr=self.lr,
                                  weight_decay=self.weight_decay)
        return make_optimizer("adam", lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                              weight_decay=self.weight_decay)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    checkpoint: object
    final: object
    trace: list = field(default_factory=list)
    best_epoch: int = 0
    epochs_to_criterion: int = None


def evaluate_loss(model, utts, batch_size=16, lam=None):
    """Mean per-token validation loss (no smoothing, dropout or sampling)."""
    model.eval()
    total = weight = 0.0
    with no_grad():
        for i in range(0, len(utts), batch_size):
            chunk = utts[i:i + batch_size]
            n = len(chunk)
            total += model_loss(model, chunk, lam=lam).item() * n
            weight += n
    return total / weight


def train(model, train_utts, dev_utts, cfg: TrainingConfig, on_epoch=None):
    """Optimise ``model`` in place; keep the best-validation checkpoint.

    Epoch 0 in the trace is the untrained model. When ``cfg.criterion`` is
    positive the first epoch whose dev loss reaches it is reported, and
    training stops there if ``cfg.stop_at_criterion``.
    """
    if not train_utts:
        raise ValueError("train: empty training corpus")
    dev_utts = dev_utts or train_utts
    by_id = {u.id: u for u in train_utts}
    if len(by_id) != len(train_utts):
        raise ValueError("train: duplicate utterance ids")
    rng = np.random.default_rng([cfg.seed, 1])
    model.set_dropout(cfg.dropout, rng)
    lam = cfg.ctc_weight
    opt = cfg.make_optimizer()
    params = model.parameters()
    length = (lambda u: len(u.transcript)) if model.cfg.kind in ("nmt", "lm") else None

    dev = evaluate_loss(model, dev_utts, lam=lam)
    trace = [{"epoch": 0, "train_loss": None, "dev_loss": dev, "mixed_batches": 0}]
    best, best_epoch = dev, 0
    best_ckpt = checkpoint_of(model, 0)
    reached = 0 if cfg.criterion > 0 and dev <= cfg.criterion else None
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        if reached is not None and cfg.stop_at_criterion:
            break
        model.train()
        plan = bucket_batches(train_utts, cfg.batch_size, seed=[cfg.seed, epoch], max_ratio=cfg.max_ratio,
                              length=length)
        p_sample = cfg.sampling_prob(epoch - 1)
        losses, mixed = [], 0
        for ids in plan:
            utts = [by_id[i] for i in ids]
            mixed += len({u.pair for u in utts}) > 1
            loss = model_loss(model, utts, p_sample, cfg.label_smoothing, rng, lam)
            for p in params.values():
                p.grad = None
            backward(loss, params.values())
            grads = {k: p.grad for k, p in params.items()}
            clip_grad_norm(grads, cfg.clip_norm)
            optimizer_step({k: p.data for k, p in params.items()}, grads, opt)
            losses.append(loss.item())
            step += 1
        dev = evaluate_loss(model, dev_utts, lam=lam)
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses)), "dev_loss": dev,
               "mixed_batches": mixed, "sampling_prob": p_sample}
        trace.append(rec)
        log.info("epoch %d train %.4f dev %.4f (%d/%d mixed-pair batches)",
                 epoch, rec["train_loss"], dev, mixed, len(plan))
        if on_epoch is not None:
            on_epoch(rec)
        if dev < best:
            best, best_epoch = dev, epoch
            best_ckpt = checkpoint_of(model, step)
        if reached is None and cfg.criterion > 0 and dev <= cfg.criterion:
            reached = epoch
    model.eval()
    return TrainResult(best_ckpt, model, trace, best_epoch, reached)

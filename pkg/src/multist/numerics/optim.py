"""Adadelta and Adam with additive weight decay."""
from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    kind: str
    rho: float = 0.95
    eps: float = 1e-8
    lr: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    step: int = 0
    slots: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adadelta", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def make_optimizer(kind, **hparams):
    if kind == "adam" and "lr" not in hparams:
        hparams["lr"] = 1e-3
    return OptimizerState(kind=kind, **hparams)


def _check(params, grads):
    if len(params) != len(grads):
        raise ValueError(f"optimizer: {len(params)} params but {len(grads)} grads")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"optimizer: grad for {name} has shape {g.shape}, param {p.shape}")


def adadelta_step(params, grads, state):
    """In-place Adadelta update of ``params`` (name -> ndarray)."""
    if state.kind != "adadelta":
        raise ValueError("adadelta_step: state is not adadelta")
    _check(params, grads)
    rho, eps = state.rho, state.eps
    for name, p in params.items():
        g = grads[name]
        if state.weight_decay:
            g = g + state.weight_decay * p
        sq_g, sq_dx = state.slots.setdefault(name, (np.zeros_like(p), np.zeros_like(p)))
        sq_g *= rho
        sq_g += (1.0 - rho) * g * g
        dx = -np.sqrt(sq_dx + eps) / np.sqrt(sq_g + eps) * g
        sq_dx *= rho
        sq_dx += (1.0 - rho) * dx * dx
        p += state.lr * dx
    state.step += 1
    return params


def adam_step(params, grads, state):
    """In-place bias-corrected Adam update of ``params``."""
    if state.kind != "adam":
        raise ValueError("adam_step: state is not adam")
    _check(params, grads)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads[name]
        if state.weight_decay:
            g = g + state.weight_decay * p
        m, v = state.slots.setdefault(name, (np.zeros_like(p), np.zeros_like(p)))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        p -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params


def optimizer_step(params, grads, state):
    if state.kind == "adadelta":
        return adadelta_step(params, grads, state)
    return adam_step(params, grads, state)


def clip_grad_norm(grads, max_norm):
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``; return the norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total

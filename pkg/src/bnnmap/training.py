"""Optimizers and the single-agent (KL-to-prior) training loop."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Stream, Tape, Tensor, backward, softplus
from .losses import LossConfig, base_loss, kl_gaussian, total_loss
from .model import MapperNet, forward_sample
from .world import PointSet


class SGD:
    """Plain gradient descent, no momentum."""

    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind: str, params: Sequence[Tensor], lr: float):
    if kind == "sgd":
        return SGD(params, lr)
    if kind == "adam":
        return Adam(params, lr)
    raise ValueError(f"unknown optimizer {kind!r}")


def prior_kl(net: MapperNet, cfg: LossConfig) -> Tensor:
    """Sum over every Bayesian weight and bias of KL(N(mu, softplus(rho)) || prior)."""
    prior_sigma = cfg.prior_sigma
    terms = None
    count = 0
    for layer in net.bayes_layers:
        for gp in (layer.weight, layer.bias):
            kl = kl_gaussian(gp.mu, softplus(gp.rho), cfg.prior_mu, np.full(gp.shape, prior_sigma))
            terms = kl if terms is None else terms + kl
            count += gp.mu.size
    if cfg.kl_reduction == "mean":
        return terms * (1.0 / count)
    return terms


def minibatch(data: PointSet, batch_size: int, stream: Stream) -> PointSet:
    if batch_size <= 0 or batch_size >= len(data):
        return data
    idx = stream.generator.choice(len(data), size=batch_size, replace=False)
    return data.subset(np.sort(idx))


@dataclass
class TrainConfig:
    iters: int = 300
    lr: float = 1e-3
    batch_size: int = 1024
    optimizer: str = "adam"


def train_local(
    net: MapperNet,
    data: PointSet,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    stream: Stream,
    optimizer=None,
) -> list[dict]:
    """Minimize base_loss + kl_weight * KL(posterior || prior) on local data only.

    Returns one record per iteration with ``base``, ``kl`` and ``total``.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    opt = optimizer or make_optimizer(train_cfg.optimizer, net.parameters(), train_cfg.lr)
    log = []
    for it in range(train_cfg.iters):
        opt.zero_grad()
        batch = minibatch(data, train_cfg.batch_size, stream.child("batch", it))
        with Tape():
            pred = forward_sample(net, batch.xy, stream.child("eps", it))
            base = base_loss(pred, batch.label[:, None], loss_cfg.base_loss_kind)
            kl = prior_kl(net, loss_cfg)
            loss = total_loss(base, kl, loss_cfg)
            backward(loss)
        opt.step()
        log.append({"iter": it, "base": base.item(), "kl": kl.item(), "total": loss.item()})
    return log

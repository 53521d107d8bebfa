"""Dual-regularized consensus training of Bayesian mappers.

Each agent keeps dual variables and regularization targets for its mean block
and its spread block. Per communication round ``node_update`` averages the
received states into the targets, takes a dual ascent step, then runs
``primal_step``: ``iters`` iterations of

    loss_mu  = pred_loss + <theta_mu, duals_mu> + w_mu * ||theta_mu - target_mu||^2
    loss_rho = <theta_rho, duals_rho> + w_rho * reg_rho(theta_rho, target_rho)

with one optimizer stepping only the means and another only the spreads.
``reg_rho`` is the per-parameter Gaussian KL (``split_kl``) or squared L2
(``split_l2``); ``uniform_l2`` uses one optimizer and one L2 penalty for every
parameter.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .autodiff import NonFiniteError, Stream, Tape, Tensor, add, backward, mul, softplus, tsum
from .losses import bce_loss, kl_gaussian, l2_reg, softplus_np
from .model import MapperNet, StateVector, forward_sample, predict_with_uncertainty, split_block
from .training import make_optimizer, minibatch
from .world import PointSet

STRATEGIES = ("uniform_l2", "split_l2", "split_kl")


class FingerprintMismatch(ValueError):
    """Exchanged states were produced by different architectures."""


class DivergenceError(ArithmeticError):
    """A training loss became non-finite."""


@dataclass
class DualState:
    duals_mu: np.ndarray
    duals_rho: np.ndarray
    reg_target_mu: np.ndarray
    reg_target_rho: np.ndarray

    @classmethod
    def zeros_like(cls, state: StateVector) -> "DualState":
        return cls(
            np.zeros_like(state.mu_block),
            np.zeros_like(state.rho_block),
            state.mu_block.copy(),
            state.rho_block.copy(),
        )

    def copy(self) -> "DualState":
        return DualState(*(a.copy() for a in (self.duals_mu, self.duals_rho, self.reg_target_mu, self.reg_target_rho)))


@dataclass
class ConsensusConfig:
    w_mu: float = 1.0
    w_rho: float = 1.0
    iters: int = 20
    lr_mu: float = 1e-3
    lr_rho: float = 1e-3
    rounds: int = 20
    dual_step_mu: float | None = None
    dual_step_rho: float | None = None
    batch_size: int = 512
    strategy: str = "split_kl"
    optimizer: str = "sgd"
    # PredLoss gradient reaches rho through the shared forward pass
    rho_pred_grad: bool = True
    penalty_schedule: Callable[[int], float] | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.iters < 1 or self.rounds < 1:
            raise ValueError("iters and rounds must be >= 1")
        for name in ("w_mu", "w_rho", "lr_mu", "lr_rho"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def step_mu(self) -> float:
        return self.w_mu if self.dual_step_mu is None else self.dual_step_mu

    @property
    def step_rho(self) -> float:
        return self.w_rho if self.dual_step_rho is None else self.dual_step_rho

    def penalty_scale(self, round_no: int) -> float:
        return 1.0 if self.penalty_schedule is None else float(self.penalty_schedule(round_no))

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("penalty_schedule", None)
        return d


def _inner(params: list[Tensor], flat: np.ndarray) -> Tensor:
    """<theta, flat> over a list of parameter tensors."""
    total = None
    for p, d in zip(params, split_block(params, flat)):
        term = tsum(mul(p, Tensor._wrap(d)))
        total = term if total is None else add(total, term)
    return total


def _l2(params: list[Tensor], target: np.ndarray) -> Tensor:
    total = None
    for p, t in zip(params, split_block(params, target)):
        term = l2_reg(p, Tensor._wrap(t))
        total = term if total is None else add(total, term)
    return total


def _bayes_mu(net: MapperNet) -> list[Tensor]:
    out = []
    for layer in net.bayes_layers:
        out += [layer.weight.mu, layer.bias.mu]
    return out


def rho_kl(net: MapperNet, target_mu: np.ndarray, target_rho: np.ndarray) -> Tensor:
    """Sum of per-parameter KL(N(mu_i, softplus(rho_i)) || N(target_mu_i, softplus(target_rho_i))).

    The own means enter as constants so only rho receives a gradient.
    """
    rho = net.rho_params()
    n_siren = net.siren.weight.size + net.siren.bias.size
    t_mu = split_block(_bayes_mu(net), target_mu[n_siren:])
    t_rho = split_block(rho, target_rho)
    total = None
    for r, m, tm, tr in zip(rho, _bayes_mu(net), t_mu, t_rho):
        term = kl_gaussian(m.data, softplus(r), tm, softplus_np(tr))
        total = term if total is None else add(total, term)
    return total


def _check(value: Tensor, what: str) -> float:
    v = value.item()
    if not math.isfinite(v):
        raise DivergenceError(f"{what} is not finite")
    return v


class ConsensusAgent:
    """One agent's model, optimizers, data and dual state."""

    def __init__(
        self,
        agent_id: int,
        net: MapperNet,
        data: PointSet,
        cfg: ConsensusConfig,
        stream: Stream,
        holdout: PointSet | None = None,
        val_passes: int = 10,
    ):
        self.id = agent_id
        self.val_passes = val_passes
        self.net = net
        self.data = data
        self.holdout = holdout
        self.cfg = cfg
        self.stream = stream
        self.dual = DualState.zeros_like(net.state())
        self.round = 0
        self.log: list[dict] = []
        if cfg.strategy == "uniform_l2":
            self.opt_mu = make_optimizer(cfg.optimizer, net.parameters(), cfg.lr_mu)
            self.opt_rho = None
        else:
            self.opt_mu = make_optimizer(cfg.optimizer, net.mu_params(), cfg.lr_mu)
            self.opt_rho = make_optimizer(cfg.optimizer, net.rho_params(), cfg.lr_rho)

    def state(self) -> StateVector:
        return self.net.state()

    def primal_step(self) -> list[dict]:
        return primal_step(self.net, self.data, self.dual, self.cfg, self.stream.child("round", self.round), self.opt_mu, self.opt_rho, self.round)

    def node_update(self, state: StateVector, peer_states: Mapping[int, StateVector]) -> StateVector:
        new_state, self.dual, records = node_update(
            state,
            peer_states,
            self.dual,
            self.net,
            self.data,
            self.cfg,
            self.stream.child("round", self.round),
            self.opt_mu,
            self.opt_rho,
            self.round,
        )
        residual = consensus_residual([state, *peer_states.values()])
        val = float("nan")
        if self.holdout is not None and len(self.holdout) and self.val_passes >= 2:
            val = validation_loss(self.net, self.holdout, self.val_passes, self.stream.child("val", self.round))
        for r in records:
            r.update(agent=self.id, round=self.round, consensus_residual="", validation_loss="")
        if records:
            records[-1].update(consensus_residual=residual, validation_loss=val)
        self.log.extend(records)
        self.round += 1
        return new_state


def primal_step(
    net: MapperNet,
    data: PointSet,
    dual: DualState,
    cfg: ConsensusConfig,
    stream: Stream,
    opt_mu=None,
    opt_rho=None,
    round_no: int = 0,
) -> list[dict]:
    """Run ``cfg.iters`` split mean/spread updates; returns one loss record per iteration."""
    st = net.state()
    if dual.duals_mu.shape != st.mu_block.shape or dual.duals_rho.shape != st.rho_block.shape:
        raise ValueError("dual state does not match the network")
    if dual.reg_target_mu.shape != st.mu_block.shape or dual.reg_target_rho.shape != st.rho_block.shape:
        raise ValueError("regularization targets do not match the network")
    uniform = cfg.strategy == "uniform_l2"
    if opt_mu is None:
        opt_mu = make_optimizer(cfg.optimizer, net.parameters() if uniform else net.mu_params(), cfg.lr_mu)
    if opt_rho is None and not uniform:
        opt_rho = make_optimizer(cfg.optimizer, net.rho_params(), cfg.lr_rho)
    scale = cfg.penalty_scale(round_no)
    w_mu, w_rho = cfg.w_mu * scale, cfg.w_rho * scale
    mu_p, rho_p = net.mu_params(), net.rho_params()
    records = []
    for it in range(cfg.iters):
        try:
            records.append(_primal_iter(net, data, dual, cfg, stream, it, uniform, w_mu, w_rho, mu_p, rho_p))
        except NonFiniteError as exc:
            raise DivergenceError(f"round {round_no} iteration {it}: {exc}") from exc
        opt_mu.step()
        if opt_rho is not None:
            opt_rho.step()
    return records


def _primal_iter(net, data, dual, cfg, stream, it, uniform, w_mu, w_rho, mu_p, rho_p) -> dict:
    net.zero_grad()
    batch = minibatch(data, cfg.batch_size, stream.child("batch", it)) if len(data) else data
    with Tape():
        if len(batch):
            pred = forward_sample(net, batch.xy, stream.child("eps", it), detach_rho=not (cfg.rho_pred_grad or uniform))
            pred_loss = bce_loss(pred, batch.label[:, None])
        else:
            pred_loss = Tensor(0.0)
        if uniform:
            params = mu_p + rho_p
            theta_dual = np.concatenate([dual.duals_mu, dual.duals_rho])
            theta_reg = np.concatenate([dual.reg_target_mu, dual.reg_target_rho])
            loss_mu = add(add(pred_loss, _inner(params, theta_dual)), mul(w_mu, _l2(params, theta_reg)))
        else:
            loss_mu = add(add(pred_loss, _inner(mu_p, dual.duals_mu)), mul(w_mu, _l2(mu_p, dual.reg_target_mu)))
        backward(loss_mu)
    loss_rho_v = 0.0
    if not uniform:
        with Tape():
            if cfg.strategy == "split_kl":
                reg_rho = rho_kl(net, dual.reg_target_mu, dual.reg_target_rho)
            else:
                reg_rho = _l2(rho_p, dual.reg_target_rho)
            loss_rho = add(_inner(rho_p, dual.duals_rho), mul(w_rho, reg_rho))
            backward(loss_rho)
        loss_rho_v = _check(loss_rho, "loss_rho")
    return {
        "iter": it,
        "pred_loss": _check(pred_loss, "pred_loss"),
        "loss_mu": _check(loss_mu, "loss_mu"),
        "loss_rho": loss_rho_v,
    }


def consensus_targets(states: list[StateVector]) -> tuple[np.ndarray, np.ndarray]:
    fp = states[0].fingerprint
    if any(s.fingerprint != fp for s in states):
        raise FingerprintMismatch("peer states come from different architectures")
    mu = np.mean(np.stack([s.mu_block for s in states]), axis=0)
    rho = np.mean(np.stack([s.rho_block for s in states]), axis=0)
    return mu, rho


def node_update(
    state: StateVector,
    peer_states: Mapping[int, StateVector],
    dual: DualState,
    net: MapperNet,
    data: PointSet,
    cfg: ConsensusConfig,
    stream: Stream,
    opt_mu=None,
    opt_rho=None,
    round_no: int = 0,
) -> tuple[StateVector, DualState, list[dict]]:
    """Average targets, dual ascent, then local primal iterations.

    ``peer_states`` holds the other agents' states keyed by peer id (an entry
    that is the very ``state`` object is ignored). States are averaged in
    peer-id order so the result does not depend on message arrival order.
    """
    others = [peer_states[k] for k in sorted(peer_states) if peer_states[k] is not state]
    if any(s.fingerprint != state.fingerprint for s in others):
        raise FingerprintMismatch("peer states come from different architectures")
    t_mu, t_rho = consensus_targets([state, *others])
    scale = cfg.penalty_scale(round_no)
    new_dual = DualState(
        dual.duals_mu + scale * cfg.step_mu * (state.mu_block - t_mu),
        dual.duals_rho + scale * cfg.step_rho * (state.rho_block - t_rho),
        t_mu,
        t_rho,
    )
    net.load_state(state)
    records = primal_step(net, data, new_dual, cfg, stream, opt_mu, opt_rho, round_no)
    return net.state(), new_dual, records


def consensus_residual(states: list[StateVector], block: str = "mu") -> float:
    """max_{i,j} ||theta_i - theta_j|| / ||mean theta|| over the chosen block (``mu``, ``rho`` or ``all``)."""
    if block == "mu":
        vecs = np.stack([s.mu_block for s in states])
    elif block == "rho":
        vecs = np.stack([s.rho_block for s in states])
    else:
        vecs = np.stack([s.concat() for s in states])
    mean_norm = np.linalg.norm(vecs.mean(axis=0))
    if mean_norm == 0:
        return 0.0
    diffs = vecs[:, None, :] - vecs[None, :, :]
    return float(np.sqrt((diffs**2).sum(axis=-1)).max() / mean_norm)


def validation_loss(net: MapperNet, holdout: PointSet, passes: int = 50, stream: Stream | None = None) -> float:
    """Mean BCE of the ``passes``-sample mean prediction against holdout labels."""
    if holdout is None or len(holdout) == 0:
        raise ValueError("validation needs a non-empty holdout set")
    mean, _ = predict_with_uncertainty(net, holdout.xy, passes, stream or Stream(0, ("validation",)))
    return bce_loss(Tensor(mean), holdout.label).item()


METRIC_FIELDS = ["agent", "round", "iter", "pred_loss", "loss_mu", "loss_rho", "consensus_residual", "validation_loss"]


def write_metrics(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})

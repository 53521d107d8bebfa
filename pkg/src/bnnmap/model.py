"""Bayesian implicit occupancy network: SIREN input layer, Bayesian linear stack, sigmoid head."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .autodiff import (
    Tensor,
    Stream,
    add,
    matmul,
    mul,
    relu,
    reshape,
    sigmoid,
    sin,
    softplus,
    transpose,
)

DEFAULT_WIDTH = 256
DEFAULT_DEPTH = 4
DEFAULT_OMEGA = 30.0
INIT_RHO = -5.0
CHECKPOINT_VERSION = 1


@dataclass
class GaussianParam:
    """Mean and pre-softplus spread of a factorized Gaussian weight tensor."""

    mu: Tensor
    rho: Tensor

    def __post_init__(self):
        if self.mu.shape != self.rho.shape:
            raise ValueError(f"mu {list(self.mu.shape)} and rho {list(self.rho.shape)} differ")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mu.shape

    def sigma(self) -> np.ndarray:
        r = self.rho.data
        return np.maximum(r, 0.0) + np.log1p(np.exp(-np.abs(r)))

    def sample(self, eps: np.ndarray, detach_rho: bool = False) -> Tensor:
        """Reparameterized draw mu + softplus(rho) * eps."""
        rho = self.rho.detach() if detach_rho else self.rho
        return add(self.mu, mul(softplus(rho), Tensor._wrap(eps)))


@dataclass
class SirenLayer:
    weight: Tensor
    bias: Tensor
    omega: float = DEFAULT_OMEGA

    def __call__(self, x: Tensor) -> Tensor:
        return sin(mul(self.omega, _affine(x, self.weight, self.bias)))


@dataclass
class BayesianLinear:
    weight: GaussianParam
    bias: GaussianParam
    activation: str = "relu"

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor, eps_w: np.ndarray, eps_b: np.ndarray, detach_rho: bool = False) -> Tensor:
        w = self.weight.sample(eps_w, detach_rho)
        b = self.bias.sample(eps_b, detach_rho)
        h = _affine(x, w, b)
        if self.activation == "relu":
            return relu(h)
        if self.activation == "none":
            return h
        raise ValueError(f"unknown activation {self.activation!r}")


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    # bias broadcast over rows as ones[n,1] @ b[1,out]
    ones = Tensor._wrap(np.ones((x.shape[0], 1)))
    return add(matmul(x, transpose(w)), matmul(ones, reshape(b, (1, b.shape[0]))))


@dataclass
class StateVector:
    """Flat snapshot of every network parameter, the unit exchanged between agents.

    ``mu_block`` holds the deterministic SIREN parameters followed by every
    Bayesian mean; ``rho_block`` holds the Bayesian spreads in the same layer
    order.
    """

    mu_block: np.ndarray
    rho_block: np.ndarray
    fingerprint: bytes

    def __post_init__(self):
        self.mu_block = np.asarray(self.mu_block, dtype=np.float64)
        self.rho_block = np.asarray(self.rho_block, dtype=np.float64)
        if len(self.fingerprint) != 8:
            raise ValueError("fingerprint must be 8 bytes")

    def copy(self) -> "StateVector":
        return StateVector(self.mu_block.copy(), self.rho_block.copy(), self.fingerprint)

    def concat(self) -> np.ndarray:
        return np.concatenate([self.mu_block, self.rho_block])

    def __eq__(self, other) -> bool:
        if not isinstance(other, StateVector):
            return NotImplemented
        return (
            self.fingerprint == other.fingerprint
            and np.array_equal(self.mu_block, other.mu_block)
            and np.array_equal(self.rho_block, other.rho_block)
        )


def fingerprint_of(shapes: Sequence[tuple[str, tuple[int, ...]]]) -> bytes:
    return hashlib.blake2b(json.dumps([[n, list(s)] for n, s in shapes]).encode(), digest_size=8).digest()


@dataclass
class MapperNet:
    siren: SirenLayer
    hidden: list[BayesianLinear]
    output: BayesianLinear
    input_dim: int = 2
    _fingerprint: bytes = field(default=b"", repr=False)

    @property
    def bayes_layers(self) -> list[BayesianLinear]:
        return [*self.hidden, self.output]

    @property
    def width(self) -> int:
        return self.siren.weight.shape[0]

    def mu_params(self) -> list[Tensor]:
        out = [self.siren.weight, self.siren.bias]
        for layer in self.bayes_layers:
            out += [layer.weight.mu, layer.bias.mu]
        return out

    def rho_params(self) -> list[Tensor]:
        out = []
        for layer in self.bayes_layers:
            out += [layer.weight.rho, layer.bias.rho]
        return out

    def parameters(self) -> list[Tensor]:
        return self.mu_params() + self.rho_params()

    def named_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        names = [("siren.weight", self.siren.weight.shape), ("siren.bias", self.siren.bias.shape)]
        for i, layer in enumerate(self.bayes_layers):
            names += [(f"bayes{i}.weight", layer.weight.shape), (f"bayes{i}.bias", layer.bias.shape)]
        return names

    @property
    def fingerprint(self) -> bytes:
        if not self._fingerprint:
            self._fingerprint = fingerprint_of(self.named_shapes() + [("omega", (int(self.siren.omega * 1000),))])
        return self._fingerprint

    @property
    def n_mu(self) -> int:
        return sum(p.size for p in self.mu_params())

    @property
    def n_rho(self) -> int:
        return sum(p.size for p in self.rho_params())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def eps_shapes(self) -> Iterator[tuple[tuple[int, ...], tuple[int, ...]]]:
        for layer in self.bayes_layers:
            yield layer.weight.shape, layer.bias.shape

    def sample_eps(self, stream: Stream) -> list[tuple[np.ndarray, np.ndarray]]:
        """Draw one noise tensor per Bayesian weight and bias."""
        eps = []
        for i, (ws, bs) in enumerate(self.eps_shapes()):
            s = stream.child("layer", i)
            eps.append((s.normal(ws), s.normal(bs)))
        return eps

    def state(self) -> StateVector:
        return StateVector(
            np.concatenate([p.data.ravel() for p in self.mu_params()]),
            np.concatenate([p.data.ravel() for p in self.rho_params()]),
            self.fingerprint,
        )

    def load_state(self, state: StateVector) -> None:
        if state.fingerprint != self.fingerprint:
            raise ValueError("state fingerprint does not match this architecture")
        for params, block in ((self.mu_params(), state.mu_block), (self.rho_params(), state.rho_block)):
            if block.size != sum(p.size for p in params):
                raise ValueError("state block length does not match architecture")
            _scatter(params, block)

    def copy(self) -> "MapperNet":
        net = build_mapper(self.width, len(self.hidden), self.siren.omega)
        net.load_state(self.state())
        return net


def _scatter(params: list[Tensor], block: np.ndarray) -> None:
    off = 0
    for p in params:
        n = p.size
        p.data = block[off : off + n].reshape(p.shape).copy()
        off += n


def split_block(params: list[Tensor], block: np.ndarray) -> list[np.ndarray]:
    """Cut a flat block into arrays shaped like ``params``."""
    out, off = [], 0
    for p in params:
        out.append(block[off : off + p.size].reshape(p.shape))
        off += p.size
    return out


def build_mapper(width: int = DEFAULT_WIDTH, depth: int = DEFAULT_DEPTH, omega: float = DEFAULT_OMEGA) -> MapperNet:
    """Zero-initialized network of the given size (use :func:`init_mapper` for training)."""

    def gp(shape):
        return GaussianParam(Tensor(np.zeros(shape), requires_grad=True), Tensor(np.full(shape, INIT_RHO), requires_grad=True))

    siren = SirenLayer(Tensor(np.zeros((width, 2)), requires_grad=True), Tensor(np.zeros(width), requires_grad=True), omega)
    hidden = [BayesianLinear(gp((width, width)), gp((width,)), "relu") for _ in range(depth)]
    output = BayesianLinear(gp((1, width)), gp((1,)), "none")
    return MapperNet(siren, hidden, output)


def init_mapper(
    seed: int | Stream,
    width: int = DEFAULT_WIDTH,
    depth: int = DEFAULT_DEPTH,
    omega: float = DEFAULT_OMEGA,
    init_rho: float = INIT_RHO,
    siren_bound: float | None = None,
) -> MapperNet:
    """Randomly initialized mapper.

    SIREN weights ~ U(+-sqrt(6/in)/omega), SIREN biases ~ U(+-1/sqrt(in)),
    Bayesian means ~ U(+-sqrt(1/in)), every rho = ``init_rho``.
    """
    stream = seed if isinstance(seed, Stream) else Stream(seed, ("init",))
    net = build_mapper(width, depth, omega)
    s = stream.child("siren")
    fan_in = 2
    bound = math.sqrt(6.0 / fan_in) / omega if siren_bound is None else siren_bound
    net.siren.weight.data = s.uniform(-bound, bound, (width, fan_in))
    net.siren.bias.data = s.uniform(-1 / math.sqrt(fan_in), 1 / math.sqrt(fan_in), (width,))
    for i, layer in enumerate(net.bayes_layers):
        s = stream.child("bayes", i)
        k = 1.0 / math.sqrt(layer.in_features)
        layer.weight.mu.data = s.uniform(-k, k, layer.weight.shape)
        layer.bias.mu.data = s.uniform(-k, k, layer.bias.shape)
        layer.weight.rho.data = np.full(layer.weight.shape, float(init_rho))
        layer.bias.rho.data = np.full(layer.bias.shape, float(init_rho))
    return net


def _coords_tensor(coords) -> Tensor:
    c = coords if isinstance(coords, Tensor) else Tensor(coords)
    if c.data.ndim != 2 or c.shape[1] != 2:
        raise ValueError(f"coords must be n x 2, got {list(c.shape)}")
    return c


def forward_with_eps(
    net: MapperNet,
    coords,
    eps: list[tuple[np.ndarray, np.ndarray]],
    detach_rho: bool = False,
) -> Tensor:
    """Forward pass with explicitly supplied noise (frozen-epsilon evaluation)."""
    h = net.siren(_coords_tensor(coords))
    for layer, (ew, eb) in zip(net.bayes_layers, eps):
        h = layer(h, ew, eb, detach_rho)
    return sigmoid(h)


def forward_sample(net: MapperNet, coords, stream: Stream, detach_rho: bool = False) -> Tensor:
    """One stochastic pass, returns n x 1 occupancy probabilities.

    Non-finite coordinates raise :class:`~bnnmap.autodiff.NonFiniteError`.
    """
    return forward_with_eps(net, coords, net.sample_eps(stream), detach_rho)


def predict_with_uncertainty(
    net: MapperNet,
    coords,
    passes: int = 50,
    stream: Stream | None = None,
    chunk: int = 8192,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-point sample mean and sample std (ddof=1) over ``passes`` forward samples.

    The same weight draw is used for every point within one pass.
    """
    if passes < 2:
        raise ValueError("passes must be >= 2")
    c = np.asarray(coords.data if isinstance(coords, Tensor) else coords, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != 2:
        raise ValueError(f"coords must be n x 2, got {list(c.shape)}")
    stream = stream if stream is not None else Stream(0, ("predict",))
    n = c.shape[0]
    mean = np.zeros(n)
    m2 = np.zeros(n)
    for k in range(passes):
        eps = net.sample_eps(stream.child("pass", k))
        y = np.concatenate(
            [forward_with_eps(net, c[i : i + chunk], eps).data[:, 0] for i in range(0, n, chunk)]
        ) if n else np.zeros(0)
        # Welford update
        delta = y - mean
        mean += delta / (k + 1)
        m2 += delta * (y - mean)
    std = np.sqrt(m2 / (passes - 1))
    return mean, std


def save_checkpoint(net: MapperNet, path: str | Path, meta: dict | None = None) -> Path:
    """Write a versioned ``.npz`` checkpoint (see README for the field list)."""
    path = Path(path)
    st = net.state()
    header = {
        "version": CHECKPOINT_VERSION,
        "width": net.width,
        "depth": len(net.hidden),
        "omega": net.siren.omega,
        "shapes": [[n, list(s)] for n, s in net.named_shapes()],
        "fingerprint": st.fingerprint.hex(),
        "meta": meta or {},
    }
    with open(path, "wb") as fh:
        np.savez(fh, header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), mu=st.mu_block, rho=st.rho_block)
    return path


def load_checkpoint(path: str | Path) -> tuple[MapperNet, dict]:
    with np.load(Path(path)) as z:
        header = json.loads(z["header"].tobytes().decode())
        mu, rho = z["mu"], z["rho"]
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    net = build_mapper(header["width"], header["depth"], header["omega"])
    if [[n, list(s)] for n, s in net.named_shapes()] != header["shapes"]:
        raise ValueError("checkpoint layer shapes do not match the rebuilt network")
    net.load_state(StateVector(mu, rho, bytes.fromhex(header["fingerprint"])))
    return net, header

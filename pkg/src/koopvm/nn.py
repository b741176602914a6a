"""Dense layers, MLPs and the per-stage building blocks of the Koopman model."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import numcore as nc
from .numcore import Tensor

LOG_SIGMA_MIN = -10.0
LOG_SIGMA_MAX = 10.0


class Module:
    """Minimal parameter container.

    Parameters are discovered by walking instance attributes: Tensors with
    ``requires_grad``, nested Modules, and lists of Modules.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise nc.ShapeError(f"load_state_dict: {name} has shape {value.shape}, expected {p.shape}")
            p.data[...] = value

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def uniform_init(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...], gain: float = 1.0) -> np.ndarray:
    bound = gain / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class DenseLayer(Module):
    """Affine map ``x @ W.T + b`` followed by an elementwise activation."""

    ACTIVATIONS = ("relu", "identity")

    def __init__(self, in_features: int, out_features: int, activation: str = "identity", rng: np.random.Generator | None = None):
        if activation not in self.ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if in_features < 1 or out_features < 1:
            raise ValueError("layer widths must be positive")
        self.activation = activation
        if rng is None:
            w = np.zeros((out_features, in_features))
        else:
            w = uniform_init(rng, in_features, (out_features, in_features))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        x = nc.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise nc.ShapeError(f"dense: input shape {x.shape} does not match layer input width {self.in_features}")
        out = nc.add(nc.matmul(x, self.weight.T), self.bias)
        return nc.relu(out) if self.activation == "relu" else out


class MLP(Module):
    """Stack of dense layers; hidden layers use ReLU and the last is linear."""

    def __init__(self, widths: list[int], rng: np.random.Generator | None = None):
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        n = len(widths) - 1
        self.layers = [
            DenseLayer(widths[i], widths[i + 1], "relu" if i < n - 1 else "identity", rng)
            for i in range(n)
        ]

    @classmethod
    def from_layers(cls, layers: list[DenseLayer]) -> "MLP":
        for a, b in zip(layers, layers[1:]):
            if a.out_features != b.in_features:
                raise nc.ShapeError(f"mlp: layer widths do not chain ({a.out_features} -> {b.in_features})")
        net = cls.__new__(cls)
        net.layers = list(layers)
        return net

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].in_features] + [layer.out_features for layer in self.layers]

    @property
    def in_features(self) -> int:
        return self.layers[0].in_features

    @property
    def out_features(self) -> int:
        return self.layers[-1].out_features

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


def mlp_forward(net: MLP, x) -> Tensor:
    return net(nc.as_tensor(x))


def encoder_widths(p: int, d_h: int) -> list[int]:
    """Two hidden widths on the geometric chain from ``p`` to ``d_h``."""
    ratio = d_h / p
    h1 = max(1, round(p * ratio ** (1 / 3)))
    h2 = max(1, round(p * ratio ** (2 / 3)))
    return [p, h1, h2, d_h]


def make_encoder(p: int, d_h: int, rng: np.random.Generator | None = None) -> MLP:
    return MLP(encoder_widths(p, d_h), rng)


def make_decoder(d_h: int, p: int, rng: np.random.Generator | None = None) -> MLP:
    return MLP(encoder_widths(p, d_h)[::-1], rng)


def encode(encoder: MLP, x) -> Tensor:
    return encoder(nc.as_tensor(x))


def decode(decoder: MLP, h) -> Tensor:
    return decoder(nc.as_tensor(h))


class GaussianHead(Module):
    """Two single-layer maps giving the mean and log standard deviation of the latent."""

    def __init__(self, d_h: int, rng: np.random.Generator | None = None):
        self.mu = DenseLayer(d_h, d_h, "identity", rng)
        self.log_sigma = DenseLayer(d_h, d_h, "identity", rng)

    def __call__(self, h_hat: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        mu = self.mu(h_hat)
        log_sigma = nc.clamp(self.log_sigma(h_hat), LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        return mu, nc.exp(log_sigma), log_sigma


def gaussian_encode(head: GaussianHead, h_hat) -> tuple[Tensor, Tensor]:
    mu, sigma, _ = head(nc.as_tensor(h_hat))
    return mu, sigma


def sample_latent(mu, sigma, eps: np.ndarray | None = None) -> Tensor:
    """Reparameterised draw ``mu + eps * sigma``; ``eps=None`` means evaluation (eps = 0).

    ``eps`` enters the graph as a constant so gradients reach ``mu`` and ``sigma`` only.
    """
    mu, sigma = nc.as_tensor(mu), nc.as_tensor(sigma)
    if mu.shape != sigma.shape:
        raise nc.ShapeError(f"sample_latent: mu {mu.shape} and sigma {sigma.shape} differ")
    if eps is None:
        return mu
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != mu.shape:
        raise nc.ShapeError(f"sample_latent: eps {eps.shape} does not match mu {mu.shape}")
    return nc.add(mu, nc.mul(Tensor(eps), sigma))


class AuxiliaryEigenNet(Module):
    """Maps the upstream latent state to the eigenvalues of a diagonal transition."""

    def __init__(self, d_h: int, rng: np.random.Generator | None = None):
        self.net = MLP([d_h, d_h, d_h], rng)

    @property
    def d_h(self) -> int:
        return self.net.out_features

    def __call__(self, h_prev: Tensor) -> Tensor:
        return self.net(h_prev)


def eigen_aux_forward(aux: AuxiliaryEigenNet, h_prev) -> Tensor:
    return aux(nc.as_tensor(h_prev))

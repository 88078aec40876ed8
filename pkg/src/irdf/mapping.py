"""Reproduction mapping ``T(z)`` whose pushforward of a fixed basis law is ``Q_Y``."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigurationError, DimensionError

BASIS_KINDS = ("standard_gaussian", "uniform_cube")
HEADS = ("linear", "softmax")


@dataclass(frozen=True)
class BasisSpec:
    kind: str = "standard_gaussian"
    dim: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in BASIS_KINDS:
            raise ConfigurationError(f"unknown basis kind {self.kind!r}")
        if self.dim < 1:
            raise ConfigurationError("basis dimension must be >= 1")


def sample_basis(spec: BasisSpec, m: int, rng: np.random.Generator | None = None) -> np.ndarray:
    if m < 1:
        raise ConfigurationError("need at least one basis sample")
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    if spec.kind == "uniform_cube":
        return rng.random((m, spec.dim))
    return rng.standard_normal((m, spec.dim))


@dataclass(eq=False)
class MappingModel:
    params: nn.NetworkParameters
    basis: BasisSpec
    head: str = "linear"
    opt_state: nn.OptimizerState | None = None

    def __post_init__(self):
        if self.head not in HEADS:
            raise ConfigurationError(f"unknown output head {self.head!r}")
        if self.params.input_width != self.basis.dim:
            raise ConfigurationError("network input width differs from basis dimension")

    @property
    def y_dim(self) -> int:
        return self.params.output_width

    def snapshot(self) -> "MappingModel":
        return MappingModel(self.params, self.basis, self.head, self.opt_state)

    def pushforward(self):
        """A sampler ``(count, rng) -> y`` bound to the current parameters."""
        frozen = self.snapshot()

        def draw(count: int, rng: np.random.Generator) -> np.ndarray:
            return map_reproductions(frozen, sample_basis(frozen.basis, count, rng))

        return draw


def make_mapping(
    basis: BasisSpec,
    y_dim: int,
    hidden: tuple[int, ...] = (32, 32),
    activation: str = "relu",
    head: str = "linear",
    seed: int = 0,
    optimizer: str = "adam",
) -> MappingModel:
    spec = nn.mlp_spec((basis.dim, *hidden, y_dim), hidden=activation, output="identity")
    params = nn.init_network(spec, seed)
    return MappingModel(params, basis, head, nn.init_optimizer(params, optimizer))


def _softmax(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def map_with_tape(model: MappingModel, z) -> tuple[np.ndarray, tuple]:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != model.basis.dim:
        raise DimensionError(f"z has width {z.shape[1]}, basis dimension is {model.basis.dim}")
    out, tape = nn.forward(model.params, z)
    if model.head == "softmax":
        out = _softmax(out)
    return out, (tape, out)


def map_reproductions(model: MappingModel, z) -> np.ndarray:
    """Push a batch of basis samples through ``T``; rows land in the reproduction space."""
    return map_with_tape(model, z)[0]


def mapping_backward(model: MappingModel, tape, grad_y: np.ndarray) -> nn.ParameterGradients:
    net_tape, y = tape
    if model.head == "softmax":
        grad_y = y * (grad_y - np.sum(grad_y * y, axis=1, keepdims=True))
    return nn.backward(model.params, net_tape, grad_y)


def write_reproductions_csv(path, y: np.ndarray) -> None:
    y = np.atleast_2d(y)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"y{k}" for k in range(y.shape[1])])
        for row in y:
            w.writerow([repr(float(v)) for v in row])

"""Small feedforward networks with exact reverse-mode gradients.

Everything is float64 numpy. Parameters are treated as immutable snapshots:
``optimizer_step`` returns a fresh :class:`NetworkParameters` rather than
mutating in place, so a snapshot can be shared between runs safely.

Weights follow the ``(out, in)`` convention, i.e. a layer computes
``act(h @ W.T + b)`` on a batch ``h`` of shape ``(batch, in)``.
"""
from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, NumericalError

ACTIVATIONS = ("identity", "relu", "tanh", "softplus")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    input_width: int
    output_width: int
    activation: str = "relu"

    def __post_init__(self):
        if self.input_width < 1 or self.output_width < 1:
            raise ConfigurationError(f"layer widths must be >= 1, got {self}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")


def mlp_spec(widths: Sequence[int], hidden: str = "relu", output: str = "identity") -> list[LayerSpec]:
    """Chain ``widths`` into layer specs: hidden activations, then ``output``."""
    if len(widths) < 2:
        raise ConfigurationError("need at least an input and an output width")
    n = len(widths) - 1
    return [
        LayerSpec(widths[k], widths[k + 1], output if k == n - 1 else hidden)
        for k in range(n)
    ]


def _check_chain(spec: Sequence[LayerSpec]) -> None:
    if not spec:
        raise ConfigurationError("network spec is empty")
    for a, b in zip(spec, spec[1:]):
        if a.output_width != b.input_width:
            raise ConfigurationError(
                f"layer widths do not chain: {a.output_width} -> {b.input_width}"
            )


@dataclass(frozen=True, eq=False)
class NetworkParameters:
    spec: tuple[LayerSpec, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        _check_chain(self.spec)
        if not (len(self.spec) == len(self.weights) == len(self.biases)):
            raise ConfigurationError("spec, weights and biases differ in length")
        for ls, w, b in zip(self.spec, self.weights, self.biases):
            if w.shape != (ls.output_width, ls.input_width) or b.shape != (ls.output_width,):
                raise ConfigurationError(f"parameter shapes {w.shape}, {b.shape} do not match {ls}")

    @property
    def input_width(self) -> int:
        return self.spec[0].input_width

    @property
    def output_width(self) -> int:
        return self.spec[-1].output_width

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def arrays(self) -> list[np.ndarray]:
        """Weights and biases interleaved: ``[W0, b0, W1, b1, ...]``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, flat: np.ndarray) -> "NetworkParameters":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise DimensionError(f"expected {self.n_params} values, got {flat.shape}")
        arrays, k = [], 0
        for a in self.arrays():
            arrays.append(flat[k:k + a.size].reshape(a.shape).copy())
            k += a.size
        return NetworkParameters(self.spec, tuple(arrays[0::2]), tuple(arrays[1::2]))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def copy(self) -> "NetworkParameters":
        return NetworkParameters(
            self.spec,
            tuple(w.copy() for w in self.weights),
            tuple(b.copy() for b in self.biases),
        )

    def equals(self, other: "NetworkParameters") -> bool:
        return self.spec == other.spec and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )


@dataclass(frozen=True, eq=False)
class ParameterGradients:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    inputs: np.ndarray  # gradient with respect to the network input batch

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


@dataclass(eq=False)
class ForwardTape:
    """Per-layer inputs and pre-activations recorded by :func:`forward`."""

    params: NetworkParameters
    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)
    squeeze: bool = False

    def replay(self) -> np.ndarray:
        return _activate(self.params.spec[-1].activation, self.preacts[-1])


def init_network(spec: Sequence[LayerSpec], seed: int | np.random.Generator) -> NetworkParameters:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    spec = tuple(spec)
    _check_chain(spec)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights, biases = [], []
    for ls in spec:
        bound = 1.0 / np.sqrt(ls.input_width)
        weights.append(rng.uniform(-bound, bound, size=(ls.output_width, ls.input_width)))
        biases.append(np.zeros(ls.output_width))
    return NetworkParameters(spec, tuple(weights), tuple(biases))


def _activate(kind: str, a: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return a
    if kind == "relu":
        return np.maximum(a, 0.0)
    if kind == "tanh":
        return np.tanh(a)
    return np.logaddexp(0.0, a)  # softplus


def _scale_by_activation_grad(kind: str, delta: np.ndarray, a: np.ndarray, h: np.ndarray) -> np.ndarray:
    """``delta * act'(a)`` using the recorded output ``h = act(a)`` where cheaper."""
    if kind == "identity":
        return delta
    if kind == "relu":
        return delta * (a > 0)
    if kind == "tanh":
        return delta * (1.0 - h * h)
    # d softplus / da = sigmoid(a), written to avoid overflow
    return delta * np.exp(-np.logaddexp(0.0, -a))


def forward(params: NetworkParameters, inputs) -> tuple[np.ndarray, ForwardTape]:
    """Run the network on a vector ``(in,)`` or a batch ``(batch, in)``."""
    h = np.asarray(inputs, dtype=np.float64)
    squeeze = h.ndim == 1
    if squeeze:
        h = h[None, :]
    if h.ndim != 2 or h.shape[1] != params.input_width:
        raise DimensionError(
            f"input of shape {np.shape(inputs)} does not match input width {params.input_width}"
        )
    tape = ForwardTape(params, squeeze=squeeze)
    for ls, w, b in zip(params.spec, params.weights, params.biases):
        tape.inputs.append(h)
        a = h @ w.T + b
        tape.preacts.append(a)
        h = _activate(ls.activation, a)
        tape.outputs.append(h)
    return (h[0] if squeeze else h), tape


def _check_tape(params: NetworkParameters, tape: ForwardTape, output_grad) -> np.ndarray:
    if tape.params is not params:
        raise ConfigurationError("tape was recorded with different parameters")
    delta = np.asarray(output_grad, dtype=np.float64)
    if tape.squeeze:
        delta = delta[None, :]
    if delta.shape != tape.preacts[-1].shape:
        raise DimensionError(
            f"output gradient shape {np.shape(output_grad)} does not match output {tape.preacts[-1].shape}"
        )
    return delta


def backward(params: NetworkParameters, tape: ForwardTape, output_grad) -> ParameterGradients:
    """Gradients of a scalar whose derivative w.r.t. the output is ``output_grad``.

    Batch contributions are summed, so ``output_grad`` must already carry any
    ``1/batch`` factor of a mean loss.
    """
    delta = _check_tape(params, tape, output_grad)
    n = len(params.spec)
    gw, gb = [None] * n, [None] * n
    for k in range(n - 1, -1, -1):
        delta = _scale_by_activation_grad(params.spec[k].activation, delta, tape.preacts[k], tape.outputs[k])
        gw[k] = delta.T @ tape.inputs[k]
        gb[k] = delta.sum(axis=0)
        delta = delta @ params.weights[k]
    return ParameterGradients(tuple(gw), tuple(gb), delta[0] if tape.squeeze else delta)


def input_gradient(params: NetworkParameters, tape: ForwardTape, output_grad) -> np.ndarray:
    """Like :func:`backward` but only the input gradient; skips the weight products."""
    delta = _check_tape(params, tape, output_grad)
    for k in range(len(params.spec) - 1, -1, -1):
        delta = _scale_by_activation_grad(params.spec[k].activation, delta, tape.preacts[k], tape.outputs[k])
        delta = delta @ params.weights[k]
    return delta[0] if tape.squeeze else delta


@dataclass(frozen=True, eq=False)
class OptimizerState:
    """Adam moments (unused in ``sgd`` mode) and the step counter."""

    mode: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: tuple[np.ndarray, ...] = ()
    v: tuple[np.ndarray, ...] = ()

    def __post_init__(self):
        if self.mode not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer mode {self.mode!r}")


def init_optimizer(params: NetworkParameters, mode: str = "adam", **hyper) -> OptimizerState:
    zeros = tuple(np.zeros_like(a) for a in params.arrays())
    return OptimizerState(mode=mode, m=zeros, v=tuple(z.copy() for z in zeros), **hyper)


def optimizer_step(
    params: NetworkParameters,
    grads: ParameterGradients,
    state: OptimizerState,
    lr: float,
) -> tuple[NetworkParameters, OptimizerState]:
    if not grads.is_finite():
        raise NumericalError("non-finite gradient; optimizer step rejected")
    ps, gs = params.arrays(), grads.arrays()
    if [p.shape for p in ps] != [g.shape for g in gs]:
        raise DimensionError("gradient shapes do not match parameters")
    t = state.step + 1
    if state.mode == "sgd":
        new = [p - lr * g for p, g in zip(ps, gs)]
        m, v = state.m, state.v
    else:
        b1, b2 = state.beta1, state.beta2
        m = tuple(b1 * mi + (1 - b1) * g for mi, g in zip(state.m, gs))
        v = tuple(b2 * vi + (1 - b2) * g * g for vi, g in zip(state.v, gs))
        c1, c2 = 1 - b1 ** t, 1 - b2 ** t
        new = [
            p - lr * (mi / c1) / (np.sqrt(vi / c2) + state.eps)
            for p, mi, vi in zip(ps, m, v)
        ]
    out = NetworkParameters(params.spec, tuple(new[0::2]), tuple(new[1::2]))
    return out, OptimizerState(state.mode, state.beta1, state.beta2, state.eps, t, m, v)


def save_network(path, params: NetworkParameters, seed: int | None = None, meta: dict | None = None) -> None:
    """Write a versioned ``.npz`` checkpoint (JSON header + raw float64 arrays)."""
    header = {
        "format": "irdf-network",
        "version": CHECKPOINT_VERSION,
        "seed": seed,
        "spec": [[ls.input_width, ls.output_width, ls.activation] for ls in params.spec],
        "meta": meta or {},
    }
    arrays = {f"a{k}": a for k, a in enumerate(params.arrays())}
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)
    tmp.replace(path)


def load_network(path) -> tuple[NetworkParameters, dict]:
    """Inverse of :func:`save_network`; returns ``(params, header)``."""
    try:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(data["header"].tobytes().decode())
            if header.get("format") != "irdf-network":
                raise ConfigurationError(f"{path} is not a network checkpoint")
            if header.get("version") != CHECKPOINT_VERSION:
                raise ConfigurationError(f"unsupported checkpoint version {header.get('version')}")
            spec = tuple(LayerSpec(*row) for row in header["spec"])
            arrays = [data[f"a{k}"] for k in range(2 * len(spec))]
    except (zipfile.BadZipFile, KeyError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"corrupt checkpoint {path}: {exc}") from exc
    return NetworkParameters(spec, tuple(arrays[0::2]), tuple(arrays[1::2])), header

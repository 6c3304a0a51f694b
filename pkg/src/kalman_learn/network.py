"""Feed-forward networks over a flat parameter vector.

Parameters are laid out layer-major; inside a layer the weight block
(``width_out x width_in``, row-major) comes before the bias block.  The same
layout serves a single vector ``alpha`` of shape ``(P,)`` and a parameter
ensemble ``A`` of shape ``(P, E)``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .ensemble import STREAM_INIT, child_rng

__all__ = [
    "Layer",
    "NetworkSpec",
    "ParamLayout",
    "Dataset",
    "mlp",
    "param_layout",
    "flatten",
    "unflatten",
    "forward",
    "forward_ensemble",
    "init_ensemble",
    "loss_and_grad",
    "sgd_step",
]

ACTIVATIONS = ("relu", "linear", "softmax")

# members evaluated per task by forward_ensemble; fixed so results do not
# depend on the thread count
MEMBER_CHUNK = 64


@dataclass(frozen=True)
class Layer:
    width_in: int
    width_out: int
    activation: str = "relu"


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple

    def __post_init__(self):
        layers = tuple(l if isinstance(l, Layer) else Layer(*l) for l in self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ValueError("a network needs at least one layer")
        for i, layer in enumerate(layers):
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"layer {i}: unknown activation {layer.activation!r}")
            if layer.width_in < 1 or layer.width_out < 1:
                raise ValueError(f"layer {i}: widths must be positive")
            if layer.activation == "softmax" and i != len(layers) - 1:
                raise ValueError("softmax is only allowed on the final layer")
        for i, (a, b) in enumerate(zip(layers, layers[1:])):
            if a.width_out != b.width_in:
                raise ValueError(
                    f"layer {i} outputs {a.width_out} but layer {i + 1} expects {b.width_in}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].width_in

    @property
    def output_dim(self) -> int:
        return self.layers[-1].width_out


def mlp(widths, hidden="relu", output="linear") -> NetworkSpec:
    """Build a spec from a width list, e.g. ``mlp([13, 32, 32, 1])``."""
    n = len(widths) - 1
    return NetworkSpec(
        tuple(Layer(widths[i], widths[i + 1], output if i == n - 1 else hidden) for i in range(n))
    )


@dataclass(frozen=True)
class ParamLayout:
    """Offsets of each layer's weight and bias blocks in the flat vector."""

    total_dim: int
    weight_slices: tuple
    bias_slices: tuple
    weight_shapes: tuple

    def locate(self, index: int):
        """Map a flat index to ``(layer, 'weight'|'bias', position)``."""
        if not 0 <= index < self.total_dim:
            raise IndexError(index)
        for l, (ws, bs) in enumerate(zip(self.weight_slices, self.bias_slices)):
            if ws.start <= index < ws.stop:
                return l, "weight", np.unravel_index(index - ws.start, self.weight_shapes[l])
            if bs.start <= index < bs.stop:
                return l, "bias", (index - bs.start,)
        raise AssertionError("layout does not cover index")  # pragma: no cover


def param_layout(spec: NetworkSpec) -> ParamLayout:
    offset = 0
    wsl, bsl, shapes = [], [], []
    for layer in spec.layers:
        nw = layer.width_in * layer.width_out
        wsl.append(slice(offset, offset + nw))
        offset += nw
        bsl.append(slice(offset, offset + layer.width_out))
        offset += layer.width_out
        shapes.append((layer.width_out, layer.width_in))
    return ParamLayout(offset, tuple(wsl), tuple(bsl), tuple(shapes))


def unflatten(layout: ParamLayout, alpha):
    """Split a flat vector into ``[(W, b), ...]`` views."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (layout.total_dim,):
        raise ValueError(f"expected a vector of length {layout.total_dim}, got shape {alpha.shape}")
    return [
        (alpha[ws].reshape(shape), alpha[bs])
        for ws, bs, shape in zip(layout.weight_slices, layout.bias_slices, layout.weight_shapes)
    ]


def flatten(layout: ParamLayout, params) -> np.ndarray:
    alpha = np.empty(layout.total_dim)
    for (W, b), ws, bs in zip(params, layout.weight_slices, layout.bias_slices):
        alpha[ws] = np.ravel(W)
        alpha[bs] = b
    return alpha


def _activate(h, activation, axis):
    if activation == "relu":
        return np.maximum(h, 0.0)
    if activation == "softmax":
        e = np.exp(h - h.max(axis=axis, keepdims=True))
        return e / e.sum(axis=axis, keepdims=True)
    return h


def forward(spec: NetworkSpec, alpha, x) -> np.ndarray:
    """Evaluate the network for one parameter vector.

    ``x`` may be a single input ``(input_dim,)`` or a batch ``(S, input_dim)``.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if x.shape[-1] != spec.input_dim:
        raise ValueError(f"input has {x.shape[-1]} features, network expects {spec.input_dim}")
    h = x[None] if single else x
    for (W, b), layer in zip(unflatten(param_layout(spec), alpha), spec.layers):
        h = _activate(h @ W.T + b, layer.activation, axis=-1)
    return h[0] if single else h


def _forward_chunk(spec, layout, A, X):
    # A: (P, e) parameter columns, X: (S, input_dim) -> (S, out, e)
    h = None
    for ws, bs, (n_out, n_in), layer in zip(
        layout.weight_slices, layout.bias_slices, layout.weight_shapes, spec.layers
    ):
        W = A[ws].reshape(n_out, n_in, -1)
        if h is None:
            # batched over outputs: (1, S, in) @ (out, in, e) -> (out, S, e)
            z = np.matmul(X[None], W).transpose(1, 0, 2)
        else:
            z = np.einsum("oie,sie->soe", W, h)
        z = z + A[bs][None]
        h = _activate(z, layer.activation, axis=1)
    return h


def forward_ensemble(spec: NetworkSpec, A, X, threads: int = 1) -> np.ndarray:
    """Evaluate every ensemble member on every input.

    Parameters
    ----------
    A : array (P, E)
        Parameter ensemble.
    X : array (S, input_dim)
        Input batch.
    threads : int
        Worker threads; members are split into fixed-size chunks, so the
        result is bit-identical for any thread count.

    Returns
    -------
    array (S, output_dim, E)
    """
    layout = param_layout(spec)
    A = np.asarray(A, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if A.ndim != 2 or A.shape[0] != layout.total_dim:
        raise ValueError(f"parameter ensemble must have {layout.total_dim} rows, got shape {A.shape}")
    if X.shape[1] != spec.input_dim:
        raise ValueError(f"inputs have {X.shape[1]} features, network expects {spec.input_dim}")
    E = A.shape[1]
    starts = range(0, E, MEMBER_CHUNK)
    run = lambda s: _forward_chunk(spec, layout, A[:, s : s + MEMBER_CHUNK], X)
    if threads > 1 and E > MEMBER_CHUNK:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    return parts[0] if len(parts) == 1 else np.concatenate(parts, axis=2)


def init_ensemble(layout: ParamLayout, mean: float, std: float, E: int, seed: int) -> np.ndarray:
    """I.i.d. Gaussian parameter ensemble of shape ``(total_dim, E)``."""
    if E < 2:
        raise ValueError(f"E must be >= 2, got {E}")
    if std < 0:
        raise ValueError(f"std must be nonnegative, got {std}")
    rng = child_rng(seed, STREAM_INIT)
    return mean + std * rng.standard_normal((layout.total_dim, E))


def loss_and_grad(spec: NetworkSpec, alpha, X, Y):
    """Mean over the batch of ``0.5 * ||y - f(x)||^2`` and its gradient.

    Reverse accumulation: the terminal adjoint is the residual and each layer
    passes ``W^T`` times the activation-weighted adjoint downward.
    """
    layout = param_layout(spec)
    params = unflatten(layout, alpha)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    S = X.shape[0]

    acts = [X]
    for (W, b), layer in zip(params, spec.layers):
        acts.append(_activate(acts[-1] @ W.T + b, layer.activation, axis=-1))
    resid = acts[-1] - Y
    loss = 0.5 * np.sum(resid**2) / S

    grad = np.empty(layout.total_dim)
    delta = resid / S  # d loss / d output
    for l in range(len(spec.layers) - 1, -1, -1):
        out = acts[l + 1]
        act = spec.layers[l].activation
        if act == "relu":
            delta = delta * (out > 0)
        elif act == "softmax":
            delta = out * (delta - np.sum(delta * out, axis=1, keepdims=True))
        grad[layout.weight_slices[l]] = (delta.T @ acts[l]).ravel()
        grad[layout.bias_slices[l]] = delta.sum(axis=0)
        if l:
            delta = delta @ params[l][0]
    return loss, grad


def sgd_step(spec: NetworkSpec, alpha, X, Y, lr: float) -> np.ndarray:
    """One plain gradient-descent step on a minibatch."""
    _, grad = loss_and_grad(spec, alpha, X, Y)
    return np.asarray(alpha, dtype=float) - lr * grad


@dataclass
class Dataset:
    """Inputs and targets with an optional per-row split tag."""

    inputs: np.ndarray
    targets: np.ndarray
    split: np.ndarray | None = None
    feature_names: list = field(default_factory=list)
    # standardization statistics kept so predictions can be mapped back
    target_mean: np.ndarray | None = None
    target_std: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        targets = np.asarray(self.targets, dtype=float)
        self.targets = targets[:, None] if targets.ndim == 1 else targets
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError(
                f"{self.inputs.shape[0]} input rows but {self.targets.shape[0]} target rows"
            )
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise ValueError("dataset contains non-finite values")
        if self.split is not None:
            self.split = np.asarray(self.split)
            if self.split.shape != (len(self),):
                raise ValueError("split tags must have one entry per row")

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, which: str) -> "Dataset":
        if self.split is None:
            if which == "train":
                return self
            raise ValueError("dataset has no split tags")
        mask = self.split == which
        return Dataset(
            self.inputs[mask],
            self.targets[mask],
            None,
            self.feature_names,
            self.target_mean,
            self.target_std,
        )

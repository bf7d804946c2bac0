"""Small dense-network engine whose matrix products go through a GEMM backend.

Only the linear maps are delegated to the backend; bias additions and
nonlinearities are computed exactly. Swapping ``net.backend`` between an
:class:`~ogemm.emulator.ExactBackend` and an
:class:`~ogemm.emulator.OpticalBackend` gives the exact, physics-aware and
hybrid training regimes.

Scaling of operands sent to the emulator: stored weights follow the
``max(1, max|W|)`` rule; transient data (activations, back-propagated
gradients) are normalised by their batch maximum.
"""

from __future__ import annotations

import itertools
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .emulator import ExactBackend
from .errors import DomainError, StateError, TrainingError

ACTIVATIONS = ("tanh", "relu", "linear", "softmax")
CHECKPOINT_VERSION = 1
_NET_IDS = itertools.count()


class DenseNet:
    """Dense layers with weights stored (out, in).

    ``version`` counts parameter updates; backends may cache a programmed
    weight matrix per version, so code editing ``weights`` in place must
    call :meth:`touch` afterwards.
    """

    def __init__(self, dims: Sequence[int], activations: Sequence[str], backend=None,
                 seed: int = 0, weight_scale: str = "unit"):
        dims = [int(d) for d in dims]
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise DomainError(f"bad layer dims {dims}")
        if len(activations) != len(dims) - 1:
            raise DomainError("need one activation per dense layer")
        for a in activations:
            if a not in ACTIVATIONS:
                raise DomainError(f"unknown activation {a!r}")
        if "softmax" in activations[:-1]:
            raise DomainError("softmax is only supported on the output layer")
        self.dims = dims
        self.activations = list(activations)
        self.backend = backend if backend is not None else ExactBackend()
        self.weight_scale = weight_scale
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-limit, limit, (fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))
        self.version = 0
        self.uid = next(_NET_IDS)

    def touch(self) -> None:
        self.version += 1

    @property
    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self, backend=None) -> DenseNet:
        new = object.__new__(DenseNet)
        new.dims = list(self.dims)
        new.activations = list(self.activations)
        new.backend = self.backend if backend is None else backend
        new.weight_scale = self.weight_scale
        new.weights = [w.copy() for w in self.weights]
        new.biases = [b.copy() for b in self.biases]
        new.version = 0
        new.uid = next(_NET_IDS)
        return new

    def __call__(self, X) -> np.ndarray:
        return forward(self, X).output

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("wb") as fh:
            pickle.dump({"version": CHECKPOINT_VERSION, "dims": self.dims,
                         "activations": self.activations, "weight_scale": self.weight_scale,
                         "weights": self.weights, "biases": self.biases}, fh)
        return path

    @classmethod
    def load(cls, path: str | Path, backend=None) -> DenseNet:
        with Path(path).open("rb") as fh:
            d = pickle.load(fh)
        if d.get("version") != CHECKPOINT_VERSION:
            raise DomainError(f"unsupported checkpoint version {d.get('version')}")
        net = cls(d["dims"], d["activations"], backend, weight_scale=d.get("weight_scale", "unit"))
        net.weights = [np.asarray(w, dtype=float) for w in d["weights"]]
        net.biases = [np.asarray(b, dtype=float) for b in d["biases"]]
        return net


@dataclass
class Activations:
    inputs: list[np.ndarray]       # input to each dense layer
    outputs: list[np.ndarray]      # post-activation output of each layer
    version: int

    @property
    def output(self) -> np.ndarray:
        return self.outputs[-1]


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "softmax":
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)
    return z


def _activation_grad(kind: str, out: np.ndarray, g: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return g * (1.0 - out ** 2)
    if kind == "relu":
        return g * (out > 0)
    if kind == "softmax":
        return out * (g - np.sum(g * out, axis=1, keepdims=True))
    return g


def forward(net: DenseNet, X) -> Activations:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != net.dims[0]:
        raise DomainError(f"expected input of shape (batch, {net.dims[0]}), got {X.shape}")
    inputs, outputs = [], []
    a = X
    for l, (W, b, kind) in enumerate(zip(net.weights, net.biases, net.activations)):
        inputs.append(a)
        z = net.backend.matmul(W, a.T, scale_a=net.weight_scale, scale_b="max",
                               a_key=(net.uid, l, net.version)).T + b
        a = _activate(kind, z)
        outputs.append(a)
    return Activations(inputs, outputs, net.version)


def backward(net: DenseNet, acts: Activations, grad_out, wrt_preactivation: bool = False) -> list[np.ndarray]:
    """Parameter gradients ``[dW0, db0, dW1, db1, ...]``.

    ``grad_out`` is the loss gradient with respect to the network output, or
    with respect to the last layer's pre-activation when ``wrt_preactivation``
    is set (the stable path for softmax + cross-entropy).
    """
    if acts.version != net.version:
        raise StateError("forward cache is stale: parameters changed since the forward pass")
    g = np.asarray(grad_out, dtype=float)
    if g.shape != acts.output.shape:
        raise DomainError(f"gradient shape {g.shape} does not match output {acts.output.shape}")
    grads: list[np.ndarray] = [None] * (2 * len(net.weights))
    for l in reversed(range(len(net.weights))):
        if not (wrt_preactivation and l == len(net.weights) - 1):
            g = _activation_grad(net.activations[l], acts.outputs[l], g)
        grads[2 * l] = net.backend.matmul(g.T, acts.inputs[l], scale_a="max", scale_b="max")
        grads[2 * l + 1] = g.sum(axis=0)
        if l > 0:
            g = net.backend.matmul(net.weights[l].T, g.T, scale_a=net.weight_scale, scale_b="max",
                                   a_key=(net.uid, l, net.version), a_transposed=True).T
    return grads


@dataclass
class AdamState:
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_net(cls, net: DenseNet, **kw) -> AdamState:
        st = cls(**kw)
        st.m = [np.zeros_like(p) for p in net.params]
        st.v = [np.zeros_like(p) for p in net.params]
        return st


def adam_step(net: DenseNet, grads: Sequence[np.ndarray], state: AdamState) -> None:
    """In-place Adam update of ``net``'s parameters."""
    params = net.params
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise DomainError("gradient shapes do not match the parameters")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            layer, kind = divmod(i, 2)
            raise TrainingError(f"non-finite {'bias' if kind else 'weight'} gradient in layer {layer} "
                                f"at Adam step {state.step + 1} (max |g| = {np.nanmax(np.abs(g))})")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** state.step, 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        tmp = np.multiply(g, 1.0 - b1)
        m *= b1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v *= b2
        v += tmp
        # p -= lr * (m / c1) / (sqrt(v / c2) + eps)
        np.divide(v, c2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= state.lr / c1
        p -= tmp
    net.version += 1


# --- classification --------------------------------------------------------------------------


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    p = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.clip(p, 1e-12, None))))


def predict(net: DenseNet, X, batch: int = 1024) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    out = [np.argmax(net(X[i:i + batch]), axis=1) for i in range(0, len(X), batch)]
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def accuracy(net: DenseNet, X, y, batch: int = 1024) -> float:
    return float(np.mean(predict(net, X, batch) == np.asarray(y)))


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def train_epochs(net: DenseNet, X, y, epochs: int, state: AdamState, batch: int = 128,
                 seed: int = 0, X_test=None, y_test=None, tag: str = "") -> list[dict]:
    """Mini-batch softmax cross-entropy training; returns one record per epoch."""
    X, y = np.asarray(X, dtype=float), np.asarray(y)
    if len(X) == 0:
        raise DomainError("empty dataset")
    if net.activations[-1] != "softmax":
        raise DomainError("classifier nets end in a softmax layer")
    n_classes = net.dims[-1]
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(X))
        losses, correct = [], 0
        for i in range(0, len(X), batch):
            idx = order[i:i + batch]
            acts = forward(net, X[idx])
            probs = acts.output
            onehot = np.eye(n_classes)[y[idx]]
            losses.append(cross_entropy(probs, y[idx]))
            correct += int(np.sum(np.argmax(probs, axis=1) == y[idx]))
            grads = backward(net, acts, (probs - onehot) / len(idx), wrt_preactivation=True)
            adam_step(net, grads, state)
        rec = {"phase": tag, "epoch": epoch, "backend": net.backend.name,
               "loss": float(np.mean(losses)), "train_acc": correct / len(X)}
        if X_test is not None:
            rec["test_acc"] = accuracy(net, X_test, y_test)
        history.append(rec)
    return history


TRAIN_MODES = ("exact", "physics-aware", "hybrid")


def train_classifier(net: DenseNet, X, y, epochs: int, mode: str = "exact", *,
                     optical_backend=None, finetune_epochs: int = 0, batch: int = 128,
                     lr: float = 0.005, seed: int = 0, X_test=None, y_test=None):
    """Train ``net`` in one of the regimes; returns ``(net, history)``.

    ``exact``: every product in floating point. ``physics-aware``: forward and
    backward products on the emulator. ``hybrid``: ``epochs`` exact epochs,
    then the same layers are switched to the emulator for ``finetune_epochs``.
    """
    if mode not in TRAIN_MODES:
        raise DomainError(f"mode must be one of {TRAIN_MODES}")
    if mode != "exact" and optical_backend is None:
        raise DomainError(f"mode {mode!r} needs an optical backend (device + emulator config)")
    state = AdamState.for_net(net, lr=lr)
    if mode == "physics-aware":
        net.backend = optical_backend
        return net, train_epochs(net, X, y, epochs, state, batch, seed, X_test, y_test, "optical")
    net.backend = ExactBackend()
    history = train_epochs(net, X, y, epochs, state, batch, seed, X_test, y_test, "exact")
    if mode == "hybrid":
        net.backend = optical_backend
        history += train_epochs(net, X, y, finetune_epochs, state, batch, seed + 1, X_test, y_test, "finetune")
    return net, history

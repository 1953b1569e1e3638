"""Finite-dimensional networks and DeepONets E_m o f^theta o P_d.

A network theta = (A_1, ..., A_L) realizes
``f(x) = A_L s(A_{L-1} s(... s(A_1 x)))``: an activation between consecutive
affine layers and none after the last one.  Weights are stored (out, in).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .hilbert import OrthoBasis, extend, project

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "tanh")


class TrainingDivergence(RuntimeError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss {value} at iteration {iteration}")
        self.iteration = iteration


@dataclass
class MlpParams:
    layers: list
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not self.layers:
            raise ValueError("a network needs at least one layer")
        self.layers = [(np.array(W, dtype=float, ndmin=2), np.array(b, dtype=float, ndmin=1))
                       for W, b in self.layers]
        for j, (W, b) in enumerate(self.layers):
            if b.shape != (W.shape[0],):
                raise ValueError(f"layer {j}: bias shape {b.shape} does not match weight {W.shape}")
            if j and W.shape[1] != self.layers[j - 1][0].shape[0]:
                raise ValueError(f"layer {j}: input width {W.shape[1]} != previous output "
                                 f"{self.layers[j - 1][0].shape[0]}")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def in_width(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_width(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def widths(self) -> list:
        return [self.in_width] + [W.shape[0] for W, _ in self.layers]

    def copy(self) -> "MlpParams":
        return MlpParams([(W.copy(), b.copy()) for W, b in self.layers], self.activation)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.layers])

    def to_json(self) -> list:
        return [{"w": W.tolist(), "b": b.tolist()} for W, b in self.layers]

    @classmethod
    def init(cls, widths, activation: str = "tanh", seed=0) -> "MlpParams":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        layers = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            layers.append((rng.uniform(-lim, lim, (fan_out, fan_in)), np.zeros(fan_out)))
        return cls(layers, activation)

    @classmethod
    def init_standardized(cls, widths, X, Y, activation: str = "tanh", seed=0) -> "MlpParams":
        """Glorot init with input/output standardization folded into the end layers.

        Equivalent to training on (X - mean) / std and mapping outputs back;
        the result is still a plain affine/activation stack.
        """
        net = cls.init(widths, activation, seed)
        mx, sx = _moments(X)
        my, sy = _moments(Y, constant_scale=0.0)
        W, b = net.layers[0]
        W = W / sx
        net.layers[0] = (W, b - W @ mx)
        W, b = net.layers[-1]
        net.layers[-1] = (W * sy[:, None], b * sy + my)
        return net

    @classmethod
    def affine(cls, W, b=None, activation: str = "tanh") -> "MlpParams":
        W = np.array(W, dtype=float, ndmin=2)
        return cls([(W, np.zeros(W.shape[0]) if b is None else b)], activation)


def _moments(A, constant_scale=1.0):
    """Column mean and std; near-constant columns get ``constant_scale`` (times the
    largest std when 0 is asked for, so the column starts essentially fixed)."""
    A = np.asarray(A, dtype=float)
    mean, std = A.mean(axis=0), A.std(axis=0)
    top = max(std.max(initial=0.0), 1e-300)
    floor = 1e-8 * top
    fill = constant_scale if constant_scale > 0 else floor
    return mean, np.where(std > floor, std, fill)


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_grad(name, z, out):
    if name == "relu":
        return (z > 0).astype(float)
    return 1.0 - out**2


def _forward_cache(theta: MlpParams, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != theta.in_width:
        raise ValueError(f"input width {x.shape[-1]} != network input width {theta.in_width}")
    zs, hs = [], [x]
    h = x
    for j, (W, b) in enumerate(theta.layers):
        z = h @ W.T + b
        zs.append(z)
        h = z if j == theta.n_layers - 1 else _act(theta.activation, z)
        hs.append(h)
    return zs, hs


def mlp_forward(theta: MlpParams, x) -> np.ndarray:
    """Evaluate the network on one vector or a batch of row vectors."""
    return _forward_cache(theta, x)[1][-1]


def mlp_gradient(theta: MlpParams, x, cotangent):
    """Reverse-mode derivatives of <cotangent, f(x)>.

    For a batch, contributions are summed over rows.  Returns
    ``(grads, x_cotangent)`` with ``grads`` a list of (dW, db) per layer.
    """
    zs, hs = _forward_cache(theta, x)
    g = np.asarray(cotangent, dtype=float)
    if g.shape != hs[-1].shape:
        raise ValueError(f"cotangent shape {g.shape} != output shape {hs[-1].shape}")
    grads = [None] * theta.n_layers
    for j in range(theta.n_layers - 1, -1, -1):
        W, _ = theta.layers[j]
        if j < theta.n_layers - 1:
            g = g * _act_grad(theta.activation, zs[j], hs[j + 1])
        h_in = hs[j]
        if g.ndim == 1:
            grads[j] = (np.outer(g, h_in), g.copy())
        else:
            grads[j] = (g.T @ h_in, g.sum(axis=0))
        g = g @ W
    return grads, g


def build_clipping(kappa: int, M: float, delta: float, n_layers: int = 5) -> MlpParams:
    """ReLU network clamping each coordinate to [-B, B], B = M + 2 delta.

    Uses clamp(x) = relu(x) - relu(-x) - relu(x - B) + relu(-x - B); the
    middle layers are identities on the non-negative hidden units.  The
    identity region |x_i| <= B and the saturation region B <= |x_i| <= 2B are
    reproduced exactly in floating point.
    """
    if kappa < 1 or M <= 0 or delta <= 0:
        raise ValueError("need kappa >= 1, M > 0, delta > 0")
    if n_layers < 2:
        raise ValueError("the clamp needs at least two layers")
    B = M + 2 * delta
    I = np.eye(kappa)
    W1 = np.vstack([I, -I, I, -I])
    b1 = np.concatenate([np.zeros(2 * kappa), -B * np.ones(2 * kappa)])
    layers = [(W1, b1)]
    for _ in range(n_layers - 2):
        layers.append((np.eye(4 * kappa), np.zeros(4 * kappa)))
    layers.append((np.hstack([I, -I, -I, I]), np.zeros(kappa)))
    return MlpParams(layers, "relu")


def compose(theta2: MlpParams, theta1: MlpParams) -> MlpParams:
    """Network for f2 o f1 with L1 + L2 layers.

    The last layer of theta1 is doubled to (z, -z) and the first layer of
    theta2 reads relu(z) - relu(-z) = z, so the interface pair stays unfused.
    """
    if theta1.out_width != theta2.in_width:
        raise ValueError(f"width mismatch: {theta1.out_width} -> {theta2.in_width}")
    if theta1.activation != "relu" or theta2.activation != "relu":
        raise ValueError("exact unfused composition needs relu activations")
    W_last, b_last = theta1.layers[-1]
    W_first, b_first = theta2.layers[0]
    layers = list(theta1.layers[:-1])
    layers.append((np.vstack([W_last, -W_last]), np.concatenate([b_last, -b_last])))
    layers.append((np.hstack([W_first, -W_first]), b_first))
    layers += list(theta2.layers[1:])
    return MlpParams([(W.copy(), b.copy()) for W, b in layers], "relu")


@dataclass
class DeepOnetParams:
    """E_{W,m} o f^theta o P_{H,d}."""

    d: int
    theta: MlpParams
    m: int
    in_basis: OrthoBasis = field(repr=False)
    out_basis: OrthoBasis = field(repr=False)

    def __post_init__(self):
        if self.theta.in_width != self.d or self.theta.out_width != self.m:
            raise ValueError(f"network widths {self.theta.in_width}->{self.theta.out_width} "
                             f"do not match d={self.d}, m={self.m}")
        if self.d > self.in_basis.size or self.m > self.out_basis.size:
            raise ValueError("latent dimensions exceed basis sizes")

    def to_json(self) -> dict:
        return {
            "d": self.d,
            "m": self.m,
            "activation": self.theta.activation,
            "layers": self.theta.to_json(),
            "in_basis": self.in_basis.describe(),
            "out_basis": self.out_basis.describe(),
        }

    @classmethod
    def from_json(cls, obj: dict, in_basis: OrthoBasis, out_basis: OrthoBasis) -> "DeepOnetParams":
        theta = MlpParams([(L["w"], L["b"]) for L in obj["layers"]], obj["activation"])
        return cls(int(obj["d"]), theta, int(obj["m"]), in_basis, out_basis)


def deeponet_forward(p: DeepOnetParams, x) -> np.ndarray:
    return extend(mlp_forward(p.theta, project(x, p.in_basis, p.d)), p.out_basis, p.m)


class SquaredLoss:
    """Per-sample ||pred - target||^2 on coordinates (Euclidean = space norm by Parseval)."""

    name = "euclidean"

    def per_sample(self, pred, target):
        return np.sum((pred - target) ** 2, axis=-1)

    def grad(self, pred, target):
        return 2.0 * (pred - target)


@dataclass
class TrainResult:
    params: object
    trace: np.ndarray  # rows (iteration, loss, best_loss)
    best_loss: float
    initial_loss: float

    def trace_csv(self) -> str:
        lines = ["iteration,loss,best_loss"]
        lines += [f"{int(i)},{l:.17g},{b:.17g}" for i, l, b in self.trace]
        return "\n".join(lines) + "\n"


def _dataset_loss(theta, loss, X, Y, batch=4096):
    out = 0.0
    for s in range(0, X.shape[0], batch):
        out += loss.per_sample(mlp_forward(theta, X[s:s + batch]), Y[s:s + batch]).sum()
    return out / X.shape[0]


def sgd_train(model, X, Y, loss=None, lr: float = 1e-3, batch: int = 64, epochs: int = 100,
              seed=0, optimizer: str = "adam", betas=(0.9, 0.999), eps: float = 1e-8,
              lr_decay: float = 1.0) -> TrainResult:
    """Mini-batch training of an MlpParams or the network inside a DeepOnetParams.

    For a DeepONet, ``X`` are storage vectors of the input space and are
    projected once; ``Y`` are targets in whatever form ``loss`` expects
    (for the default squared loss, output coordinates).  The loss trace is
    recorded once per epoch on the full dataset; the best iterate is returned.
    ``lr_decay`` multiplies the step size after every epoch.
    """
    if optimizer not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    loss = SquaredLoss() if loss is None else loss
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.shape[0] == 0 or X.shape[0] != Y.shape[0]:
        raise ValueError("dataset must be non-empty with matching input/target counts")
    deeponet = isinstance(model, DeepOnetParams)
    if deeponet:
        X = project(X, model.in_basis, model.d)
    theta = (model.theta if deeponet else model).copy()

    rng = np.random.default_rng(seed)
    m1 = [(np.zeros_like(W), np.zeros_like(b)) for W, b in theta.layers]
    m2 = [(np.zeros_like(W), np.zeros_like(b)) for W, b in theta.layers]
    step = 0
    current = _dataset_loss(theta, loss, X, Y)
    if not np.isfinite(current):
        raise TrainingDivergence(0, current)
    best, best_theta = current, theta.copy()
    trace = [(0, current, best)]
    n = X.shape[0]
    bs = min(batch, n)
    rate = lr
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(n)
        for s in range(0, n, bs):
            idx = perm[s:s + bs]
            pred = mlp_forward(theta, X[idx])
            cot = loss.grad(pred, Y[idx]) / idx.size
            grads, _ = mlp_gradient(theta, X[idx], cot)
            step += 1
            new_layers = []
            for j, ((W, b), (gW, gb)) in enumerate(zip(theta.layers, grads)):
                if optimizer == "sgd":
                    W, b = W - rate * gW, b - rate * gb
                else:
                    mW, mb = m1[j]
                    vW, vb = m2[j]
                    mW = betas[0] * mW + (1 - betas[0]) * gW
                    mb = betas[0] * mb + (1 - betas[0]) * gb
                    vW = betas[1] * vW + (1 - betas[1]) * gW**2
                    vb = betas[1] * vb + (1 - betas[1]) * gb**2
                    m1[j], m2[j] = (mW, mb), (vW, vb)
                    c1, c2 = 1 - betas[0] ** step, 1 - betas[1] ** step
                    W = W - rate * (mW / c1) / (np.sqrt(vW / c2) + eps)
                    b = b - rate * (mb / c1) / (np.sqrt(vb / c2) + eps)
                new_layers.append((W, b))
            theta.layers = new_layers
        rate *= lr_decay
        current = _dataset_loss(theta, loss, X, Y)
        if not np.isfinite(current):
            raise TrainingDivergence(epoch, current)
        if current < best:
            best, best_theta = current, theta.copy()
        trace.append((epoch, current, best))

    if deeponet:
        out = DeepOnetParams(model.d, best_theta, model.m, model.in_basis, model.out_basis)
    else:
        out = best_theta
    return TrainResult(out, np.array(trace, dtype=float), float(best), float(trace[0][1]))


def save_checkpoint(p: DeepOnetParams, path) -> None:
    with open(path, "w") as fh:
        json.dump(p.to_json(), fh)

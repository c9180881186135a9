"""Toy tanh MLPs with an exact backpropagation oracle and synthetic teacher-student tasks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, DimensionError, NumericError
from .tensor import LEDGER, SeedKey, gauss_matrix, gauss_stream

LINEAR = "linear"
NONLINEAR = "nonlinear"
LOSSES = ("mse", "softmax_cross_entropy")


@dataclass(frozen=True)
class ModelSpec:
    layer_dims: tuple[int, ...]
    loss: str = "mse"
    bias: bool = False

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ConfigError("layer_dims needs at least two entries (one linear layer)")
        if any(d < 1 for d in dims):
            raise ConfigError(f"layer_dims must be positive, got {dims}")
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        if self.loss == "softmax_cross_entropy" and dims[-1] < 2:
            raise ConfigError("softmax_cross_entropy needs an output dimension of at least 2")

    @property
    def n_linear(self) -> int:
        return len(self.layer_dims) - 1


@dataclass
class Layer:
    kind: str
    weight: np.ndarray
    name: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape


@dataclass
class ModelParams:
    """Trainable layers in forward order: ``W0, [b0], W1, [b1], ...``.

    Biases are ``d_out x 1`` layers of kind ``nonlinear`` so that they get
    dense Gaussian perturbations rather than activation-guided ones.
    """

    spec: ModelSpec
    layers: list[Layer]

    def __post_init__(self):
        self._linear = [i for i, l in enumerate(self.layers) if l.kind == LINEAR]
        dims = self.spec.layer_dims
        if len(self._linear) != self.spec.n_linear:
            raise DimensionError("number of linear layers does not match the model layout")
        for k, i in enumerate(self._linear):
            if self.layers[i].shape != (dims[k + 1], dims[k]):
                raise DimensionError(
                    f"layer {self.layers[i].name} has shape {self.layers[i].shape}, "
                    f"expected {(dims[k + 1], dims[k])}"
                )

    @property
    def linear_indices(self) -> list[int]:
        return list(self._linear)

    def bias_for(self, k: int) -> np.ndarray | None:
        """Bias vector following the ``k``-th linear layer, if any."""
        i = self._linear[k] + 1
        if i < len(self.layers) and self.layers[i].kind == NONLINEAR:
            return self.layers[i].weight
        return None

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, [Layer(l.kind, l.weight.copy(), l.name) for l in self.layers])

    def weights(self) -> list[np.ndarray]:
        return [l.weight for l in self.layers]

    @property
    def nbytes(self) -> int:
        return sum(l.weight.size for l in self.layers) * 8

    def n_params(self) -> int:
        return sum(l.weight.size for l in self.layers)

    def track(self) -> None:
        for l in self.layers:
            LEDGER.track(l.weight)

    def release(self) -> None:
        LEDGER.release(*(l.weight for l in self.layers))


def init_params(spec: ModelSpec, key: SeedKey, scale: float = 1.0) -> ModelParams:
    """Gaussian weights with variance ``scale**2 / fan_in``; zero biases."""
    layers = []
    dims = spec.layer_dims
    for k in range(spec.n_linear):
        W = gauss_matrix(key.derive("init", k), dims[k + 1], dims[k]) * (scale / np.sqrt(dims[k]))
        layers.append(Layer(LINEAR, W, f"W{k}"))
        if spec.bias:
            layers.append(Layer(NONLINEAR, np.zeros((dims[k + 1], 1)), f"b{k}"))
    return ModelParams(spec, layers)


def params_from_weights(spec: ModelSpec, weights: list[np.ndarray], biases=None) -> ModelParams:
    layers = []
    for k, W in enumerate(weights):
        layers.append(Layer(LINEAR, np.array(W, dtype=np.float64, ndmin=2), f"W{k}"))
        if spec.bias:
            b = np.zeros((layers[-1].shape[0], 1)) if biases is None else biases[k]
            layers.append(Layer(NONLINEAR, np.array(b, dtype=np.float64).reshape(-1, 1), f"b{k}"))
    return ModelParams(spec, layers)


@dataclass
class Minibatch:
    """``inputs`` is ``d0 x m``; ``targets`` is ``d_L x m`` (mse) or ``m`` integer labels."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        m = self.inputs.shape[1]
        if m < 1:
            raise DimensionError("a minibatch needs at least one column")
        t = np.asarray(self.targets)
        if t.ndim == 1:
            if t.shape[0] != m:
                raise DimensionError(f"{t.shape[0]} labels for {m} inputs")
            self.targets = t.astype(np.int64)
        else:
            if t.shape[1] != m:
                raise DimensionError(f"{t.shape[1]} target columns for {m} inputs")
            self.targets = t.astype(np.float64)

    @property
    def m(self) -> int:
        return self.inputs.shape[1]


@dataclass
class ActivationCapture:
    H: list[np.ndarray]


@dataclass
class LayerGradients:
    """Exact gradients aligned with ``params.layers``.

    ``Q[k]`` and ``H[k]`` belong to the ``k``-th linear layer and satisfy
    ``grads[linear_indices[k]] == Q[k] @ H[k].T``.
    """

    grads: list[np.ndarray]
    Q: list[np.ndarray]
    H: list[np.ndarray]
    loss: float


def _check_batch(params: ModelParams, batch: Minibatch) -> None:
    dims = params.spec.layer_dims
    if batch.inputs.shape[0] != dims[0]:
        raise DimensionError(f"inputs have {batch.inputs.shape[0]} rows, model expects {dims[0]}")
    if params.spec.loss == "mse":
        if batch.targets.ndim != 2 or batch.targets.shape[0] != dims[-1]:
            raise DimensionError(f"mse targets must be {dims[-1]} x m")
    else:
        if batch.targets.ndim != 1:
            raise DimensionError("cross-entropy targets must be a label vector")
        if batch.targets.min() < 0 or batch.targets.max() >= dims[-1]:
            raise DimensionError("label out of range")


def _loss_and_upstream(spec: ModelSpec, out: np.ndarray, targets: np.ndarray, need_grad: bool):
    m = out.shape[1]
    if spec.loss == "mse":
        diff = out - targets
        loss = float(np.sum(diff * diff) / m)
        return loss, (2.0 / m) * diff if need_grad else None
    shifted = out - out.max(axis=0, keepdims=True)
    logz = np.log(np.sum(np.exp(shifted), axis=0))
    cols = np.arange(m)
    loss = float(np.mean(logz - shifted[targets, cols]))
    if not need_grad:
        return loss, None
    probs = np.exp(shifted - logz)
    probs[targets, cols] -= 1.0
    return loss, probs / m


def _forward(params, batch, keep: bool, hook):
    """Forward pass; returns ``(loss, upstream_or_None, kept_activations)``.

    Activations created here are ledger-tracked. With ``keep`` they are
    returned still tracked and the caller must release them; otherwise each
    one is released as soon as the next layer has consumed it.
    """
    _check_batch(params, batch)
    # non-finite values are detected explicitly below
    with np.errstate(invalid="ignore", over="ignore"):
        return _forward_body(params, batch, keep, hook)


def _forward_body(params, batch, keep, hook):
    spec = params.spec
    h = batch.inputs
    owned = None
    kept = [h]
    L = spec.n_linear
    for k, i in enumerate(params.linear_indices):
        if hook is not None:
            hook(k, h)
        W = params.layers[i].weight
        z = LEDGER.track(W @ h)
        b = params.bias_for(k)
        if b is not None:
            z += b
        if owned is not None and not keep:
            LEDGER.release(owned)
        if k < L - 1:
            np.tanh(z, out=z)
        if not np.all(np.isfinite(z)):
            LEDGER.release(*kept[1:], z) if keep else LEDGER.release(z)
            name = params.layers[i].name
            raise NumericError(f"non-finite activation at layer {name}", name)
        if keep and k < L - 1:
            kept.append(z)
        h = owned = z
    loss, up = _loss_and_upstream(spec, h, batch.targets, need_grad=keep)
    LEDGER.release(h)
    if not np.isfinite(loss):
        if keep:
            LEDGER.release(*kept[1:])
        raise NumericError("non-finite loss", "loss")
    return loss, up, kept


def forward(
    params: ModelParams,
    batch: Minibatch,
    capture: bool = False,
    hook: Callable[[int, np.ndarray], None] | None = None,
):
    """Mean loss over the ``m`` columns of ``batch``.

    ``hook(k, H_k)`` is called with the input activation of every linear
    layer as soon as it is available, before the layer consumes it. With
    ``capture=True`` the activations are also returned in an
    :class:`ActivationCapture`; the first entry is ``batch.inputs`` itself.
    """
    loss, _, kept = _forward(params, batch, keep=capture, hook=hook)
    if not capture:
        return loss, None
    LEDGER.release(*kept[1:])
    return loss, ActivationCapture(kept)


def backprop_oracle(params: ModelParams, batch: Minibatch) -> LayerGradients:
    """Exact gradients of the mean loss, computed layer by layer as ``G = Q H^T``.

    All activations, upstream matrices and gradients stay ledger-tracked
    until the call returns, which is what a first-order step has to hold.
    """
    loss, Q, H = _forward(params, batch, keep=True, hook=None)
    LEDGER.track(Q)
    tracked = [Q]
    grads: list[np.ndarray | None] = [None] * len(params.layers)
    Qs: list[np.ndarray] = [None] * params.spec.n_linear
    lin = params.linear_indices
    try:
        for k in range(params.spec.n_linear - 1, -1, -1):
            i = lin[k]
            Qs[k] = Q
            G = LEDGER.track(Q @ H[k].T)
            tracked.append(G)
            grads[i] = G
            if params.bias_for(k) is not None:
                gb = LEDGER.track(Q.sum(axis=1, keepdims=True))
                tracked.append(gb)
                grads[i + 1] = gb
            if k > 0:
                Q = LEDGER.track((params.layers[i].weight.T @ Q) * (1.0 - H[k] * H[k]))
                tracked.append(Q)
    finally:
        LEDGER.release(*tracked, *H[1:])
    return LayerGradients(grads, Qs, H, loss)


# --------------------------------------------------------------------------- tasks


@dataclass(frozen=True)
class TaskSpec:
    n_samples: int
    d_in: int
    n_classes: int = 0  # 0 selects regression
    n_outputs: int = 1  # regression only
    noise: float = 0.0
    teacher_hidden: tuple[int, ...] = ()
    input_decay: float = 0.0  # input coordinate j has standard deviation (j + 1) ** -input_decay

    def __post_init__(self):
        object.__setattr__(self, "teacher_hidden", tuple(int(d) for d in self.teacher_hidden))
        if self.n_samples < 1:
            raise ConfigError("task.n_samples must be at least 1")
        if self.d_in < 1:
            raise ConfigError("task.d_in must be at least 1")
        if self.n_classes == 1 or self.n_classes < 0:
            raise ConfigError("task.n_classes must be 0 (regression) or at least 2")
        if self.n_classes == 0 and self.n_outputs < 1:
            raise ConfigError("task.n_outputs must be at least 1")
        if self.noise < 0:
            raise ConfigError("task.noise must be non-negative")
        if any(d < 1 for d in self.teacher_hidden):
            raise ConfigError("task.teacher_hidden entries must be positive")
        if not self.input_decay >= 0:
            raise ConfigError("task.input_decay must be non-negative")

    @property
    def out_dim(self) -> int:
        return self.n_classes if self.n_classes else self.n_outputs

    @property
    def teacher_spec(self) -> ModelSpec:
        loss = "softmax_cross_entropy" if self.n_classes else "mse"
        return ModelSpec((self.d_in, *self.teacher_hidden, self.out_dim), loss=loss, bias=False)


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    teacher: ModelParams = field(repr=False)

    @property
    def n(self) -> int:
        return self.inputs.shape[1]

    def full(self) -> Minibatch:
        return Minibatch(self.inputs, self.targets)

    def batches(self, batch_size: int, key: SeedKey) -> list[Minibatch]:
        """Deterministic shuffle by ``key`` split into consecutive minibatches.

        The last batch is shorter when ``batch_size`` does not divide ``n``.
        """
        if batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        order = np.argsort(gauss_stream(key, 0, self.n), kind="stable")
        out = []
        for s in range(0, self.n, batch_size):
            idx = order[s : s + batch_size]
            t = self.targets[idx] if self.targets.ndim == 1 else self.targets[:, idx]
            out.append(Minibatch(self.inputs[:, idx], t))
        return out


def _teacher_outputs(teacher: ModelParams, X: np.ndarray) -> np.ndarray:
    h = X
    L = teacher.spec.n_linear
    for k, i in enumerate(teacher.linear_indices):
        h = teacher.layers[i].weight @ h
        if k < L - 1:
            h = np.tanh(h)
    return h


def synth_task(key: SeedKey, spec: TaskSpec) -> Dataset:
    """Gaussian inputs labelled by a hidden random tanh teacher.

    With ``input_decay > 0`` the input covariance has a power-law spectrum,
    so activation matrices have a few dominant directions.

    Regression targets are the teacher outputs plus ``noise`` times Gaussian
    noise. Class labels are the argmax of per-class standardized teacher
    logits (plus noise); the teacher has no biases, so it is an odd function
    of its input and classes come out balanced in expectation.
    """
    teacher = init_params(spec.teacher_spec, key.derive("teacher"))
    X = gauss_matrix(key.derive("inputs"), spec.d_in, spec.n_samples)
    if spec.input_decay > 0:
        X *= (np.arange(1, spec.d_in + 1, dtype=np.float64) ** -spec.input_decay)[:, None]
    out = _teacher_outputs(teacher, X)
    if spec.noise > 0:
        out = out + spec.noise * gauss_matrix(key.derive("noise"), *out.shape)
    if spec.n_classes:
        sd = out.std(axis=1, keepdims=True)
        z = (out - out.mean(axis=1, keepdims=True)) / np.where(sd > 0, sd, 1.0)
        targets = np.argmax(z, axis=0).astype(np.int64)
    else:
        targets = out
    return Dataset(X, targets, teacher)

"""MeZO, LOZO and AGZO steps, a first-order baseline, and the training loop."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError
from .models import (
    LINEAR,
    Dataset,
    Minibatch,
    ModelParams,
    ModelSpec,
    TaskSpec,
    backprop_oracle,
    forward,
    init_params,
    synth_task,
)
from .perturb import (
    _restore_update,
    apply_perturbation,
    regenerate,
    sample_factored,
    sample_perturbation,
    shift,
)
from .subspace import DegenerateSubspace, subspace_extract
from .tensor import LEDGER, SeedKey

METHODS = ("mezo", "lozo", "agzo", "fo")
DIFFERENCES = ("forward", "central")


@dataclass
class StepConfig:
    method: str
    mu: float = 1e-7
    eta: float = 1e-3
    ranks: int | tuple[int, ...] = 1
    power_steps: int = 3
    difference: str = "forward"
    exact_restore: bool = False
    agzo_scale_by_rank: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not self.mu > 0:
            raise ConfigError(f"mu must be positive, got {self.mu}")
        if not self.eta > 0:
            raise ConfigError(f"eta must be positive, got {self.eta}")
        if self.power_steps < 0:
            raise ConfigError("power_steps must be non-negative")
        if self.difference not in DIFFERENCES:
            raise ConfigError(f"difference must be one of {DIFFERENCES}")
        ranks = (self.ranks,) if isinstance(self.ranks, int) else tuple(self.ranks)
        if not ranks or any(int(r) < 1 for r in ranks):
            raise ConfigError("ranks must be positive")
        self.ranks = ranks if len(ranks) > 1 else ranks[0]

    def rank_for(self, k: int) -> int:
        if isinstance(self.ranks, int):
            return self.ranks
        if k >= len(self.ranks):
            raise ConfigError(f"no rank configured for linear layer {k}")
        return int(self.ranks[k])


@dataclass
class GradientEstimate:
    """Scalar projected gradient ``g`` plus the records needed to rebuild each ``g * Delta``."""

    g: float
    f0: float
    f_plus: float
    records: list
    queries: int
    f_minus: float | None = None
    degenerate_layers: list[int] = field(default_factory=list)

    def layer_estimates(self) -> list[np.ndarray]:
        return [(self.g * rec.estimator_scale) * regenerate(rec) for rec in self.records]


def _layer_keys(key: SeedKey, n: int) -> list[SeedKey]:
    base = key.derive("perturb")
    return [base.at(i) for i in range(n)]


def _dense_records(params: ModelParams, key: SeedKey):
    keys = _layer_keys(key, len(params.layers))
    return [sample_perturbation(l.shape, None, k, linear=False) for l, k in zip(params.layers, keys)]


def _finish_zo_step(params, batch, cfg: StepConfig, records, f0, extra_queries=0, degenerate=()):
    """Perturb, query, then restore-and-update. Params are restored on numeric failure."""
    checkpoint = None
    if cfg.exact_restore:
        checkpoint = [LEDGER.track(l.weight.copy()) for l in params.layers]
    mu = cfg.mu
    offset = mu
    f_minus = None
    try:
        apply_perturbation(params, records, mu)
        try:
            f_plus, _ = forward(params, batch)
            if cfg.difference == "central":
                shift(params, records, -2.0 * mu)
                offset = -mu
                f_minus, _ = forward(params, batch)
                g = (f_plus - f_minus) / (2.0 * mu)
            else:
                g = (f_plus - f0) / mu
            if not math.isfinite(g):
                raise NumericError("non-finite projected gradient", "estimate")
        except NumericError:
            _restore_update(params, records, offset, 0.0, checkpoint)
            raise
        _restore_update(params, records, offset, cfg.eta * g, checkpoint)
    finally:
        if checkpoint is not None:
            LEDGER.release(*checkpoint)
    queries = 1 + extra_queries + (2 if cfg.difference == "central" else 1)
    return GradientEstimate(g, f0, f_plus, records, queries, f_minus, list(degenerate))


def mezo_step(params: ModelParams, batch: Minibatch, cfg: StepConfig, key: SeedKey) -> GradientEstimate:
    """Dense Gaussian direction over every trainable layer."""
    f0, _ = forward(params, batch)
    records = _dense_records(params, key)
    return _finish_zo_step(params, batch, cfg, records, f0)


def lozo_step(params: ModelParams, batch: Minibatch, cfg: StepConfig, key: SeedKey) -> GradientEstimate:
    """Rank-``r`` Gaussian ``U V^T`` per linear layer, estimator divided by ``r``.

    Nonlinear layers (biases) use dense Gaussians with unit scale.
    """
    f0, _ = forward(params, batch)
    keys = _layer_keys(key, len(params.layers))
    lin = {i: k for k, i in enumerate(params.linear_indices)}
    records = []
    for i, (layer, lk) in enumerate(zip(params.layers, keys)):
        if i in lin:
            r = min(cfg.rank_for(lin[i]), *layer.shape)
            records.append(sample_factored(layer.shape, r, lk))
        else:
            records.append(sample_perturbation(layer.shape, None, lk, linear=False))
    return _finish_zo_step(params, batch, cfg, records, f0)


def agzo_step(
    params: ModelParams, batch: Minibatch, cfg: StepConfig, key: SeedKey, step_index: int = 0
) -> GradientEstimate:
    """Activation-guided step.

    The ``f0`` forward pass extracts a basis for every linear layer as soon
    as its input activation is available; the activation itself is dropped
    by the forward pass right after. Perturbations are ``R A^T`` on linear
    layers and dense on the rest (and on layers whose activations were
    numerically zero, which are reported in ``degenerate_layers``).
    """
    omega = key.derive("omega")
    bases: dict[int, object] = {}
    degenerate = []
    # a basis wider than d_out adds nothing to R A^T and is rejected downstream
    d_outs = [params.layers[i].shape[0] for i in params.linear_indices]

    def hook(k, H):
        try:
            basis = subspace_extract(H, min(cfg.rank_for(k), d_outs[k]), cfg.power_steps, omega.at(k), k, step_index)
        except DegenerateSubspace:
            degenerate.append(k)
            return
        LEDGER.track(basis.A)
        bases[k] = basis

    try:
        f0, _ = forward(params, batch, hook=hook)
        keys = _layer_keys(key, len(params.layers))
        lin = {i: k for k, i in enumerate(params.linear_indices)}
        records = []
        for i, (layer, lk) in enumerate(zip(params.layers, keys)):
            basis = bases.get(lin[i]) if i in lin else None
            rec = sample_perturbation(layer.shape, basis, lk, linear=layer.kind == LINEAR)
            if cfg.agzo_scale_by_rank and basis is not None:
                rec = type(rec)(rec.key, rec.kind, rec.shape, rec.basis, rec.rank, 1.0 / rec.rank)
            records.append(rec)
        return _finish_zo_step(params, batch, cfg, records, f0, degenerate=degenerate)
    finally:
        for b in bases.values():
            LEDGER.release(b.A)


def fo_step(params: ModelParams, batch: Minibatch, cfg: StepConfig):
    """``W <- W - eta * G`` with exact gradients; returns the :class:`LayerGradients`."""
    grads = backprop_oracle(params, batch)
    for layer, G in zip(params.layers, grads.grads):
        layer.weight -= cfg.eta * G
    return grads


def zo_step(params, batch, cfg: StepConfig, key: SeedKey, step_index: int = 0) -> GradientEstimate:
    if cfg.method == "mezo":
        return mezo_step(params, batch, cfg, key)
    if cfg.method == "lozo":
        return lozo_step(params, batch, cfg, key)
    if cfg.method == "agzo":
        return agzo_step(params, batch, cfg, key, step_index)
    raise ConfigError(f"{cfg.method!r} is not a zeroth-order method")


def stacked_cosine(estimate: list[np.ndarray], truth: list[np.ndarray]) -> float | None:
    """Cosine between two per-layer gradient lists flattened into one vector."""
    num = sum(float(np.sum(a * b)) for a, b in zip(estimate, truth))
    na = math.sqrt(sum(float(np.sum(a * a)) for a in estimate))
    nb = math.sqrt(sum(float(np.sum(b * b)) for b in truth))
    if na == 0 or nb == 0:
        return None
    return num / (na * nb)


# --------------------------------------------------------------------------- training


@dataclass
class TrainConfig:
    model: ModelSpec
    task: TaskSpec
    step: StepConfig
    steps: int = 100
    batch_size: int = 32
    seed: int = 0
    cosine_every: int = 0
    init_scale: float = 1.0
    timing: bool = False


@dataclass
class StepRecord:
    step: int
    method: str
    loss: float
    cosine: float | None
    peak_bytes: int
    elapsed_ns: int


@dataclass
class RunReport:
    method: str
    seed: int
    records: list[StepRecord] = field(default_factory=list)
    initial_eval: dict = field(default_factory=dict)
    final_eval: dict = field(default_factory=dict)
    failure: str | None = None
    degenerate_events: int = 0
    queries_per_step: int = 0
    params: ModelParams | None = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.failure is None

    def summary(self) -> dict:
        cos = [r.cosine for r in self.records if r.cosine is not None]
        return {
            "method": self.method,
            "seed": self.seed,
            "steps_completed": len(self.records),
            "initial_eval": self.initial_eval,
            "final_eval": self.final_eval,
            "mean_cosine": float(np.mean(cos)) if cos else None,
            "max_peak_bytes": max((r.peak_bytes for r in self.records), default=0),
            "queries_per_step": self.queries_per_step,
            "degenerate_events": self.degenerate_events,
            "failure": self.failure,
            "ok": self.ok,
        }


def evaluate(params: ModelParams, data: Dataset) -> dict:
    batch = data.full()
    loss, _ = forward(params, batch)
    out = {"loss": loss}
    if params.spec.loss == "softmax_cross_entropy":
        out["accuracy"] = _accuracy(params, batch)
    return out


def _accuracy(params: ModelParams, batch: Minibatch) -> float:
    h = batch.inputs
    L = params.spec.n_linear
    for k, i in enumerate(params.linear_indices):
        h = params.layers[i].weight @ h
        b = params.bias_for(k)
        if b is not None:
            h = h + b
        if k < L - 1:
            h = np.tanh(h)
    return float(np.mean(np.argmax(h, axis=0) == batch.targets))


def build_run(cfg: TrainConfig):
    """Dataset, minibatch schedule and initial parameters for a configured run."""
    root = SeedKey(cfg.seed)
    if cfg.model.layer_dims[0] != cfg.task.d_in or cfg.model.layer_dims[-1] != cfg.task.out_dim:
        raise ConfigError("model.layer_dims must start at task.d_in and end at the task output dimension")
    want = "softmax_cross_entropy" if cfg.task.n_classes else "mse"
    if cfg.model.loss != want:
        raise ConfigError(f"task requires loss {want!r}, model has {cfg.model.loss!r}")
    data = synth_task(root.derive("task"), cfg.task)
    batches = data.batches(cfg.batch_size, root.derive("shuffle"))
    params = init_params(cfg.model, root.derive("model"), cfg.init_scale)
    return data, batches, params


def train_loop(cfg: TrainConfig) -> RunReport:
    """Run ``cfg.steps`` optimizer steps round-robin over a fixed shuffle.

    Every ``cosine_every`` steps the exact gradient on the step's batch is
    computed before the step and compared with the step's own estimate.
    Per-step peak bytes are measured with the parameters tracked and the
    cosine oracle excluded.
    """
    if cfg.steps < 0:
        raise ConfigError("steps must be non-negative")
    data, batches, params = build_run(cfg)
    sc = cfg.step
    report = RunReport(sc.method, cfg.seed)
    report.initial_eval = evaluate(params, data)
    step_root = SeedKey(cfg.seed).derive("steps", sc.method)
    params.track()
    try:
        for t in range(cfg.steps):
            batch = batches[t % len(batches)]
            truth = None
            try:
                if cfg.cosine_every and t % cfg.cosine_every == 0:
                    truth = backprop_oracle(params, batch).grads
                LEDGER.reset_peak()
                t0 = time.perf_counter_ns()
                if sc.method == "fo":
                    out = fo_step(params, batch, sc)
                    loss, est, queries = out.loss, out.grads, 0
                else:
                    out = zo_step(params, batch, sc, step_root.at(t), t)
                    loss, queries = out.f0, out.queries
                    report.degenerate_events += len(out.degenerate_layers)
                    est = out.layer_estimates() if truth is not None else None
            except NumericError as err:
                report.failure = f"step {t}: {err}"
                break
            elapsed = time.perf_counter_ns() - t0 if cfg.timing else 0
            peak = LEDGER.snapshot()[1]
            cos = stacked_cosine(est, truth) if truth is not None else None
            report.queries_per_step = queries
            report.records.append(StepRecord(t, sc.method, loss, cos, peak, elapsed))
    finally:
        params.release()
    try:
        report.final_eval = evaluate(params, data)
    except NumericError as err:
        report.failure = report.failure or f"final evaluation: {err}"
    report.params = params
    return report

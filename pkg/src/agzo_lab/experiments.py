"""Multi-run experiments: learning-rate grids over seeds, cosine trajectories, memory sweeps."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .models import ModelSpec, init_params, synth_task
from .optim import StepConfig, TrainConfig, fo_step, train_loop, zo_step
from .tensor import LEDGER, SeedKey


@dataclass
class MethodResult:
    method: str
    eta: float
    final_losses: list[float]
    cosine_steps: list[int]
    cosines: np.ndarray  # seeds x logged steps
    grid: dict[float, float] = field(default_factory=dict)
    queries_per_step: int = 0

    @property
    def mean_final_loss(self) -> float:
        return float(np.mean(self.final_losses))


def _run_seeds(base: TrainConfig, step: StepConfig, seeds) -> tuple[list[float], list[int], np.ndarray, int]:
    losses, cos_rows, steps, queries = [], [], [], 0
    for seed in seeds:
        rep = train_loop(replace(base, step=step, seed=seed))
        losses.append(rep.final_eval["loss"] if rep.ok else float("inf"))
        logged = [(r.step, r.cosine) for r in rep.records if r.cosine is not None]
        steps = [s for s, _ in logged]
        cos_rows.append([c for _, c in logged])
        queries = max(queries, rep.queries_per_step)
    width = min((len(r) for r in cos_rows), default=0)
    cos = np.array([r[:width] for r in cos_rows], dtype=float).reshape(len(cos_rows), width)
    return losses, steps[:width], cos, queries


def compare_methods(base: TrainConfig, eta_grid: dict[str, list[float]], seeds) -> dict[str, MethodResult]:
    """Best-of-grid learning rate per method, ranked by mean final full-data loss over ``seeds``.

    ``base.step`` supplies every step setting except ``method`` and ``eta``.
    Seeds share data, initialization and batch order across methods.
    """
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("need at least one seed")
    results = {}
    for method, grid in eta_grid.items():
        if not grid:
            raise ConfigError(f"empty learning-rate grid for {method}")
        best = None
        scores = {}
        for eta in grid:
            step = replace(base.step, method=method, eta=eta)
            losses, steps, cos, queries = _run_seeds(base, step, seeds)
            score = float(np.mean(losses))
            scores[eta] = score
            if best is None or score < best.mean_final_loss:
                best = MethodResult(method, eta, losses, steps, cos, queries_per_step=queries)
        best.grid = scores
        results[method] = best
    return results


def cosine_win_fraction(a: MethodResult, b: MethodResult) -> float:
    """Fraction of logged steps where ``a``'s seed-mean cosine exceeds ``b``'s."""
    n = min(a.cosines.shape[1], b.cosines.shape[1])
    if n == 0:
        return 0.0
    ma = a.cosines[:, :n].mean(axis=0)
    mb = b.cosines[:, :n].mean(axis=0)
    return float(np.mean(ma > mb))


# --------------------------------------------------------------------------- memory


@dataclass
class MemoryRow:
    batch_size: int
    width: int
    method: str
    peak_bytes: int


def one_step_peak(base: TrainConfig, method: str) -> int:
    """Peak ledger bytes over a single optimizer step with the parameters live."""
    root = SeedKey(base.seed)
    data = synth_task(root.derive("task"), base.task)
    batch = data.batches(base.batch_size, root.derive("shuffle"))[0]
    params = init_params(base.model, root.derive("model"), base.init_scale)
    step = replace(base.step, method=method)
    params.track()
    try:
        LEDGER.reset_peak()
        if method == "fo":
            fo_step(params, batch, step)
        else:
            zo_step(params, batch, step, root.derive("steps", method).at(0), 0)
        return LEDGER.snapshot()[1]
    finally:
        params.release()


def agzo_overhead_bound(model: ModelSpec, step: StepConfig, m: int) -> int:
    """``sum_l d_in * r_l * 8 + max_l bytes(H_l)`` with ``r_l`` clamped to ``min(r, d_in, m)``."""
    dims = model.layer_dims
    basis = sum(d_in * min(step.rank_for(k), d_in, m) * 8 for k, d_in in enumerate(dims[:-1]))
    return basis + max(d_in * m * 8 for d_in in dims[:-1])


def memory_sweep(base: TrainConfig, methods, batch_sizes, widths, depth: int = 1) -> list[MemoryRow]:
    """One-step peaks over ``batch_sizes x widths``; hidden layers all have the sweep width."""
    if not batch_sizes or not widths or not methods:
        raise ConfigError("memory sweep needs methods, batch sizes and widths")
    rows = []
    for m in batch_sizes:
        for w in widths:
            dims = (base.task.d_in, *([w] * depth), base.task.out_dim)
            model = replace(base.model, layer_dims=dims)
            task = replace(base.task, n_samples=max(base.task.n_samples, m))
            cfg = replace(base, model=model, task=task, batch_size=m)
            for method in methods:
                rows.append(MemoryRow(m, w, method, one_step_peak(cfg, method)))
    return rows


def memory_checks(base: TrainConfig, rows: list[MemoryRow], depth: int = 1) -> list[dict]:
    """Per sweep point: the AGZO overhead bound and ``fo > agzo``; ``None`` where a method is absent."""
    points = {}
    for r in rows:
        points.setdefault((r.batch_size, r.width), {})[r.method] = r.peak_bytes
    out = []
    for (m, w), peaks in points.items():
        model = replace(base.model, layer_dims=(base.task.d_in, *([w] * depth), base.task.out_dim))
        bound = agzo_overhead_bound(model, base.step, m)
        overhead_ok = fo_ok = None
        if "agzo" in peaks and "mezo" in peaks:
            overhead_ok = peaks["agzo"] - peaks["mezo"] <= bound
        if "agzo" in peaks and "fo" in peaks:
            fo_ok = peaks["fo"] > peaks["agzo"]
        out.append({"batch_size": m, "width": w, "bound_bytes": bound,
                    "overhead_ok": overhead_ok, "fo_above_agzo": fo_ok, **peaks})
    return out

"""``agzo-lab`` command line entry point.

Exit codes: 0 success, 1 configuration or usage error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .diagnostics import beta, beta_bounds, confinement_profile, mc_cosine, spectrum_dump
from .errors import LabError, NumericError
from .experiments import memory_checks, memory_sweep
from .models import init_params, synth_task
from .optim import train_loop
from .tensor import SeedKey, gauss_matrix, qr_orthonormal

COMMANDS = ("train", "cosine-bench", "beta-table", "confinement", "memory-report")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


def fmt(value) -> str:
    """Cell text: floats with 17 significant digits, ``None`` as empty."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _outdir(cfg) -> Path:
    out = Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.frozen.json", cfg)
    return out


# --------------------------------------------------------------------------- commands


def cmd_train(cfg) -> int:
    tc = cfgmod.train_config(cfg)
    out = _outdir(cfg)
    report = train_loop(tc)
    write_csv(
        out / "steps.csv",
        ["step", "method", "loss", "cosine", "peak_bytes", "elapsed_ns"],
        [(r.step, r.method, r.loss, r.cosine, r.peak_bytes, r.elapsed_ns) for r in report.records],
    )
    write_json(out / "summary.json", report.summary())
    if not report.ok:
        print(f"numeric failure: {report.failure}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _theory_rows(cfg):
    d = cfg["diagnostics"]
    n = d["n_trials"]
    if not isinstance(n, int) or n < 1:
        raise cfgmod.ConfigError("diagnostics.n_trials must be a positive integer")
    root = SeedKey(cfgmod._seed(cfg)).derive("cosine-bench")
    rows = []
    for i, entry in enumerate(d["grid"]):
        if len(entry) != 3:
            raise cfgmod.ConfigError("diagnostics.grid entries must be [d_out, d_in, r]")
        d_out, d_in, r = (int(v) for v in entry)
        if min(d_out, d_in, r) < 1 or r > d_in:
            raise cfgmod.ConfigError(f"invalid grid entry {entry}: need positive dims and r <= d_in")
        G = gauss_matrix(root.derive("G", i), d_out, d_in)
        A = qr_orthonormal(gauss_matrix(root.derive("A", i), d_in, r))[0]
        for method in d["methods"] or ["agzo", "mezo"]:
            if method not in ("agzo", "mezo"):
                raise cfgmod.ConfigError(f"cosine-bench methods must be agzo or mezo, got {method!r}")
            rep = mc_cosine(G, A if method == "agzo" else None, n, root.derive("trials", i, method))
            rows.append((method, d_out, d_in, rep.dims[2], n, rep.analytic_expectation, rep.mc_mean,
                         rep.mc_stderr, rep.subspace_energy_ratio, rep.agrees()))
    return rows


def cmd_cosine_bench(cfg) -> int:
    d = cfg["diagnostics"]
    if d["mode"] == "theory":
        rows = _theory_rows(cfg)
        out = _outdir(cfg)
        write_csv(out / "cosine.csv", ["method", "d_out", "d_in", "r", "n_trials", "analytic", "mc_mean",
                                       "mc_stderr", "energy_ratio", "within_3_stderr"], rows)
        write_json(out / "summary.json", {"mode": "theory", "rows": len(rows),
                                           "all_within_3_stderr": all(r[-1] for r in rows)})
        return EXIT_OK
    if d["mode"] != "training":
        raise cfgmod.ConfigError("diagnostics.mode must be 'theory' or 'training'")
    if cfg["train"]["cosine_every"] < 1:
        cfg["train"]["cosine_every"] = 1
    out = _outdir(cfg)
    rows, summary, failed = [], {"mode": "training"}, False
    for method in d["methods"] or ["agzo", "mezo"]:
        rep = train_loop(cfgmod.train_config(cfg, method))
        rows += [(r.step, method, r.cosine) for r in rep.records if r.cosine is not None]
        summary[method] = rep.summary()
        failed |= not rep.ok
    write_csv(out / "cosine.csv", ["step", "method", "cosine"], rows)
    write_json(out / "summary.json", summary)
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_beta_table(cfg) -> int:
    D_list = cfg["diagnostics"]["D_list"]
    if not D_list or any(not isinstance(D, int) or D < 1 for D in D_list):
        raise cfgmod.ConfigError("diagnostics.D_list must be a non-empty list of integers >= 1")
    rows = []
    for D in D_list:
        val = beta(D)
        if D == 1:
            rows.append((D, val, None, None, None))
            continue
        lo, hi = (float(x) for x in beta_bounds(D))
        rows.append((D, val, lo, hi, bool(lo <= val <= hi and val < beta(D - 1))))
    out = _outdir(cfg)
    write_csv(out / "beta.csv", ["D", "beta", "lower", "upper", "ok"], rows)
    return EXIT_OK


def cmd_confinement(cfg) -> int:
    tc = cfgmod.train_config(cfg, method="fo")
    root = SeedKey(tc.seed)
    data = synth_task(root.derive("task"), tc.task)
    batches = data.batches(tc.batch_size, root.derive("shuffle"))
    params = init_params(tc.model, root.derive("model"), tc.init_scale)
    n_batches = cfg["diagnostics"]["n_batches"]
    if not isinstance(n_batches, int) or n_batches < 1:
        raise cfgmod.ConfigError("diagnostics.n_batches must be a positive integer")
    ranks = cfg["diagnostics"]["ranks"]
    conf_rows, spec_rows = [], []
    for b, batch in enumerate(batches[:n_batches]):
        for row in confinement_profile(params, batch, ranks):
            cos = "undefined" if row.cosine is None else row.cosine
            conf_rows.append((b, row.layer, row.rank, row.effective_rank, row.h_rank, cos))
        h = batch.inputs
        for k, i in enumerate(params.linear_indices):
            for j, s in enumerate(spectrum_dump(h)):
                spec_rows.append((b, k, j, s))
            h = params.layers[i].weight @ h
            bias = params.bias_for(k)
            if bias is not None:
                h = h + bias
            h = np.tanh(h)
    out = _outdir(cfg)
    write_csv(out / "confinement.csv", ["batch", "layer", "rank", "effective_rank", "h_rank", "cosine"], conf_rows)
    write_csv(out / "spectra.csv", ["batch", "layer", "index", "sigma"], spec_rows)
    return EXIT_OK


def cmd_memory_report(cfg) -> int:
    d = cfg["diagnostics"]
    methods = d["methods"] or ["mezo", "lozo", "agzo", "fo"]
    tc = cfgmod.train_config(cfg, method="agzo")
    rows = memory_sweep(tc, methods, d["batch_sizes"], d["widths"], d["depth"])
    checks = memory_checks(tc, rows, d["depth"])
    out = _outdir(cfg)
    write_csv(out / "memory.csv", ["batch_size", "width", "method", "peak_bytes"],
              [(r.batch_size, r.width, r.method, r.peak_bytes) for r in rows])
    write_json(out / "summary.json", {"checks": checks})
    return EXIT_OK


HANDLERS = {
    "train": cmd_train,
    "cosine-bench": cmd_cosine_bench,
    "beta-table": cmd_beta_table,
    "confinement": cmd_confinement,
    "memory-report": cmd_memory_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="agzo-lab", description="Zeroth-order optimizer lab.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="path to a JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. step.eta=0.01 (repeatable)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        cfg = cfgmod.load(args.config, args.command, args.overrides)
        return HANDLERS[args.command](cfg)
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (LabError, ValueError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

"""JSON experiment configuration: defaults, overrides, validation and conversion."""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .errors import ConfigError
from .models import ModelSpec, TaskSpec
from .optim import StepConfig, TrainConfig

REQUIRED = object()

SCHEMA = {
    "seed": 0,
    "model": {
        "layer_dims": REQUIRED,
        "loss": "softmax_cross_entropy",
        "bias": False,
        "init_scale": 1.0,
    },
    "task": {
        "n_samples": 1024,
        "d_in": None,  # defaults to model.layer_dims[0]
        "n_classes": None,  # defaults to model.layer_dims[-1] for classification, 0 for mse
        "n_outputs": None,
        "noise": 0.0,
        "teacher_hidden": [8],
        "input_decay": 0.0,
    },
    "step": {
        "method": REQUIRED,
        "mu": 1e-3,
        "eta": 1e-2,
        "ranks": 4,
        "power_steps": 3,
        "difference": "forward",
        "exact_restore": False,
        "agzo_scale_by_rank": False,
    },
    "train": {
        "steps": 100,
        "batch_size": 32,
        "cosine_every": 0,
    },
    "diagnostics": {
        "mode": "theory",
        "n_trials": 200000,
        "grid": [[8, 8, 1], [32, 64, 4]],
        "methods": None,  # per command: cosine-bench agzo+mezo, memory-report all four
        "D_list": [1, 2, 3, 4, 1000000],
        "ranks": [1, 4],
        "n_batches": 1,
        "batch_sizes": [16, 32, 64],
        "widths": [16, 64],
        "depth": 1,
    },
    "output": {
        "dir": "agzo-lab-out",
        "timing": False,
    },
}

COMMAND_REQUIRED = {
    "train": ("model.layer_dims", "step.method"),
    "cosine-bench": (),
    "beta-table": (),
    "confinement": ("model.layer_dims",),
    "memory-report": ("model.layer_dims",),
}


def _merge(defaults: dict, given: dict, path: str = "") -> dict:
    out = {}
    for key, value in given.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key: {path}{key}")
    for key, default in defaults.items():
        full = f"{path}{key}"
        if key in given:
            value = given[key]
            if isinstance(default, dict):
                if not isinstance(value, dict):
                    raise ConfigError(f"config key {full} must be an object")
                out[key] = _merge(default, value, full + ".")
            else:
                out[key] = copy.deepcopy(value)
        elif isinstance(default, dict):
            out[key] = _merge(default, {}, full + ".")
        else:
            out[key] = default if default is REQUIRED else copy.deepcopy(default)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(raw: dict, assignment: str) -> None:
    """Apply one ``section.key=value`` override; ``value`` is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override must look like section.key=value, got {assignment!r}")
    path, text = assignment.split("=", 1)
    parts = path.strip().split(".")
    node = raw
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override inside non-object key {path}")
    node[parts[-1]] = _parse_value(text)


def _get(cfg: dict, path: str):
    node = cfg
    for part in path.split("."):
        node = node[part]
    return node


def resolve(raw: dict, command: str) -> dict:
    """Fill defaults, reject unknown keys and report missing required ones by key path."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    cfg = _merge(SCHEMA, raw)
    for path in COMMAND_REQUIRED.get(command, ()):
        if _get(cfg, path) is REQUIRED:
            raise ConfigError(f"missing required config key: {path}")
    # required keys a command does not need are simply absent
    for section in cfg.values():
        if isinstance(section, dict):
            for key in [k for k, v in section.items() if v is REQUIRED]:
                section[key] = None
    dims = cfg["model"]["layer_dims"]
    task = cfg["task"]
    if dims:
        if task["d_in"] is None:
            task["d_in"] = dims[0]
        classify = cfg["model"]["loss"] == "softmax_cross_entropy"
        if task["n_classes"] is None:
            task["n_classes"] = dims[-1] if classify else 0
        if task["n_outputs"] is None:
            task["n_outputs"] = 1 if classify else dims[-1]
    return cfg


def load(path: str | Path, command: str, overrides=()) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as err:
        raise ConfigError(f"config file not found: {path}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file is not valid JSON: {err}") from err
    for assignment in overrides:
        apply_override(raw, assignment)
    return resolve(raw, command)


def _seed(cfg: dict) -> int:
    seed = cfg["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        raise ConfigError("seed must be an integer in [0, 2**64)")
    return seed


def _build(kind, path, **kwargs):
    try:
        return kind(**kwargs)
    except TypeError as err:
        raise ConfigError(f"invalid {path} section: {err}") from err


def model_spec(cfg: dict) -> ModelSpec:
    m = cfg["model"]
    if m["layer_dims"] is None:
        raise ConfigError("missing required config key: model.layer_dims")
    return _build(ModelSpec, "model", layer_dims=tuple(m["layer_dims"]), loss=m["loss"], bias=m["bias"])


def task_spec(cfg: dict) -> TaskSpec:
    t = cfg["task"]
    return _build(
        TaskSpec,
        "task",
        n_samples=t["n_samples"],
        d_in=t["d_in"],
        n_classes=t["n_classes"],
        n_outputs=t["n_outputs"],
        noise=t["noise"],
        teacher_hidden=tuple(t["teacher_hidden"]),
        input_decay=t["input_decay"],
    )


def step_config(cfg: dict, method: str | None = None) -> StepConfig:
    s = dict(cfg["step"])
    s["method"] = method or s["method"]
    if s["method"] is None:
        raise ConfigError("missing required config key: step.method")
    if isinstance(s["ranks"], list):
        s["ranks"] = tuple(s["ranks"])
    return _build(StepConfig, "step", **s)


def train_config(cfg: dict, method: str | None = None) -> TrainConfig:
    tr = cfg["train"]
    return _build(
        TrainConfig,
        "train",
        model=model_spec(cfg),
        task=task_spec(cfg),
        step=step_config(cfg, method),
        steps=tr["steps"],
        batch_size=tr["batch_size"],
        seed=_seed(cfg),
        cosine_every=tr["cosine_every"],
        init_scale=cfg["model"]["init_scale"],
        timing=cfg["output"]["timing"],
    )

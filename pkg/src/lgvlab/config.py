"""Run configuration: one JSON document fully determines an experiment.

Defaults describe the standard blob benchmark. Overrides use dotted paths,
e.g. ``training.lr=0.05`` or ``attack.norm=linf``; values are parsed as JSON
when possible and kept as strings otherwise.
"""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .model import ACTIVATIONS

RECIPES = ("one_dnn", "rd", "lgv", "lgv_swa", "lgv_swa_rd", "subspace_rd", "projected",
           "shifted")
SHIFT_TARGETS = ("one_dnn", "lgv_swa")

DEFAULT_CONFIG: dict = {
    "dataset": {
        "generator": "blobs",
        "classes": 4,
        "dim": 16,
        "n_per_class": [100, 100, 250],
        "spread": 0.25,
        "noise": 0.05,          # spirals only
        "idx": None,            # {"train_images", "train_labels", "test_images", "test_labels", "n_val"}
        "seed": 0,
    },
    "model": {"hidden": [64, 64, 64], "activation": "tanh"},
    "training": {
        "epochs": 40,
        "lr": 0.1,
        "schedule": "step",
        "decay_factor": 0.1,
        "decay_every": 13,
        "momentum": 0.9,
        "batch_size": 16,
        "weight_decay": 1e-4,
    },
    # lr None means half of training.lr
    "lgv": {"n_epochs": 10, "K": 40, "lr": None, "momentum": 0.9},
    "surrogates": [
        {"name": "1_dnn", "recipe": "one_dnn"},
        {"name": "lgv", "recipe": "lgv"},
        {"name": "lgv_swa", "recipe": "lgv_swa"},
        {"name": "rd", "recipe": "rd", "sigma": 0.01},
        {"name": "lgv_swa_rd", "recipe": "lgv_swa_rd", "sigma": 0.01},
        {"name": "subspace_rd", "recipe": "subspace_rd"},
        {"name": "lgv_swa_shifted", "recipe": "shifted", "onto": "lgv_swa", "gamma": 1.0},
        {"name": "dnn_shifted", "recipe": "shifted", "onto": "one_dnn", "gamma": 0.5},
    ],
    "attack": {
        "norm": "l2",
        "epsilon": 0.15,
        "alpha": None,
        "n_iter": 50,
        "momentum": 0.0,
        "feature_noise_sigma": 0.0,
    },
    "targets": [
        {"name": "target_101", "seed": 101},
        {"name": "target_102", "seed": 102},
        {"name": "target_103", "seed": 103},
    ],
    "seeds": [0, 1, 2],
    "n_examples": 500,          # attacked examples per run on the test split
    "n_examples_val": 300,      # same on the validation split (hyperparameter selection)
    "geometry": {
        "eval_split": "train",
        "power_iters": 100,
        "power_tol": 1e-4,
        "trace_probes": 30,
        "lgv_models": 8,        # individual LGV models probed per run (evenly spaced)
        "ray_alphas": [0.0, 5.0, 10.0, 20.0],  # below the trained weight norm (about 35)
        "ray_directions": [0, 1, 2, 3, 4],
        "interp_alphas": [-1.0, -0.5, 0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0],
        "disk_grid": 21,
        "disk_examples": 1,
        "quadratic": None,      # {"A": [[..]], "center": [..]} switches the hessian probe to a test model
    },
    "sweep": {"recipe": None},
    "output_dir": "runs/default",
}

SWEEP_PARAMS = ("lr", "epochs", "weights_per_epoch", "iterations", "sigma", "gamma", "C")


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config field '{where}'")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, item: str) -> None:
    """Apply one ``dotted.path=value`` override in place."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for i, part in enumerate(parts[:-1]):
        if isinstance(node, list):
            try:
                node = node[int(part)]
                continue
            except (ValueError, IndexError):
                raise ConfigError(f"bad list index in override '{key}'") from None
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config field '{'.'.join(parts[:i + 1])}'")
        node = node[part]
    last = parts[-1]
    if isinstance(node, list):
        try:
            node[int(last)] = parse_value(raw)
        except (ValueError, IndexError):
            raise ConfigError(f"bad list index in override '{key}'") from None
        return
    if not isinstance(node, dict) or last not in node:
        raise ConfigError(f"unknown config field '{key}'")
    node[last] = parse_value(raw)


def _need(cond: bool, field: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{field}: {msg}")


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def validate(cfg: dict) -> dict:
    ds = cfg["dataset"]
    _need(ds["generator"] in ("blobs", "spirals", "idx-file"), "dataset.generator",
          "must be blobs, spirals or idx-file")
    _need(_is_int(ds["seed"]), "dataset.seed", "must be an integer")
    if ds["generator"] == "idx-file":
        _need(isinstance(ds["idx"], dict), "dataset.idx", "idx-file needs the file paths")
    m = cfg["model"]
    _need(m["activation"] in ACTIVATIONS, "model.activation",
          f"must be one of {list(ACTIVATIONS)}, got {m['activation']!r}")
    _need(isinstance(m["hidden"], list) and all(_is_int(h) and h >= 1 for h in m["hidden"]),
          "model.hidden", "must be a list of positive integers")
    tr = cfg["training"]
    _need(_is_int(tr["epochs"]) and tr["epochs"] >= 1, "training.epochs", "must be >= 1")
    _need(_is_num(tr["lr"]) and tr["lr"] >= 0, "training.lr", "must be >= 0")
    _need(tr["schedule"] in ("constant", "step"), "training.schedule", "must be constant or step")
    _need(_is_num(tr["momentum"]) and 0 <= tr["momentum"] < 1, "training.momentum",
          "must lie in [0, 1)")
    _need(_is_int(tr["batch_size"]) and tr["batch_size"] >= 1, "training.batch_size",
          "must be >= 1")
    _need(_is_num(tr["weight_decay"]) and tr["weight_decay"] >= 0, "training.weight_decay",
          "must be >= 0")
    _need(_is_int(tr["decay_every"]) and tr["decay_every"] >= 1, "training.decay_every",
          "must be >= 1")
    lg = cfg["lgv"]
    _need(_is_int(lg["n_epochs"]) and lg["n_epochs"] >= 1, "lgv.n_epochs", "must be >= 1")
    _need(_is_int(lg["K"]) and lg["K"] >= 1, "lgv.K", "must be >= 1")
    _need(lg["lr"] is None or (_is_num(lg["lr"]) and lg["lr"] >= 0), "lgv.lr",
          "must be null or >= 0")
    names = set()
    _need(isinstance(cfg["surrogates"], list) and cfg["surrogates"], "surrogates",
          "must be a non-empty list")
    for i, s in enumerate(cfg["surrogates"]):
        where = f"surrogates.{i}"
        _need(isinstance(s, dict) and "name" in s and "recipe" in s, where,
              "needs 'name' and 'recipe'")
        _need(s["recipe"] in RECIPES, f"{where}.recipe", f"must be one of {list(RECIPES)}")
        _need(s["name"] not in names, f"{where}.name", f"duplicate surrogate {s['name']!r}")
        names.add(s["name"])
        if s["recipe"] in ("rd", "lgv_swa_rd"):
            _need(_is_num(s.get("sigma")) and s["sigma"] >= 0, f"{where}.sigma", "must be >= 0")
        if s["recipe"] == "projected":
            _need(_is_int(s.get("C")) and 0 <= s["C"] <= lg["K"], f"{where}.C",
                  "must be an integer in [0, lgv.K]")
        if s["recipe"] == "shifted":
            _need(s.get("onto") in SHIFT_TARGETS, f"{where}.onto",
                  f"must be one of {list(SHIFT_TARGETS)}")
            _need(_is_num(s.get("gamma")), f"{where}.gamma", "must be a number")
    at = cfg["attack"]
    _need(at["norm"] in ("l2", "linf"), "attack.norm", "must be l2 or linf")
    _need(_is_num(at["epsilon"]) and at["epsilon"] > 0, "attack.epsilon", "must be > 0")
    _need(at["alpha"] is None or (_is_num(at["alpha"]) and 0 < at["alpha"] <= at["epsilon"]),
          "attack.alpha", "must be null or in (0, epsilon]")
    _need(_is_int(at["n_iter"]) and at["n_iter"] >= 1, "attack.n_iter", "must be >= 1")
    tnames = set()
    _need(isinstance(cfg["targets"], list) and cfg["targets"], "targets",
          "must be a non-empty list")
    for i, t in enumerate(cfg["targets"]):
        _need(isinstance(t, dict) and "name" in t and _is_int(t.get("seed")), f"targets.{i}",
              "needs 'name' and an integer 'seed'")
        _need(t["name"] not in tnames, f"targets.{i}.name", f"duplicate target {t['name']!r}")
        tnames.add(t["name"])
        if "activation" in t:
            _need(t["activation"] in ACTIVATIONS, f"targets.{i}.activation",
                  f"must be one of {list(ACTIVATIONS)}")
    _need(isinstance(cfg["seeds"], list) and cfg["seeds"]
          and all(_is_int(s) for s in cfg["seeds"]), "seeds", "must be a non-empty integer list")
    _need(len(set(cfg["seeds"])) == len(cfg["seeds"]), "seeds", "must not repeat")
    for key in ("n_examples", "n_examples_val"):
        _need(_is_int(cfg[key]) and cfg[key] >= 1, key, "must be >= 1")
    g = cfg["geometry"]
    _need(g["eval_split"] in ("train", "val", "test"), "geometry.eval_split",
          "must be train, val or test")
    _need(_is_int(g["disk_grid"]) and g["disk_grid"] >= 3, "geometry.disk_grid", "must be >= 3")
    _need(cfg["sweep"]["recipe"] is None or cfg["sweep"]["recipe"] in names, "sweep.recipe",
          "must name a configured surrogate")
    _need(isinstance(cfg["output_dir"], str) and cfg["output_dir"], "output_dir",
          "must be a non-empty path")
    return cfg


def load_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg = _merge(cfg, user)
    for item in overrides:
        apply_override(cfg, item)
    return validate(cfg)


def config_hash(cfg: dict) -> str:
    """Hash of everything that affects results; output_dir is excluded."""
    body = {k: v for k, v in cfg.items() if k != "output_dir"}
    blob = json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def lgv_lr(cfg: dict) -> float:
    lr = cfg["lgv"]["lr"]
    return 0.5 * cfg["training"]["lr"] if lr is None else float(lr)

"""Experiment plumbing: build datasets, models, surrogates and reports from a run config.

Weights are written under ``<output_dir>/weights`` and ``<output_dir>/lgv``.
Every artifact records the config hash; weight sidecars also record a recipe
hash over the config blocks that determine them, so a weight file is reused
only when it was produced by the same recipe.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import os
import zlib
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import geometry as G
from .attack import AttackConfig, TransferReport, _fmt, ifgsm, transfer_matrix
from .config import config_hash, lgv_lr
from .data import Dataset, idx_dataset, make_blobs, make_spirals, select_correct
from .model import ModelSpec, QuadraticSpec, loss
from .surrogates import (build_subspace, project_top_c, rd_vicinity, sample_subspace,
                         shift_deviations)
from .training import TrainConfig, WeightCollection, collect_lgv, swa, train
from .weightio import read_weights, sidecar_path, write_weights

OUTPUT_ROOT_ENV = "LGVLAB_OUTPUT_ROOT"


class MissingArtifact(IOError):
    pass


def derive_seed(seed: int, tag: str) -> int:
    """Stable child seed for a named role within one run."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(tag.encode())])
    return int(ss.generate_state(1)[0])


def output_dir(cfg: dict) -> Path:
    out = Path(cfg["output_dir"])
    if not out.is_absolute():
        out = Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / out
    return out


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def write_csv(path: Path, fields, rows, header_line: str) -> Path:
    buf = io.StringIO()
    buf.write(header_line + "\n")
    w = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r[k]) for k in fields})
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())
    return path


def read_csv(path) -> list[dict]:
    """Rows of an artifact CSV, skipping the leading '#' line."""
    lines = [l for l in Path(path).read_text().splitlines() if not l.startswith("#")]
    return list(csv.DictReader(lines))


def build_dataset(ds: dict) -> Dataset:
    if ds["generator"] == "blobs":
        return make_blobs(ds["classes"], ds["dim"], ds["n_per_class"], ds["spread"], ds["seed"])
    if ds["generator"] == "spirals":
        return make_spirals(ds["classes"], ds["n_per_class"], ds["noise"], ds["seed"])
    idx = ds["idx"]
    return idx_dataset(idx["train_images"], idx["train_labels"], idx["test_images"],
                       idx["test_labels"], int(idx.get("n_val", 1000)), ds["seed"])


class Pipeline:
    """Lazily builds (or loads) every object a command needs for one config.

    With ``persist=True`` newly built weights are written to disk. ``require``
    names the commands ("train", "collect") whose weight files must already
    exist; a missing or stale file from one of them raises MissingArtifact
    instead of being recomputed.
    """

    def __init__(self, cfg: dict, *, persist: bool = False, require=()):
        self.cfg = cfg
        self.hash = config_hash(cfg)
        self.out = output_dir(cfg)
        self.persist = persist
        self.require = set(require)
        self._data = None
        self._mem: dict = {}

    # -- basic objects -------------------------------------------------

    @property
    def data(self) -> Dataset:
        if self._data is None:
            self._data = build_dataset(self.cfg["dataset"])
        return self._data

    def model_spec(self, block: dict | None = None) -> ModelSpec:
        m = dict(self.cfg["model"])
        if block:
            m.update({k: block[k] for k in ("hidden", "activation") if k in block})
        ds = self.cfg["dataset"]
        d = self.data.input_dim if ds["generator"] == "idx-file" else (
            2 if ds["generator"] == "spirals" else ds["dim"])
        return ModelSpec((d, *m["hidden"], ds["classes"]), m["activation"])

    @property
    def spec(self) -> ModelSpec:
        return self.model_spec()

    def train_config(self, seed: int) -> TrainConfig:
        t = self.cfg["training"]
        return TrainConfig(epochs=t["epochs"], lr=t["lr"], schedule=t["schedule"],
                           decay_factor=t["decay_factor"], decay_every=t["decay_every"],
                           momentum=t["momentum"], batch_size=t["batch_size"],
                           weight_decay=t["weight_decay"], seed=int(seed))

    def attack_config(self, seed: int = 0) -> AttackConfig:
        a = self.cfg["attack"]
        return AttackConfig(norm=a["norm"], epsilon=a["epsilon"], alpha=a["alpha"],
                            n_iter=a["n_iter"], momentum=a["momentum"],
                            feature_noise_sigma=a["feature_noise_sigma"],
                            input_box=self.data.box, seed=int(seed))

    def header(self, seeds=None) -> str:
        seeds = self.cfg["seeds"] if seeds is None else seeds
        return f"# lgvlab config_hash={self.hash} seeds={','.join(str(s) for s in seeds)}"

    # -- weight artifacts ----------------------------------------------

    def _recipe(self, *extra) -> str:
        c = self.cfg
        return _hash([c["dataset"], c["model"], c["training"], *extra])

    def _cached(self, key: str, path: Path, recipe: str, spec, build, meta: dict,
                role: str) -> WeightCollection:
        if key in self._mem:
            return self._mem[key]
        coll = None
        if path.exists():
            rows, side = read_weights(path)
            if side.get("meta", {}).get("recipe_hash") == recipe:
                coll = WeightCollection(spec, rows, side["meta"])
            elif role in self.require:
                raise MissingArtifact(f"{path} was produced by a different config; "
                                      f"re-run `lgvlab {role}`")
        elif role in self.require:
            raise MissingArtifact(f"missing {path}; run `lgvlab {role}` first")
        if coll is None:
            coll = build()
            coll.meta = {**coll.meta, **meta, "recipe_hash": recipe,
                         "config_hash": self.hash}
            if self.persist:
                write_weights(path, coll.weights, spec=spec, meta=coll.meta)
        self._mem[key] = coll
        return coll

    def _train(self, spec, seed, log_name):
        log: list = []
        w = train(spec, self.data, self.train_config(seed), log=log)
        if self.persist:
            write_csv(self.out / "logs" / f"train_{log_name}.csv",
                      ("epoch", "train_loss", "val_accuracy"), log, self.header([seed]))
        return WeightCollection.single(spec, w)

    def base(self, seed: int) -> np.ndarray:
        """The regularly trained surrogate DNN of run ``seed``."""
        path = self.out / "weights" / f"dnn_seed{seed}.lgvw"
        return self._cached(f"base{seed}", path, self._recipe("base", seed), self.spec,
                            lambda: self._train(self.spec, seed, f"dnn_seed{seed}"),
                            {"seed": seed, "role": "base"}, "train")[0]

    def independent(self, seed: int) -> np.ndarray:
        """A second, independently trained DNN of run ``seed`` (source of LGV')."""
        s = derive_seed(seed, "independent")
        path = self.out / "weights" / f"dnn_independent_seed{seed}.lgvw"
        return self._cached(f"indep{seed}", path, self._recipe("independent", seed), self.spec,
                            lambda: self._train(self.spec, s, f"dnn_independent_seed{seed}"),
                            {"seed": seed, "train_seed": s, "role": "independent"},
                            "train")[0]

    def targets(self) -> dict[str, tuple]:
        out = {}
        for t in self.cfg["targets"]:
            spec = self.model_spec(t)
            path = self.out / "weights" / f"target_{t['name']}.lgvw"
            coll = self._cached(f"target:{t['name']}", path, self._recipe("target", t), spec,
                                lambda: self._train(spec, t["seed"], f"target_{t['name']}"),
                                {"seed": t["seed"], "role": "target", "name": t["name"]},
                                "train")
            out[t["name"]] = (spec, coll[0])
        return out

    def _lgv(self, seed: int, w0, tag: str, fname: str) -> WeightCollection:
        lg = self.cfg["lgv"]
        lr = lgv_lr(self.cfg)
        s = derive_seed(seed, tag)

        def build():
            if lr == 0:
                # zero learning rate: SGD never moves, every snapshot is w0
                return WeightCollection(self.spec, np.repeat(w0[None, :], lg["K"], axis=0),
                                        {"lr": 0.0, "epochs": lg["n_epochs"],
                                         "samples_per_epoch": lg["K"] / lg["n_epochs"]})
            t = self.cfg["training"]
            return collect_lgv(self.spec, self.data, w0, lg["n_epochs"], lg["K"], lr,
                               lg["momentum"], s, batch_size=t["batch_size"],
                               weight_decay=t["weight_decay"])

        path = self.out / "lgv" / fname
        return self._cached(f"{tag}{seed}", path, self._recipe(tag, seed, lg, lr), self.spec,
                            build, {"seed": seed, "sgd_seed": s, "role": tag,
                                    "source_hash": hashlib.sha256(np.ascontiguousarray(w0).tobytes()).hexdigest()[:16]},
                            "collect")

    def lgv(self, seed: int) -> WeightCollection:
        return self._lgv(seed, self.base(seed), "lgv", f"lgv_seed{seed}.lgvw")

    def lgv_independent(self, seed: int) -> WeightCollection:
        return self._lgv(seed, self.independent(seed), "lgv_independent",
                         f"lgv_independent_seed{seed}.lgvw")

    def basis(self, seed: int, independent: bool = False):
        key = f"basis{'i' if independent else ''}{seed}"
        if key not in self._mem:
            coll = self.lgv_independent(seed) if independent else self.lgv(seed)
            self._mem[key] = build_subspace(coll)
        return self._mem[key]

    def needs_independent(self) -> bool:
        return any(s["recipe"] == "shifted" for s in self.cfg["surrogates"])

    # -- surrogates and attacks ----------------------------------------

    def surrogate(self, entry: dict, seed: int) -> WeightCollection:
        recipe = entry["recipe"]
        spec = self.spec
        K = self.cfg["lgv"]["K"]
        if recipe == "one_dnn":
            return WeightCollection.single(spec, self.base(seed))
        if recipe == "rd":
            return rd_vicinity(spec, self.base(seed), entry["sigma"], K,
                               derive_seed(seed, "rd:" + entry["name"]))
        if recipe == "lgv":
            return self.lgv(seed)
        if recipe == "lgv_swa":
            return WeightCollection.single(spec, swa(self.lgv(seed)))
        if recipe == "lgv_swa_rd":
            return rd_vicinity(spec, swa(self.lgv(seed)), entry["sigma"], K,
                               derive_seed(seed, "rd:" + entry["name"]))
        if recipe == "subspace_rd":
            return sample_subspace(self.basis(seed), K, derive_seed(seed, "sub:" + entry["name"]))
        if recipe == "projected":
            return project_top_c(self.basis(seed), self.lgv(seed), entry["C"])
        if recipe == "shifted":
            center = self.base(seed) if entry["onto"] == "one_dnn" else swa(self.lgv(seed))
            return shift_deviations(center, self.basis(seed, independent=True),
                                    entry["gamma"], spec)
        raise ValueError(f"unknown recipe {recipe!r}")

    def surrogates(self, seed: int, entries=None) -> dict[str, WeightCollection]:
        entries = self.cfg["surrogates"] if entries is None else entries
        return {e["name"]: self.surrogate(e, seed) for e in entries}

    def split(self, name: str):
        return getattr(self.data, name)

    def examples(self, seed: int, split: str = "test"):
        n = self.cfg["n_examples_val" if split == "val" else "n_examples"]
        return select_correct(list(self.targets().values()), self.split(split), n,
                              derive_seed(seed, "examples"))

    def transfer(self, split: str = "test", entries=None, seeds=None) -> TransferReport:
        report = TransferReport()
        targets = self.targets()
        for seed in (self.cfg["seeds"] if seeds is None else seeds):
            b = self.examples(seed, split)
            sur = self.surrogates(seed, entries)
            report.extend(transfer_matrix(self.spec, sur, targets, b, self.attack_config(),
                                          [seed]))
        return report

    # -- geometry -------------------------------------------------------

    def lgv_indices(self) -> list[int]:
        K = self.cfg["lgv"]["K"]
        n = min(K, int(self.cfg["geometry"]["lgv_models"]))
        return sorted({int(i) for i in np.linspace(0, K - 1, n).round()})

    def flatness_models(self, seed: int) -> list[tuple[str, np.ndarray]]:
        lgv = self.lgv(seed)
        out = [("1_dnn", self.base(seed))]
        out += [(f"lgv_{k}", lgv[k]) for k in self.lgv_indices()]
        out.append(("lgv_swa", swa(lgv)))
        return out

    def hessian_rows(self, seed: int) -> list[dict]:
        g = self.cfg["geometry"]
        if g["quadratic"] is not None:
            q = g["quadratic"]
            spec = QuadraticSpec(np.asarray(q["A"], dtype=np.float64),
                                 None if q.get("center") is None else np.asarray(q["center"]))
            models = [("quadratic", np.zeros(spec.n_params))]
            b = None
        else:
            spec = self.spec
            models = self.flatness_models(seed)
            b = self.split(g["eval_split"])
        rows = []
        for name, w in models:
            lam = G.hessian_max_eigenvalue(spec, w, b, g["power_iters"], g["power_tol"], seed)
            tr = G.hessian_trace(spec, w, b, g["trace_probes"], seed)
            rows.append({"seed": seed, "model": name, "max_eigenvalue": lam, "trace": tr})
        return rows

    def ray_rows(self, seed: int) -> list[dict]:
        g = self.cfg["geometry"]
        b = self.split(g["eval_split"])
        rows = []
        for name, w in self.flatness_models(seed):
            for d in g["ray_directions"]:
                probe = G.ray_losses(self.spec, w, d, g["ray_alphas"], b)
                h = probe.direction_hash()
                for a, l, gr in zip(probe.alphas, probe.losses, probe.growth):
                    rows.append({"seed": seed, "origin": name, "direction_seed": d,
                                 "direction_hash": h, "alpha": float(a), "loss": float(l),
                                 "growth": float(gr)})
        return rows

    def interpolate_rows(self, seed: int) -> list[dict]:
        g = self.cfg["geometry"]
        w0 = self.base(seed)
        ws = swa(self.lgv(seed))
        rows = []
        for split in ("train", "test"):
            probe = G.interpolate(self.spec, w0, ws, g["interp_alphas"], self.split(split))
            for a, l in zip(probe.alphas, probe.losses):
                rows.append({"seed": seed, "split": split, "alpha": float(a), "loss": float(l)})
        return rows

    def pca_rows(self, seed: int) -> list[dict]:
        basis = self.basis(seed)
        cum = np.cumsum(basis.explained_ratio)
        return [{"seed": seed, "component": i + 1, "singular_value": float(s),
                 "explained_ratio": float(r), "cumulative": float(c)}
                for i, (s, r, c) in enumerate(zip(basis.singular_values,
                                                  basis.explained_ratio, cum))]

    def disk_rows(self, seed: int) -> list[dict]:
        g = self.cfg["geometry"]
        b = self.examples(seed, "test")
        cfg = self.attack_config(seed)
        n = min(len(b), int(g["disk_examples"]))
        sub = b.subset(np.arange(n))
        dnn = WeightCollection.single(self.spec, self.base(seed))
        lgv = self.lgv(seed)
        x1 = ifgsm(self.spec, dnn, sub, cfg)
        x2 = ifgsm(self.spec, lgv, sub, cfg)
        models = [("1_dnn", self.spec, dnn), ("lgv", self.spec, lgv),
                  ("lgv_swa", self.spec, WeightCollection.single(self.spec, swa(lgv)))]
        models += [(name, spec, WeightCollection.single(spec, w))
                   for name, (spec, w) in self.targets().items()]
        rows = []
        for i in range(n):
            try:
                basis = G.plane_basis(sub.inputs[i], x1[i], x2[i])
            except G.DegeneratePlane:
                continue
            for name, spec, coll in models:
                pm = G.disk_loss_map(spec, coll, sub.inputs[i], int(sub.labels[i]), basis,
                                     cfg.epsilon, g["disk_grid"], self.data.box)
                for r in range(len(pm.coords)):
                    for c in range(len(pm.coords)):
                        rows.append({"seed": seed, "example": i, "model": name,
                                     "a": float(pm.coords[r]), "b": float(pm.coords[c]),
                                     "loss": float(pm.grid[r, c]),
                                     "in_disk": int(pm.in_disk[r, c])})
        return rows


PROBES = {
    "hessian": (("seed", "model", "max_eigenvalue", "trace"), Pipeline.hessian_rows),
    "rays": (("seed", "origin", "direction_seed", "direction_hash", "alpha", "loss", "growth"),
             Pipeline.ray_rows),
    "interpolate": (("seed", "split", "alpha", "loss"), Pipeline.interpolate_rows),
    "pca": (("seed", "component", "singular_value", "explained_ratio", "cumulative"),
            Pipeline.pca_rows),
    "disk": (("seed", "example", "model", "a", "b", "loss", "in_disk"), Pipeline.disk_rows),
}


# -- sweeps -------------------------------------------------------------

_DEFAULT_SWEEP_RECIPE = {"lr": "lgv", "epochs": "lgv", "weights_per_epoch": "lgv",
                         "iterations": "lgv", "sigma": "rd", "gamma": "shifted",
                         "C": "projected"}


def sweep_entry(cfg: dict, param: str) -> dict:
    """The surrogate entry a sweep scores: sweep.recipe, else the first of the default recipe."""
    name = cfg["sweep"]["recipe"]
    for e in cfg["surrogates"]:
        if (name is not None and e["name"] == name) or (
                name is None and e["recipe"] == _DEFAULT_SWEEP_RECIPE[param]):
            return copy.deepcopy(e)
    recipe = _DEFAULT_SWEEP_RECIPE[param]
    entry = {"name": recipe, "recipe": recipe}
    entry.update({"rd": {"sigma": 0.01}, "shifted": {"onto": "one_dnn", "gamma": 0.5},
                  "projected": {"C": 0}}.get(recipe, {}))
    return entry


def sweep_variant(cfg: dict, param: str, value) -> tuple[dict, dict]:
    """Config and surrogate entry for one sweep value."""
    c = copy.deepcopy(cfg)
    entry = sweep_entry(cfg, param)
    lg = c["lgv"]
    per_epoch = lg["K"] / lg["n_epochs"]
    if param == "lr":
        lg["lr"] = float(value)
    elif param == "epochs":
        lg["n_epochs"] = int(value)
        lg["K"] = max(1, int(round(per_epoch * int(value))))
    elif param == "weights_per_epoch":
        lg["K"] = max(1, int(round(float(value) * lg["n_epochs"])))
    elif param == "iterations":
        c["attack"]["n_iter"] = int(value)
    elif param == "sigma":
        entry["sigma"] = float(value)
    elif param == "gamma":
        entry["gamma"] = float(value)
    elif param == "C":
        entry["C"] = int(value)
    else:
        raise ValueError(f"unknown sweep parameter {param!r}")
    return c, entry


def run_sweep(cfg: dict, param: str, values, split: str = "val") -> list[dict]:
    rows = []
    for v in values:
        c, entry = sweep_variant(cfg, param, v)
        pipe = Pipeline(c)
        # base weights and targets do not depend on the swept value; reuse files when present
        pipe.out = output_dir(cfg)
        rep = pipe.transfer(split=split, entries=[entry])
        for r in rep.sorted_rows():
            rows.append({"value": v, "target": r["target"], "seed": r["seed"],
                         "success_rate": r["success_rate"], "n": r["n"]})
    return rows


def aggregate_sweep(rows: list[dict]) -> list[dict]:
    groups: dict = {}
    order = []
    for r in rows:
        key = (r["value"], r["target"])
        if key not in groups:
            order.append(key)
        groups.setdefault(key, []).append(r["success_rate"])
    out = []
    for key in order:
        vals = np.asarray(groups[key])
        out.append({"value": key[0], "target": key[1], "mean": float(vals.mean()),
                    "sd": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0})
    return out

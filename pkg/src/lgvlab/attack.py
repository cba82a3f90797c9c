"""I-FGSM over single- and multi-weight surrogates, and transfer evaluation."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .model import Batch, InvalidArgument, grad_input, predict
from .training import WeightCollection


class AttackError(ArithmeticError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    norm: str = "linf"
    epsilon: float = 4 / 255
    alpha: float | None = None  # defaults to epsilon / 10
    n_iter: int = 50
    momentum: float = 0.0
    feature_noise_sigma: float = 0.0
    input_box: tuple[float, float] = (0.0, 1.0)
    seed: int = 0
    raw_gradient: bool = False

    def __post_init__(self):
        if self.norm not in ("l2", "linf"):
            raise InvalidArgument(f"norm must be 'l2' or 'linf', got {self.norm!r}")
        if not self.epsilon > 0:
            raise InvalidArgument("epsilon must be > 0")
        if self.alpha is None:
            object.__setattr__(self, "alpha", self.epsilon / 10)
        if not self.alpha > 0:
            raise InvalidArgument("alpha must be > 0")
        if self.alpha > self.epsilon:
            raise InvalidArgument("alpha must not exceed epsilon")
        if self.n_iter < 1:
            raise InvalidArgument("n_iter must be >= 1")
        if self.momentum < 0 or self.feature_noise_sigma < 0:
            raise InvalidArgument("momentum and feature_noise_sigma must be >= 0")
        object.__setattr__(self, "input_box", tuple(float(v) for v in self.input_box))

    @classmethod
    def reference_defaults(cls, norm: str = "linf", **kw) -> "AttackConfig":
        """Image-scale settings: eps 4/255 (linf) or 3 (l2), alpha eps/10, 50 iterations."""
        eps = 4 / 255 if norm == "linf" else 3.0
        return cls(norm=norm, epsilon=eps, alpha=eps / 10, n_iter=50, **kw)


def project_ball(x_adv: np.ndarray, x: np.ndarray, norm: str, eps: float) -> np.ndarray:
    """Nearest point of the closed eps-ball around each row of ``x``."""
    delta = np.asarray(x_adv, dtype=np.float64) - x
    if norm == "linf":
        return x + np.clip(delta, -eps, eps)
    if norm == "l2":
        norms = np.linalg.norm(delta, axis=1, keepdims=True)
        factor = np.where(norms > eps, eps / np.where(norms > 0, norms, 1.0), 1.0)
        return x + delta * factor
    raise InvalidArgument(f"unknown norm {norm!r}")


def _normalize(g: np.ndarray, norm: str) -> np.ndarray:
    if norm == "linf":
        return np.sign(g)
    n = np.linalg.norm(g, axis=1, keepdims=True)
    return g / np.where(n > 0, n, 1.0)


def _l1_normalize(g: np.ndarray) -> np.ndarray:
    n = np.abs(g).sum(axis=1, keepdims=True)
    return g / np.where(n > 0, n, 1.0)


def weight_order(K: int, seed: int) -> np.ndarray:
    """The single shuffled order in which an attack visits a K-weight surrogate."""
    return np.random.default_rng(seed).permutation(K)


def ifgsm(spec, surrogate: WeightCollection, b: Batch, cfg: AttackConfig, *,
          example_offset: int = 0, callback=None) -> np.ndarray:
    """Untargeted iterative attack; iteration i uses shuffled weight i mod K.

    ``example_offset`` is the global index of the first row of ``b``. Gradient
    noise is drawn from one stream per example, so attacking shards of a batch
    gives the same rows as attacking the whole batch. ``callback(i, x_adv)`` is
    called after every iteration.
    """
    x = b.inputs
    lo, hi = cfg.input_box
    if np.any(x < lo) or np.any(x > hi):
        raise InvalidArgument("inputs must lie inside the input box")
    K = len(surrogate)
    order = weight_order(K, cfg.seed)
    noise_rngs = None
    if cfg.feature_noise_sigma > 0:
        noise_rngs = [np.random.default_rng([cfg.seed, example_offset + i]) for i in range(len(b))]
    x_adv = x.copy()
    m = np.zeros_like(x)
    for i in range(cfg.n_iter):
        w = surrogate.weights[order[i % K]]
        g = grad_input(spec, w, b.with_inputs(x_adv), reduction="sum")
        if not np.all(np.isfinite(g)):
            raise AttackError(f"non-finite input gradient at iteration {i} (weight {order[i % K]})")
        if noise_rngs is not None:
            g = g + cfg.feature_noise_sigma * np.stack(
                [r.standard_normal(x.shape[1]) for r in noise_rngs])
        if cfg.momentum > 0:
            m = cfg.momentum * m + _l1_normalize(g)
            g = m
        step = g if cfg.raw_gradient else _normalize(g, cfg.norm)
        x_adv = x_adv + cfg.alpha * step
        x_adv = project_ball(x_adv, x, cfg.norm, cfg.epsilon)
        x_adv = np.clip(x_adv, lo, hi)
        if callback is not None:
            callback(i, x_adv)
    return x_adv


@dataclass
class TransferReport:
    rows: list[dict] = field(default_factory=list)

    CSV_FIELDS = ("surrogate", "target", "norm", "eps", "seed", "success_rate", "n")

    def extend(self, other: "TransferReport") -> None:
        self.rows.extend(other.rows)

    def sorted_rows(self) -> list[dict]:
        return sorted(self.rows, key=lambda r: (r["surrogate"], r["target"], r["norm"],
                                                r["eps"], r["seed"]))

    def rate(self, surrogate: str, target: str, seed=None) -> float:
        vals = [r["success_rate"] for r in self.rows if r["surrogate"] == surrogate
                and r["target"] == target and (seed is None or r["seed"] == seed)]
        if not vals:
            raise KeyError((surrogate, target, seed))
        return float(np.mean(vals))

    def aggregate(self) -> list[dict]:
        """Mean and sample standard deviation across seeds (sd = 0 for one seed)."""
        groups: dict[tuple, list[float]] = {}
        for r in self.rows:
            groups.setdefault((r["surrogate"], r["target"], r["norm"], r["eps"]), []).append(
                r["success_rate"])
        out = []
        for key in sorted(groups):
            vals = np.asarray(groups[key])
            sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            out.append({"surrogate": key[0], "target": key[1], "norm": key[2], "eps": key[3],
                        "mean": float(vals.mean()), "sd": sd, "runs": len(vals)})
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in self.sorted_rows():
            writer.writerow({k: _fmt(r[k]) for k in self.CSV_FIELDS})
        return buf.getvalue()

    def aggregate_csv(self) -> str:
        buf = io.StringIO()
        fields = ("surrogate", "target", "norm", "eps", "mean", "sd", "runs")
        writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for r in self.aggregate():
            writer.writerow({k: _fmt(r[k]) for k in fields})
        return buf.getvalue()

    def to_json(self, **extra) -> str:
        payload = dict(extra)
        payload["rows"] = self.sorted_rows()
        payload["aggregate"] = self.aggregate()
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _fmt(v):
    if isinstance(v, float):
        return repr(round(v, 12))
    return v


def evaluate(targets: Mapping[str, tuple] | Sequence[tuple], x_adv: np.ndarray, b: Batch, *,
             surrogate_id: str = "", norm: str = "", eps: float = 0.0,
             seed: int = 0) -> TransferReport:
    """Misclassification rate of ``x_adv`` on each target."""
    if not isinstance(targets, Mapping):
        targets = {f"target{i}": t for i, t in enumerate(targets)}
    report = TransferReport()
    for name, (spec, w) in targets.items():
        wrong = int(np.sum(predict(spec, w, x_adv) != b.labels))
        report.rows.append({"surrogate": surrogate_id, "target": name, "norm": norm,
                            "eps": float(eps), "seed": int(seed),
                            "success_rate": wrong / len(b), "n": len(b)})
    return report


def transfer_matrix(spec, surrogates: Mapping[str, WeightCollection],
                    targets: Mapping[str, tuple], b: Batch, cfg: AttackConfig,
                    seeds: Sequence[int]) -> TransferReport:
    """Attack with every surrogate under every seed and score every target."""
    if not seeds:
        raise InvalidArgument("seeds must be non-empty")
    report = TransferReport()
    for name in sorted(surrogates):
        for seed in seeds:
            run_cfg = replace(cfg, seed=int(seed))
            x_adv = ifgsm(spec, surrogates[name], b, run_cfg)
            report.extend(evaluate(targets, x_adv, b, surrogate_id=name, norm=cfg.norm,
                                   eps=cfg.epsilon, seed=seed))
    return report


def config_dict(cfg: AttackConfig) -> dict:
    d = asdict(cfg)
    d["input_box"] = list(cfg.input_box)
    return d

"""Loss-landscape probes in weight space and input space."""
from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import model as M
from .attack import AttackConfig, ifgsm
from .model import Batch, InvalidArgument, check_weights
from .training import WeightCollection


class DegeneratePlane(ValueError):
    pass


@dataclass
class PowerIterationResult:
    eigenvalue: float
    history: list[float]
    converged: bool
    degenerate: bool = False


@dataclass(eq=False)
class RayProbe:
    origin: np.ndarray
    direction: np.ndarray
    alphas: np.ndarray
    losses: np.ndarray

    @property
    def growth(self) -> np.ndarray:
        return self.losses - self.losses[0]

    def direction_hash(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.direction).tobytes()).hexdigest()[:16]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["alpha", "loss"])
        for a, l in zip(self.alphas, self.losses):
            w.writerow([repr(float(a)), repr(float(l))])
        return buf.getvalue()


@dataclass(eq=False)
class PlaneMap:
    anchor: np.ndarray
    u: np.ndarray
    v: np.ndarray
    coords: np.ndarray          # grid_n values shared by both axes
    grid: np.ndarray            # grid[i, j] = loss at anchor + coords[i] u + coords[j] v
    radius: float
    in_disk: np.ndarray = field(init=False)

    def __post_init__(self):
        a, b = np.meshgrid(self.coords, self.coords, indexing="ij")
        self.in_disk = a ** 2 + b ** 2 <= self.radius ** 2

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["a", "b", "loss", "in_disk"])
        n = len(self.coords)
        for i in range(n):
            for j in range(n):
                w.writerow([repr(float(self.coords[i])), repr(float(self.coords[j])),
                            repr(float(self.grid[i, j])), int(self.in_disk[i, j])])
        return buf.getvalue()


def power_iteration(hvp_fn: Callable[[np.ndarray], np.ndarray], p: int, max_iters: int = 100,
                    tol: float = 1e-4, seed: int = 0) -> PowerIterationResult:
    if not tol > 0:
        raise InvalidArgument("tol must be > 0")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(p)
    v /= np.linalg.norm(v)
    hv = hvp_fn(v)
    norm = float(np.linalg.norm(hv))
    if norm == 0.0:
        return PowerIterationResult(0.0, [0.0], True, degenerate=True)
    lam = float(v @ hv)
    history = [lam]
    converged = False
    for _ in range(max_iters):
        v = hv / norm
        hv = hvp_fn(v)
        norm = float(np.linalg.norm(hv))
        new = float(v @ hv)
        history.append(new)
        if norm == 0.0 or abs(new - lam) < tol * max(abs(new), 1e-12):
            lam = new
            converged = True
            break
        lam = new
    return PowerIterationResult(lam, history, converged)


def hessian_max_eigenvalue(spec, w, b: Batch | None, max_iters: int = 100, tol: float = 1e-4,
                           seed: int = 0) -> float:
    """Dominant Hessian eigenvalue of the batch loss by power iteration on HVPs."""
    w = check_weights(spec, w)
    return power_iteration(lambda v: M.hvp(spec, w, b, v), spec.n_params, max_iters, tol,
                           seed).eigenvalue


def hutchinson_samples(spec, w, b: Batch | None, n_probes: int, seed: int) -> np.ndarray:
    if n_probes < 1:
        raise InvalidArgument("n_probes must be >= 1")
    w = check_weights(spec, w)
    rng = np.random.default_rng(seed)
    out = np.empty(n_probes)
    for i in range(n_probes):
        z = rng.choice([-1.0, 1.0], size=spec.n_params)
        out[i] = z @ M.hvp(spec, w, b, z)
    return out


def hessian_trace(spec, w, b: Batch | None, n_probes: int = 100, seed: int = 0) -> float:
    """Hutchinson estimate of tr(H) with Rademacher probes."""
    return float(hutchinson_samples(spec, w, b, n_probes, seed).mean())


def random_direction(p: int, seed: int) -> np.ndarray:
    e = np.random.default_rng(seed).standard_normal(p)
    return e / np.linalg.norm(e)


@dataclass(frozen=True, eq=False)
class AdversarialLoss:
    """Ray mode: attack the displaced surrogate, report the target's loss on the result."""
    target_spec: object
    target_w: np.ndarray
    cfg: AttackConfig


def _probe_losses(spec, points: Sequence[np.ndarray], b, mode) -> np.ndarray:
    out = []
    for w in points:
        if mode is None:
            out.append(M.loss(spec, w, b))
        else:
            x_adv = ifgsm(spec, WeightCollection.single(spec, w), b, mode.cfg)
            out.append(M.loss(mode.target_spec, mode.target_w, b.with_inputs(x_adv)))
    return np.asarray(out, dtype=np.float64)


def ray_losses(spec, w, direction_seed: int, alphas, b: Batch | None, mode=None) -> RayProbe:
    """Losses at w + alpha d for a unit direction d drawn from ``direction_seed``."""
    w = check_weights(spec, w)
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.size == 0 or alphas[0] != 0 or np.any(np.diff(alphas) < 0):
        raise InvalidArgument("alphas must be sorted ascending and start at 0")
    d = random_direction(spec.n_params, direction_seed)
    losses = _probe_losses(spec, [w + a * d for a in alphas], b, mode)
    return RayProbe(w, d, alphas, losses)


def interpolate(spec, w_a, w_b, alphas, b: Batch | None, mode=None) -> RayProbe:
    """Losses along alpha * w_a + (1 - alpha) * w_b; alphas may leave [0, 1]."""
    w_a = check_weights(spec, w_a)
    w_b = check_weights(spec, w_b)
    alphas = np.asarray(alphas, dtype=np.float64)
    diff = w_a - w_b
    n = float(np.linalg.norm(diff))
    direction = diff / n if n > 0 else diff
    points = [a * w_a + (1.0 - a) * w_b for a in alphas]
    return RayProbe(w_b, direction, alphas, _probe_losses(spec, points, b, mode))


def plane_basis(x, x_adv_1, x_adv_2) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal (u', v') spanning the plane through x, x_adv_1 and x_adv_2."""
    x = np.asarray(x, dtype=np.float64).ravel()
    u = np.asarray(x_adv_1, dtype=np.float64).ravel() - x
    uu = float(u @ u)
    if uu == 0.0:
        raise DegeneratePlane("first adversarial point coincides with x")
    d2 = np.asarray(x_adv_2, dtype=np.float64).ravel() - x
    v = d2 - (d2 @ u) / uu * u
    vn = float(np.linalg.norm(v))
    if vn <= 1e-12 * max(1.0, float(np.linalg.norm(d2))):
        raise DegeneratePlane("the three points are collinear")
    return u / np.sqrt(uu), v / vn


def plane_coordinates(x, point, basis) -> tuple[float, float]:
    u, v = basis
    delta = np.asarray(point, dtype=np.float64).ravel() - np.asarray(x, dtype=np.float64).ravel()
    return float(delta @ u), float(delta @ v)


def grid_coords(radius: float, grid_n: int, extent: float = 1.2) -> np.ndarray:
    """Symmetric lattice over [-extent*r, extent*r]; the middle value is exactly 0 for odd n."""
    i = np.arange(grid_n)
    return extent * radius * (2 * i - (grid_n - 1)) / (grid_n - 1)


def disk_loss_map(spec, weights, x, y: int, basis, eps: float, grid_n: int = 21,
                  input_box: tuple[float, float] | None = (0.0, 1.0)) -> PlaneMap:
    """Loss (mean over an ensemble) on a lattice in the plane, 20% beyond the eps-disk."""
    if grid_n < 3:
        raise InvalidArgument("grid_n must be >= 3")
    u, v = basis
    x = np.asarray(x, dtype=np.float64).ravel()
    W = weights.weights if isinstance(weights, WeightCollection) else np.atleast_2d(weights)
    coords = grid_coords(eps, grid_n)
    a, bb = np.meshgrid(coords, coords, indexing="ij")
    pts = x + a.reshape(-1, 1) * u + bb.reshape(-1, 1) * v
    # the grid centre must be x itself
    pts[(a.reshape(-1) == 0) & (bb.reshape(-1) == 0)] = x
    if input_box is not None:
        pts = np.clip(pts, *input_box)
    batch = Batch(pts, np.full(len(pts), int(y)))
    total = np.zeros(len(pts))
    for w in W:
        total += M.per_example_loss(spec, w, batch)
    grid = (total / len(W)).reshape(grid_n, grid_n)
    return PlaneMap(x, u, v, coords, grid, float(eps))


def input_gradient_jacobian(spec, w, x_batch: Batch, h: float = 1e-6) -> np.ndarray:
    """d x p Jacobian of the (single-example) input gradient w.r.t. weights, by central differences."""
    w = check_weights(spec, w)
    if len(x_batch) != 1:
        raise InvalidArgument("Jacobian probe expects a single example")
    cols = []
    for j in range(spec.n_params):
        e = np.zeros_like(w)
        e[j] = h
        gp = M.grad_input(spec, w + e, x_batch)[0]
        gm = M.grad_input(spec, w - e, x_batch)[0]
        cols.append((gp - gm) / (2 * h))
    return np.stack(cols, axis=1)


def weight_noise_gradient_covariance(spec, w, x_batch: Batch, sigma: float, n_draws: int,
                                     seed: int) -> np.ndarray:
    """Empirical covariance of the input gradient under N(0, sigma^2 I) weight noise."""
    w = check_weights(spec, w)
    rng = np.random.default_rng(seed)
    grads = np.empty((n_draws, x_batch.inputs.shape[1]))
    for i in range(n_draws):
        grads[i] = M.grad_input(spec, w + sigma * rng.standard_normal(w.size), x_batch)[0]
    return np.cov(grads, rowvar=False)


def swa_gradient_gap(spec, shift, deviations: np.ndarray, scale: float, b: Batch) -> float:
    """|| mean_k grad_x L(shift + s*dev_k) - grad_x L(shift) || over the batch."""
    ens = np.mean([M.grad_input(spec, shift + scale * d, b) for d in deviations], axis=0)
    return float(np.linalg.norm(ens - M.grad_input(spec, shift, b)))

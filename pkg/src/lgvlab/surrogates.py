"""Weight-space surrogate constructors: random vicinities, LGV subspace samples,
PCA projections and shifted deviation sets."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import InvalidArgument, check_weights
from .training import WeightCollection, swa
from .weightio import read_weights, write_weights

# above this many coordinates the SVD goes through the K x K Gram matrix
GRAM_THRESHOLD = 200_000


@dataclass(eq=False)
class SubspaceBasis:
    spec: object
    shift: np.ndarray
    deviations: np.ndarray          # K x p, rows w_k - shift
    components: np.ndarray          # r x p orthonormal rows, r = numerical rank
    singular_values: np.ndarray     # length K, descending, zero-padded
    explained_ratio: np.ndarray     # length K
    degenerate: bool = False

    @property
    def rank(self) -> int:
        return self.components.shape[0]

    @property
    def K(self) -> int:
        return self.deviations.shape[0]

    def save(self, path) -> Path:
        meta = {"singular_values": self.singular_values.tolist(),
                "explained_ratio": self.explained_ratio.tolist(),
                "rank": self.rank, "degenerate": self.degenerate}
        rows = np.vstack([self.shift[None, :], self.deviations, self.components])
        return write_weights(path, rows, spec=self.spec, meta=meta)

    @classmethod
    def load(cls, path, spec) -> "SubspaceBasis":
        rows, side = read_weights(path)
        meta = side["meta"]
        sv = np.asarray(meta["singular_values"])
        K = len(sv)
        return cls(spec, rows[0], rows[1:K + 1], rows[K + 1:], sv,
                   np.asarray(meta["explained_ratio"]), bool(meta["degenerate"]))


def _fix_signs(v: np.ndarray) -> np.ndarray:
    """Flip each row so its largest-magnitude coordinate is positive."""
    if v.size == 0:
        return v
    idx = np.argmax(np.abs(v), axis=1)
    signs = np.sign(v[np.arange(v.shape[0]), idx])
    signs[signs == 0] = 1.0
    return v * signs[:, None]


def _svd(P: np.ndarray, gram_threshold: int):
    K, p = P.shape
    if p <= gram_threshold:
        _, s, vt = np.linalg.svd(P, full_matrices=False)
        return s, vt
    # eigen-decomposition of P P^T gives the same right singular vectors for sigma > 0
    evals, u = np.linalg.eigh(P @ P.T)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    u = u[:, order]
    s = np.sqrt(evals)
    vt = np.zeros((K, p))
    nz = s > 0
    vt[nz] = (u[:, nz].T @ P) / s[nz, None]
    return s, vt


def build_subspace(coll: WeightCollection, gram_threshold: int = GRAM_THRESHOLD) -> SubspaceBasis:
    """Exact SVD of the deviation matrix of ``coll`` around its mean."""
    K = len(coll)
    if K < 2:
        raise InvalidArgument("a subspace needs at least two weight vectors")
    shift = swa(coll)
    P = coll.weights - shift
    scale = max(1.0, float(np.abs(coll.weights).max()))
    # rows are centred by construction; re-centring would be a no-op
    assert np.abs(P.sum(axis=0)).max() <= 1e-8 * K * scale
    s, vt = _svd(P, gram_threshold)
    s = np.concatenate([s, np.zeros(K - len(s))])
    tol = max(P.shape) * np.finfo(np.float64).eps * (s[0] if len(s) else 0.0)
    rank = int(np.sum(s > tol)) if s[0] > 0 else 0
    s = np.where(s > tol, s, 0.0)
    components = _fix_signs(vt[:rank])
    total = float(np.sum(s ** 2))
    ratio = s ** 2 / total if total > 0 else np.zeros(K)
    return SubspaceBasis(coll.spec, shift, P, components, s, ratio, degenerate=rank == 0)


def rd_vicinity(spec, center, sigma: float, K: int, seed: int) -> WeightCollection:
    """K copies of ``center`` plus i.i.d. N(0, sigma^2) noise on every coordinate."""
    if sigma < 0 or K < 1:
        raise InvalidArgument("rd_vicinity needs sigma >= 0 and K >= 1")
    center = check_weights(spec, center)
    rng = np.random.default_rng(seed)
    noise = sigma * rng.standard_normal((K, center.size))
    return WeightCollection(spec, center + noise, {"recipe": "rd", "sigma": sigma, "seed": seed})


def project_top_c(basis: SubspaceBasis, coll: WeightCollection, C: int) -> WeightCollection:
    """Project every weight onto the first C principal components around the shift."""
    if not 0 <= C <= basis.K:
        raise InvalidArgument(f"C must lie in [0, {basis.K}], got {C}")
    V = basis.components[:min(C, basis.rank)]
    dev = coll.weights - basis.shift
    proj = basis.shift + (dev @ V.T) @ V
    return WeightCollection(coll.spec, proj, {"recipe": "projected", "C": C})


def sample_subspace(basis: SubspaceBasis, K_out: int, seed: int, *, z=None) -> WeightCollection:
    """Draw shift + P^T z with z ~ N(0, I_K); pass ``z`` to fix the coefficients."""
    if K_out < 1:
        raise InvalidArgument("K_out must be >= 1")
    if z is None:
        z = np.random.default_rng(seed).standard_normal((K_out, basis.K))
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape != (K_out, basis.K):
        raise InvalidArgument(f"z must have shape {(K_out, basis.K)}")
    return WeightCollection(basis.spec, basis.shift + z @ basis.deviations,
                            {"recipe": "subspace", "seed": seed})


def shift_deviations(new_shift, donor: SubspaceBasis, gamma: float = 1.0,
                     spec=None) -> WeightCollection:
    """Donor deviations, scaled by gamma, re-centred on ``new_shift``."""
    spec = donor.spec if spec is None else spec
    if spec.spec_hash != donor.spec.spec_hash:
        raise InvalidArgument("new shift and donor subspace belong to different model specs")
    new_shift = check_weights(spec, new_shift)
    return WeightCollection(spec, new_shift + gamma * donor.deviations,
                            {"recipe": "shifted", "gamma": gamma})


def reconstruction_error(basis: SubspaceBasis, coll: WeightCollection, C: int) -> float:
    return float(np.linalg.norm(project_top_c(basis, coll, C).weights - coll.weights))


def basis_summary(basis: SubspaceBasis) -> str:
    return json.dumps({"singular_values": basis.singular_values.tolist(),
                       "explained_ratio": basis.explained_ratio.tolist(),
                       "rank": basis.rank}, indent=2, sort_keys=True)

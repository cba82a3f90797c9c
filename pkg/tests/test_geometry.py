import numpy as np
import pytest

from lgvlab import model as M
from lgvlab.geometry import (DegeneratePlane, disk_loss_map, grid_coords, hessian_max_eigenvalue,
                             hessian_trace, hutchinson_samples, input_gradient_jacobian,
                             interpolate, plane_basis, plane_coordinates, power_iteration,
                             ray_losses, random_direction, swa_gradient_gap)
from lgvlab.model import Batch, InvalidArgument, ModelSpec, QuadraticSpec
from lgvlab.training import WeightCollection


def _rotated(eigs, seed=0):
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((len(eigs), len(eigs))))
    return q @ np.diag(eigs) @ q.T


def test_power_iteration_on_known_spectrum():
    eigs = np.array([3.0, 1.0] + [0.5] * 18)
    q = QuadraticSpec(_rotated(eigs))
    lam = hessian_max_eigenvalue(q, np.zeros(20), None, max_iters=200, tol=1e-8)
    assert lam == pytest.approx(3.0, rel=0.01)
    assert hessian_max_eigenvalue(QuadraticSpec(2.5 * q.A), np.zeros(20), None, 200,
                                  1e-8) == pytest.approx(2.5 * lam, rel=1e-3)


def test_power_iteration_degenerate_and_history():
    res = power_iteration(lambda v: np.zeros_like(v), 5)
    assert res.degenerate and res.eigenvalue == 0.0
    A = _rotated(np.linspace(0.1, 2.0, 15), seed=1)
    res = power_iteration(lambda v: A @ v, 15, max_iters=300, tol=1e-10)
    assert res.converged
    # Rayleigh quotients of a PSD power iteration never decrease
    assert all(b >= a - 1e-12 for a, b in zip(res.history, res.history[1:]))
    with pytest.raises(InvalidArgument):
        power_iteration(lambda v: v, 3, tol=0)


def test_trace_estimate():
    A = _rotated(np.linspace(0.2, 3.0, 40), seed=2)
    q = QuadraticSpec(A)
    est = hessian_trace(q, np.zeros(40), None, n_probes=100, seed=0)
    assert est == pytest.approx(np.trace(A), rel=0.05)
    assert hessian_trace(QuadraticSpec(3 * A), np.zeros(40), None, 100, 0) == \
        pytest.approx(3 * est, rel=1e-6)
    s = hutchinson_samples(q, np.zeros(40), None, 200, seed=1)
    sem = s.std(ddof=1) / np.sqrt(len(s))
    assert abs(s.mean() - np.trace(A)) <= 2 * sem + 1e-9


def test_trace_of_network_matches_dense_hessian(small_net):
    spec, w, b = small_net
    p = spec.n_params
    H = np.stack([M.hvp(spec, w, b, e) for e in np.eye(p)])
    s = hutchinson_samples(spec, w, b, 300, seed=3)
    sem = s.std(ddof=1) / np.sqrt(len(s))
    assert abs(s.mean() - np.trace(H)) <= 3 * sem


def test_rays():
    A = _rotated(np.linspace(0.5, 2.0, 10), seed=3)
    c = np.random.default_rng(4).standard_normal(10)
    q = QuadraticSpec(A, c)
    alphas = [0.0, 0.5, 1.0, 2.0]
    ray = ray_losses(q, c, 7, alphas, None)
    d = random_direction(10, 7)
    assert ray.losses[0] == 0.0 and ray.growth[0] == 0.0
    np.testing.assert_allclose(ray.losses, 0.5 * np.square(alphas) * (d @ A @ d), rtol=1e-12)
    other = ray_losses(q, c + 1.0, 7, alphas, None)
    assert other.direction_hash() == ray.direction_hash()
    assert ray_losses(q, c, 8, alphas, None).direction_hash() != ray.direction_hash()
    with pytest.raises(InvalidArgument):
        ray_losses(q, c, 7, [0.5, 1.0], None)


def test_interpolation():
    A = _rotated(np.linspace(0.5, 2.0, 6), seed=5)
    rng = np.random.default_rng(6)
    q = QuadraticSpec(A, rng.standard_normal(6))
    wa, wb = rng.standard_normal((2, 6))
    alphas = np.array([-1.0, 0.0, 0.3, 1.0, 2.0])
    probe = interpolate(q, wa, wb, alphas, None)
    assert probe.losses[1] == pytest.approx(M.loss(q, wb, None))
    assert probe.losses[3] == pytest.approx(M.loss(q, wa, None))
    # a quadratic restricted to a line is an exact parabola
    coef = np.polyfit(alphas, probe.losses, 2)
    np.testing.assert_allclose(np.polyval(coef, alphas), probe.losses, atol=1e-10)
    assert coef[0] == pytest.approx(0.5 * (wa - wb) @ A @ (wa - wb))


def test_plane_basis():
    rng = np.random.default_rng(7)
    x, a1, a2 = rng.uniform(size=(3, 5))
    u, v = plane_basis(x, a1, a2)
    assert u @ u == pytest.approx(1) and v @ v == pytest.approx(1) and abs(u @ v) < 1e-12
    cu, cv = plane_coordinates(x, a1, (u, v))
    assert cv == pytest.approx(0, abs=1e-12) and cu == pytest.approx(np.linalg.norm(a1 - x))
    # a2 lies in the plane: its coordinates reconstruct it
    c2 = plane_coordinates(x, a2, (u, v))
    np.testing.assert_allclose(x + c2[0] * u + c2[1] * v, a2, atol=1e-12)
    with pytest.raises(DegeneratePlane):
        plane_basis(x, x, a2)
    with pytest.raises(DegeneratePlane):
        plane_basis(x, a1, x + 2 * (a1 - x))


def test_grid_coords():
    c = grid_coords(1.0, 5)
    np.testing.assert_allclose(c, [-1.2, -0.6, 0.0, 0.6, 1.2])
    assert c[2] == 0.0


def test_disk_map(small_net):
    spec, w, b = small_net
    x = np.clip(b.inputs[0], 0.2, 0.8)
    y = int(b.labels[0])
    rng = np.random.default_rng(8)
    basis = plane_basis(x, x + rng.normal(0, 0.1, 5), x + rng.normal(0, 0.1, 5))
    m = disk_loss_map(spec, w, x, y, basis, eps=0.2, grid_n=7)
    assert m.grid[3, 3] == pytest.approx(M.loss(spec, w, Batch(x[None], np.array([y]))), rel=1e-14)
    assert m.in_disk[3, 3] and not m.in_disk[0, 0]
    assert len(m.to_csv().splitlines()) == 1 + 49
    ws = w + 0.1 * rng.standard_normal((3, spec.n_params))
    ens = disk_loss_map(spec, WeightCollection(spec, ws), x, y, basis, 0.2, 7)
    singles = [disk_loss_map(spec, wi, x, y, basis, 0.2, 7).grid for wi in ws]
    np.testing.assert_allclose(ens.grid, np.mean(singles, axis=0), rtol=1e-12)


def test_disk_map_linear_two_class_is_monotone():
    spec = ModelSpec((3, 2))
    rng = np.random.default_rng(9)
    w = rng.standard_normal(spec.n_params)
    x, y = np.full(3, 0.5), 0
    g = M.grad_input(spec, w, Batch(x[None], np.array([y])))[0]
    u = g / np.linalg.norm(g)
    v = np.cross(u, [1.0, 0.0, 0.0])
    v /= np.linalg.norm(v)
    m = disk_loss_map(spec, w, x, y, (u, v), eps=0.3, grid_n=9, input_box=None)
    assert np.all(np.diff(m.grid, axis=0) > 0)


def test_input_gradient_jacobian_matches_fd():
    spec = ModelSpec((3, 4, 2), "tanh")
    rng = np.random.default_rng(10)
    w = rng.standard_normal(spec.n_params)
    b = Batch(rng.uniform(size=(1, 3)), np.array([1]))
    J = input_gradient_jacobian(spec, w, b)
    assert J.shape == (3, spec.n_params)
    v = rng.standard_normal(spec.n_params)
    h = 1e-5
    fd = (M.grad_input(spec, w + h * v, b)[0] - M.grad_input(spec, w - h * v, b)[0]) / (2 * h)
    np.testing.assert_allclose(J @ v, fd, rtol=1e-5, atol=1e-9)


def test_swa_gradient_gap_zero_for_symmetric_linear_deviations():
    spec = ModelSpec((3, 2))
    rng = np.random.default_rng(11)
    w = rng.standard_normal(spec.n_params)
    b = Batch(rng.uniform(size=(4, 3)), rng.integers(0, 2, 4))
    d = rng.standard_normal(spec.n_params)
    assert swa_gradient_gap(spec, w, np.stack([d, -d]), 0.0, b) == 0.0
    assert swa_gradient_gap(spec, w, np.stack([d, -d]), 1.0, b) > 0.0

import numpy as np
import pytest

from rinv.grid import SceneMask, make_grid
from rinv.radar import (
    AntennaArray,
    Heatmap,
    adjoint_apply,
    build_imaging_matrix,
    fidelity,
    fidelity_gradient,
    forward_measure,
    local_maxima,
    mainlobe_width_deg,
    steering_tensor,
    steering_vector,
    to_magnitude,
)

from .oracles import central_difference, complex_inner


def test_steering_broadside_is_all_ones():
    np.testing.assert_allclose(steering_vector(90.0, AntennaArray(4)), [1, 1, 1, 1], atol=1e-15)


def test_steering_endfire_alternates():
    np.testing.assert_allclose(steering_vector(0.0, AntennaArray(4)), [1, -1, 1, -1], atol=1e-15)


def test_steering_sixty_degrees_quarter_turns():
    # 2*pi*0.5*cos(60) = pi/2 per element
    np.testing.assert_allclose(
        steering_vector(60.0, AntennaArray(4)), [1, -1j, -1, 1j], atol=1e-15
    )


def test_steering_tensor_unit_modulus_and_first_row():
    S = steering_tensor(make_grid(), AntennaArray(12))
    np.testing.assert_allclose(np.abs(S), 1.0, atol=1e-15)
    assert np.all(S[0] == 1)


@pytest.mark.parametrize("n", [4, 12, 86, 192])
def test_imaging_diagonal_is_n(n):
    B = build_imaging_matrix(make_grid(), AntennaArray(n))
    assert np.all(np.diag(B) == n)


def test_single_antenna_sees_no_angle():
    B = build_imaging_matrix(make_grid(16, 4), AntennaArray(1))
    np.testing.assert_allclose(B, np.ones((16, 16)), atol=0)


def test_imaging_matrix_matches_double_loop():
    grid = make_grid(8, 4, -90, 90, 10)
    array = AntennaArray(4)
    B = build_imaging_matrix(grid, array)
    az = grid.az_centers_deg()
    slow = np.zeros((8, 8), dtype=complex)
    for a in range(8):
        for i in range(8):
            for k in range(4):
                g = np.exp(-1j * 2 * np.pi * k * 0.5 * np.cos(np.radians(90.0 - az[a])))
                s = np.exp(-1j * 2 * np.pi * k * 0.5 * np.cos(np.radians(90.0 - az[i])))
                slow[a, i] += np.conj(g) * s
    np.testing.assert_allclose(B, slow, atol=1e-12, rtol=0)


def test_zero_scene_images_to_zero():
    grid = make_grid()
    hm = forward_measure(SceneMask.zeros(grid), build_imaging_matrix(grid, AntennaArray(12)))
    assert not hm.values.any()


def test_single_cell_images_one_column():
    grid = make_grid()
    B = build_imaging_matrix(grid, AntennaArray(12))
    m = SceneMask.zeros(grid)
    m.values[20, 33] = 1.0
    hm = forward_measure(m, B)
    np.testing.assert_allclose(hm.values[:, 33], B[:, 20], atol=1e-12)
    assert int(np.argmax(np.abs(hm.values[:, 33]))) == 20
    assert np.abs(hm.values[20, 33]) == pytest.approx(12.0)
    mask_other = np.ones(96, bool)
    mask_other[33] = False
    assert not hm.values[:, mask_other].any()


def test_superposition_with_real_weights():
    grid = make_grid(16, 24)
    B = build_imaging_matrix(grid, AntennaArray(12))
    rng = np.random.default_rng(0)
    x1, x2 = rng.random(grid.shape), rng.random(grid.shape)
    a, b = rng.standard_normal(2)
    lhs = forward_measure(SceneMask(grid, np.clip(a * x1 + b * x2, -1e9, 1e9)), B).values
    rhs = a * forward_measure(SceneMask(grid, x1), B).values + b * forward_measure(SceneMask(grid, x2), B).values
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_noise_statistics_and_seed():
    grid = make_grid()
    B = build_imaging_matrix(grid, AntennaArray(12))
    zero = SceneMask.zeros(grid)
    h1 = forward_measure(zero, B, 0.5, seed=3).values
    h2 = forward_measure(zero, B, 0.5, seed=3).values
    assert np.array_equal(h1, h2)
    assert np.std(h1.real) == pytest.approx(0.5 / np.sqrt(2), rel=0.05)
    assert np.std(h1.imag) == pytest.approx(0.5 / np.sqrt(2), rel=0.05)


def test_to_magnitude():
    grid = make_grid(2, 2)
    z = Heatmap(grid, np.zeros((2, 2)), "complex")
    assert not to_magnitude(z).values.any()
    hm = Heatmap(grid, np.array([[3 + 4j, 0], [0, 0]]), "complex")
    assert to_magnitude(hm, normalize=False).values[0, 0] == 5.0
    assert to_magnitude(hm).values[0, 0] == 1.0
    rnd = Heatmap(grid, np.random.default_rng(1).standard_normal((2, 2)) + 1j, "complex")
    assert to_magnitude(rnd).values.max() == 1.0


def test_adjoint_scalar_toy():
    # 1x1 operator B = [2] acting on y = 1 + 1j
    B = np.array([[2.0 + 0j]])
    y = np.array([[1 + 1j]])
    assert (B.conj().T @ y)[0, 0] == 2 + 2j


def test_adjoint_identity_small():
    grid = make_grid(16, 24)
    B = build_imaging_matrix(grid, AntennaArray(12))
    rng = np.random.default_rng(2)
    x = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
    y = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
    lhs = complex_inner(B @ x, y)
    rhs = complex_inner(x, adjoint_apply(Heatmap(grid, y), B))
    assert abs(lhs - rhs) <= 1e-10 * np.linalg.norm(B @ x) * np.linalg.norm(y)


def test_gradient_scalar_toy_complex():
    # 1x1: B = [2], x = 1, gamma*Y = 1 -> residual 1, gradient 2*2*1 = 4
    B = np.array([[2.0 + 0j]])
    from rinv.radar import _fidelity_grad

    g = _fidelity_grad(np.array([[1.0]]), np.array([[1.0 + 0j]]), 1.0, B, "complex", 1e-6)
    assert g[0, 0] == pytest.approx(4.0)


def test_gradient_zero_at_exact_fit():
    grid = make_grid(16, 24)
    B = build_imaging_matrix(grid, AntennaArray(12))
    x = np.random.default_rng(4).random(grid.shape)
    gamma = 2.0
    Y = Heatmap(grid, (B @ x) / gamma)
    g = fidelity_gradient(SceneMask(grid, x), Y, gamma, B)
    np.testing.assert_allclose(g, 0.0, atol=1e-10)


@pytest.mark.parametrize("mode", ["complex", "magnitude"])
def test_gradient_matches_finite_differences(mode):
    grid = make_grid(16, 24)
    B = build_imaging_matrix(grid, AntennaArray(12))
    rng = np.random.default_rng(7)
    x = rng.random(grid.shape)
    truth = rng.random(grid.shape)
    y = B @ truth + 0.1 * (rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape))
    Y = Heatmap(grid, y) if mode == "complex" else to_magnitude(Heatmap(grid, y), normalize=False)
    g = fidelity_gradient(SceneMask(grid, x), Y, 0.8, B)
    f = lambda v: fidelity(v, Y, 0.8, B)
    for idx in zip(rng.integers(0, 16, 10), rng.integers(0, 24, 10)):
        fd = central_difference(f, x, idx, 1e-5)
        assert abs(fd - g[idx]) <= 1e-4 * max(abs(fd), abs(g[idx]))


def test_gradient_mode_mismatch_rejected():
    grid = make_grid(4, 4)
    B = build_imaging_matrix(grid, AntennaArray(4))
    Y = Heatmap(grid, np.ones((4, 4)), "magnitude")
    with pytest.raises(ValueError):
        fidelity_gradient(SceneMask.zeros(grid), Y, 1.0, B, mode="complex")


def test_grid_mismatch_rejected():
    B = build_imaging_matrix(make_grid(8, 4), AntennaArray(4))
    with pytest.raises(ValueError):
        forward_measure(SceneMask.zeros(make_grid(16, 4)), B)
    with pytest.raises(ValueError):
        adjoint_apply(Heatmap(make_grid(16, 4), np.zeros((16, 4))), B)


def test_fewer_antennas_wider_mainlobe_on_default_grid():
    grid = make_grid()
    i0 = 32
    w4 = mainlobe_width_deg(build_imaging_matrix(grid, AntennaArray(4))[:, i0], grid, i0)
    w192 = mainlobe_width_deg(build_imaging_matrix(grid, AntennaArray(192))[:, i0], grid, i0)
    assert w4 > w192


def test_local_maxima_helper():
    assert local_maxima(np.array([0, 1, 0, 2, 0])).tolist() == [1, 3]
    assert local_maxima(np.array([0, 1, 0, 2, 0]), rel_floor=0.6).tolist() == [3]

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, strategies as st

from battkit.diffusion import (SCHEMES, build_diffusion_system, build_radial_grid, correct_concentrations,
                               correction_coefficients, electrode_system, is_hurwitz, k_offset,
                               mean_concentration, steady_mismatch, tridiagonal_spectrum)
from battkit.errors import DomainError, InvalidGridError, NumericalFailure

shells = st.integers(min_value=2, max_value=20)
schemes = st.sampled_from(SCHEMES)


def naive_matrix(r, vol, D):
    """Shell stencil written out entry by entry."""
    n = len(r)
    S = 4 * np.pi * np.asarray(r) ** 2
    A = np.zeros((n, n))
    for i in range(n):
        if i + 1 < n:
            mu = S[i] / (r[i + 1] - r[i]) * D / vol[i]
            A[i, i] -= mu
            A[i, i + 1] += mu
        if i > 0:
            mut = S[i - 1] / (r[i] - r[i - 1]) * D / vol[i]
            A[i, i] -= mut
            A[i, i - 1] += mut
    return A


def shell_trajectory(sys, m, x0, t):
    """Exact solution of x' = A x + B m via the augmented matrix exponential."""
    n = sys.n
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = sys.A
    M[:n, n] = sys.B * m
    z = scipy.linalg.expm(M * t) @ np.append(x0, 1.0)
    return z[:n]


def mismatch_trajectory(sys, m, xt0, t):
    """Exact ``c_mean - x`` under constant ``m``: xt' = A xt + (1 - B) m, free of the growing mean."""
    n = sys.n
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = sys.A
    M[:n, n] = (np.ones(n) - sys.B) * m
    return (scipy.linalg.expm(M * t) @ np.append(xt0, 1.0))[:n]


# --- grids -----------------------------------------------------------------------

def test_uniform_volume_radii():
    g = build_radial_grid(4, 1e-6)
    np.testing.assert_allclose(g.r / 1e-6, [0.629961, 0.793701, 0.908560, 1.0], atol=5e-7)
    np.testing.assert_allclose(g.volumes, 1.047198e-18, rtol=1e-6)


def test_two_shell_uniform_radius():
    g = build_radial_grid(2, 1.0, "uniform-radius")
    np.testing.assert_allclose(g.r, [0.5, 1.0])
    np.testing.assert_allclose(g.volumes, [4 / 3 * np.pi * 0.125, 4 / 3 * np.pi * 0.875])
    np.testing.assert_allclose(g.surfaces, 4 * np.pi * g.r**2)


@given(shells, schemes, st.floats(1e-7, 1e-4))
def test_volumes_telescope(n, scheme, R):
    g = build_radial_grid(n, R, scheme)
    assert abs(g.volumes.sum() - 4 / 3 * np.pi * R**3) <= 1e-12 * 4 / 3 * np.pi * R**3
    assert g.r[-1] == R
    assert np.all(np.diff(g.r) > 0)


@pytest.mark.parametrize("n", [1, 0, -3, 2.5])
def test_grid_rejects_small(n):
    with pytest.raises(InvalidGridError):
        build_radial_grid(n, 1.0)


def test_grid_rejects_bad_scheme_and_radius():
    with pytest.raises(InvalidGridError):
        build_radial_grid(4, 1.0, "chebyshev")
    with pytest.raises(InvalidGridError):
        build_radial_grid(4, 0.0)


# --- system ---------------------------------------------------------------------

@given(shells, schemes)
def test_matrix_matches_naive_stencil(n, scheme):
    g = build_radial_grid(n, 1e-6, scheme)
    sys = build_diffusion_system(g, 3.7e-16)
    ref = naive_matrix(g.r, g.volumes, 3.7e-16)
    np.testing.assert_allclose(sys.A, ref, rtol=1e-13, atol=0)
    assert sys.B[-1] == pytest.approx(g.particle_volume / g.volumes[-1])
    assert np.count_nonzero(sys.B) == 1


def test_two_shell_coefficient_by_hand():
    g = build_radial_grid(2, 1.0, "uniform-radius")
    sys = build_diffusion_system(g, 1.0)
    mu1 = (4 * np.pi * 0.25) / (0.5 * 4 / 3 * np.pi * 0.125)
    assert sys.mu[0] == pytest.approx(mu1)
    assert mu1 == pytest.approx(12.0)
    mut2 = (4 * np.pi * 0.25) / (0.5 * 4 / 3 * np.pi * 0.875)
    assert sys.mu_tilde[1] == pytest.approx(mut2)
    assert sys.A_red.shape == (1, 1)
    # 1x1 reduction: A11 - A12 V1/V2
    assert sys.A_red[0, 0] == pytest.approx(-mu1 - mu1 * 0.125 / 0.875)


@given(shells, schemes)
def test_structural_identities(n, scheme):
    for el_D in (3.7e-16, 2e-16):
        sys = build_diffusion_system(build_radial_grid(n, 1e-6, scheme), el_D)
        scale = np.abs(sys.A).max()
        assert np.abs(sys.gamma @ sys.A).max() <= 1e-12 * scale * sys.gamma.max()
        assert sys.gamma @ sys.B == pytest.approx(sys.grid.particle_volume, rel=1e-12)
        assert np.abs(sys.A @ np.ones(n)).max() <= 1e-12 * scale
        off = sys.A - np.diag(np.diag(sys.A))
        assert np.all(off >= 0) and np.all(np.diag(sys.A) <= 0)
        assert np.all(np.triu(sys.A, 2) == 0) and np.all(np.tril(sys.A, -2) == 0)


@given(shells, schemes)
def test_reduced_hurwitz_and_single_zero_mode(n, scheme):
    sys = build_diffusion_system(build_radial_grid(n, 1e-6, scheme), 3.7e-16)
    assert is_hurwitz(sys.A_red).hurwitz
    assert not is_hurwitz(sys.A).hurwitz
    lam = tridiagonal_spectrum(sys.A)
    scale = np.linalg.norm(sys.A, 2)
    assert lam.max() <= 1e-10 * scale
    assert np.sum(np.abs(lam) <= 1e-10 * scale) == 1
    assert np.linalg.matrix_rank(sys.A) == n - 1
    np.testing.assert_allclose(np.sort(np.linalg.eigvals(sys.A).real), lam, atol=1e-9 * scale)


def test_is_hurwitz_identity_false():
    assert not is_hurwitz(np.eye(3)).hurwitz
    assert is_hurwitz(-np.eye(3)).hurwitz


def test_tridiagonal_spectrum_requires_positive_products():
    with pytest.raises(NumericalFailure):
        tridiagonal_spectrum(np.array([[-1.0, -1.0], [1.0, -1.0]]))


# --- k(r) -----------------------------------------------------------------------

def test_k_offset_values(params):
    tau = params.pos.tau
    assert tau == pytest.approx(2702.7027, rel=1e-7)
    assert k_offset(1e-6, tau, 1e-6) == pytest.approx(180.180, abs=5e-4)
    assert k_offset(np.sqrt(0.6), 1.0, 1.0) == pytest.approx(0.0, abs=1e-15)
    assert k_offset(0.0, 1.0, 1.0) == pytest.approx(-0.1)


def test_k_offset_domain():
    with pytest.raises(DomainError):
        k_offset(1.1, 1.0, 1.0)
    with pytest.raises(DomainError):
        k_offset(-0.1, 1.0, 1.0)


# --- correction coefficients -------------------------------------------------------

def test_coefficients_follow_steady_identity(params):
    """Long-horizon exact simulation: (c_mean - c_cor,j) = K_j (c_mean - c_j) and c_cor,j - c_mean = k(r_j) m."""
    sys = electrode_system(params.pos, 4)
    m = 4.271
    xt = mismatch_trajectory(sys, m, np.zeros(4), 100 * sys.tau)
    x = 15000.0 - xt  # any mean works: the correction only sees deviations
    mean = mean_concentration(x, sys.grid)
    cor = correct_concentrations(x, sys.K, sys.grid)
    np.testing.assert_allclose(mean - cor, sys.K * (mean - x), rtol=1e-9)
    np.testing.assert_allclose(cor - mean, sys.steady_offsets() * m, rtol=1e-8)


def test_coefficients_closed_form_two_shells():
    """Hand evaluation for N=2, R=1, D=1 on the uniform-radius grid."""
    g = build_radial_grid(2, 1.0, "uniform-radius")
    sys = build_diffusion_system(g, 1.0)
    a = sys.A_red[0, 0]
    y = 1 / a
    k = ((g.r / 1.0) ** 2 - 0.6) / 6
    np.testing.assert_allclose(sys.K, [k[0] / y, -k[1] * g.volumes[1] / (g.volumes[0] * y)])
    np.testing.assert_allclose(sys.K, [0.8, 6.4], rtol=1e-12)


def test_coefficient_zero_at_neutral_radius():
    # a grid whose first outer radius sits exactly at sqrt(3/5) R
    g = build_radial_grid(2, 1.0, "uniform-radius")
    r = np.array([np.sqrt(0.6), 1.0])
    vol = 4 / 3 * np.pi * np.diff(np.concatenate(([0.0], r**3)))
    g2 = type(g)(radius=1.0, r=r, volumes=vol, surfaces=4 * np.pi * r**2, scheme="custom")
    sys = build_diffusion_system(g2, 1.0)
    assert sys.K[0] == pytest.approx(0.0, abs=1e-15)


@given(shells, schemes)
def test_surface_coefficient_positive(n, scheme):
    sys = build_diffusion_system(build_radial_grid(n, 1e-6, scheme), 3.7e-16)
    assert sys.K[-1] > 0


def test_coefficients_from_parts_match(params):
    sys = electrode_system(params.neg, 6, "uniform-radius")
    K = correction_coefficients(grid=sys.grid, A_red=sys.A_red, diffusivity=sys.diffusivity)
    np.testing.assert_array_equal(K, sys.K)


def test_singular_reduced_matrix():
    g = build_radial_grid(3, 1.0)
    with pytest.raises(NumericalFailure):
        correction_coefficients(grid=g, A_red=np.zeros((2, 2)), diffusivity=1.0)


# --- corrections and means ----------------------------------------------------------

@given(shells, st.floats(0, 3e4), st.lists(st.floats(-3, 3), min_size=20, max_size=20))
def test_uniform_profile_unchanged(n, c, K):
    g = build_radial_grid(n, 1e-6)
    x = np.full(n, c)
    np.testing.assert_allclose(correct_concentrations(x, np.array(K[:n]), g), x, rtol=1e-12, atol=1e-9)


@given(shells, st.lists(st.floats(0, 3e4), min_size=20, max_size=20))
def test_unit_coefficients_identity(n, xs):
    g = build_radial_grid(n, 1e-6, "uniform-radius")
    x = np.array(xs[:n])
    np.testing.assert_allclose(correct_concentrations(x, np.ones(n), g), x, rtol=1e-12, atol=1e-9)


def test_correction_two_shell_hand_case():
    g = build_radial_grid(2, 1.0, "uniform-radius")
    x = np.array([1.0, 9.0])
    mean = (0.125 * 1 + 0.875 * 9) / 1.0
    assert mean_concentration(x, g) == pytest.approx(8.0)
    K = np.array([0.5, 2.0])
    np.testing.assert_allclose(correct_concentrations(x, K, g), [8 - 0.5 * 7, 8 - 2.0 * (-1)])


def test_mean_trivial_cases():
    g = build_radial_grid(5, 2.0)
    assert mean_concentration(np.full(5, 3.5), g) == pytest.approx(3.5)
    assert mean_concentration(np.zeros(5), g) == 0.0


def test_correction_shape_mismatch():
    g = build_radial_grid(3, 1.0)
    with pytest.raises(ValueError):
        correct_concentrations(np.ones(4), np.ones(3), g)


# --- steady mismatch --------------------------------------------------------------

@given(shells, schemes, st.floats(-10, 10).filter(lambda v: v == 0 or abs(v) > 1e-6))
def test_mismatch_volume_sum_and_linearity(n, scheme, m):
    sys = build_diffusion_system(build_radial_grid(n, 1e-6, scheme), 2e-16)
    xt = steady_mismatch(sys, m)
    scale = np.abs(xt).max() * sys.gamma.sum()
    assert abs(sys.gamma @ xt) <= 1e-10 * max(scale, 1e-300)
    np.testing.assert_allclose(steady_mismatch(sys, 2 * m), 2 * xt, rtol=1e-12, atol=0)


def test_mismatch_zero_input(params):
    sys = electrode_system(params.pos, 3)
    assert np.all(steady_mismatch(sys, 0.0) == 0)


def test_mismatch_matches_long_simulation(params):
    sys = electrode_system(params.neg, 5)
    m = -2.68
    xt = mismatch_trajectory(sys, m, np.zeros(5), 100 * sys.tau)
    np.testing.assert_allclose(xt, steady_mismatch(sys, m), rtol=1e-9)
    # the mismatch keeps zero volume-weighted sum along the way
    for t in (1.0, 100.0, 3000.0):
        xt = mismatch_trajectory(sys, m, np.zeros(5), t)
        assert abs(sys.gamma @ xt) <= 1e-10 * sys.gamma.sum() * np.abs(xt).max()


def test_mean_conservation_along_trajectory(params):
    sys = electrode_system(params.pos, 6, "uniform-radius")
    x0 = np.linspace(12000, 20000, 6)
    for t in (10.0, 500.0, 4000.0):
        x = shell_trajectory(sys, 3.0, x0, t)
        assert mean_concentration(x, sys.grid) - mean_concentration(x0, sys.grid) == pytest.approx(3.0 * t, rel=1e-9)

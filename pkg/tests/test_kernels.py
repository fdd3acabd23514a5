import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from contactgp.grids import AgeGrid, DiffGrid
from contactgp.kernels import (
    HsgpConfig,
    KernelHyperparams,
    approx_l_factor,
    build_basis,
    field_eval,
    kernel_eval,
    spectral_density,
)

HP1 = KernelHyperparams(1.0, 1.0)


def fourier_transform_oracle(family, hp, omega):
    """S(omega) = 2 * integral_0^inf k(r) cos(omega r) dr, by quadrature."""
    val, _ = quad(
        lambda r: kernel_eval(family, hp, 0.0, r) * np.cos(omega * r),
        0.0,
        np.inf,
        limit=400,
    )
    return 2.0 * val


class TestKernelEval:
    def test_variance_at_zero_lag(self):
        for family in ("se", "matern32", "matern52"):
            assert kernel_eval(family, HP1, 3.0, 3.0) == pytest.approx(1.0)
            hp = KernelHyperparams(2.0, 1.5)
            assert kernel_eval(family, hp, 0.0, 0.0) == pytest.approx(4.0)

    def test_se_unit_lag(self):
        assert kernel_eval("se", HP1, 0.0, 1.0) == pytest.approx(np.exp(-0.5))

    @pytest.mark.parametrize("r", [0.5, 1.0, 2.0])
    def test_matern32_closed_form(self, r):
        expected = (1 + np.sqrt(3) * r) * np.exp(-np.sqrt(3) * r)
        assert kernel_eval("matern32", HP1, 0.0, r) == pytest.approx(expected, rel=1e-12)

    def test_symmetry(self):
        hp = KernelHyperparams(1.7, 2.3)
        for family in ("se", "matern32", "matern52"):
            assert kernel_eval(family, hp, 1.0, 4.0) == pytest.approx(
                kernel_eval(family, hp, 4.0, 1.0)
            )

    def test_invalid_hyperparameters_rejected(self):
        with pytest.raises(ValueError):
            KernelHyperparams(0.0, 1.0)
        with pytest.raises(ValueError):
            KernelHyperparams(1.0, -2.0)
        with pytest.raises(ValueError):
            kernel_eval("cauchy", HP1, 0.0, 1.0)


class TestSpectralDensity:
    def test_se_at_zero_matches_sqrt_2pi(self):
        # also cross-checked against numerical integration of the kernel
        assert spectral_density("se", HP1, 0.0) == pytest.approx(np.sqrt(2 * np.pi), rel=1e-12)
        assert fourier_transform_oracle("se", HP1, 0.0) == pytest.approx(
            np.sqrt(2 * np.pi), rel=1e-8
        )

    def test_se_monotone_decreasing(self):
        omegas = np.linspace(0.0, 4.0, 30)
        dens = spectral_density("se", HP1, omegas)
        assert np.all(np.diff(dens) < 0)

    @pytest.mark.parametrize("family", ["se", "matern32", "matern52"])
    @pytest.mark.parametrize("omega", [0.0, 0.3, 1.0, 2.5])
    def test_matches_numerical_fourier_transform(self, family, omega):
        hp = KernelHyperparams(1.0, 1.0)
        assert spectral_density(family, hp, omega) == pytest.approx(
            fourier_transform_oracle(family, hp, omega), rel=1e-4
        )

    def test_matern52_lengthscale_scaling_against_quadrature(self):
        hp = KernelHyperparams(1.3, 2.1)
        for omega in (0.0, 0.7):
            assert spectral_density("matern52", hp, omega) == pytest.approx(
                fourier_transform_oracle("matern52", hp, omega), rel=1e-4
            )

    def test_positive(self):
        omegas = np.linspace(0, 10, 50)
        for family in ("se", "matern32", "matern52"):
            assert np.all(spectral_density(family, HP1, omegas) > 0)


class TestBasis:
    def test_eigenvalue_roots(self):
        basis = build_basis(np.linspace(-0.5, 0.5, 11), boundary=1.0, n_basis=4)
        assert basis.sqrt_lambda[0] == pytest.approx(np.pi / 2)
        assert np.allclose(basis.sqrt_lambda, np.arange(1, 5) * np.pi / 2)
        assert np.all(np.diff(basis.sqrt_lambda) > 0)

    def test_eigenfunctions_vanish_at_boundaries(self):
        L = 2.0
        eps = 1e-9
        basis = build_basis(np.array([-L + eps, 0.0, L - eps]), boundary=L, n_basis=6)
        assert np.max(np.abs(basis.phi[0])) < 1e-4
        assert np.max(np.abs(basis.phi[2])) < 1e-4

    def test_inputs_at_boundary_rejected(self):
        with pytest.raises(ValueError):
            build_basis(np.array([-1.0, 0.0]), boundary=1.0, n_basis=3)
        with pytest.raises(ValueError):
            build_basis(np.array([0.0, 1.5]), boundary=1.0, n_basis=3)

    def test_discrete_orthogonality_on_fine_grid(self):
        L = 1.0
        n = 10_000
        x = np.linspace(-L + L / n, L - L / n, n)
        basis = build_basis(x, boundary=L, n_basis=12)
        dx = x[1] - x[0]
        gram = basis.phi.T @ basis.phi * dx
        off = gram - np.diag(np.diag(gram))
        assert np.max(np.abs(np.diag(gram) - 1.0)) < 1e-3
        assert np.max(np.abs(off)) < 1e-3


def exact_gram(family, hp, x):
    return kernel_eval(family, hp, x[:, None], x[None, :])


class TestLowRankFidelity:
    def test_gram_approximation_error_bound(self):
        grid = AgeGrid(0, 84)
        x = grid.scaled()
        hp = KernelHyperparams(1.0, 0.25 * grid.half_range)
        L = 1.5 * grid.half_range
        basis = build_basis(x, boundary=L, n_basis=40)
        lf = approx_l_factor(basis, hp, "se")
        err = np.max(np.abs(lf @ lf.T - exact_gram("se", hp, x)))
        assert err < 1e-2 * hp.sigma**2

    def test_error_non_increasing_in_basis_count(self):
        grid = AgeGrid(0, 84)
        x = grid.scaled()
        hp = KernelHyperparams(1.0, 0.25 * grid.half_range)
        L = 1.5 * grid.half_range
        exact = exact_gram("se", hp, x)
        errs = []
        for m in (5, 10, 20, 40):
            basis = build_basis(x, boundary=L, n_basis=m)
            lf = approx_l_factor(basis, hp, "se")
            errs.append(np.max(np.abs(lf @ lf.T - exact)))
        assert all(e2 <= e1 + 1e-12 for e1, e2 in zip(errs, errs[1:]))
        assert errs[0] > errs[-1]  # degrading M strictly hurts

    def test_magnitude_factors_out_linearly(self):
        x = np.linspace(-10, 10, 21)
        basis = build_basis(x, boundary=30.0, n_basis=8)
        lf1 = approx_l_factor(basis, KernelHyperparams(1.0, 3.0), "se")
        lf2 = approx_l_factor(basis, KernelHyperparams(2.0, 3.0), "se")
        assert np.allclose(lf2, 2.0 * lf1)

    def test_prior_covariance_monte_carlo(self):
        rng = np.random.default_rng(7)
        x = np.linspace(-10, 10, 5)
        basis = build_basis(x, boundary=30.0, n_basis=20)
        lf = approx_l_factor(basis, KernelHyperparams(1.0, 5.0), "matern52")
        n = 10_000
        z = rng.standard_normal((n, lf.shape[1]))
        fields = z @ lf.T
        target = lf @ lf.T
        emp = fields.T @ fields / n
        # each entry is an average of n products of correlated normals; bound
        # the Monte-Carlo error by 3 standard errors of that average
        for i in range(5):
            for j in range(5):
                var_prod = target[i, i] * target[j, j] + target[i, j] ** 2
                se = np.sqrt(var_prod / n)
                assert abs(emp[i, j] - target[i, j]) < 3 * se + 1e-12


class TestFieldEval:
    def test_zero_coefficients_give_zero_field(self):
        rng = np.random.default_rng(0)
        l1 = rng.normal(size=(6, 3))
        l2 = rng.normal(size=(5, 2))
        field = field_eval(l1, l2, np.zeros(6))
        assert field.shape == (6, 5)
        assert np.all(field == 0)

    def test_matches_materialized_kronecker(self):
        rng = np.random.default_rng(1)
        l1 = rng.normal(size=(5, 3))
        l2 = rng.normal(size=(4, 2))
        z = rng.normal(size=6)
        field = field_eval(l1, l2, z)
        direct = np.kron(l2, l1) @ z
        assert np.max(np.abs(field.flatten(order="F") - direct)) < 1e-12

    @settings(max_examples=100, deadline=None)
    @given(
        n1=st.integers(1, 8),
        n2=st.integers(1, 8),
        m1=st.integers(1, 4),
        m2=st.integers(1, 4),
        seed=st.integers(0, 2**31),
    )
    def test_kronecker_identity_property(self, n1, n2, m1, m2, seed):
        rng = np.random.default_rng(seed)
        l1 = rng.normal(size=(n1, m1))
        l2 = rng.normal(size=(n2, m2))
        z = rng.normal(size=m1 * m2)
        field = field_eval(l1, l2, z)
        direct = np.kron(l2, l1) @ z
        assert np.max(np.abs(field.flatten(order="F") - direct)) < 1e-12

    def test_dimension_mismatch_rejected(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ValueError):
            field_eval(rng.normal(size=(5, 3)), rng.normal(size=(4, 2)), rng.normal(size=7))

    def test_cost_is_two_dense_multiplies(self):
        # grid of a full survey-scale rotated field
        grid = AgeGrid(0, 84)
        diffs = DiffGrid(grid)
        b1 = build_basis(diffs.scaled(), boundary=1.5 * diffs.half_span, n_basis=40)
        b2 = build_basis(grid.scaled(), boundary=1.5 * grid.half_range, n_basis=20)
        l1 = approx_l_factor(b1, KernelHyperparams(1.0, 5.0), "se")
        l2 = approx_l_factor(b2, KernelHyperparams(1.0, 5.0), "se")
        z = np.random.default_rng(3).normal(size=800)

        shapes = []

        def counting_matmul(a, b):
            shapes.append((a.shape, b.shape))
            return a @ b

        field = field_eval(l1, l2, z, matmul=counting_matmul)
        assert field.shape == (169, 85)
        assert shapes == [((169, 40), (40, 20)), ((169, 20), (20, 85))]
        flops = sum(2 * s1[0] * s1[1] * s2[1] for s1, s2 in shapes)
        dense_flops = 2 * (169 * 85) * (40 * 20)
        assert flops < dense_flops / 20  # vec trick avoids the materialized product


def test_hsgp_config_validation():
    with pytest.raises(ValueError):
        HsgpConfig(kernel="rbf")
    with pytest.raises(ValueError):
        HsgpConfig(m1=0)
    with pytest.raises(ValueError):
        HsgpConfig(boundary_factor=1.0)
    cfg = HsgpConfig()
    assert (cfg.m1, cfg.m2, cfg.boundary_factor) == (40, 20, 1.5)

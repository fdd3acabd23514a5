"""Stationary covariance kernels, their spectral densities, and the low-rank
Hilbert-space basis used to approximate Gaussian-process priors.

The approximation expands a stationary kernel on [-L, L] in the Laplacian
eigenbasis

    phi_j(x) = sqrt(1/L) * sin(sqrt(lambda_j) * (x + L)),
    sqrt(lambda_j) = j * pi / (2 L),      j = 1..M,

so that the Cholesky-like factor of the kernel Gram matrix is approximated by
``Phi @ diag(sqrt(S(sqrt(lambda_j))))`` with S the kernel's spectral density.
Hyperparameters enter only through S, so Phi can be precomputed once per grid.

Functions taking an ``xp`` argument accept either numpy or jax.numpy so the
same formulas serve plain evaluation and traced/differentiated evaluation.
"""

from __future__ import annotations

import math
import operator
from dataclasses import dataclass

import numpy as np

KERNEL_FAMILIES = ("se", "matern32", "matern52")


def _check_family(family: str):
    if family not in KERNEL_FAMILIES:
        raise ValueError(f"unknown kernel family {family!r}, expected one of {KERNEL_FAMILIES}")


@dataclass(frozen=True)
class KernelHyperparams:
    """Magnitude and lengthscale of a one-dimensional stationary kernel."""

    sigma: float
    ell: float

    def __post_init__(self):
        if not (self.sigma > 0 and self.ell > 0):
            raise ValueError(f"hyperparameters must be positive, got sigma={self.sigma}, ell={self.ell}")


@dataclass(frozen=True)
class HsgpConfig:
    """Tuning knobs of the low-rank approximation for a 2-D product kernel."""

    kernel: str = "matern52"
    m1: int = 40
    m2: int = 20
    boundary_factor: float = 1.5

    def __post_init__(self):
        _check_family(self.kernel)
        if self.m1 < 1 or self.m2 < 1:
            raise ValueError("basis counts m1, m2 must be >= 1")
        if self.boundary_factor <= 1.0:
            raise ValueError("boundary_factor must exceed 1 so the grid sits strictly inside (-L, L)")


def kernel_eval(family: str, hp: KernelHyperparams, x, y):
    """Covariance k(x, y) of the given stationary family."""
    _check_family(family)
    r = np.abs(np.asarray(x, dtype=float) - np.asarray(y, dtype=float))
    s2 = hp.sigma**2
    if family == "se":
        return s2 * np.exp(-0.5 * (r / hp.ell) ** 2)
    if family == "matern32":
        u = math.sqrt(3.0) * r / hp.ell
        return s2 * (1.0 + u) * np.exp(-u)
    u = math.sqrt(5.0) * r / hp.ell
    return s2 * (1.0 + u + u**2 / 3.0) * np.exp(-u)


def _spectral_density_raw(family: str, sigma, ell, omega, xp=np):
    # shared by the validated public wrapper and traced model code, where
    # sigma and ell may be abstract values rather than floats
    if family == "se":
        return sigma**2 * math.sqrt(2.0 * math.pi) * ell * xp.exp(-0.5 * (ell * omega) ** 2)
    if family == "matern32":
        return sigma**2 * 12.0 * math.sqrt(3.0) / ell**3 * (3.0 / ell**2 + omega**2) ** -2.0
    return sigma**2 * (400.0 * math.sqrt(5.0) / 3.0) / ell**5 * (5.0 / ell**2 + omega**2) ** -3.0


def spectral_density(family: str, hp: KernelHyperparams, omega, *, xp=np):
    """One-dimensional spectral density S(omega) of the kernel.

    Uses the convention S(omega) = integral k(r) exp(-i omega r) dr, under
    which S(0) equals the integral of the covariance function:

        se:       sigma^2 sqrt(2 pi) ell exp(-ell^2 omega^2 / 2)
        matern32: sigma^2 12 sqrt(3) ell^-3 (3/ell^2 + omega^2)^-2
        matern52: sigma^2 (400 sqrt(5) / 3) ell^-5 (5/ell^2 + omega^2)^-3
    """
    _check_family(family)
    omega = xp.asarray(omega, dtype=float) if xp is np else omega
    return _spectral_density_raw(family, hp.sigma, hp.ell, omega, xp=xp)


@dataclass(frozen=True)
class HsgpBasis:
    """Precomputed eigenfunction matrix and eigenvalue roots on a fixed grid.

    ``phi`` has one row per grid point and one column per basis function;
    ``sqrt_lambda`` is strictly increasing. Both depend only on the grid and
    the boundary L, never on kernel hyperparameters.
    """

    inputs: np.ndarray
    boundary: float
    phi: np.ndarray
    sqrt_lambda: np.ndarray

    @property
    def n_basis(self) -> int:
        return self.sqrt_lambda.shape[0]


def build_basis(inputs, boundary: float, n_basis: int) -> HsgpBasis:
    """Evaluate the sine eigenbasis on ``inputs`` within (-boundary, boundary).

    The expansion is only valid strictly inside the domain, so inputs at or
    beyond the boundary are rejected.
    """
    x = np.asarray(inputs, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("inputs must be a non-empty 1-D array")
    if n_basis < 1:
        raise ValueError("n_basis must be >= 1")
    if not boundary > 0:
        raise ValueError("boundary must be positive")
    if np.max(np.abs(x)) >= boundary:
        raise ValueError(
            f"inputs reach |x| = {np.max(np.abs(x)):g} >= L = {boundary:g}; "
            "the basis approximation is invalid at or beyond the boundary"
        )
    j = np.arange(1, n_basis + 1)
    sqrt_lambda = j * math.pi / (2.0 * boundary)
    phi = math.sqrt(1.0 / boundary) * np.sin(sqrt_lambda[None, :] * (x[:, None] + boundary))
    return HsgpBasis(inputs=x, boundary=float(boundary), phi=phi, sqrt_lambda=sqrt_lambda)


def _l_factor_raw(basis: HsgpBasis, family: str, sigma, ell, xp=np):
    dens = _spectral_density_raw(family, sigma, ell, basis.sqrt_lambda, xp=xp)
    return basis.phi * xp.sqrt(dens)[None, :]


def approx_l_factor(basis: HsgpBasis, hp: KernelHyperparams, family: str, *, xp=np):
    """Low-rank factor Ltilde = Phi diag(sqrt(S(sqrt_lambda))).

    ``Ltilde @ Ltilde.T`` approximates the exact kernel Gram matrix on the
    basis grid.
    """
    _check_family(family)
    return _l_factor_raw(basis, family, hp.sigma, hp.ell, xp=xp)


def field_eval(l1, l2, z, matmul=operator.matmul):
    """Evaluate a 2-D random field with Kronecker-factored prior covariance.

    Computes ``(l2 kron l1) z`` without materialising the Kronecker product,
    via two dense multiplies: with Z the column-major (M1, M2) reshape of z,
    the field on the grid is ``l1 @ Z @ l2.T``. The returned matrix has one
    row per dim-1 grid point and one column per dim-2 grid point; its
    column-major flattening equals the materialised Kronecker product applied
    to z.

    ``matmul`` is injectable so tests can count the dense multiplies.
    """
    n1, m1 = l1.shape
    n2, m2 = l2.shape
    if z.shape != (m1 * m2,):
        raise ValueError(f"coefficient vector has shape {z.shape}, expected ({m1 * m2},)")
    zmat = z.reshape(m2, m1).T  # column-major reshape to (m1, m2)
    return matmul(matmul(l1, zmat), l2.T)

"""Joint log-posterior for coarse-bracket contact counts.

The observation model is negative binomial in shape-scale form: a cell count
with aggregated shape ``r = sum_b alpha_b`` and overdispersion ``nu`` has

    pmf(y) = Gamma(y + r) / (Gamma(r) y!) (1/(1+nu))^r (nu/(1+nu))^y,

so mean = r nu and variance = mean (1 + nu). Because the shape parameters of
independent cells add, the likelihood of bracket-aggregated counts is exactly
the negative binomial with the fine-cell shapes summed over the bracket.

Contact intensities are built from three latent random fields (MF, MM, FF)
with low-rank Gaussian-process priors; the FM direction and the same-gender
surfaces are filled in so that contact rates (intensity divided by the
contact-side population) are symmetric across directions by construction.

Gradients of the log posterior are exact, obtained by automatic
differentiation; everything runs in 64-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln as np_gammaln

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp
from jax.scipy.special import gammaln as jax_gammaln

from contactgp.grids import MODELED_PAIRS, AgeGrid, DiffGrid, pair_index
from contactgp.kernels import KERNEL_FAMILIES, _l_factor_raw, build_basis, field_eval
from contactgp.tables import ObservationTable, PopulationTable

PARAMETERIZATIONS = ("diff-in-age", "age-age")

LOG_2PI = float(np.log(2.0 * np.pi))
INVGAMMA_SHAPE = 5.0
INVGAMMA_SCALE = 5.0
BETA0_SD = 10.0


class ModelEvaluationError(RuntimeError):
    """The log posterior is not finite; the message names the offending term."""


@dataclass(frozen=True)
class ModelConfig:
    """Structural switches of the intensity model.

    ``fatigue_adjustment`` controls the repeat-participation effects rho_r,
    ``detail_adjustment`` the log-proportion offset for contacts reported
    without full age/gender detail. Wave effects are anchored (tau_1 = 0) by
    default to keep the baseline identifiable; ``wave_effects='free'`` gives
    every wave its own effect. Cross-sectional fits simply disable both
    adjustments and use single-wave data.
    """

    parameterization: str = "diff-in-age"
    kernel: str = "matern52"
    m1: int = 40
    m2: int = 20
    boundary_factor: float = 1.5
    fatigue_adjustment: bool = True
    detail_adjustment: bool = True
    wave_effects: str = "anchored"
    share_pair_hyperparams: bool = False
    nugget: float = 1e-13

    def __post_init__(self):
        if self.parameterization not in PARAMETERIZATIONS:
            raise ValueError(
                f"unknown parameterization {self.parameterization!r}, expected one of {PARAMETERIZATIONS}"
            )
        if self.kernel not in KERNEL_FAMILIES:
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.m1 < 1 or self.m2 < 1:
            raise ValueError("basis counts must be >= 1")
        if self.boundary_factor <= 1.0:
            raise ValueError("boundary_factor must exceed 1")
        if self.wave_effects not in ("anchored", "free"):
            raise ValueError("wave_effects must be 'anchored' or 'free'")
        if not 0 <= self.nugget < 1e-6:
            raise ValueError("nugget must stay tiny and non-negative")

    @classmethod
    def cross_sectional(cls, **kwargs) -> "ModelConfig":
        kwargs.setdefault("fatigue_adjustment", False)
        kwargs.setdefault("detail_adjustment", False)
        return cls(**kwargs)


def nb_cell_loglik(y, alpha_sum, nu):
    """Log-pmf of a coarse-cell count under the aggregated shape parameter.

    ``alpha_sum`` is the sum of fine-cell shapes alpha = mu / nu over the
    bracket; the cell mean is alpha_sum * nu and the variance mean * (1+nu).
    """
    y = np.asarray(y, dtype=float)
    alpha_sum = np.asarray(alpha_sum, dtype=float)
    if np.any(y < 0) or np.any(y != np.floor(y)):
        raise ValueError("counts must be non-negative integers")
    if not np.all(alpha_sum > 0):
        raise ValueError("aggregated shape must be positive")
    if not nu > 0:
        raise ValueError("overdispersion nu must be positive")
    return (
        np_gammaln(y + alpha_sum)
        - np_gammaln(alpha_sum)
        - np_gammaln(y + 1.0)
        - alpha_sum * np.log1p(nu)
        + y * (np.log(nu) - np.log1p(nu))
    )


@dataclass(frozen=True)
class ParameterLayout:
    """Name and slice bookkeeping for the unconstrained parameter vector.

    Positive parameters (nu, kernel magnitudes and lengthscales) are stored
    as logs; ``positive`` marks them so constrained values are recovered with
    one exp. Names refer to the constrained scale.
    """

    names: tuple[str, ...]
    positive: np.ndarray
    blocks: dict
    tau_position: np.ndarray      # per wave: index into vector, or -1 for fixed 0
    rho_position: np.ndarray      # per repeat id (table order): 0 => no effect
    n_rho: int
    field_keys: tuple             # (wave_pos, pair) per latent field
    field_hyper_slice: dict       # field key -> slice of 4 log hyperparams
    field_z_slice: dict           # field key -> slice of coefficients

    @property
    def size(self) -> int:
        return len(self.names)

    def constrain(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u)
        return np.where(self.positive, np.exp(u), u)

    def unconstrain(self, values: np.ndarray) -> np.ndarray:
        out = np.array(values, dtype=float)
        out[..., self.positive] = np.log(out[..., self.positive])
        return out

    @classmethod
    def build(cls, table: ObservationTable, config: ModelConfig) -> "ParameterLayout":
        names: list[str] = []
        positive: list[bool] = []
        blocks: dict = {}

        def add(name: str, pos: bool) -> int:
            names.append(name)
            positive.append(pos)
            return len(names) - 1

        def add_block(key, labels, pos):
            start = len(names)
            for lab in labels:
                add(lab, pos)
            blocks[key] = slice(start, len(names))
            return blocks[key]

        add_block("beta0", ["beta0"], False)

        n_waves = table.n_waves
        tau_position = np.full(n_waves, -1, dtype=int)
        free_waves = range(n_waves) if config.wave_effects == "free" else range(1, n_waves)
        start = len(names)
        for t in free_waves:
            tau_position[t] = add(f"tau[{table.waves[t]}]", False)
        blocks["tau"] = slice(start, len(names))

        rho_position = np.zeros(len(table.repeats), dtype=int)
        start = len(names)
        n_rho = 0
        if config.fatigue_adjustment:
            for i, r in enumerate(table.repeats):
                if r > 0:
                    idx = add(f"rho[{r}]", False)
                    n_rho += 1
                    # position 0 in the padded effect vector is the fixed rho_0 = 0
                    rho_position[i] = idx - start + 1
        blocks["rho"] = slice(start, len(names))

        add_block("nu", ["nu"], True)

        field_keys = tuple((t, pair) for t in range(n_waves) for pair in MODELED_PAIRS)
        field_hyper_slice: dict = {}
        if config.share_pair_hyperparams:
            for t in range(n_waves):
                w = table.waves[t]
                sl = add_block(
                    ("hyper", t),
                    [f"sigma1[{w}]", f"ell1[{w}]", f"sigma2[{w}]", f"ell2[{w}]"],
                    True,
                )
                for pair in MODELED_PAIRS:
                    field_hyper_slice[(t, pair)] = sl
        else:
            for t, pair in field_keys:
                w = table.waves[t]
                field_hyper_slice[(t, pair)] = add_block(
                    ("hyper", t, pair),
                    [f"sigma1[{w},{pair}]", f"ell1[{w},{pair}]", f"sigma2[{w},{pair}]", f"ell2[{w},{pair}]"],
                    True,
                )

        field_z_slice: dict = {}
        n_coef = config.m1 * config.m2
        for t, pair in field_keys:
            w = table.waves[t]
            field_z_slice[(t, pair)] = add_block(
                ("z", t, pair), [f"z[{w},{pair},{k}]" for k in range(1, n_coef + 1)], False
            )

        return cls(
            names=tuple(names),
            positive=np.asarray(positive, dtype=bool),
            blocks=blocks,
            tau_position=tau_position,
            rho_position=rho_position,
            n_rho=n_rho,
            field_keys=field_keys,
            field_hyper_slice=field_hyper_slice,
            field_z_slice=field_z_slice,
        )


def _prior_terms(u, layout: ParameterLayout, xp):
    """Named log-prior contributions, including change-of-variable terms."""
    terms = {}
    beta0 = u[layout.blocks["beta0"]][0]
    terms["beta0"] = -0.5 * (beta0 / BETA0_SD) ** 2 - xp.log(BETA0_SD) - 0.5 * LOG_2PI

    tau = u[layout.blocks["tau"]]
    terms["tau"] = xp.sum(-0.5 * tau**2 - 0.5 * LOG_2PI) if tau.shape[0] else 0.0
    rho = u[layout.blocks["rho"]]
    terms["rho"] = xp.sum(-0.5 * rho**2 - 0.5 * LOG_2PI) if rho.shape[0] else 0.0

    log_nu = u[layout.blocks["nu"]][0]
    terms["nu"] = -xp.exp(log_nu) + log_nu  # Exponential(1) plus log-Jacobian

    sum_sigma = 0.0
    sum_ell = 0.0
    seen = set()
    for key in layout.field_keys:
        sl = layout.field_hyper_slice[key]
        if (sl.start, sl.stop) in seen:
            continue  # hyperparameters shared across pairs
        seen.add((sl.start, sl.stop))
        hp = u[sl]
        for log_sigma in (hp[0], hp[2]):
            sigma = xp.exp(log_sigma)
            # half-Cauchy(0, 1) plus log-Jacobian
            sum_sigma = sum_sigma + xp.log(2.0 / xp.pi) - xp.log1p(sigma**2) + log_sigma
        for log_ell in (hp[1], hp[3]):
            ell = xp.exp(log_ell)
            sum_ell = (
                sum_ell
                + INVGAMMA_SHAPE * xp.log(INVGAMMA_SCALE)
                - float(np_gammaln(INVGAMMA_SHAPE))
                - (INVGAMMA_SHAPE + 1.0) * log_ell
                - INVGAMMA_SCALE / ell
                + log_ell
            )
    terms["sigma"] = sum_sigma
    terms["ell"] = sum_ell

    sum_z = 0.0
    for key in layout.field_keys:
        z = u[layout.field_z_slice[key]]
        sum_z = sum_z + xp.sum(-0.5 * z**2) - 0.5 * LOG_2PI * z.shape[0]
    terms["z"] = sum_z
    return terms


class ContactModel:
    """Assembles the joint log posterior for one dataset and configuration.

    Exposes jitted callables: ``log_posterior``, ``log_posterior_and_grad``,
    ``log_prior``, ``intensity`` (wave x direction x age x age surfaces),
    ``pointwise_loglik`` and ``predictive_params``. All operate on the
    unconstrained parameter vector and are pure, so chains may call them
    concurrently.
    """

    def __init__(self, table: ObservationTable, population: PopulationTable, config: ModelConfig):
        if population.grid != table.grid:
            raise ValueError("population and observation grids differ")
        self.table = table
        self.population = population
        self.config = config
        self.grid = table.grid
        self.layout = ParameterLayout.build(table, config)
        self._build_static()
        self._build_functions()

    # -- static data ------------------------------------------------------

    def _build_static(self):
        grid, config = self.grid, self.config
        n = grid.size
        ar = np.arange(n)

        if config.parameterization == "diff-in-age":
            diffs = DiffGrid(grid)
            self._basis1 = build_basis(
                diffs.scaled(), config.boundary_factor * diffs.half_span, config.m1
            )
            self._basis2 = build_basis(
                grid.scaled(), config.boundary_factor * grid.half_range, config.m2
            )
            # field rows are age differences, columns participant ages
            self._idx_mf = ((ar[None, :] - ar[:, None]) + n - 1, np.broadcast_to(ar[:, None], (n, n)))
            self._idx_sym = (np.abs(ar[None, :] - ar[:, None]) + n - 1, np.minimum.outer(ar, ar))
        else:
            self._basis1 = build_basis(
                grid.scaled(), config.boundary_factor * grid.half_range, config.m1
            )
            self._basis2 = build_basis(
                grid.scaled(), config.boundary_factor * grid.half_range, config.m2
            )
            self._idx_mf = (np.broadcast_to(ar[:, None], (n, n)), np.broadcast_to(ar[None, :], (n, n)))
            self._idx_sym = (np.minimum.outer(ar, ar), np.maximum.outer(ar, ar))

        self._log_pop = np.log(self.population.counts)  # (2, B)
        table = self.table
        self._member = table.brackets.membership_matrix()  # (B, C)
        self._counts = table.counts  # (S, C, 2)
        self._gammaln_y1 = np_gammaln(table.counts + 1.0)
        self._t_idx = table.wave_idx
        self._a_idx = table.age_idx
        self._pair_by_h = np.stack([2 * table.gender_idx, 2 * table.gender_idx + 1], axis=1)
        offsets = table.n_participants.astype(float).copy()
        if config.detail_adjustment:
            offsets = offsets * table.detail_prop
        self._offsets = offsets
        self._rho_pos = self.layout.rho_position[table.repeat_idx]

    # -- traced model code --------------------------------------------------

    def _fields(self, u):
        """Latent field surfaces per (wave, modeled pair)."""
        config, layout = self.config, self.layout
        out = {}
        for key in layout.field_keys:
            hp = u[layout.field_hyper_slice[key]]
            l1 = _l_factor_raw(self._basis1, config.kernel, jnp.exp(hp[0]), jnp.exp(hp[1]), xp=jnp)
            l2 = _l_factor_raw(self._basis2, config.kernel, jnp.exp(hp[2]), jnp.exp(hp[3]), xp=jnp)
            out[key] = field_eval(l1, l2, u[layout.field_z_slice[key]])
        return out

    def _log_intensity(self, u):
        """log m as a (waves, 4 directions, B, B) array."""
        layout = self.layout
        beta0 = u[layout.blocks["beta0"]][0]
        fields = self._fields(u)
        rows = []
        for t in range(self.table.n_waves):
            pos = int(layout.tau_position[t])  # static: resolved at trace time
            base = beta0 + (u[pos] if pos >= 0 else 0.0)
            f_mf = fields[(t, "MF")][self._idx_mf]
            f_mm = fields[(t, "MM")][self._idx_sym]
            f_ff = fields[(t, "FF")][self._idx_sym]
            log_pm = self._log_pop[0][None, :]
            log_pf = self._log_pop[1][None, :]
            rows.append(
                jnp.stack(
                    [
                        base + f_mm + log_pm,   # MM
                        base + f_mf + log_pf,   # MF
                        base + f_mf.T + log_pm,  # FM, transposed rates
                        base + f_ff + log_pf,   # FF
                    ]
                )
            )
        return jnp.stack(rows)

    def _cell_shapes(self, u):
        """Aggregated negative-binomial shapes per (stratum, bracket, gender)."""
        layout = self.layout
        nu = jnp.exp(u[layout.blocks["nu"]][0])
        m = jnp.exp(self._log_intensity(u))
        m_sel = m[self._t_idx[:, None], self._pair_by_h, self._a_idx[:, None], :]  # (S, 2, B)
        rho = u[layout.blocks["rho"]]
        rho_full = jnp.concatenate([jnp.zeros(1), rho]) if layout.n_rho else jnp.zeros(1)
        scale = jnp.exp(rho_full)[self._rho_pos] * self._offsets  # (S,)
        alpha_fine = m_sel * scale[:, None, None] / nu + self.config.nugget
        alpha = jnp.einsum("shb,bc->sch", alpha_fine, self._member)
        return alpha, nu

    def _pointwise(self, u):
        alpha, nu = self._cell_shapes(u)
        y = self._counts
        return (
            jax_gammaln(y + alpha)
            - jax_gammaln(alpha)
            - self._gammaln_y1
            - alpha * jnp.log1p(nu)
            + y * (jnp.log(nu) - jnp.log1p(nu))
        )

    def _log_posterior(self, u):
        loglik = jnp.sum(self._pointwise(u)) if self.table.n_strata else 0.0
        prior = sum(_prior_terms(u, self.layout, jnp).values())
        return loglik + prior

    def _build_functions(self):
        self.log_posterior = jax.jit(self._log_posterior)
        self.log_posterior_and_grad = jax.jit(jax.value_and_grad(self._log_posterior))
        self.log_prior = jax.jit(lambda u: sum(_prior_terms(u, self.layout, jnp).values()))
        self.intensity = jax.jit(lambda u: jnp.exp(self._log_intensity(u)))
        self.pointwise_loglik = jax.jit(self._pointwise)
        self.predictive_params = jax.jit(self._cell_shapes)

    # -- evaluation helpers -------------------------------------------------

    @property
    def n_params(self) -> int:
        return self.layout.size

    def logp_and_grad(self, u: np.ndarray):
        """Numpy-facing wrapper used by the samplers."""
        value, grad = self.log_posterior_and_grad(jnp.asarray(u))
        return float(value), np.asarray(grad)

    def check(self, u: np.ndarray) -> float:
        """Evaluate the log posterior, raising with the offending term's
        identity when the result is not finite."""
        value = float(self.log_posterior(jnp.asarray(u)))
        if np.isfinite(value):
            return value
        terms = _prior_terms(np.asarray(u, dtype=float), self.layout, np)
        for name, term in terms.items():
            if not np.isfinite(float(term)):
                raise ModelEvaluationError(f"non-finite log-prior contribution from {name!r}")
        ll = np.asarray(self.pointwise_loglik(jnp.asarray(u)))
        bad = np.argwhere(~np.isfinite(ll))
        if len(bad):
            s, c, h = bad[0]
            t = self.table.waves[self.table.wave_idx[s]]
            age = self.grid.ages[self.table.age_idx[s]]
            raise ModelEvaluationError(
                f"non-finite likelihood in {len(bad)} cells, first at wave {t}, "
                f"participant age {age}, bracket {self.table.brackets.labels[c]}, "
                f"contact gender index {h}"
            )
        raise ModelEvaluationError("non-finite log posterior")


def count_free_rate_cells(n_ages: int) -> int:
    """Number of free contact-rate values once symmetry ties directions.

    The MF surface is free, FM is its transpose, and each same-gender
    surface contributes an upper triangle: B^2 + 2 * B(B+1)/2 = B(2B+1).
    """
    return n_ages * (2 * n_ages + 1)

"""Gradient-based posterior exploration and sampler diagnostics.

The sampler is dynamic-trajectory Hamiltonian Monte Carlo with a no-U-turn
termination criterion, multinomial sampling along the trajectory, dual
averaging of the step size toward a target acceptance statistic, and
windowed diagonal mass-matrix adaptation during warmup. Chains differ only
in their RNG streams, so runs are reproducible from the seed.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.optimize import minimize
from scipy.special import logsumexp, ndtri
from scipy.stats import rankdata

from contactgp.model import ContactModel

logger = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 1000.0  # energy error that flags a divergent transition
MAX_STEPSIZE_SEARCH = 100


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 8
    warmup_iters: int = 500
    sampling_iters: int = 1000
    target_accept: float = 0.8
    max_tree_depth: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.chains < 1:
            raise ValueError("need at least one chain")
        if self.warmup_iters < 1 or self.sampling_iters < 1:
            raise ValueError("iteration counts must be >= 1")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.max_tree_depth < 1:
            raise ValueError("max_tree_depth must be >= 1")

    @classmethod
    def desk(cls, **kwargs) -> "SamplerConfig":
        """Laptop-scale preset used by the test suite."""
        kwargs.setdefault("chains", 2)
        kwargs.setdefault("warmup_iters", 200)
        kwargs.setdefault("sampling_iters", 200)
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# No-U-turn transitions
# ---------------------------------------------------------------------------


@dataclass
class _Tree:
    q_minus: np.ndarray
    p_minus: np.ndarray
    grad_minus: np.ndarray
    q_plus: np.ndarray
    p_plus: np.ndarray
    grad_plus: np.ndarray
    q_prop: np.ndarray
    logp_prop: float
    grad_prop: np.ndarray
    log_weight: float
    sum_accept: float
    n_states: int
    divergent: bool
    turning: bool


def _leapfrog(f, q, p, grad, eps, inv_mass):
    p_half = p + 0.5 * eps * grad
    q_new = q + eps * inv_mass * p_half
    logp_new, grad_new = f(q_new)
    p_new = p_half + 0.5 * eps * grad_new
    return q_new, p_new, logp_new, grad_new


def _kinetic(p, inv_mass) -> float:
    return 0.5 * float(np.dot(p * p, inv_mass))


def _is_uturn(q_minus, q_plus, p_minus, p_plus, inv_mass) -> bool:
    dq = q_plus - q_minus
    return (np.dot(dq, inv_mass * p_minus) < 0) or (np.dot(dq, inv_mass * p_plus) < 0)


def _build_tree(f, depth, q, p, grad, direction, eps, inv_mass, h0, rng):
    if depth == 0:
        q1, p1, logp1, grad1 = _leapfrog(f, q, p, grad, direction * eps, inv_mass)
        if np.isfinite(logp1):
            h1 = -logp1 + _kinetic(p1, inv_mass)
        else:
            h1 = np.inf
        divergent = not np.isfinite(h1) or (h1 - h0) > DIVERGENCE_THRESHOLD
        log_w = h0 - h1 if np.isfinite(h1) else -np.inf
        accept = min(1.0, math.exp(min(0.0, h0 - h1))) if np.isfinite(h1) else 0.0
        return _Tree(
            q1, p1, grad1, q1, p1, grad1, q1, logp1, grad1,
            log_weight=log_w, sum_accept=accept, n_states=1,
            divergent=divergent, turning=False,
        )

    first = _build_tree(f, depth - 1, q, p, grad, direction, eps, inv_mass, h0, rng)
    if first.divergent or first.turning:
        return first
    if direction > 0:
        start = (first.q_plus, first.p_plus, first.grad_plus)
    else:
        start = (first.q_minus, first.p_minus, first.grad_minus)
    second = _build_tree(f, depth - 1, *start, direction, eps, inv_mass, h0, rng)

    total = np.logaddexp(first.log_weight, second.log_weight)
    take_second = (
        np.isfinite(second.log_weight)
        and math.log(rng.uniform()) < second.log_weight - total
    )
    chosen = second if take_second else first
    if direction > 0:
        q_minus, p_minus, grad_minus = first.q_minus, first.p_minus, first.grad_minus
        q_plus, p_plus, grad_plus = second.q_plus, second.p_plus, second.grad_plus
    else:
        q_minus, p_minus, grad_minus = second.q_minus, second.p_minus, second.grad_minus
        q_plus, p_plus, grad_plus = first.q_plus, first.p_plus, first.grad_plus
    turning = (
        second.turning
        or second.divergent
        or _is_uturn(q_minus, q_plus, p_minus, p_plus, inv_mass)
    )
    return _Tree(
        q_minus, p_minus, grad_minus, q_plus, p_plus, grad_plus,
        chosen.q_prop, chosen.logp_prop, chosen.grad_prop,
        log_weight=total,
        sum_accept=first.sum_accept + second.sum_accept,
        n_states=first.n_states + second.n_states,
        divergent=second.divergent,
        turning=turning,
    )


def _nuts_transition(f, q, logp, grad, eps, inv_mass, max_depth, rng):
    p0 = rng.standard_normal(q.shape[0]) / np.sqrt(inv_mass)
    h0 = -logp + _kinetic(p0, inv_mass)

    tree = _Tree(
        q, p0, grad, q, p0, grad, q, logp, grad,
        log_weight=0.0, sum_accept=0.0, n_states=0, divergent=False, turning=False,
    )
    depth = 0
    divergent = False
    sum_accept = 0.0
    n_states = 0
    while depth < max_depth:
        direction = 1 if rng.uniform() < 0.5 else -1
        if direction > 0:
            sub = _build_tree(
                f, depth, tree.q_plus, tree.p_plus, tree.grad_plus, 1, eps, inv_mass, h0, rng
            )
        else:
            sub = _build_tree(
                f, depth, tree.q_minus, tree.p_minus, tree.grad_minus, -1, eps, inv_mass, h0, rng
            )
        sum_accept += sub.sum_accept
        n_states += sub.n_states
        if sub.divergent:
            divergent = True
            break
        if sub.turning:
            break
        # progressive sampling, biased toward the fresh subtree
        if math.log(rng.uniform()) < sub.log_weight - tree.log_weight:
            tree.q_prop, tree.logp_prop, tree.grad_prop = sub.q_prop, sub.logp_prop, sub.grad_prop
        tree.log_weight = np.logaddexp(tree.log_weight, sub.log_weight)
        if direction > 0:
            tree.q_plus, tree.p_plus, tree.grad_plus = sub.q_plus, sub.p_plus, sub.grad_plus
        else:
            tree.q_minus, tree.p_minus, tree.grad_minus = sub.q_minus, sub.p_minus, sub.grad_minus
        depth += 1
        if _is_uturn(tree.q_minus, tree.q_plus, tree.p_minus, tree.p_plus, inv_mass):
            break

    accept_stat = sum_accept / max(n_states, 1)
    stats = {
        "accept_stat": accept_stat,
        "tree_depth": depth,
        "n_leapfrog": n_states,
        "divergent": float(divergent),
        "step_size": eps,
        "lp": tree.logp_prop,
    }
    return tree.q_prop, tree.logp_prop, tree.grad_prop, stats


def _find_reasonable_epsilon(f, q, logp, grad, inv_mass, rng) -> float:
    eps = 1.0
    p = rng.standard_normal(q.shape[0]) / np.sqrt(inv_mass)
    h0 = -logp + _kinetic(p, inv_mass)

    def accept_ratio(eps):
        _, p1, logp1, _ = _leapfrog(f, q, p, grad, eps, inv_mass)
        if not np.isfinite(logp1):
            return 0.0
        return math.exp(min(0.0, h0 - (-logp1 + _kinetic(p1, inv_mass))) )

    ratio = accept_ratio(eps)
    direction = 1 if ratio > 0.5 else -1
    for _ in range(MAX_STEPSIZE_SEARCH):
        eps *= 2.0**direction
        ratio = accept_ratio(eps)
        if (direction > 0 and ratio <= 0.5) or (direction < 0 and ratio >= 0.5):
            break
        if eps > 1e7 or eps < 1e-10:
            break
    return eps


@dataclass
class _DualAveraging:
    """Nesterov-style step-size adaptation toward a target acceptance."""

    target: float
    log_eps: float
    gamma: float = 0.05
    t0: float = 10.0
    kappa: float = 0.75
    mu: float = field(init=False)
    log_eps_bar: float = 0.0
    h_bar: float = 0.0
    count: int = 0

    def __post_init__(self):
        self.mu = math.log(10.0) + self.log_eps

    def update(self, accept_stat: float) -> float:
        self.count += 1
        frac = 1.0 / (self.count + self.t0)
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (self.target - accept_stat)
        self.log_eps = self.mu - math.sqrt(self.count) / self.gamma * self.h_bar
        weight = self.count**-self.kappa
        self.log_eps_bar = weight * self.log_eps + (1.0 - weight) * self.log_eps_bar
        return math.exp(self.log_eps)

    @property
    def adapted(self) -> float:
        return math.exp(self.log_eps_bar)


def _variance_windows(warmup: int, init_buffer=75, term_buffer=None, base_window=25):
    """Warmup schedule: (start, end) spans for variance estimation.

    Doubling windows preceded by a step-size-only buffer; the final quarter
    of warmup adapts only the step size, long enough for dual averaging to
    settle after the last metric update.
    """
    if term_buffer is None:
        term_buffer = max(50, warmup // 4)
    if warmup < init_buffer + term_buffer + base_window:
        init_buffer = max(1, int(0.15 * warmup))
        term_buffer = max(1, warmup // 4)
        if warmup - init_buffer - term_buffer < 8:
            return []
        return [(init_buffer, warmup - term_buffer)]
    windows = []
    start, size = init_buffer, base_window
    last = warmup - term_buffer
    while True:
        end = start + size
        if end + 2 * size > last:
            windows.append((start, last))
            return windows
        windows.append((start, end))
        start, size = end, 2 * size


class _Welford:
    def __init__(self, dim):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def push(self, x):
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def variance(self, pooled_blocks=()):
        if self.n < 2:
            return np.ones_like(self.mean)
        var = self.m2 / (self.n - 1)
        # pool exchangeable coordinate blocks: with short windows and many
        # coordinates, the per-coordinate estimate is mostly noise while the
        # shared scale is well determined
        w = self.n / (self.n + 50.0)
        for block in pooled_blocks:
            var[block] = w * var[block] + (1.0 - w) * var[block].mean()
        shrink = self.n / (self.n + 5.0)
        return shrink * var + (1.0 - shrink) * 1e-3


@dataclass
class ChainRun:
    draws: np.ndarray          # (sampling_iters, dim)
    stats: dict                # name -> (sampling_iters,)
    step_size: float
    inv_mass: np.ndarray


def run_chain(
    logp_and_grad,
    init: np.ndarray,
    config: SamplerConfig,
    rng: np.random.Generator,
    chain_id: int = 0,
    pooled_blocks=(),
    initial_inv_mass: np.ndarray | None = None,
) -> ChainRun:
    """Warm up and sample a single chain."""
    q = np.array(init, dtype=float)
    logp, grad = logp_and_grad(q)
    if not np.isfinite(logp):
        raise ValueError("initial point has non-finite log density")

    dim = q.shape[0]
    inv_mass = np.ones(dim) if initial_inv_mass is None else np.array(initial_inv_mass, dtype=float)
    eps = _find_reasonable_epsilon(logp_and_grad, q, logp, grad, inv_mass, rng)
    adapt = _DualAveraging(config.target_accept, math.log(eps))
    windows = _variance_windows(config.warmup_iters)
    window_iter = iter(windows)
    window = next(window_iter, None)
    welford = _Welford(dim)

    for it in range(config.warmup_iters):
        q, logp, grad, stats = _nuts_transition(
            logp_and_grad, q, logp, grad, eps, inv_mass, config.max_tree_depth, rng
        )
        eps = adapt.update(stats["accept_stat"])
        if window is not None:
            start, end = window
            if start <= it < end:
                welford.push(q)
            if it == end - 1:
                inv_mass = welford.variance(pooled_blocks)
                welford = _Welford(dim)
                window = next(window_iter, None)
                eps = _find_reasonable_epsilon(logp_and_grad, q, logp, grad, inv_mass, rng)
                adapt = _DualAveraging(config.target_accept, math.log(eps))

    eps = adapt.adapted
    draws = np.empty((config.sampling_iters, dim))
    stat_names = ("accept_stat", "tree_depth", "n_leapfrog", "divergent", "step_size", "lp")
    stat_store = {name: np.empty(config.sampling_iters) for name in stat_names}
    for it in range(config.sampling_iters):
        q, logp, grad, stats = _nuts_transition(
            logp_and_grad, q, logp, grad, eps, inv_mass, config.max_tree_depth, rng
        )
        draws[it] = q
        for name in stat_names:
            stat_store[name][it] = stats[name]

    n_div = int(stat_store["divergent"].sum())
    if n_div == config.sampling_iters:
        raise RuntimeError(f"chain {chain_id}: every transition diverged")
    logger.info(
        "chain %d finished: step size %.3g, %d divergences, mean accept %.2f",
        chain_id, eps, n_div, stat_store["accept_stat"].mean(),
    )
    return ChainRun(draws=draws, stats=stat_store, step_size=eps, inv_mass=inv_mass)


def run_nuts(
    logp_and_grad,
    n_dim: int,
    config: SamplerConfig,
    init: np.ndarray | list | None = None,
    jobs: int = 1,
    pooled_blocks=(),
    initial_inv_mass: np.ndarray | None = None,
):
    """Run all chains of the sampler on an arbitrary target.

    Returns draws of shape (chains, sampling_iters, n_dim) and a dict of
    per-draw statistics with shape (chains, sampling_iters).
    ``init`` may be one point for all chains or a list with one per chain;
    by default each chain starts from its own uniform(-2, 2) draw.
    ``pooled_blocks`` lists index ranges of exchangeable coordinates whose
    mass-matrix entries are shrunk toward their common mean.
    """
    seeds = np.random.SeedSequence(config.seed).spawn(config.chains)
    rngs = [np.random.default_rng(s) for s in seeds]

    inits = []
    for c, rng in enumerate(rngs):
        if isinstance(init, list):
            inits.append(np.array(init[c], dtype=float))
            continue
        if init is not None:
            inits.append(np.array(init, dtype=float))
            continue
        for _ in range(100):
            candidate = rng.uniform(-2.0, 2.0, size=n_dim)
            value, grad_ = logp_and_grad(candidate)
            if np.isfinite(value) and np.all(np.isfinite(grad_)):
                inits.append(candidate)
                break
        else:
            raise RuntimeError("could not find a finite initial point in 100 tries")

    def _one(args):
        i, start, rng = args
        return run_chain(
            logp_and_grad, start, config, rng, chain_id=i,
            pooled_blocks=pooled_blocks, initial_inv_mass=initial_inv_mass,
        )

    tasks = list(zip(range(config.chains), inits, rngs))
    if jobs > 1 and config.chains > 1:
        with ThreadPoolExecutor(max_workers=min(jobs, config.chains)) as pool:
            runs = list(pool.map(_one, tasks))
    else:
        runs = [_one(t) for t in tasks]

    draws = np.stack([r.draws for r in runs])
    stats = {
        name: np.stack([r.stats[name] for r in runs]) for name in runs[0].stats
    }
    return draws, stats


# ---------------------------------------------------------------------------
# Posterior containers
# ---------------------------------------------------------------------------


@dataclass
class PosteriorDraws:
    """Merged sampler output, with derived quantities used downstream."""

    model: ContactModel
    config: SamplerConfig
    unconstrained: np.ndarray          # (chains, draws, dim)
    stats: dict
    intensity: np.ndarray | None = None        # (chains, draws, T, 4, B, B)
    pointwise_loglik: np.ndarray | None = None  # (chains, draws, S, C, 2)

    def __post_init__(self):
        chains, draws, dim = self.unconstrained.shape
        if chains != self.config.chains or draws != self.config.sampling_iters:
            raise ValueError("draw array inconsistent with sampler configuration")
        if dim != self.model.n_params:
            raise ValueError("draw array inconsistent with parameter layout")
        if not np.all(np.isfinite(self.unconstrained)):
            raise ValueError("non-finite values in stored draws")

    @property
    def n_chains(self) -> int:
        return self.unconstrained.shape[0]

    @property
    def n_draws(self) -> int:
        return self.unconstrained.shape[1]

    @property
    def param_names(self) -> tuple[str, ...]:
        return self.model.layout.names

    def constrained_matrix(self) -> np.ndarray:
        u = self.unconstrained
        mask = self.model.layout.positive
        return np.where(mask[None, None, :], np.exp(u), u)

    def constrained(self, name: str) -> np.ndarray:
        idx = self.param_names.index(name)
        return self.constrained_matrix()[:, :, idx]

    def flat_intensity(self) -> np.ndarray:
        if self.intensity is None:
            raise ValueError("intensity draws were not stored")
        shape = self.intensity.shape
        return self.intensity.reshape(shape[0] * shape[1], *shape[2:])

    def n_divergent(self) -> int:
        return int(self.stats["divergent"].sum())


def _derive_quantities(model: ContactModel, draws: np.ndarray, store_intensity: bool):
    chains, n_draws, _ = draws.shape
    intensity = None
    pointwise = None
    if store_intensity:
        first = np.asarray(model.intensity(draws[0, 0]))
        intensity = np.empty((chains, n_draws) + first.shape)
        shape_ll = np.asarray(model.pointwise_loglik(draws[0, 0])).shape
        pointwise = np.empty((chains, n_draws) + shape_ll)
        for m in range(chains):
            for d in range(n_draws):
                intensity[m, d] = np.asarray(model.intensity(draws[m, d]))
                pointwise[m, d] = np.asarray(model.pointwise_loglik(draws[m, d]))
    return intensity, pointwise


def _curvature_inv_mass(logp_and_grad, x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Diagonal-curvature metric at a point, by central differences of the
    gradient. Ridge directions (non-positive curvature) fall back to unit
    scale; extreme stiffness is clipped rather than trusted."""
    dim = x.shape[0]
    curv = np.empty(dim)
    for i in range(dim):
        up, dn = x.copy(), x.copy()
        up[i] += step
        dn[i] -= step
        curv[i] = -(logp_and_grad(up)[1][i] - logp_and_grad(dn)[1][i]) / (2 * step)
    var = np.where(curv > 1e-8, 1.0 / np.maximum(curv, 1e-8), 1.0)
    return np.clip(var, 1e-8, 1e2)


def sample(
    model: ContactModel,
    config: SamplerConfig,
    jobs: int = 1,
    store_intensity: bool = True,
    init: str = "uniform",
) -> tuple[PosteriorDraws, "Diagnostics"]:
    """Sample the model posterior and compute convergence diagnostics.

    ``init='uniform'`` starts each chain from its own uniform(-2, 2) draw.
    ``init='map'`` ascends to the posterior mode first, seeds the mass
    matrix with the diagonal curvature there, and starts chains from
    independently jittered copies of the mode; useful when the warmup
    budget is too small to both find and adapt to the typical set.
    """
    blocks = [model.layout.field_z_slice[key] for key in model.layout.field_keys]
    inits = None
    inv_mass0 = None
    if init == "map":
        mode = map_estimate(model.logp_and_grad, np.zeros(model.n_params))
        inv_mass0 = _curvature_inv_mass(model.logp_and_grad, mode.x)
        jitter_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x1A7]))
        scale = np.sqrt(inv_mass0)
        inits = [
            mode.x + 0.5 * scale * jitter_rng.standard_normal(model.n_params)
            for _ in range(config.chains)
        ]
    elif init != "uniform":
        raise ValueError("init must be 'uniform' or 'map'")
    draws, stats = run_nuts(
        model.logp_and_grad, model.n_params, config, jobs=jobs,
        pooled_blocks=blocks, init=inits, initial_inv_mass=inv_mass0,
    )
    intensity, pointwise = _derive_quantities(model, draws, store_intensity)
    posterior = PosteriorDraws(
        model=model,
        config=config,
        unconstrained=draws,
        stats=stats,
        intensity=intensity,
        pointwise_loglik=pointwise,
    )
    diagnostics = compute_diagnostics(posterior)
    return posterior, diagnostics


# ---------------------------------------------------------------------------
# Convergence diagnostics
# ---------------------------------------------------------------------------


def _as_chains(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError("draws must be 1-D or (chains, draws)")
    return x


def _split_chains(x: np.ndarray) -> np.ndarray:
    m, n = x.shape
    half = n // 2
    if half < 2:
        raise ValueError("need at least 4 draws per chain")
    return np.concatenate([x[:, :half], x[:, half : 2 * half]], axis=0)


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    flat = rankdata(x.reshape(-1), method="average")
    s = flat.shape[0]
    return ndtri((flat - 0.375) / (s + 0.25)).reshape(x.shape)


def _basic_rhat(x: np.ndarray) -> float:
    m, n = x.shape
    chain_means = x.mean(axis=1)
    chain_vars = x.var(axis=1, ddof=1)
    w = chain_vars.mean()
    b = n * chain_means.var(ddof=1)
    var_plus = (n - 1) / n * w + b / n
    if var_plus == 0.0:
        return 1.0
    if w == 0.0:
        return np.inf
    return float(np.sqrt(var_plus / w))


def r_hat(draws) -> float:
    """Split potential-scale-reduction statistic.

    Accepts a single sequence (split in half) or a (chains, draws) array.
    Conservative: reports the largest of the raw-scale split statistic and
    the rank-normalized bulk and folded (tail-sensitive) statistics, so both
    location disagreement between chains and poor tail mixing raise it.
    Chains that are all equal give 1.0; constant but separated chains give
    inf.
    """
    x = _split_chains(_as_chains(draws))
    if np.all(x == x.flat[0]):
        return 1.0
    raw = _basic_rhat(x)
    bulk = _basic_rhat(_rank_normalize(x))
    folded = _basic_rhat(_rank_normalize(np.abs(x - np.median(x))))
    return max(raw, bulk, folded)


def _combined_autocovariance(x: np.ndarray) -> np.ndarray:
    """Mean within-chain autocovariance via FFT, biased normalization."""
    m, n = x.shape
    centered = x - x.mean(axis=1, keepdims=True)
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(centered, size, axis=1)
    acov = np.fft.irfft(f * np.conj(f), size, axis=1)[:, :n].real / n
    return acov.mean(axis=0)


def ess(draws) -> float:
    """Effective sample size from the initial positive autocorrelation sum.

    Accepts a single sequence or a (chains, draws) array; chains are
    combined through the pooled-variance correction so slowly mixing,
    disagreeing chains reduce the estimate.
    """
    x = _as_chains(draws)
    m, n = x.shape
    if n < 8:
        raise ValueError("need at least 8 draws")
    total = m * n
    w = x.var(axis=1, ddof=1).mean()
    if w == 0:
        return float(total)
    var_plus = (n - 1) / n * w
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    acov = _combined_autocovariance(x)
    rho = 1.0 - (w - acov) / var_plus

    # Geyer pairwise sums: keep while positive, enforce monotone decrease
    max_pairs = (n - 1) // 2
    tau = -1.0
    prev = np.inf
    for k in range(max_pairs):
        pair = rho[2 * k] + rho[2 * k + 1]
        if pair <= 0:
            break
        pair = min(pair, prev)
        prev = pair
        tau += 2.0 * pair
    tau = max(tau, 1.0 / math.log10(max(total, 10)))
    return float(total / tau)


def bulk_ess(draws) -> float:
    """Rank-normalized split-chain effective sample size."""
    x = _split_chains(_as_chains(draws))
    if np.all(x == x.flat[0]):
        return float(x.size)
    return ess(_rank_normalize(x))


@dataclass
class Diagnostics:
    r_hat: dict
    ess: dict
    n_divergent: int
    divergence_rate: float
    warnings: list
    elpd: float | None = None
    ppc_coverage: float | None = None

    @property
    def max_r_hat(self) -> float:
        return max(self.r_hat.values())

    @property
    def min_ess(self) -> float:
        return min(self.ess.values())

    def to_dict(self) -> dict:
        return {
            "r_hat": self.r_hat,
            "ess": self.ess,
            "max_r_hat": self.max_r_hat,
            "min_ess": self.min_ess,
            "n_divergent": self.n_divergent,
            "divergence_rate": self.divergence_rate,
            "warnings": self.warnings,
            "elpd": self.elpd,
            "ppc_coverage": self.ppc_coverage,
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def compute_diagnostics(draws: PosteriorDraws, ppc_seed: int = 0) -> Diagnostics:
    values = draws.constrained_matrix()
    names = draws.param_names
    rhats = {}
    esss = {}
    for i, name in enumerate(names):
        rhats[name] = float(r_hat(values[:, :, i]))
        esss[name] = float(bulk_ess(values[:, :, i]))
    rhats["lp"] = float(r_hat(draws.stats["lp"]))
    esss["lp"] = float(bulk_ess(draws.stats["lp"]))

    n_div = draws.n_divergent()
    total = draws.n_chains * draws.n_draws
    warnings = []
    if n_div > 0.01 * total:
        warnings.append(
            f"{n_div} of {total} transitions ({100 * n_div / total:.2f}%) were divergent"
        )
    elpd = ppc = None
    if draws.pointwise_loglik is not None:
        elpd, ppc = elpd_and_ppc(draws, seed=ppc_seed)
    return Diagnostics(
        r_hat=rhats,
        ess=esss,
        n_divergent=n_div,
        divergence_rate=n_div / total,
        warnings=warnings,
        elpd=elpd,
        ppc_coverage=ppc,
    )


def elpd_and_ppc(draws: PosteriorDraws, table=None, seed: int = 0):
    """In-sample pointwise predictive density and 95% predictive coverage.

    elpd sums, over observed cells, the log of the posterior-averaged cell
    likelihood. Coverage is the fraction of observed counts inside the
    central 95% interval of their posterior-predictive draws.
    """
    if draws.pointwise_loglik is None:
        raise ValueError("pointwise log-likelihoods were not stored")
    table = table if table is not None else draws.model.table
    ll = draws.pointwise_loglik.reshape(draws.n_chains * draws.n_draws, -1)
    n = ll.shape[0]
    elpd = float(np.sum(logsumexp(ll, axis=0) - math.log(n)))

    rng = np.random.default_rng(seed)
    flat = draws.unconstrained.reshape(n, -1)
    reps = np.empty((n,) + table.counts.shape)
    for d in range(n):
        alpha, nu = draws.model.predictive_params(flat[d])
        alpha = np.asarray(alpha)
        reps[d] = rng.negative_binomial(alpha, 1.0 / (1.0 + float(nu)))
    lower, upper = np.percentile(reps, [2.5, 97.5], axis=0)
    y = table.counts
    coverage = float(np.mean((y >= lower) & (y <= upper)))
    return elpd, coverage


# ---------------------------------------------------------------------------
# Point estimation
# ---------------------------------------------------------------------------


@dataclass
class MapResult:
    x: np.ndarray
    value: float
    converged: bool
    n_iterations: int
    trace: list = field(default_factory=list)  # objective at accepted iterates


def map_estimate(
    logp_and_grad,
    init: np.ndarray,
    gradient_tol: float = 1e-6,
    max_iterations: int = 2000,
) -> MapResult:
    """Quasi-Newton ascent of the log posterior (L-BFGS on the negative).

    Non-finite objective values during the line search are replaced by a
    large penalty so the search backtracks; the best evaluated point is
    returned even if the iteration cap is hit.
    """
    init = np.asarray(init, dtype=float)
    value0, _ = logp_and_grad(init)
    if not np.isfinite(value0):
        raise ValueError("log posterior is not finite at the initial point")

    best = {"x": init.copy(), "value": value0}
    trace = [value0]

    def objective(u):
        value, grad = logp_and_grad(u)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            return 1e12, np.zeros_like(u)
        if value > best["value"]:
            best["x"] = np.array(u)
            best["value"] = value
        return -value, -grad

    def record(xk):
        trace.append(logp_and_grad(xk)[0])

    result = minimize(
        objective,
        init,
        jac=True,
        method="L-BFGS-B",
        callback=record,
        options={"maxiter": max_iterations, "gtol": gradient_tol, "ftol": 1e-14},
    )
    return MapResult(
        x=best["x"],
        value=best["value"],
        converged=bool(result.success),
        n_iterations=int(result.nit),
        trace=trace,
    )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def draws_to_frame(draws: PosteriorDraws) -> pd.DataFrame:
    chains, n_draws, _ = draws.unconstrained.shape
    values = draws.constrained_matrix().reshape(chains * n_draws, -1)
    frame = pd.DataFrame(
        {
            "chain": np.repeat(np.arange(chains), n_draws),
            "iteration": np.tile(np.arange(n_draws), chains),
            "lp": draws.stats["lp"].reshape(-1),
            "divergent": draws.stats["divergent"].reshape(-1).astype(int),
        }
    )
    return pd.concat([frame, pd.DataFrame(values, columns=list(draws.param_names))], axis=1)


def save_draws(draws: PosteriorDraws, path) -> Path:
    path = Path(path)
    draws_to_frame(draws).to_csv(path, index=False, float_format="%.17g")
    return path


def frame_to_unconstrained(frame: pd.DataFrame, model: ContactModel) -> np.ndarray:
    """Recover (chains, draws, dim) unconstrained draws from a draws CSV."""
    names = list(model.layout.names)
    missing = [n for n in names if n not in frame.columns]
    if missing:
        raise ValueError(f"draws table is missing parameters, e.g. {missing[:3]}")
    chains = np.sort(frame["chain"].unique())
    per_chain = []
    for c in chains:
        sub = frame[frame["chain"] == c].sort_values("iteration")
        per_chain.append(sub[names].to_numpy())
    return model.layout.unconstrain(np.stack(per_chain))

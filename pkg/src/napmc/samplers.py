"""MCMC samplers over unconstrained targets.

Targets bake any reparameterization Jacobian into log_density so both
samplers and flows work on R^D. Chains run independently from per-chain
seeds and are pooled post-warmup in chain order, so a fixed master seed
gives bit-identical output.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

RWM_TARGET_ACCEPT = 0.234
_ADAPT_WINDOW = 50


class InitializationError(RuntimeError):
    """No finite-density starting point found."""


class DiagnosticsError(RuntimeError):
    """Sampler produced unusable output (e.g. mostly divergent)."""


@dataclass
class TargetModel:
    """An unconstrained log-density with optional gradient.

    to_constrained maps a point in R^dim back to the model's natural
    parameter space; log_density already includes the Jacobian of that
    map, so samplers never see constraints.
    """
    dim: int
    log_density: Callable[[np.ndarray], float]
    to_constrained: Callable[[np.ndarray], np.ndarray] = lambda theta: theta
    grad_log_density: Optional[Callable[[np.ndarray], np.ndarray]] = None
    label: str = ""


@dataclass
class SampleSet:
    """Draws in unconstrained space plus bookkeeping."""
    values: np.ndarray
    label: str = ""
    shard: Optional[int] = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("values must be an (n, dim) matrix")

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]


@dataclass
class McmcConfig:
    n_samples: int = 1000
    n_warmup: Optional[int] = None  # defaults to n_samples
    n_chains: int = 4
    algorithm: str = "rwm"
    hmc_step_size: float = 0.1
    hmc_leapfrog_steps: int = 20
    init_jitter: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_warmup is None:
            self.n_warmup = self.n_samples
        if self.n_samples <= 0 or self.n_warmup <= 0 or self.n_chains <= 0:
            raise ValueError("sample, warmup and chain counts must be > 0")
        if self.algorithm not in ("rwm", "hmc"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.algorithm == "hmc":
            if self.hmc_leapfrog_steps <= 0:
                raise ValueError("hmc needs at least one leapfrog step")
            if self.hmc_step_size <= 0:
                raise ValueError("hmc step size must be > 0")


def _chain_rngs(seed, n_chains):
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in seed.spawn(n_chains)]


def _find_init(target, rng, jitter):
    theta = np.zeros(target.dim)
    for _ in range(100):
        candidate = theta + jitter * rng.standard_normal(target.dim)
        if np.isfinite(target.log_density(candidate)):
            return candidate
    raise InitializationError(
        f"no finite-density start for target {target.label!r} "
        f"after 100 jitter attempts"
    )


def _pool(chains, n_samples, label, diagnostics):
    values = np.concatenate(chains, axis=0)[:n_samples]
    return SampleSet(values, label=label, diagnostics=diagnostics)


def rwm_sample(target, cfg, rng_seed=None):
    """Random-walk Metropolis with warmup-only step-scale adaptation.

    The proposal scale follows a Robbins-Monro recursion toward acceptance
    rate 0.234 during warmup and is frozen afterwards, so the sampling
    phase is a fixed reversible kernel.
    """
    seed = cfg.seed if rng_seed is None else rng_seed
    per_chain = -(-cfg.n_samples // cfg.n_chains)
    chains = []
    accept_rates = []
    for rng in _chain_rngs(seed, cfg.n_chains):
        theta = _find_init(target, rng, cfg.init_jitter)
        logp = target.log_density(theta)
        log_step = np.log(0.5)
        accepted = 0
        window_accepted = 0
        adapt_round = 0
        draws = np.empty((per_chain, target.dim))
        total = cfg.n_warmup + per_chain
        for i in range(total):
            warming = i < cfg.n_warmup
            step = np.exp(log_step)
            proposal = theta + step * rng.standard_normal(target.dim)
            logp_prop = target.log_density(proposal)
            if np.log(rng.uniform()) < logp_prop - logp:
                theta, logp = proposal, logp_prop
                if warming:
                    window_accepted += 1
                else:
                    accepted += 1
            if warming and (i + 1) % _ADAPT_WINDOW == 0:
                adapt_round += 1
                rate = window_accepted / _ADAPT_WINDOW
                log_step += (rate - RWM_TARGET_ACCEPT) / np.sqrt(adapt_round)
                window_accepted = 0
            if not warming:
                draws[i - cfg.n_warmup] = theta
        chains.append(draws)
        accept_rates.append(accepted / per_chain)
    return _pool(chains, cfg.n_samples, target.label,
                 {"algorithm": "rwm", "accept_rates": accept_rates})


def _check_gradient(target, theta, rel_tol=1e-4, step=1e-5):
    grad = target.grad_log_density(theta)
    fd = np.empty_like(grad)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = step
        fd[j] = (target.log_density(theta + e)
                 - target.log_density(theta - e)) / (2 * step)
    denom = np.maximum(np.abs(fd), 1.0)
    if np.max(np.abs(grad - fd) / denom) > rel_tol:
        raise DiagnosticsError(
            f"gradient check failed for target {target.label!r}: "
            f"analytic {grad} vs finite differences {fd}"
        )


def leapfrog(target, q, p, step_size, n_steps):
    """Symplectic leapfrog integration of (q, p) under the target's
    potential; returns the trajectory endpoint."""
    q = q.copy()
    p = p + 0.5 * step_size * target.grad_log_density(q)
    for step in range(n_steps):
        q = q + step_size * p
        grad = target.grad_log_density(q)
        if step < n_steps - 1:
            p = p + step_size * grad
    p = p + 0.5 * step_size * grad
    return q, p


def hmc_sample(target, cfg, rng_seed=None):
    """Fixed-step HMC with unit mass matrix and Metropolis correction.

    Trajectories with energy error above 1000 count as divergences and are
    rejected; more than 50% divergences raises DiagnosticsError.
    """
    if target.grad_log_density is None:
        raise ValueError("hmc requires grad_log_density")
    seed = cfg.seed if rng_seed is None else rng_seed
    per_chain = -(-cfg.n_samples // cfg.n_chains)
    chains = []
    accept_rates = []
    divergences = 0
    transitions = 0
    for rng in _chain_rngs(seed, cfg.n_chains):
        theta = _find_init(target, rng, cfg.init_jitter)
        _check_gradient(target, theta)
        logp = target.log_density(theta)
        accepted = 0
        draws = np.empty((per_chain, target.dim))
        total = cfg.n_warmup + per_chain
        for i in range(total):
            momentum = rng.standard_normal(target.dim)
            h0 = -logp + 0.5 * momentum @ momentum
            q, p = leapfrog(target, theta, momentum, cfg.hmc_step_size,
                            cfg.hmc_leapfrog_steps)
            logp_prop = target.log_density(q)
            h1 = -logp_prop + 0.5 * p @ p
            transitions += 1
            energy_error = h1 - h0
            if not np.isfinite(energy_error) or energy_error > 1000:
                divergences += 1
            elif np.log(rng.uniform()) < -energy_error:
                theta, logp = q, logp_prop
                if i >= cfg.n_warmup:
                    accepted += 1
            if i >= cfg.n_warmup:
                draws[i - cfg.n_warmup] = theta
        chains.append(draws)
        accept_rates.append(accepted / per_chain)
    if divergences > 0.5 * transitions:
        raise DiagnosticsError(
            f"{divergences}/{transitions} divergent trajectories"
        )
    return _pool(chains, cfg.n_samples, target.label,
                 {"algorithm": "hmc", "accept_rates": accept_rates,
                  "divergences": divergences})


def sample(target, cfg, rng_seed=None):
    if cfg.algorithm == "hmc":
        return hmc_sample(target, cfg, rng_seed)
    return rwm_sample(target, cfg, rng_seed)


def effective_sample_size(values):
    """Initial-positive-sequence autocorrelation ESS estimate.

    Sums autocorrelations in consecutive pairs until a pair sum goes
    non-positive (Geyer's initial positive sequence), then returns
    n / (1 + 2 * sum), capped at n. A constant series returns 0.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    n = values.size
    if n < 10:
        raise ValueError("need at least 10 values")
    centered = values - values.mean()
    variance = centered @ centered / n
    if variance == 0:
        return 0.0
    acf = np.correlate(centered, centered, mode="full")[n - 1:] / (n * variance)
    rho_sum = 0.0
    t = 1
    while t + 1 < n:
        pair = acf[t] + acf[t + 1]
        if pair <= 0:
            break
        rho_sum += pair
        t += 2
    return float(min(n, n / (1.0 + 2.0 * rho_sum)))

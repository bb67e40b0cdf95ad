"""Subposterior aggregation.

The main method draws candidates from one fitted density, weights them by
the product of all member densities over the proposal density (all in log
space), and resamples categorically. Because every member density is
bounded above (tanh-limited scale nets over a bounded base), the
unnormalized log-weights are provably capped, which keeps the importance
sampling stable. Consensus averaging and a closed-form Gaussian product
are included as baselines.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import flow
from .samplers import SampleSet

WEIGHT_ESS_WARN = 10.0


class DegenerateWeightsError(RuntimeError):
    """Every candidate has zero product density (disjoint supports)."""


class GaussianDensity:
    """Analytic multivariate normal ensemble member.

    Implements the same log_prob / sample / log_prob_upper_bound surface
    as a flow model, so aggregation can be exercised against closed-form
    targets.
    """

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.cov = np.asarray(cov, dtype=np.float64)
        self.dim = self.mean.size
        self._chol = np.linalg.cholesky(self.cov)
        self._log_norm = -0.5 * (self.dim * np.log(2 * np.pi)
                                 + 2 * np.log(np.diag(self._chol)).sum())

    def log_prob(self, theta):
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        diff = theta - self.mean
        sol = np.linalg.solve(self._chol, diff.T)
        out = self._log_norm - 0.5 * (sol * sol).sum(axis=0)
        return out if out.size > 1 else float(out[0])

    def log_prob_upper_bound(self):
        return self._log_norm

    def sample(self, n, rng):
        z = rng.standard_normal((n, self.dim))
        return self.mean + z @ self._chol.T


@dataclass
class SubposteriorEnsemble:
    """K bounded-density members sharing one dimension."""
    members: list
    labels: list = None
    ingested_bytes: int = 0

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        dims = {m.dim for m in self.members}
        if len(dims) != 1:
            raise ValueError(f"members disagree on dim: {sorted(dims)}")
        (self.dim,) = dims
        if self.labels is None:
            self.labels = [f"shard{k}" for k in range(len(self.members))]

    @property
    def K(self):
        return len(self.members)

    @classmethod
    def from_blobs(cls, blobs, labels=None):
        """Ingest serialized flow models, tracking communicated bytes."""
        members = [flow.deserialize(b) for b in blobs]
        return cls(members, labels=labels,
                   ingested_bytes=sum(len(b) for b in blobs))


@dataclass
class WeightedSamples:
    draws: np.ndarray
    log_weights: np.ndarray  # unnormalized
    weights: np.ndarray      # normalized to sum to one
    proposal_index: int

    @property
    def ess(self):
        """(sum w)^2 / sum w^2, the effective importance sample count."""
        return float(1.0 / np.sum(self.weights ** 2))


def nap_log_weights(ensemble, proposal_k, draws):
    """Unnormalized log importance weights for draws from member k.

    log w = sum over all members' log densities minus the proposal's.
    Raises DegenerateWeightsError if every weight underflows to -inf.
    """
    draws = np.atleast_2d(np.asarray(draws, dtype=np.float64))
    total = np.zeros(draws.shape[0])
    for member in ensemble.members:
        total += member.log_prob(draws)
    log_w = total - ensemble.members[proposal_k].log_prob(draws)
    if not np.any(log_w > -np.inf):
        raise DegenerateWeightsError(
            "all importance weights are zero; subposterior approximations "
            "do not overlap"
        )
    return log_w


def _weight_bound(ensemble, proposal_k):
    return sum(m.log_prob_upper_bound()
               for j, m in enumerate(ensemble.members) if j != proposal_k)


def _weighted(ensemble, proposal_k, draws):
    log_w = nap_log_weights(ensemble, proposal_k, draws)
    # boundedness guarantee: each member density is capped, so the product
    # over the K-1 non-proposal members caps the unnormalized weight
    bound = _weight_bound(ensemble, proposal_k)
    violation = np.max(log_w) - bound
    if violation > 0:
        raise AssertionError(
            f"importance weight bound violated by {violation:.3e}"
        )
    weights = np.exp(log_w - logsumexp(log_w))
    return WeightedSamples(draws, log_w, weights, proposal_k)


def _sir_once(ensemble, k, n_candidates, n_out, rng):
    draws = ensemble.members[k].sample(n_candidates, rng)
    ws = _weighted(ensemble, k, draws)
    if ws.ess < WEIGHT_ESS_WARN:
        warnings.warn(
            f"weight ESS {ws.ess:.2f} < {WEIGHT_ESS_WARN} for proposal {k}"
        )
    idx = rng.choice(n_candidates, size=n_out, replace=True, p=ws.weights)
    return draws[idx], ws


def nap_sir(ensemble, T, R, rng, mode="installments", proposal_k=0):
    """Sampling/importance resampling against the product of members.

    mode="single_k": draw T candidates from member proposal_k, weight,
    and resample R with replacement. mode="installments": run once per
    member as proposal with ceil(T/K) candidates and ceil(R/K) outputs
    each, concatenating (and trimming to R); every installment is a valid
    sampler for the product, and cycling proposals improves exploration.
    """
    if not (T >= R >= 1):
        raise ValueError("need T >= R >= 1")
    diagnostics = {"weight_ess": [], "mode": mode}
    if mode == "single_k":
        out, ws = _sir_once(ensemble, proposal_k, T, R, rng)
        diagnostics["weight_ess"].append(ws.ess)
    elif mode == "installments":
        K = ensemble.K
        t_each = -(-T // K)
        r_each = -(-R // K)
        pieces = []
        for k in range(K):
            try:
                piece, ws = _sir_once(ensemble, k, t_each, r_each, rng)
            except DegenerateWeightsError as err:
                raise DegenerateWeightsError(
                    f"installment {k}: {err}"
                ) from err
            pieces.append(piece)
            diagnostics["weight_ess"].append(ws.ess)
        out = np.concatenate(pieces, axis=0)[:R]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return SampleSet(out, label="nap", diagnostics=diagnostics)


def consensus_merge(sample_sets, ridge=1e-8):
    """Precision-weighted averaging of aligned subposterior draws.

    Each set is weighted by the inverse of its sample covariance; all sets
    must have the same number of rows.
    """
    mats = [np.asarray(s.values if isinstance(s, SampleSet) else s,
                       dtype=np.float64) for s in sample_sets]
    sizes = {m.shape for m in mats}
    if len(sizes) != 1:
        raise ValueError(f"sample sets disagree on shape: {sorted(sizes)}")
    precisions = [_inverse_cov(m, ridge) for m in mats]
    total = np.linalg.inv(sum(precisions))
    combined = sum(prec @ m.T for prec, m in zip(precisions, mats))
    return SampleSet((total @ combined).T, label="consensus")


def _inverse_cov(samples, ridge):
    cov = np.atleast_2d(np.cov(samples, rowvar=False))
    try:
        return np.linalg.inv(cov)
    except np.linalg.LinAlgError:
        warnings.warn(f"singular sample covariance; adding ridge {ridge}")
        return np.linalg.inv(cov + ridge * np.eye(cov.shape[0]))


@dataclass
class GaussianSummary:
    mean: np.ndarray
    covariance: np.ndarray


def fit_gaussian(samples, ridge=1e-8):
    samples = np.asarray(samples, dtype=np.float64)
    mean = samples.mean(axis=0)
    cov = np.atleast_2d(np.cov(samples, rowvar=False))
    if np.linalg.matrix_rank(cov) < cov.shape[0]:
        warnings.warn(f"singular sample covariance; adding ridge {ridge}")
        cov = cov + ridge * np.eye(cov.shape[0])
    return GaussianSummary(mean, cov)


def gaussian_product(summaries):
    """Closed-form product of Gaussian densities, renormalized.

    Precisions add; the mean is the precision-weighted combination.
    """
    precisions = [np.linalg.inv(s.covariance) for s in summaries]
    total_precision = sum(precisions)
    cov = np.linalg.inv(total_precision)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ sum(p @ s.mean for p, s in zip(precisions, summaries))
    return GaussianSummary(mean, cov)


def parametric_merge(sample_sets, n_draws, rng, ridge=1e-8):
    """Gaussian fit per subposterior, exact product, exact draws."""
    summaries = []
    for s in sample_sets:
        values = np.asarray(s.values if isinstance(s, SampleSet) else s,
                            dtype=np.float64)
        if values.shape[0] <= values.shape[1]:
            raise ValueError("need more samples than dimensions per set")
        summaries.append(fit_gaussian(values, ridge))
    product = gaussian_product(summaries)
    chol = np.linalg.cholesky(product.covariance)
    draws = product.mean + rng.standard_normal((n_draws, product.mean.size)) @ chol.T
    return product, SampleSet(draws, label="param")

"""Experiment models: data generators, sharding and subposterior targets.

Four generative models are supported: a warped (banana-shaped) Gaussian,
a bimodal two-component gamma mixture, Bayesian logistic regression with
correlated covariates, and a rare-event categorical model. Each model
exposes its shard subposterior prior^(1/K) * shard-likelihood as an
unconstrained TargetModel.
"""

import io
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, gammaln, log_expit

from .samplers import TargetModel

MODEL_KINDS = ("warped_gaussian", "gamma_mixture", "logistic_regression",
               "rare_categorical")


class PartitionError(ValueError):
    pass


@dataclass
class Dataset:
    """Row-aligned named columns; 2-D columns hold one row per observation."""
    columns: dict
    label: str = ""

    def __post_init__(self):
        sizes = {v.shape[0] for v in self.columns.values()}
        if len(sizes) != 1:
            raise ValueError("columns must share a row count")
        (self.n,) = sizes
        if self.n == 0:
            raise ValueError("dataset is empty")

    def take(self, idx):
        return Dataset({k: v[idx] for k, v in self.columns.items()},
                       label=self.label)

    def to_csv(self):
        """Header plus float64 rows at 17 significant digits."""
        names = []
        arrays = []
        for key, col in self.columns.items():
            if col.ndim == 1:
                names.append(key)
                arrays.append(col[:, None])
            else:
                names.extend(f"{key}{j}" for j in range(col.shape[1]))
                arrays.append(col)
        table = np.hstack(arrays)
        buf = io.StringIO()
        buf.write(",".join(names) + "\n")
        for row in table:
            buf.write(",".join(f"{x:.17g}" for x in row) + "\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text, label=""):
        lines = text.strip().splitlines()
        names = lines[0].split(",")
        table = np.array([[float(x) for x in line.split(",")]
                          for line in lines[1:]])
        columns = {}
        for j, name in enumerate(names):
            base = name.rstrip("0123456789")
            if base != name and base:  # vector column split as name0, name1, ...
                columns.setdefault(base, []).append(table[:, j])
            else:
                columns[name] = table[:, j]
        columns = {k: (np.column_stack(v) if isinstance(v, list) else v)
                   for k, v in columns.items()}
        return cls(columns, label=label)


@dataclass
class ShardedData:
    shards: list
    partition_seed: int


@dataclass
class ModelSpec:
    """A model kind with its true and prior parameters."""
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")

    @classmethod
    def warped_gaussian(cls, mu1=0.5, mu2=0.0, sigma2=2.0, prior_var=25.0):
        if sigma2 <= 0 or prior_var <= 0:
            raise ValueError("variances must be positive")
        return cls("warped_gaussian", {
            "mu1": mu1, "mu2": mu2, "sigma2": sigma2, "prior_var": prior_var,
        })

    @classmethod
    def gamma_mixture(cls, alpha1=0.5, alpha2=1.0, beta1=1.0, beta2=1.0,
                      prior_shape=0.5, prior_scale=1.0):
        if min(alpha1, alpha2, beta1, beta2, prior_shape, prior_scale) <= 0:
            raise ValueError("gamma parameters must be positive")
        return cls("gamma_mixture", {
            "alpha1": alpha1, "alpha2": alpha2, "beta1": beta1,
            "beta2": beta2, "prior_shape": prior_shape,
            "prior_scale": prior_scale,
        })

    @classmethod
    def logistic_regression(cls, p, intercept=-3.0, coef_var=0.25,
                            prior_var=5.0, coef_seed=0):
        """True coefficients are drawn once from N(0, coef_var) at spec
        construction so the spec fully determines the generative model."""
        if p < 1:
            raise ValueError("need at least one covariate")
        rng = np.random.default_rng(coef_seed)
        coefs = rng.normal(0.0, np.sqrt(coef_var), size=p)
        return cls("logistic_regression", {
            "p": int(p), "intercept": intercept, "coefs": coefs,
            "prior_var": prior_var,
        })

    @classmethod
    def rare_categorical(cls, K, N, n_outcomes=3):
        """Rare-outcome probabilities 2K/N so each of K shards expects two
        observations of each rare outcome."""
        rare = 2.0 * K / N
        probs = np.full(n_outcomes, rare)
        probs[-1] = 1.0 - rare * (n_outcomes - 1)
        if np.any(probs <= 0) or probs.sum() > 1 + 1e-12:
            raise ValueError("invalid outcome probabilities; increase N")
        return cls("rare_categorical", {"probs": probs})

    @property
    def dim(self):
        if self.kind == "warped_gaussian":
            return 2
        if self.kind == "gamma_mixture":
            return 2
        if self.kind == "logistic_regression":
            return self.params["p"] + 1
        return len(self.params["probs"]) - 1

    @property
    def true_unconstrained(self):
        """The generating parameters mapped to unconstrained space."""
        p = self.params
        if self.kind == "warped_gaussian":
            return np.array([p["mu1"], p["mu2"]])
        if self.kind == "gamma_mixture":
            return np.log([p["alpha1"], p["alpha2"]])
        if self.kind == "logistic_regression":
            return np.concatenate([[p["intercept"]], p["coefs"]])
        probs = p["probs"]
        return np.log(probs[:-1]) - np.log(probs[-1])


def generate(spec, n, rng):
    """n i.i.d. observations from the generative model."""
    if n <= 0:
        raise ValueError("n must be > 0")
    p = spec.params
    if spec.kind == "warped_gaussian":
        mean = p["mu1"] + p["mu2"] ** 2
        y = rng.normal(mean, np.sqrt(p["sigma2"]), size=n)
        return Dataset({"y": y}, label=spec.kind)
    if spec.kind == "gamma_mixture":
        pick = rng.uniform(size=n) < 0.5
        y = np.where(
            pick,
            rng.gamma(p["alpha1"], p["beta1"], size=n),
            rng.gamma(p["alpha2"], p["beta2"], size=n),
        )
        return Dataset({"y": y}, label=spec.kind)
    if spec.kind == "logistic_regression":
        dims = np.arange(p["p"])
        cov = 0.9 ** np.abs(dims[:, None] - dims[None, :])
        x = rng.multivariate_normal(np.zeros(p["p"]), cov, size=n,
                                    method="cholesky")
        # deterministic labels: sigmoid >= 0.5 iff the linear score is >= 0
        y = (x @ p["coefs"] + p["intercept"] >= 0).astype(np.float64)
        return Dataset({"x": x, "y": y}, label=spec.kind)
    y = rng.choice(len(p["probs"]), size=n, p=p["probs"]).astype(np.float64)
    return Dataset({"y": y}, label=spec.kind)


def shard(data, K, rng):
    """Random permutation followed by a round-robin split into K shards."""
    if K < 1:
        raise PartitionError("K must be >= 1")
    if K > data.n:
        raise PartitionError(f"cannot split {data.n} rows into {K} shards")
    perm = rng.permutation(data.n)
    shards = [data.take(np.sort(perm[k::K])) for k in range(K)]
    seed_hint = int(perm[0]) if data.n else 0
    return ShardedData(shards, partition_seed=seed_hint)


# -- subposterior targets ----------------------------------------------------

def _warped_gaussian_target(spec, data, K, label):
    p = spec.params
    y = data.columns["y"]
    n, s1, s2 = y.size, y.sum(), (y * y).sum()
    sigma2 = p["sigma2"]
    prior_var = p["prior_var"]
    const = -0.5 * n * np.log(2 * np.pi * sigma2)

    def log_density(theta):
        m = theta[0] + theta[1] ** 2
        loglik = const - (s2 - 2 * m * s1 + n * m * m) / (2 * sigma2)
        logprior = -(theta @ theta) / (2 * prior_var)
        return loglik + logprior / K

    def grad(theta):
        m = theta[0] + theta[1] ** 2
        dm = (s1 - n * m) / sigma2
        g = np.array([dm, 2 * theta[1] * dm])
        return g - theta / (prior_var * K)

    return TargetModel(2, log_density, grad_log_density=grad, label=label)


def _gamma_mixture_target(spec, data, K, label):
    p = spec.params
    y = data.columns["y"]
    log_y = np.log(y)
    prior_shape = p["prior_shape"]
    prior_scale = p["prior_scale"]
    rates = np.array([1.0 / p["beta1"], 1.0 / p["beta2"]])
    log_rates = np.log(rates)

    def log_density(theta):
        alpha = np.exp(theta)
        # log 0.5 + alpha*log(rate) + (alpha-1)*log y - rate*y - lgamma(alpha)
        comp = (np.log(0.5) + alpha * log_rates - gammaln(alpha)
                + (alpha - 1)[None, :] * log_y[:, None]
                - y[:, None] * rates[None, :])
        m = comp.max(axis=1)
        loglik = (m + np.log(np.exp(comp - m[:, None]).sum(axis=1))).sum()
        logprior = ((prior_shape - 1) * theta - alpha / prior_scale).sum()
        # the log-reparameterization jacobian (d alpha / d log alpha) is part
        # of the unconstrained-space prior, so it is tempered by 1/K as well;
        # this makes the product of K subposteriors equal the full posterior
        jacobian = theta.sum()
        return loglik + (logprior + jacobian) / K

    def to_constrained(theta):
        return np.exp(theta)

    return TargetModel(2, log_density, to_constrained=to_constrained,
                       label=label)


def _logistic_target(spec, data, K, label):
    p = spec.params
    x = data.columns["x"]
    y = data.columns["y"]
    prior_var = p["prior_var"]
    sign = 2 * y - 1  # log-lik is sum of log sigmoid(sign * score)

    def log_density(theta):
        score = x @ theta[1:] + theta[0]
        loglik = log_expit(sign * score).sum()
        logprior = -(theta @ theta) / (2 * prior_var)
        return loglik + logprior / K

    def grad(theta):
        score = x @ theta[1:] + theta[0]
        resid = y - expit(score)
        g = np.empty(theta.size)
        g[0] = resid.sum()
        g[1:] = x.T @ resid
        return g - theta / (prior_var * K)

    return TargetModel(p["p"] + 1, log_density, grad_log_density=grad,
                       label=label)


def _categorical_target(spec, data, K, label):
    n_outcomes = len(spec.params["probs"])
    counts = np.bincount(data.columns["y"].astype(int),
                         minlength=n_outcomes).astype(np.float64)
    # flat Dirichlet(1,...,1) prior: constant on the simplex
    log_prior_const = gammaln(n_outcomes)

    def _probs(theta):
        z = np.concatenate([theta, [0.0]])
        z -= z.max()
        e = np.exp(z)
        return e / e.sum()

    def log_density(theta):
        lam = _probs(theta)
        loglik = counts @ np.log(lam)
        # the additive-log-ratio volume factor is part of the unconstrained
        # prior and is tempered by 1/K along with it
        jacobian = np.log(lam).sum()
        return loglik + (log_prior_const + jacobian) / K

    return TargetModel(n_outcomes - 1, log_density, to_constrained=_probs,
                       label=label)


def subposterior(spec, data, K, shard_index=None):
    """TargetModel for prior^(1/K) * likelihood(shard), unconstrained.

    K=1 on the full dataset gives the centralized (ground-truth) posterior.
    """
    if data.n == 0:
        raise ValueError("shard is empty")
    label = spec.kind if shard_index is None else f"{spec.kind}[{shard_index}]"
    builder = {
        "warped_gaussian": _warped_gaussian_target,
        "gamma_mixture": _gamma_mixture_target,
        "logistic_regression": _logistic_target,
        "rare_categorical": _categorical_target,
    }[spec.kind]
    return builder(spec, data, K, label)

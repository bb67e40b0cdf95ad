"""Comparison metrics between approximate and ground-truth sample sets.

RMSE is reported per dimension (the distance between the two sample means
divided by sqrt(D)) so values are comparable across dimensions; this
normalization convention is recorded in the CSV header.
"""

import io
from dataclasses import dataclass, field

import numpy as np

from .aggregate import fit_gaussian

CSV_COLUMNS = ("method", "rmse_per_dim", "concentration_ratio",
               "kl_divergence", "weight_ess", "bytes_communicated",
               "wall_time_s")


class DegenerateSamplesError(ValueError):
    pass


def _as_matrix(samples):
    values = np.asarray(getattr(samples, "values", samples), dtype=np.float64)
    if values.ndim != 2 or values.shape[0] == 0:
        raise ValueError("need a nonempty (n, dim) sample matrix")
    return values


def rmse(approx_samples, truth_samples):
    """Distance between sample means, normalized by sqrt(dim)."""
    a = _as_matrix(approx_samples)
    t = _as_matrix(truth_samples)
    if a.shape[1] != t.shape[1]:
        raise ValueError("dimension mismatch")
    return float(np.linalg.norm(a.mean(axis=0) - t.mean(axis=0))
                 / np.sqrt(a.shape[1]))


def concentration_ratio(approx_samples, truth_samples):
    """Spread of the approximation about the truth mean, relative to the
    truth's own spread; 1 is ideal."""
    a = _as_matrix(approx_samples)
    t = _as_matrix(truth_samples)
    if a.shape[1] != t.shape[1]:
        raise ValueError("dimension mismatch")
    center = t.mean(axis=0)
    truth_spread = ((t - center) ** 2).sum()
    if truth_spread == 0:
        raise DegenerateSamplesError("truth samples have zero dispersion")
    approx_spread = ((a - center) ** 2).sum() * (t.shape[0] / a.shape[0])
    return float(np.sqrt(approx_spread / truth_spread))


def gaussian_kl(approx_samples, truth_samples, ridge=1e-8):
    """KL between moment-matched Gaussian fits, KL(approx || truth)."""
    a = _as_matrix(approx_samples)
    t = _as_matrix(truth_samples)
    d = a.shape[1]
    if t.shape[1] != d:
        raise ValueError("dimension mismatch")
    if a.shape[0] <= d or t.shape[0] <= d:
        raise ValueError("need more samples than dimensions")
    fit_a = fit_gaussian(a, ridge)
    fit_t = fit_gaussian(t, ridge)
    prec_t = np.linalg.inv(fit_t.covariance)
    diff = fit_t.mean - fit_a.mean
    _, logdet_t = np.linalg.slogdet(fit_t.covariance)
    _, logdet_a = np.linalg.slogdet(fit_a.covariance)
    kl = 0.5 * (np.trace(prec_t @ fit_a.covariance)
                + diff @ prec_t @ diff - d + logdet_t - logdet_a)
    return float(kl)


def communication_report(serialized_blobs, n_samples, dim):
    """Bytes actually shipped (the model blobs) versus the counterfactual
    cost of centralizing n_samples float64 draws from each worker."""
    nap_bytes = sum(len(b) for b in serialized_blobs)
    counterfactual = n_samples * len(serialized_blobs) * dim * 8
    return {
        "nap_bytes": nap_bytes,
        "sample_shipping_bytes": counterfactual,
        "ratio": nap_bytes / counterfactual if counterfactual else float("inf"),
    }


@dataclass
class MetricsReport:
    method: str
    rmse: float
    concentration_ratio: float
    kl_divergence: float
    weight_ess: float = float("nan")
    bytes_communicated: int = 0
    wall_times: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rmse < 0:
            raise ValueError("rmse must be nonnegative")
        if self.concentration_ratio <= 0:
            raise ValueError("concentration ratio must be positive")
        if self.kl_divergence < -1e-9:
            raise ValueError("kl divergence below numerical floor")

    def csv_row(self):
        total_time = sum(self.wall_times.values())
        return (f"{self.method},{self.rmse:.17g},"
                f"{self.concentration_ratio:.17g},"
                f"{self.kl_divergence:.17g},{self.weight_ess:.17g},"
                f"{self.bytes_communicated},{total_time:.17g}")


def evaluate(method, approx_samples, truth_samples, weight_ess=float("nan"),
             bytes_communicated=0, wall_times=None):
    return MetricsReport(
        method=method,
        rmse=rmse(approx_samples, truth_samples),
        concentration_ratio=concentration_ratio(approx_samples, truth_samples),
        kl_divergence=max(gaussian_kl(approx_samples, truth_samples), 0.0),
        weight_ess=weight_ess,
        bytes_communicated=bytes_communicated,
        wall_times=wall_times or {},
    )


def reports_to_csv(reports):
    buf = io.StringIO()
    buf.write("# rmse is per-dimension: |mean_a - mean_t| / sqrt(D)\n")
    buf.write(",".join(CSV_COLUMNS) + "\n")
    for report in reports:
        buf.write(report.csv_row() + "\n")
    return buf.getvalue()

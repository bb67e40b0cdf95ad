"""End-to-end experiment driver.

A run generates data, shards it, and hands each shard to a worker thread
that samples its subposterior, fits a flow and serializes it. Only the
serialized blobs cross into aggregation, which keeps the communication
path honest even though workers are threads. Ground truth comes from the
same samplers on the centralized data.
"""

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import aggregate, flow, metrics, models, samplers

METHODS = ("nap", "param", "consensus")


class StageError(RuntimeError):
    """An experiment stage failed; names the stage, shard and seed."""

    def __init__(self, stage, seed, shard=None, cause=None):
        at = f"stage {stage!r}" + ("" if shard is None else f", shard {shard}")
        super().__init__(f"{at} failed (replay with seed {seed}): {cause}")
        self.stage = stage
        self.shard = shard
        self.seed = seed


@dataclass
class ExperimentConfig:
    model: str
    n_data: int = 2000
    n_shards: int = 5
    n_subposterior_samples: int = 1000
    n_output_samples: int = 1000
    n_candidates: int = None  # defaults to 4 * n_output_samples
    model_params: dict = field(default_factory=dict)
    flow_layers: int = 3
    flow_hidden: list = field(default_factory=lambda: [256, 256])
    train_iterations: int = 1000
    train_learning_rate: float = 1e-4
    train_batch_size: int = 512
    mcmc_algorithm: str = "rwm"
    mcmc_chains: int = 4
    hmc_step_size: float = 0.1
    hmc_leapfrog_steps: int = 20
    init_jitter: float = 0.5
    methods: list = field(default_factory=lambda: list(METHODS))
    seed: int = 0
    threads: int = 8
    output_dir: str = "results"

    def __post_init__(self):
        if self.n_candidates is None:
            self.n_candidates = 4 * self.n_output_samples
        if self.n_data < self.n_shards:
            raise ValueError("n_data must be >= n_shards")
        if self.n_candidates < self.n_output_samples:
            raise ValueError("n_candidates must be >= n_output_samples")
        if not self.methods:
            raise ValueError("methods must be nonempty")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        if self.model not in models.MODEL_KINDS:
            raise ValueError(f"unknown model {self.model!r}")

    @classmethod
    def from_file(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def from_dict(cls, raw):
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**raw)

    def config_hash(self):
        canon = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def model_spec(self):
        kind = self.model
        params = dict(self.model_params)
        if kind == "warped_gaussian":
            return models.ModelSpec.warped_gaussian(**params)
        if kind == "gamma_mixture":
            return models.ModelSpec.gamma_mixture(**params)
        if kind == "logistic_regression":
            params.setdefault("p", 10)
            params.setdefault("coef_seed", self.seed)
            return models.ModelSpec.logistic_regression(**params)
        return models.ModelSpec.rare_categorical(
            K=self.n_shards, N=self.n_data, **params)

    def flow_architecture(self):
        return flow.FlowArchitecture(self.flow_layers,
                                     tuple(self.flow_hidden))

    def mcmc_config(self, seed):
        return samplers.McmcConfig(
            n_samples=self.n_subposterior_samples,
            n_chains=self.mcmc_chains,
            algorithm=self.mcmc_algorithm,
            hmc_step_size=self.hmc_step_size,
            hmc_leapfrog_steps=self.hmc_leapfrog_steps,
            init_jitter=self.init_jitter,
            seed=seed,
        )


@dataclass
class RunArtifacts:
    config: ExperimentConfig
    config_hash: str
    shard_samples: list
    blobs: list
    truth: samplers.SampleSet
    approx: dict
    reports: dict
    wall_times: dict


def _derive_seeds(seed, n_shards):
    root = np.random.SeedSequence(seed)
    data_ss, truth_ss, agg_ss, shards_ss = root.spawn(4)
    shard_ss = shards_ss.spawn(n_shards)
    return {
        "data": data_ss,
        "truth": truth_ss,
        "aggregate": agg_ss,
        "shards": shard_ss,
    }


def _shard_worker(spec, shard_data, k, cfg, shard_seed):
    sampler_ss, fit_ss = shard_seed.spawn(2)
    target = models.subposterior(spec, shard_data, cfg.n_shards,
                                 shard_index=k)
    t0 = time.perf_counter()
    draws = samplers.sample(target, cfg.mcmc_config(seed=sampler_ss))
    draws.shard = k
    t1 = time.perf_counter()
    fitted = flow.fit(
        draws.values,
        arch=cfg.flow_architecture(),
        cfg=flow.TrainConfig(
            iterations=cfg.train_iterations,
            learning_rate=cfg.train_learning_rate,
            batch_size=cfg.train_batch_size,
            seed=fit_ss.generate_state(1)[0],
        ),
    )
    blob = flow.serialize(fitted)
    t2 = time.perf_counter()
    return draws, blob, {"sample_s": t1 - t0, "fit_s": t2 - t1}


def run_experiment(cfg):
    """Full pipeline: generate, shard, per-shard sample+fit, aggregate,
    ground truth, metrics. Deterministic given cfg.seed."""
    spec = cfg.model_spec()
    seeds = _derive_seeds(cfg.seed, cfg.n_shards)
    wall = {}

    try:
        data_rng = np.random.default_rng(seeds["data"])
        data = models.generate(spec, cfg.n_data, data_rng)
        sharded = models.shard(data, cfg.n_shards, data_rng)
    except Exception as err:
        raise StageError("generate", cfg.seed, cause=err) from err

    t0 = time.perf_counter()
    results = [None] * cfg.n_shards
    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        futures = {
            pool.submit(_shard_worker, spec, sharded.shards[k], k, cfg,
                        seeds["shards"][k]): k
            for k in range(cfg.n_shards)
        }
        for future, k in futures.items():
            try:
                results[k] = future.result()
            except Exception as err:
                raise StageError("worker", cfg.seed, shard=k,
                                 cause=err) from err
    shard_samples = [r[0] for r in results]
    blobs = [r[1] for r in results]
    wall["workers_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    try:
        truth_target = models.subposterior(spec, data, 1)
        truth = samplers.sample(truth_target,
                                cfg.mcmc_config(seed=seeds["truth"]))
    except Exception as err:
        raise StageError("ground_truth", cfg.seed, cause=err) from err
    wall["truth_s"] = time.perf_counter() - t0

    approx = {}
    reports = {}
    agg_rng = np.random.default_rng(seeds["aggregate"])
    ensemble = aggregate.SubposteriorEnsemble.from_blobs(
        blobs, labels=[s.label for s in shard_samples])
    for method in cfg.methods:
        t0 = time.perf_counter()
        weight_ess = float("nan")
        sent_bytes = 0
        try:
            if method == "nap":
                out = aggregate.nap_sir(ensemble, cfg.n_candidates,
                                        cfg.n_output_samples, agg_rng)
                weight_ess = float(np.min(out.diagnostics["weight_ess"]))
                sent_bytes = ensemble.ingested_bytes
            elif method == "consensus":
                out = aggregate.consensus_merge(shard_samples)
                sent_bytes = sum(s.values.nbytes for s in shard_samples)
            else:
                _, out = aggregate.parametric_merge(
                    shard_samples, cfg.n_output_samples, agg_rng)
                # ships one (mean, covariance) summary per shard
                d = ensemble.dim
                sent_bytes = cfg.n_shards * (d + d * d) * 8
        except Exception as err:
            raise StageError(f"aggregate[{method}]", cfg.seed,
                             cause=err) from err
        elapsed = time.perf_counter() - t0
        approx[method] = out
        reports[method] = metrics.evaluate(
            method, out, truth, weight_ess=weight_ess,
            bytes_communicated=sent_bytes,
            wall_times={"aggregate_s": elapsed},
        )
    return RunArtifacts(cfg, cfg.config_hash(), shard_samples, blobs,
                        truth, approx, reports, wall)


# -- output ------------------------------------------------------------------

def _samples_csv(values):
    dim = values.shape[1]
    lines = [",".join(f"theta{j}" for j in range(dim))]
    lines.extend(",".join(f"{x:.17g}" for x in row) for row in values)
    return "\n".join(lines) + "\n"


def _scatter_svg(truth, approx, size=480, pad=40):
    """Two-class scatter overlay for 2-D posteriors."""
    both = np.vstack([truth, approx])
    lo = both.min(axis=0)
    hi = both.max(axis=0)
    span = np.maximum(hi - lo, 1e-12)

    def place(pts):
        xy = (pts - lo) / span
        x = pad + xy[:, 0] * (size - 2 * pad)
        y = size - pad - xy[:, 1] * (size - 2 * pad)
        return np.column_stack([x, y])

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" '
        f'height="{size}" viewBox="0 0 {size} {size}">',
        "<style>.truth{fill:#1f77b4;opacity:0.45}"
        ".approx{fill:#2ca02c;opacity:0.45}</style>",
    ]
    for cls, pts in (("truth", place(truth)), ("approx", place(approx))):
        for x, y in pts:
            parts.append(
                f'<circle class="{cls}" cx="{x:.2f}" cy="{y:.2f}" r="2"/>')
    parts.append("</svg>")
    return "\n".join(parts)


def emit_results(artifacts, out_dir):
    """Write metrics.csv, per-method sample CSVs, flow blobs and (for 2-D
    models) SVG scatter overlays."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    order = [m for m in METHODS if m in artifacts.reports]
    (out / "metrics.csv").write_text(
        f"# config {artifacts.config_hash}\n"
        + metrics.reports_to_csv([artifacts.reports[m] for m in order]))
    (out / "samples_truth.csv").write_text(
        _samples_csv(artifacts.truth.values))
    for method, sample_set in artifacts.approx.items():
        (out / f"samples_{method}.csv").write_text(
            _samples_csv(sample_set.values))
    blob_dir = out / "blobs"
    blob_dir.mkdir(exist_ok=True)
    for k, blob in enumerate(artifacts.blobs):
        (blob_dir / f"shard_{k}.nvp").write_bytes(blob)
    if artifacts.truth.dim == 2:
        plot_dir = out / "plots"
        plot_dir.mkdir(exist_ok=True)
        for method, sample_set in artifacts.approx.items():
            (plot_dir / f"overlay_{method}.svg").write_text(
                _scatter_svg(artifacts.truth.values, sample_set.values))
    return out


def sweep(cfg, axis_name, axis_values, repeats=1, out_dir=None):
    """Repeat run_experiment along one config axis with derived seeds.

    Returns (rows, failures); each row is a dict with the axis value,
    repeat index and one metrics report per method, plus per-cell means.
    Failures are recorded and the sweep continues.
    """
    if not axis_values:
        raise ValueError("axis must be nonempty")
    if axis_name not in ExperimentConfig.__dataclass_fields__:
        raise ValueError(f"unknown sweep axis {axis_name!r}")
    base = asdict(cfg)
    rows = []
    failures = []
    for i, value in enumerate(axis_values):
        for rep in range(repeats):
            run_cfg_dict = dict(base)
            run_cfg_dict[axis_name] = value
            run_cfg_dict["seed"] = int(
                np.random.SeedSequence([cfg.seed, i, rep]).generate_state(1)[0]
            )
            run_cfg = ExperimentConfig.from_dict(run_cfg_dict)
            try:
                artifacts = run_experiment(run_cfg)
            except StageError as err:
                failures.append({"axis_value": value, "repeat": rep,
                                 "error": str(err)})
                continue
            rows.append({"axis_value": value, "repeat": rep,
                         "reports": artifacts.reports})
    if out_dir is not None:
        _write_sweep_csv(rows, failures, axis_name, Path(out_dir))
    return rows, failures


def _write_sweep_csv(rows, failures, axis_name, out):
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"{axis_name},repeat,aggregated," + ",".join(metrics.CSV_COLUMNS)]
    cells = {}
    for row in rows:
        for method in METHODS:
            if method not in row["reports"]:
                continue
            report = row["reports"][method]
            lines.append(f"{row['axis_value']},{row['repeat']},no,"
                         + report.csv_row())
            key = (row["axis_value"], method)
            cells.setdefault(key, []).append(report)
    for (value, method), reports in sorted(cells.items(), key=str):
        lines.append(
            f"{value},,yes,{method},"
            f"{np.mean([r.rmse for r in reports]):.17g},"
            f"{np.mean([r.concentration_ratio for r in reports]):.17g},"
            f"{np.mean([r.kl_divergence for r in reports]):.17g},"
            f"{np.mean([r.weight_ess for r in reports]):.17g},"
            f"{np.mean([r.bytes_communicated for r in reports]):.17g},"
            f"{np.mean([sum(r.wall_times.values()) for r in reports]):.17g}"
        )
    for failure in failures:
        lines.append(f"{failure['axis_value']},{failure['repeat']},error,"
                     f"\"{failure['error']}\"")
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")

"""Why ship models instead of samples: communication accounting.

Each worker communicates one serialized flow whose size depends only on
the architecture — never on how many MCMC draws were used to train it.
Shipping raw draws instead costs S x K x D x 8 bytes, linear in S.

Run:  python3 demos/04_communication_costs.py
"""

import numpy as np

from napmc import flow
from napmc.metrics import communication_report


def main():
    rng = np.random.default_rng(0)
    arch = flow.FlowArchitecture(n_layers=3, hidden_widths=(64, 64))
    K, dim = 10, 2

    blob_sizes = {}
    for n_samples in (1000, 100_000):
        samples = rng.standard_normal((n_samples, dim))
        model = flow.fit(samples, arch, flow.TrainConfig(iterations=50,
                                                         seed=1))
        blob_sizes[n_samples] = len(flow.serialize(model))
    assert blob_sizes[1000] == blob_sizes[100_000]
    print(f"blob size is {blob_sizes[1000]} bytes for S=1000 and S=100000 "
          "alike")

    print(f"{'S':>8} {'ship models':>12} {'ship samples':>13} {'ratio':>8}")
    for n_samples in (1000, 4000, 100_000):
        report = communication_report([b"x" * blob_sizes[1000]] * K,
                                      n_samples, dim)
        print(f"{n_samples:>8} {report['nap_bytes']:>12} "
              f"{report['sample_shipping_bytes']:>13} "
              f"{report['ratio']:>8.3f}")
    print(f"({K} workers, {dim} dimensions, float64 draws)")


if __name__ == "__main__":
    main()

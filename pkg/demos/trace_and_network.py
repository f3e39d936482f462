"""Two post-fit views: prior trace concentration and a correlation network.

The first part estimates how often the shrinkage prior's implied trace lands
within eps of a sparse truth's trace.  The second part fits data and writes
the edges whose absolute posterior correlation passes a threshold, streaming
over row blocks so the dense matrix is never formed.

    python3 demos/trace_and_network.py
"""

import io

from dnccov import RunConfig, run_estimation
from dnccov.metrics import threshold_adjacency
from dnccov.mgps import trace_concentration_experiment
from dnccov.synth import generate

for row in trace_concentration_experiment(p=20, k=2, s=2, hyper=None, epsilons=[1, 10, 100, 1e12],
                                          n_draws=5000, seed=0):
    print(f"eps {row['epsilon']:>8g}  P = {row['probability']:.3f} +/- {row['mc_stderr']:.3f}")

data, _, _ = generate(40, 4, 4, 200, 0.5, seed=3)
est, _ = run_estimation(data, RunConfig(g=2, k=4, sweep_count=600, burn_in=200, seed=3))
sink = io.StringIO()
edges = threshold_adjacency(est, 0.5, sink)
print(f"\n{edges} edges with |correlation| >= 0.5; first few:")
print("\n".join(sink.getvalue().splitlines()[:6]))

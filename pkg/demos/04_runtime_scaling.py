"""Per-trajectory inference time as the graph grows.

The full-gain EKF factorises an N x N innovation covariance every step; the
diagonal gain needs only elementwise work once the model is diagonal in the
graph-frequency domain.
"""

from graphtrack import experiment as ex

cfg = ex.ExperimentConfig(sizes=[50, 100, 200, 300], filters=["ekf", "gsp-ekf", "gsp-kalmannet"], bench_runs=3, bench_horizon=50)
rows, extra = ex.bench(cfg)
for r in rows:
    seconds = "--" if r["status"] != "ok" else f"{r['median_seconds']:.4f}"
    print(f"N={r['n']:4d} {r['filter']:14s} {seconds:>10s}  {r['status']}")
print("log-log slopes:", {k: round(v, 2) for k, v in extra["timing"]["slopes"].items()})

"""Tracking bus voltage phases on the IEEE 14-bus network.

Measurements are active power injections, a sparse trigonometric function of
the phases. The spectral basis comes from the susceptance Laplacian.
"""

import numpy as np

from graphtrack import generate_dataset, run_ekf, run_gsp_ekf, to_frequency_model
from graphtrack import scenarios as sc

case = sc.ieee14()
print(f"{case.n} buses, {len(case.graph.edges)} lines")

x = np.random.default_rng(0).uniform(-0.2, 0.2, case.n)
J = sc.psse_jacobian(case, x)
print(f"Jacobian nonzeros: {np.count_nonzero(J)} of {J.size}")

noise = sc.noise_pair("gauss", sc.r2_from_db(20.0), ratio_db=-20.0)
gauss, _ = sc.psse_models(case, noise, noise)
data = generate_dataset(gauss, 50, 100, seed=3)

wrong = sc.apply_mismatch(gauss, sc.MismatchSpec("drop_edges", k=3), seed=0)
for label, model in (("true grid", gauss), ("3 lines missing", wrong)):
    ekf = run_ekf(model, data.observations).estimates
    gsp = run_gsp_ekf(to_frequency_model(model), data.observations).estimates
    for name, est in (("EKF", ekf), ("GSP-EKF", gsp)):
        mse = np.mean(np.sum((est - data.states) ** 2, axis=-1))
        print(f"{label:16s} {name:8s} {10 * np.log10(mse):7.2f} dB")

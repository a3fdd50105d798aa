"""Kalman filtering of graph signals with graph-filter gains, classic and learned."""

from .dynamics import (
    Dataset,
    NoiseProcess,
    StateSpaceModel,
    Trajectory,
    generate_dataset,
    load_dataset,
    numerical_jacobian,
    save_dataset,
    simulate_trajectory,
)
from .ekf import FilterState, FreqModel, ekf_step, freq_ekf_step, run_ekf, run_freq_ekf, to_frequency_model
from .errors import *  # noqa: F401,F403
from .graph import (
    FrequencyFilter,
    Graph,
    SpectralBasis,
    basis_of,
    decompose,
    gft,
    igft,
    laplacian,
    load_graph,
    random_graph,
    save_graph,
)
from .gsp import GspConfig, GspGain, gsp_ekf_step, gsp_gain, run_gsp_ekf, decoupling_conditions_hold

__version__ = "0.1.0"

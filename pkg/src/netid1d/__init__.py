"""netid1d: local subspace identification for 1D chains of identical LTI systems."""

from .network import (
    SubsystemMatrices,
    NetworkSpec,
    Trajectory,
    ClusterData,
    LiftedModel,
    random_network,
    simulate,
    add_noise_at_snr,
    extract_cluster,
    lift_cluster,
    simulate_lifted,
    white_noise_input,
    network_spec_to_json,
    network_spec_from_json,
    trajectory_to_csv,
)
from .blocks import (
    BlockHankel,
    TwoLayerToeplitzParams,
    MarkovBand,
    TVObservability,
    TVControllability,
    WESequences,
    AffineOperator,
    block_hankel,
    markov_oracle,
    two_layer_param_map,
    params_from_markov_matrices,
    assemble_theta,
    extract_markov_band,
    markov_band_oracle,
    build_G,
    build_Gamma,
    tv_observability,
    tv_controllability,
    we_sequences,
    build_H,
    build_affine_operator,
)
from .estimator import (
    EstimatorOptions,
    DimensionReport,
    MarkovEstimate,
    check_dimension_conditions,
    pe_check,
    estimate_markov,
    nonuniqueness_witness,
)
from .realizer import (
    FactorizationResult,
    RealizationResult,
    StageError,
    estimate_order,
    solve_rank_constrained,
    factor_and_rebuild,
    solve_shift_ls,
    realize,
)
from .harness import (
    TrialConfig,
    TrialResult,
    impulse_fit_error,
    run_trial,
    snr_sweep,
    lambda_sweep,
)

__version__ = "0.1.0"

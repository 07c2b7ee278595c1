"""Geometry-aware longitudinal flow matching with mixture-of-experts
regime discovery, plus its synthetic benchmarks, baselines, and metrics."""

from .nn import (
    AdamWState,
    GumbelSchedule,
    Mlp,
    TimeEmbedding,
    adamw_step,
    categorical_entropy,
    gumbel_softmax,
    mlp_forward,
    mlp_gradients,
    sinusoidal_time_embedding,
)
from .geometry import (
    DeepKernelMetricModel,
    GeometryTrainConfig,
    RbfMetricModel,
    kmeans,
    manifold_score,
    metric_scalar,
    train_geometry,
)
from .bend import BendModel, BendTrainConfig, bend_interpolant, bend_tangent, path_energy, train_bend
from .velocity import (
    MixtureVelocityModel,
    PenaltyWeights,
    RoutingBatch,
    VelocityTrainConfig,
    composite_loss,
    flow_matching_loss,
    mixture_velocity,
    train_velocity,
)
from .transport import (
    Coupling,
    MarginalSequence,
    couple,
    euler_integrate,
    pushforward_chain,
    sinkhorn_plan,
)
from .lorenz import LorenzConfig, generate_lorenz, lorenz_deriv, lorenz_step
from .mesh import (
    MeshBenchConfig,
    Mesh,
    generate_mesh_benchmark,
    load_obj,
    make_icosphere,
    mesh_geodesic_distances,
    orthonormal_embed,
    project_back,
    sample_mesh_marginals,
    surface_deviation,
)
from .marginal_io import read_marginals, write_marginals
from .evaluate import (
    EvalReport,
    ari,
    gaussian_baseline,
    gating_entropy,
    gmm_em,
    linear_interp_baseline,
    nmi,
    regime_report,
    segment_majority,
    sliced_w1,
    switch_rate,
    wd_suite,
)
from .pipeline import (
    ExperimentConfig,
    RunRecord,
    dim_sweep,
    lorenz_experiment,
    mesh_experiment,
    run_experiment,
    run_matrix,
    synthetic_experiment,
)
from .estimator import FluxEstimator

__version__ = "0.1.0"

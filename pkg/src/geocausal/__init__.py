"""Variational inference for co-located geohazards.

Per-location posteriors over landslide, liquefaction, and building damage
are inferred from a noisy damage-proxy observation under a causal network
whose coefficients are spatial random fields (sparse-GP latents warped by
planar flows), fitted by stochastic variational EM.
"""

from .elbo import (
    ElboBreakdown,
    NoiseWeights,
    ParentTerm,
    PosteriorGrid,
    elbo,
    entropy_term,
    latent_bound,
    obs_term,
)
from .exceptions import (
    CheckpointError,
    CheckpointVersionError,
    ConditioningError,
    DegenerateFeatureError,
    FitFailedError,
    GeocausalError,
    NumericError,
    ParseError,
    SchemaError,
    UndefinedMetricError,
    ValidationError,
)
from .fields import (
    FIELD_NAMES,
    CoefficientField,
    MeanNetwork,
    MomentSamples,
    draw_moments,
    field_posterior_mean_map,
    live_masks,
)
from .flows import (
    FlowStack,
    PlanarLayer,
    enforce_invertibility,
    enforce_stack,
    identity_stack,
    init_stack,
    planar_forward,
    stack_forward,
    transformed_log_density,
)
from .gp import (
    InducingSet,
    MaternHyper,
    VariationalGaussian,
    gram,
    kl_gaussian,
    kmeans_inducing,
    matern32,
    sample_reparam,
    sparse_conditional,
)
from .grid import (
    FEATURE_NAMES,
    FeatureStats,
    GridDataset,
    Location,
    compute_active_masks,
    load_grid,
    standardize_features,
    write_grid,
)

__version__ = "0.1.0"

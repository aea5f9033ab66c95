"""Probabilistic k-shot learning over fixed feature representations."""

from .container import ContainerError, load_container, load_csv, save_container
from .data import (
    ClassSplit,
    Episode,
    FeatureTable,
    WeightMatrix,
    rng_stream,
    sample_episode,
    split_classes,
)
from .evaluate import (
    CalibrationReport,
    OnlineMethodSpec,
    OnlineReport,
    Protocol,
    episode_seed,
    joint_predict,
    online_eval,
    reg_sweep,
    run_benchmark,
)
from .exceptions import ConfigError, CvInapplicableError, NumericError, WpkError
from .inference import (
    CosineNearestNeighbor,
    HmcConfig,
    LogisticBaseline,
    OptimizerConfig,
    PosteriorSpec,
    Predictor,
    PriorSoftmaxClassifier,
    hmc_kshot,
    logreg_baseline,
    map_kshot,
    nearest_neighbor,
    neg_log_posterior,
    predict,
    reg_from_weights,
)
from .metrics import accuracy, calibration_curve, ece, nll
from .priors import (
    GaussianWeightPrior,
    GmmWeightPrior,
    LaplaceWeightPrior,
    NIWParams,
    StudentTWeightPrior,
    default_niw_prior,
    fit_gaussian,
    fit_gmm,
    fit_laplace,
    heldout_logprob,
    log_prior_density,
    niw_map,
    niw_posterior,
    student_t_predictive,
)
from .representational import (
    SyntheticWorldConfig,
    TrainConfig,
    generate_synthetic_world,
    train_linear_softmax,
)
from .serialize import load_prior, save_prior

__version__ = "0.1.0"

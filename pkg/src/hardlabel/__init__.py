"""Hard-label attacks, manifold-gradient mutual information, and their metrics."""

from .attacks import (AttackConfig, AttackTrace, RaySConfig, SearchDirection, StepRule,
                      boundary_distance, hsja_gradient_estimate, init_direction,
                      opt_gradient_estimate, rays_search, run_attack, signopt_gradient_estimate)
from .dimred import Autoencoder, DimReducer, ae_blend, ae_train, biln_resample, construct_sample
from .gaussmix import (GaussianModelSpec, LabeledSample, LinearClassifier, RobustnessConfig,
                       make_spec, required_sample_count, sample_dataset)
from .metrics import (EmbeddingSpec, FrechetStats, distortion, embed, fit_gaussian_stats,
                      frechet_distance, gradient_deviation, manifold_distance_trajectory)
from .mi import MIConfig, RiemannPartition, mi_sweep, mutual_information
from .oracle import (HardLabelOracle, LinearVictim, MlpVictim, SmoothingConfig, input_gradient,
                     predict, smoothed_predict, train_mlp)

__version__ = "0.1.0"

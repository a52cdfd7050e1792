"""Constrained adversarial attacks and randomized-smoothing defenses for
skeleton-based action recognition."""

from .attack import (ADMMAttack, AdamConfig, AttackConfig, AttackResult, AttackTrace, CWAttack,
                     admm_attack, augmented_lagrangian, cw_attack, dual_update)
from .constraints import (ConstraintConfig, ConstraintGeometry, DualState, ViolationVectors,
                          compute_violations, constraint_grad, constraint_value)
from .dataio import (Dataset, GeneratorConfig, generate_synthetic_dataset, load_dataset,
                     load_model, read_sequence, save_dataset, save_model, subsample_or_pad,
                     write_sequence)
from .exceptions import (ConfigError, ContractError, DegenerateSequenceError, DivergedError,
                         FormatError, GeometryError, ParseError, SchemaValidationError,
                         SkeladvError, TopologyError, TrainingError)
from .metrics import AttackMetrics, attack_metrics
from .model import (LinearClassifier, LossSpec, ReferenceClassifier, loss_and_input_grad,
                    train_reference_model)
from .skeleton import (SkeletonSequence, SkeletonTopology, bone_lengths, chain,
                       joint_angle_change_bound, kinetic_energy, ntu25, speeds)
from .smoothing import (CertificationResult, SmoothedClassifier, SmoothingConfig,
                        TemporalGaussianFilter, certified_radius, certify, goodman_bounds,
                        inverse_normal_cdf, smoothed_predict)

__version__ = "0.1.0"

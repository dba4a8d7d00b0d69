"""Supervised functional tensor SVD.

Low-rank decomposition of multivariate longitudinal data (subjects x features
x continuous time) whose subject loadings depend on covariates, fitted by a
penalized EM algorithm with a kernel-smoothed time mode.
"""

from .data import (CountTable, Dataset, Subject, clr_transform, filter_features, load_dataset,
                   rescale_times)
from .em import (build_H, cv_select_eta, e_step, e_step_all, fit, gls_beta, initialize,
                 marginal_objective, penalized_objective, rebalance_scales, residual_R,
                 residual_Rtilde, scree, update_beta, update_psi, update_variances, update_xi)
from .errors import (DataFormatError, DegenerateError, DomainError, EmptyResultError,
                     InsufficientDataError, NumericalError, RankDeficiencyError,
                     SingularMatrixError, SupFTSVDError, ValidationError)
from .inference import (NewSubjectScores, TrajectoryGrid, predict_from_covariates,
                        predict_trajectory, project_subject, reconstruct_insample)
from .kernel import (KernelFunction, KernelMatrix, expansion_eval, gram_matrix, kernel_eval,
                     l2_normalize)
from .metrics import EvalReport, component_errors, mspe, r2_loading, r2_tensor
from .model import Component, FitConfig, ModelFit, Posterior, SubjectPosterior
from .simulation import SimConfig, SimulationTruth, simulate, simulate_new_subjects, truth_eval_psi

__version__ = "0.1.0"

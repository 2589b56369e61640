"""Pattern-based CNN pruning and compressed sparse execution."""

from .tensors import (FeatureMap, LayerShape, ShapeError, WeightTensor,
                      conv_dense, finite_diff_grad, read_tensor, write_tensor)
from .patterns import (ALL_PATTERNS, ConnectivityMask, Pattern, PatternError,
                       PatternSet, build_pattern_set, natural_pattern,
                       project_connectivity, project_pattern)
from .nets import Adam, ConvLayer, DenseLayer, TinyNet, train
from .admm import (AdmmState, DivergenceError, PruneConfig, PruneResult,
                   admm_step_auxiliary, admm_step_dual, admm_step_primal,
                   check_feasibility, prune)
from .reorder import (ReorderPlan, SparseKernel, SparseLayer,
                      apply_inverse_reorder, dense_from_sparse, reorder,
                      sparse_from_dense)
from .fkw import (CsrLayer, FkwFormatError, FkwModel, csr_encode, fkw_decode,
                  fkw_encode, read_fkw, structure_overhead, write_fkw)
from .executor import (DEFAULT_CONFIG, SUPPORTED_PERMUTATIONS, ConfigError,
                       ExecConfig, LoadStats, conv_csr, conv_fkw,
                       lre_load_model)
from .tuner import (Chromosome, Estimator, TuneRecord, fit_estimator,
                    predict_best, tune)
from .lr import (LayerRecord, LrValidationError, ModelManifest, lr_emit,
                 lr_parse)

__version__ = "0.1.0"

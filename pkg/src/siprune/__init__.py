"""siprune: post-training sparsity with absorbable scale/shift induction."""

from .core import (Rng, col_l2_norms, entrywise_p_norm, hadamard, matmul,
                   operator_norm, row_stats)
from .distribution import (AttnScale, InputTransform, OptConfig, ScaleShift,
                           absorb, optimize_distribution, preadapt_objective,
                           reparam_attention, reparam_linear)
from .errors import (AbsorptionError, ConfigError, DivergenceError,
                     DomainError, FormatError, PatternError, ShapeError,
                     SiPruneError)
from .evalkit import (SiConfig, compare_pipelines, distortion,
                      score_histogram)
from .feature import (FeatureLossConfig, feature_loss, init_scales,
                      optimize_features)
from .importance import (benchmark_refresh, fast_refresh, hessian_diag,
                         score_activation, score_magnitude)
from .masking import NM, Unstructured, apply_mask, make_mask, parse_pattern
from .model import (AttentionQK, Linear, Model, build_toy_model, forward,
                    load_model, save_model)
from .tensorfile import load_tensors, save_tensors

__version__ = "0.1.0"

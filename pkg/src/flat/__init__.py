"""Head-wise PCA compression of toy decoder-only transformers."""

from .attention import HeadCompressionPlan, compress_attention_layer, compress_query_key, compress_value_output
from .compress import compress_model, param_counts, realized_sparsity
from .errors import CheckpointError, FlatError, NumericalError
from .forward import CalibrationCapture, forward_decoder, forward_model, importance_scores, run_calibration
from .iprs import RankPlan, iprs_allocate, make_plan, naive_allocation, ratios_to_ranks
from .mlp import compress_mlp, ridge_leverage, select_topk
from .model import (
    CompressedDecoderWeights,
    DecoderWeights,
    ModelConfig,
    load_checkpoint,
    random_model,
    save_checkpoint,
)
from .pca import EigenDecomposition, TruncatedBasis, reconstruction_error, sym_eig, truncate

__version__ = "0.1.0"

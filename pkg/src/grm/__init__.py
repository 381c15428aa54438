"""Fine-grained image-text alignment head over precomputed token embeddings.

Gated tokens (Gumbel-Softmax keep probabilities), learnable region prompts
with Gaussian uncertainty, three-level bidirectional max-mean similarity,
and the full five-term training objective, on a small float64 autodiff
engine with numba-accelerated similarity kernels.
"""

from .adapter import AdapterParams, GatedTokens, adapt
from .autograd import (
    Tape,
    Tensor,
    activation,
    backward,
    grad_check,
    gumbel_softmax,
    l2_normalize_rows,
    matmul,
    reduce,
)
from .data import SyntheticSpec, TokenBatch, generate_synthetic, read_batch, write_batch
from .errors import GrmError
from .losses import LossReport, LossWeights, contrastive, entropy_reg, kl_divergence, reconstruction, total_loss
from .model import AlignmentHead, ModelConfig, RngBundle
from .region import GaussianRegions, RegionParams, attend, predict_log_var, region_means, sample_regions
from .similarity import SimilarityLevels, batch_similarity, pair_similarity
from .trainer import (
    Checkpoint,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
    verify_gradients,
)
from .evaluate import RetrievalReport, evaluate, export_heatmap, recall_at_k, run_sweep

__version__ = "0.1.0"

__all__ = [
    "AdapterParams",
    "AlignmentHead",
    "Checkpoint",
    "GatedTokens",
    "GaussianRegions",
    "GrmError",
    "LossReport",
    "LossWeights",
    "ModelConfig",
    "RegionParams",
    "RetrievalReport",
    "RngBundle",
    "SimilarityLevels",
    "SyntheticSpec",
    "Tape",
    "Tensor",
    "TokenBatch",
    "TrainConfig",
    "activation",
    "adapt",
    "attend",
    "backward",
    "batch_similarity",
    "contrastive",
    "entropy_reg",
    "evaluate",
    "export_heatmap",
    "generate_synthetic",
    "grad_check",
    "gumbel_softmax",
    "kl_divergence",
    "l2_normalize_rows",
    "load_checkpoint",
    "matmul",
    "pair_similarity",
    "predict_log_var",
    "read_batch",
    "recall_at_k",
    "reconstruction",
    "reduce",
    "region_means",
    "run_sweep",
    "sample_regions",
    "save_checkpoint",
    "total_loss",
    "train",
    "verify_gradients",
    "write_batch",
]

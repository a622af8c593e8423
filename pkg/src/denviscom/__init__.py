"""Hybrid state-space / attention model for joint optical flow and stereo disparity.

A numpy-based reference implementation with its own reverse-mode tensor
engine, verifiable at desk scale: algebraic scan/convolution duality,
discretization series oracles, finite-difference gradient checks, brute-force
matching oracles, and toy training on synthetic data with exact ground truth.
"""

from .blocks import (
    BlockWeights,
    PatchSet,
    denviscom_forward,
    fuse_lr,
    split_embed,
    unfuse_lr,
)
from .attention import AttentionBlockWeights, attention_block_forward, multi_head_attention
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint, transfer_checkpoint
from .config import ModelConfig, reduced_config
from .matching import disparity_match_1d, flow_global_match, task_loss, upsample_field
from .metrics import MetricsReport, compute_disparity_metrics, compute_flow_metrics
from .model import DenVisCoM
from .ssm import (
    SelectiveScanWeights,
    SsmParams,
    lti_convolve,
    lti_kernel,
    scan_recurrence,
    selective_scan,
    zoh_discretize,
)
from .synthetic import SyntheticSample, gen_flow_pair, gen_stereo_pair
from .tensor import Tensor, grad_check, no_grad, parameter
from .train import Adam, TrainResult, train_toy

try:
    # The model is built from many small matrix products; multithreaded BLAS
    # loses badly to dispatch overhead at these sizes, so pin every loaded
    # BLAS (numpy's and scipy's) to one thread.  Applied after the submodule
    # imports above so both pools exist.
    import threadpoolctl as _threadpoolctl

    _blas_limits = _threadpoolctl.threadpool_limits(limits=1, user_api="blas")
except Exception:  # pragma: no cover - threadpoolctl is optional
    _blas_limits = None

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "AttentionBlockWeights",
    "BlockWeights",
    "Checkpoint",
    "DenVisCoM",
    "MetricsReport",
    "ModelConfig",
    "PatchSet",
    "SelectiveScanWeights",
    "SsmParams",
    "SyntheticSample",
    "Tensor",
    "TrainResult",
    "attention_block_forward",
    "compute_disparity_metrics",
    "compute_flow_metrics",
    "denviscom_forward",
    "disparity_match_1d",
    "flow_global_match",
    "fuse_lr",
    "gen_flow_pair",
    "gen_stereo_pair",
    "grad_check",
    "load_checkpoint",
    "lti_convolve",
    "lti_kernel",
    "multi_head_attention",
    "no_grad",
    "parameter",
    "reduced_config",
    "save_checkpoint",
    "scan_recurrence",
    "selective_scan",
    "split_embed",
    "task_loss",
    "train_toy",
    "transfer_checkpoint",
    "unfuse_lr",
    "upsample_field",
    "zoh_discretize",
]

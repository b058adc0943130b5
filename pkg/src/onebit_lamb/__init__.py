"""1-bit LAMB: layerwise-adaptive large-batch optimization over an
error-compensated 1-bit compressed allreduce, simulated in-process."""

from .comm import SimCluster, VolumeLedger, chunk_bounds, compressed_allreduce, lossless_allreduce, volume_reduction
from .compression import (
    CompressedBlock,
    ErrorFeedback,
    IdentityCompressor,
    OneBitCompressor,
    compress_1bit,
    compress_with_feedback,
    compressed_bits,
    decompress,
)
from .fusion import FusedView, MomentumScales, apply_scaling, compute_scales, fuse, remove_scaling, unfuse
from .harness import RunConfig, load_config, run_training, shard_batch, trace_coefficients
from .numerics import DimensionError, InvalidBoundsError, NonFiniteError, clip, inf_norm_of_ratio, l2_norm
from .optimizers import (
    HyperParams,
    LayerState,
    StageError,
    lamb_basic_1bit_step,
    lamb_step,
    onebit_adam_step,
    onebit_lamb_compressed_step,
    onebit_lamb_warmup_step,
)

__version__ = "0.1.0"

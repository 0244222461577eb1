"""Training-free high-resolution machinery over a toy diffusion transformer."""

from .attention import (
    AttentionScale,
    HeadTensors,
    dense_attention,
    entropy_scale,
    masked_dense_attention,
    windowed_attention,
)
from .dit_block import (
    CrossOutputs,
    LatentField,
    ModelConfig,
    ModelWeights,
    TextContext,
    model_forward,
    override_cross,
)
from .grid import TokenGrid, coord_of, flat_index
from .pipeline import PipelineConfig, Report, flops_estimate, parse_config, run_pipeline, upsample_latent
from .scheduler import (
    CacheState,
    DualPathConfig,
    RunTrace,
    ScheduleSpec,
    add_noise,
    denoise_dual_path,
    sigma_schedule,
    should_refresh,
    start_step,
)
from .window_mask import WindowSpec, inward_offsets, key_interval, mask_entry, materialize_mask, sparsity

__version__ = "0.1.0"

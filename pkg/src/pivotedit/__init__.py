"""Desk-scale text-conditioned video editing.

Pipeline: deterministic inversion of a clip into noise, per-step tuning of
frame-wise null embeddings so guided sampling tracks the inversion
trajectory, decoupled temporal/appearance feature guidance, and dual-path
attention control for prompt edits.
"""

from .control import (
    ControlSchedule,
    EditController,
    PromptAlignment,
    align_prompts,
    attend_with_stored_maps,
    combine_cross_maps,
    control_phase,
    masked_mutual_attention,
)
from .core_io import (
    MaskSet,
    Rng,
    as_latent,
    import_pgm_mask,
    read_array,
    write_array,
    write_pgm,
)
from .denoiser import (
    AttentionRecord,
    DenoiserConfig,
    GaussianOracle,
    GaussianOracleModel,
    TextEmbedding,
    VideoDenoiser,
    encode_text,
    load_weights,
    oracle_epsilon,
    save_weights,
    train_toy,
)
from .guidance import (
    GuidanceConfig,
    GuidanceLog,
    GuidanceTerm,
    combine_guidance,
    compute_guidance,
    spatial_loss_and_grads,
    temporal_loss_and_grads,
    topk_mask,
)
from .inversion import (
    NullTextBank,
    Trajectory,
    TuneConfig,
    initial_bank,
    load_bank,
    load_trajectory,
    optimize_null_text,
    reconstruct,
    run_ddim_inversion,
    save_bank,
    save_trajectory,
)
from .metrics import Metrics, compute_metrics
from .pipeline import EditSession, edit_video
from .scheduler import (
    GuidanceInputs,
    NoiseSchedule,
    add_noise,
    ddim_invert_step,
    ddim_step,
    guided_epsilon,
    make_schedule,
)
from .synthetic import ObjectSpec, SyntheticSpec, describe, gen_synthetic

__version__ = "0.1.0"

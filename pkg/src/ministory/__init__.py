"""Toy pixel-space diffusion pipeline for subject-consistent image
sequences and transition clips, self-contained on numpy.

Layering, bottom up: rng (seeded streams), tensor (reverse-mode autodiff),
serialize (TSR1 tensors, checkpoints, PPM images), attention (blocks),
consistent_attention (batch-window K/V sharing), data (procedural world),
diffusion (schedule, denoiser, DDIM), motion (transition clips), metrics
(similarity scores), story (pipeline runs + manifests), cli.
"""

from .attention import (
    AttentionWeights,
    TransformerBlockParams,
    cross_attention,
    init_attention_weights,
    init_transformer_block,
    scaled_dot_product_attention,
    self_attention,
    transformer_block,
)
from .consistent_attention import (
    CsaConfig,
    TokenBatch,
    consistent_self_attention,
    instrumentation,
    rand_sample,
    window_coverage,
)
from .data import (
    ACCESSORIES,
    ACTIVITIES,
    HUES,
    SHAPES,
    VOCABULARY,
    CharacterIdentity,
    ImageExample,
    SceneSpec,
    TransitionClip,
    decode_prompt,
    encode_prompt,
    identity_feature,
    make_image_dataset,
    make_transition_clip,
    make_transition_dataset,
    pose_statistics,
    prompt_words,
    render_scene,
)
from .diffusion import (
    DenoiserConfig,
    DenoiserParams,
    DiffusionSchedule,
    cfg_epsilon,
    ddim_sample,
    ddim_timesteps,
    denoiser_forward,
    denoiser_parameters,
    forward_diffuse,
    init_denoiser,
    make_schedule,
    train_denoiser,
)
from .metrics import (
    MetricReport,
    character_similarity,
    classify_attributes,
    feature_cosine,
    first_frame_distance,
    first_frame_similarity,
    frames_distance,
    frames_similarity,
    pixel_distance,
    prompt_adherence,
)
from .motion import (
    EmbeddingSequence,
    MotionModel,
    encode_frame,
    encode_frames,
    encoder_checksum,
    generate_transition,
    hard_cut_baseline,
    init_motion_model,
    interpolate_embeddings,
    motion_parameters,
    predict_transition_embeddings,
    train_motion_model,
)
from .rng import RngStream, splitmix64_next
from .serialize import (
    FormatError,
    load_checkpoint,
    load_ppm,
    load_tensor,
    restore_parameters,
    save_checkpoint,
    save_ppm,
    save_tensor,
)
from .story import (
    StoryConfig,
    config_hash,
    load_config,
    reproduce_manifest,
    resolve_config,
    run_ablation_sampling_rate,
    run_generate_story,
    run_generate_transitions,
    run_metrics,
    run_train_image,
    run_train_motion,
    split_story,
    story_prompts,
)
from .tensor import (
    Adam,
    ContractError,
    DimensionError,
    Parameter,
    Tensor,
    no_grad,
)

__version__ = "0.1.0"

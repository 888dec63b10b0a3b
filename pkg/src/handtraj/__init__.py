"""Hand-trajectory prediction on synthetic egocentric scenes: selective
state-space denoising inside a partially-noised latent diffusion process, with
homography-based egomotion conditioning, from-scratch reverse-mode autodiff,
and numba-accelerated scan kernels (pure-numpy fallback via HANDTRAJ_NO_NUMBA).
"""

from .autodiff import AdamW, Tape, Tensor
from .config import ConfigError, ModelConfig, reference_config, toy_config
from .diffusion import (
    NoiseSchedule,
    build_sqrt_schedule,
    infer_trajectory,
    posterior_sample,
    q_sample_partial,
    respace_steps,
)
from .geometry import (
    RankDeficientError,
    apply_homography,
    compose_to_canvas,
    dlt_homography,
    ransac_homography,
    rotation_camera_homography,
)
from .pipeline import (
    Checkpoint,
    CheckpointError,
    Model,
    NonFiniteError,
    TrajectorySequence,
    cvh_baseline,
    evaluate_cvh,
    evaluate_model,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)
from .ssm import (
    MotionAwareMambaBlock,
    ScanState,
    SelectiveParams,
    SsmDims,
    discretize_zoh,
    lti_convolution_kernel,
    mamba_block_forward,
    selective_scan_chunked,
    selective_scan_sequential,
)
from .synthbench import (
    ARCHETYPES,
    DatasetFormatError,
    GenConfig,
    SyntheticScenario,
    SyntheticSemanticProvider,
    generate_dataset,
    generate_scenario,
    load_dataset,
    reslice,
)

__version__ = "0.1.0"

__all__ = [
    "AdamW", "Tape", "Tensor",
    "ConfigError", "ModelConfig", "reference_config", "toy_config",
    "NoiseSchedule", "build_sqrt_schedule", "infer_trajectory",
    "posterior_sample", "q_sample_partial", "respace_steps",
    "RankDeficientError", "apply_homography", "compose_to_canvas",
    "dlt_homography", "ransac_homography", "rotation_camera_homography",
    "Checkpoint", "CheckpointError", "Model", "NonFiniteError",
    "TrajectorySequence", "cvh_baseline", "evaluate_cvh", "evaluate_model",
    "load_checkpoint", "predict", "save_checkpoint", "train",
    "MotionAwareMambaBlock", "ScanState", "SelectiveParams", "SsmDims",
    "discretize_zoh", "lti_convolution_kernel", "mamba_block_forward",
    "selective_scan_chunked", "selective_scan_sequential",
    "ARCHETYPES", "DatasetFormatError", "GenConfig", "SyntheticScenario",
    "SyntheticSemanticProvider", "generate_dataset", "generate_scenario",
    "load_dataset", "reslice",
    "__version__",
]

"""Audio- and keypoint-conditioned latent-diffusion portrait video generation."""

from .config import RunConfig, load_config
from .diffusion import LatentCodec, NoiseSchedule, ddim_sample, denoising_loss, make_schedule, q_sample
from .geometry import FaceKeypoints, VKpsSequence, interpolate_sequence, render_vkps, retarget_sequence
from .network import ModelConfig, VExpressModel, init_model
from .pipeline import GenerationConfig, blend_overlaps, compute_frame_count, generate, plan_segments
from .synthdata import SynthSample, generate_sample, measure_mouth_openness
from .training import DropoutConfig, TrainConfig, run_stage

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "load_config",
    "LatentCodec",
    "NoiseSchedule",
    "ddim_sample",
    "denoising_loss",
    "make_schedule",
    "q_sample",
    "FaceKeypoints",
    "VKpsSequence",
    "interpolate_sequence",
    "render_vkps",
    "retarget_sequence",
    "ModelConfig",
    "VExpressModel",
    "init_model",
    "GenerationConfig",
    "blend_overlaps",
    "compute_frame_count",
    "generate",
    "plan_segments",
    "SynthSample",
    "generate_sample",
    "measure_mouth_openness",
    "DropoutConfig",
    "TrainConfig",
    "run_stage",
    "__version__",
]

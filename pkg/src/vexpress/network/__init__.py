from .attention import Attention, FeedForward, sinusoidal_embedding
from .blocks import MotionAttention, ResBlock, TransformerBlock
from .conditioners import AudioProjection, VKpsGuider
from .model import PARAMETER_GROUP_NAMES, ModelConfig, VExpressModel, init_model
from .unet import DenoisingUNet, ReferenceFeatures, ReferenceNet

__all__ = [
    "Attention",
    "FeedForward",
    "sinusoidal_embedding",
    "MotionAttention",
    "ResBlock",
    "TransformerBlock",
    "AudioProjection",
    "VKpsGuider",
    "PARAMETER_GROUP_NAMES",
    "ModelConfig",
    "VExpressModel",
    "init_model",
    "DenoisingUNet",
    "ReferenceFeatures",
    "ReferenceNet",
]

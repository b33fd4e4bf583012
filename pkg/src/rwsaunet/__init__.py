"""RWSA-MambaUNet: a magnitude/phase speech enhancement U-Net with shared attention across resolutions."""
from .dsp import AudioBuffer, StftConfig, istft, stft
from .model import PRESETS, ModelConfig, build_model, count_flops, count_params
from .objectives import LossWeights, si_sdr, ssnr

__all__ = ["AudioBuffer", "LossWeights", "ModelConfig", "PRESETS", "StftConfig", "build_model", "count_flops",
           "count_params", "istft", "si_sdr", "ssnr", "stft"]
__version__ = "0.1.0"

"""Cooperative multi-device edge inference with learned, bit-budgeted feature coding."""

from .quantize import QuantizedCode, QuantizerSpec, pack_bits, unpack_bits, quantize
from .sim import ChannelModel, latency, run_inference_episode
from .sr import SrConfig, SrModel, train_vddib_sr
from .vddib import VddibConfig, VddibModel, train_vddib
from .vib import VibConfig, VibModel, train_vib

__all__ = [
    "ChannelModel",
    "QuantizedCode",
    "QuantizerSpec",
    "SrConfig",
    "SrModel",
    "VddibConfig",
    "VddibModel",
    "VibConfig",
    "VibModel",
    "latency",
    "pack_bits",
    "quantize",
    "run_inference_episode",
    "train_vddib",
    "train_vddib_sr",
    "train_vib",
    "unpack_bits",
]

"""Streaming wake-word detection and localization toolkit.

A small CNN scores every 100 ms feature frame with the probability that a
window ending there contains the keyword, plus the offset back to the
keyword start. The package covers the whole loop: MFCC front end, the
model with hand-written gradients, segment mining from forced alignments,
training, constant-memory streaming inference, and DET/IOU evaluation,
with a synthetic corpus generator for desk-scale end-to-end runs.
"""

__version__ = "0.1.0"

from .audio import AudioBuffer, FeatureMatrix, apply_gain_db, load_wav, \
    mfcc, mix_noise
from .errors import HeimdalError
from .model import Model, ModelConfig, build, load_config, load_weights, \
    preset_config, save_weights
from .streaming import StreamState, stream_file, stream_new

__all__ = [
    "AudioBuffer", "FeatureMatrix", "HeimdalError", "Model", "ModelConfig",
    "StreamState", "apply_gain_db", "build", "load_config", "load_wav",
    "load_weights", "mfcc", "mix_noise", "preset_config", "save_weights",
    "stream_file", "stream_new", "__version__",
]

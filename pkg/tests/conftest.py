import numpy as np
import pytest

from heimdal.mining import Alignment
from heimdal.model import Model, ModelConfig

# Worked toy: keyword h EY s EE r ee occupies frames 10..24; the final
# phone spans 22..24 (run 3), the penultimate phone ends at 21 and the
# second phone starts at 12; 40 frames total.
TOY_KEYWORD = ["h", "EY", "s", "EE", "r", "ee"]


def toy_alignment():
    return Alignment("toy", [
        ("sil", 0, 9), ("h", 10, 11), ("EY", 12, 14), ("s", 15, 17),
        ("EE", 18, 19), ("r", 20, 21), ("ee", 22, 24), ("x", 25, 39),
    ], 40)


# Small configs exercising distinct geometry: plain, freq-stride, and
# deeper dilation. All end with frequency extent 1 and two head outputs.
TINY_CONFIGS = {
    "tiny-a": {
        "name": "tiny-a", "input_freq": 4, "ssn_groups": 2, "dropout": 0.0,
        "layers": [
            {"kind": "Conv", "out_channels": 3, "kernel": [3, 3]},
            {"kind": "Transition", "out_channels": 4, "time_dilation": 1},
            {"kind": "Broadcast", "out_channels": 4, "time_dilation": 2},
            {"kind": "Conv", "out_channels": 4, "kernel": [1, 1]},
            {"kind": "Head", "kernel": [2, 1]},
        ],
    },  # R = 1 + 2 + 2 + 4 = 9
    "tiny-b": {
        "name": "tiny-b", "input_freq": 8, "ssn_groups": 2, "dropout": 0.0,
        "layers": [
            {"kind": "Conv", "out_channels": 4, "kernel": [3, 3],
             "padding": [1, 0]},
            {"kind": "Transition", "out_channels": 4, "time_dilation": 1,
             "freq_stride": 2},
            {"kind": "Broadcast", "out_channels": 4, "time_dilation": 1},
            {"kind": "Conv", "out_channels": 4, "kernel": [3, 3]},
            {"kind": "Head", "kernel": [2, 1]},
        ],
    },  # R = 1 + 2 + 2 + 2 + 2 = 9
    "tiny-c": {
        "name": "tiny-c", "input_freq": 4, "ssn_groups": 2, "dropout": 0.0,
        "layers": [
            {"kind": "Conv", "out_channels": 2, "kernel": [1, 5]},
            {"kind": "Transition", "out_channels": 4, "time_dilation": 2},
            {"kind": "Broadcast", "out_channels": 4, "time_dilation": 4},
            {"kind": "Conv", "out_channels": 3, "kernel": [3, 1]},
            {"kind": "Head", "kernel": [2, 1]},
        ],
    },  # R = 1 + 4 + 4 + 8 = 17
    # 16 mel bins in: accepts real MFCC features, for train-loop tests
    "tiny-d": {
        "name": "tiny-d", "input_freq": 16, "ssn_groups": 2, "dropout": 0.0,
        "layers": [
            {"kind": "Conv", "out_channels": 4, "kernel": [5, 5],
             "stride": [2, 1], "padding": [2, 0]},
            {"kind": "Transition", "out_channels": 6, "time_dilation": 1},
            {"kind": "Broadcast", "out_channels": 6, "time_dilation": 2},
            {"kind": "Conv", "out_channels": 6, "kernel": [3, 3]},
            {"kind": "Head", "kernel": [6, 1]},
        ],
    },  # R = 1 + 4 + 2 + 4 + 2 = 13
}


def tiny_config(name) -> ModelConfig:
    return ModelConfig.from_dict(TINY_CONFIGS[name])


def well_scaled_weights(model: Model, seed: int) -> dict:
    """Random weights whose infer-mode activations stay O(1).

    Raw Kaiming draws make the untrained residual trunk grow exponentially
    in infer mode (running stats are still (0, 1)), which would drown
    float32 comparisons in magnitude; trained weights do not behave that
    way. Kernels are halved and running stats randomized so every
    parameter still participates.
    """
    weights = model.init_weights(seed)
    rng = np.random.default_rng(seed + 1)
    for name, value in weights.items():
        if name.endswith(".W"):
            weights[name] = (0.5 * value).astype(np.float32)
        elif name.endswith((".b", ".shift", ".running_mean")):
            weights[name] = rng.normal(0, 0.05, value.shape).astype(np.float32)
        elif name.endswith(".running_var"):
            weights[name] = rng.uniform(0.5, 2.0, value.shape).astype(
                np.float32)
    return weights


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240901)

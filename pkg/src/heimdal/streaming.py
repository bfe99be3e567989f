"""Frame-at-a-time inference with constant memory.

Every temporal convolution keeps a ring buffer of the columns it still
needs (dilation * (kernel - 1) of history plus the incoming column);
frequency-axis work is recomputed per column since the frequency extent is
tiny. After a warm-up of R - 1 frames the engine emits exactly one
(detection probability, offset) pair per input frame, equal to what a
batch forward pass produces on the window ending at that frame.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .model import Model, ModelConfig
from .ops import sigmoid


class StreamState:
    """Mutable per-stream state over immutable shared weights.

    One StreamState serves one audio stream; run several in parallel by
    creating one per stream from the same weight store.
    """

    def __init__(self, weights: dict, config: ModelConfig):
        self.model = Model(config)
        self.model.check_weights(weights)
        for layer, (name, _, _, _) in zip(self.model.layers,
                                          self.model._shape_ledger):
            spec = getattr(layer, "spec", None)
            if spec is not None and spec.stride[1] > 1:
                raise ConfigError(
                    f"{name}: temporal stride {spec.stride[1]} cannot "
                    "stream (output rate would differ from input rate)")
        self.weights = weights
        self.warmup = self.model.receptive_field() - 1
        self.frames_consumed = 0
        self._states = [
            layer.stream_new(in_freq)
            for layer, (_, (_, in_freq), _, _) in zip(
                self.model.layers, self.model._shape_ledger)
        ]

    def reset(self) -> None:
        """Return to the initial state (frames_consumed = 0)."""
        self.frames_consumed = 0
        for state in self._states:
            if state is None:
                continue
            if isinstance(state, dict):
                for ring in state.values():
                    ring.reset()
            else:
                state.reset()

    def buffer_capacity_values(self) -> int:
        """Total buffered float count; fixed at construction."""
        total = 0
        for state in self._states:
            if state is None:
                continue
            rings = state.values() if isinstance(state, dict) else [state]
            total += sum(ring.capacity_values() for ring in rings)
        return total

    def push(self, feature_column) -> tuple[float, float] | None:
        """Feed one 16-value feature column.

        Returns None during the R - 1 frame warm-up, then one
        (detection_probability, offset) pair per frame. The output for
        input frame i equals the batch forward pass on frames
        [i - R + 1, i].
        """
        col = np.asarray(feature_column, dtype=np.float32)
        if col.ndim != 1 or col.shape[0] != self.model.config.input_freq:
            raise ConfigError(
                f"feature column must have {self.model.config.input_freq} "
                f"values, got shape {col.shape}")
        self.frames_consumed += 1

        x = col[None, :]  # [channels=1, freq]
        for layer, state in zip(self.model.layers, self._states):
            x = layer.stream_step(self.weights, state, x)
            if x is None:
                return None
        det_logit, offset = x
        return float(sigmoid(np.float32(det_logit))), offset

    def push_chunk(self, columns) -> list[tuple[int, float, float]]:
        """Feed [16 x n] feature columns; returns (frame_index, prob, offset)
        tuples for every frame that produced output."""
        out = []
        cols = np.asarray(columns, dtype=np.float32)
        for j in range(cols.shape[1]):
            result = self.push(cols[:, j])
            if result is not None:
                out.append((self.frames_consumed - 1, result[0], result[1]))
        return out


def stream_new(weights: dict, config: ModelConfig) -> StreamState:
    return StreamState(weights, config)


def stream_file(weights: dict, config: ModelConfig, features
                ) -> list[tuple[int, float, float]]:
    """Stream a whole feature matrix; returns (frame_index, prob, offset)
    per output frame — max(0, T - R + 1) entries, frame_index >= R - 1."""
    coeffs = getattr(features, "coeffs", features)
    state = StreamState(weights, config)
    return state.push_chunk(coeffs)

"""Counter-based random streams.

Every stochastic module draws from its own (seed, stream) pair backed by
Philox4x64, so adding or removing draws in one module never shifts the
sequences seen by another.  Identical (seed, stream) pairs reproduce
identical sequences across runs and platforms.
"""

from __future__ import annotations

import numpy as np

# Module stream ids.  Instance-scoped streams (per episode, per frame) are
# derived with `substream`, which packs the instance index into the high
# bits and must therefore stay below 2**40.
STREAM_WORLD = 1
STREAM_TRAFFIC = 2
STREAM_CHANNEL = 3
STREAM_ECHO_NOISE = 4
STREAM_SYMBOLS = 5
STREAM_SCATTER_PHASE = 6
STREAM_POLICY = 7
STREAM_PPO_INIT = 8
STREAM_PPO_SAMPLE = 9
STREAM_EVAL = 10

_SUBSTREAM_SHIFT = 24


class SeededRng:
    """A named Philox stream identified by (seed, stream_id)."""

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.generator = np.random.Generator(
            np.random.Philox(key=[self.seed & 0xFFFFFFFFFFFFFFFF,
                                  self.stream_id & 0xFFFFFFFFFFFFFFFF])
        )

    def substream(self, index: int) -> "SeededRng":
        """Derive a disjoint child stream, e.g. one per episode."""
        if index < 0:
            raise ValueError("substream index must be non-negative")
        return SeededRng(self.seed, self.stream_id + ((index + 1) << _SUBSTREAM_SHIFT))

    def state_array(self) -> np.ndarray:
        """Philox state packed into 13 uint64s, for exact checkpoint resume."""
        s = self.generator.bit_generator.state
        return np.concatenate([
            np.asarray(s["state"]["counter"], dtype=np.uint64),
            np.asarray(s["state"]["key"], dtype=np.uint64),
            np.asarray(s["buffer"], dtype=np.uint64),
            np.array([s["buffer_pos"], s["has_uint32"], s["uinteger"]],
                     dtype=np.uint64),
        ])

    def restore_state(self, arr: np.ndarray) -> None:
        arr = np.asarray(arr, dtype=np.uint64)
        self.generator.bit_generator.state = {
            "bit_generator": "Philox",
            "state": {"counter": arr[0:4], "key": arr[4:6]},
            "buffer": arr[6:10],
            "buffer_pos": int(arr[10]),
            "has_uint32": int(arr[11]),
            "uinteger": int(arr[12]),
        }

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, stream_id={self.stream_id})"

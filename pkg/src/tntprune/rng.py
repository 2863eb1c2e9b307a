"""Counter-based random streams.

Every draw is a pure function of ``(seed, stream_id, counter)``. The generator
is Philox-4x64 (via numpy), keyed by the seed and the stream id, so streams
with different ids never overlap and a stream can be rewound or cloned by
copying three integers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def _derive_stream(seed: int, stream_id: int, keys: tuple[int, ...]) -> int:
    ss = np.random.SeedSequence([seed & _MASK64, stream_id & _MASK64, *(k & _MASK64 for k in keys)])
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass
class RngStream:
    seed: int
    stream_id: int = 0
    counter: int = 0

    def __post_init__(self):
        self.seed = int(self.seed) & _MASK64
        self.stream_id = int(self.stream_id) & _MASK64
        self.counter = int(self.counter)

    def fork(self, *keys: int) -> RngStream:
        """A fresh stream (counter 0) whose id mixes this stream's id with ``keys``."""
        return RngStream(self.seed, _derive_stream(self.seed, self.stream_id, tuple(keys)), 0)

    def copy(self) -> RngStream:
        return RngStream(self.seed, self.stream_id, self.counter)

    def generator(self) -> np.random.Generator:
        """A numpy Generator positioned at the current counter.

        The caller must hand the generator back via :meth:`advance_from` to
        keep the stream's counter in sync.
        """
        bg = np.random.Philox(key=np.array([self.seed, self.stream_id], dtype=np.uint64))
        state = bg.state
        counter = self.counter
        words = [(counter >> (64 * i)) & _MASK64 for i in range(4)]
        state["state"]["counter"] = np.array(words, dtype=np.uint64)
        bg.state = state
        return np.random.Generator(bg)

    def advance_from(self, gen: np.random.Generator) -> None:
        st = gen.bit_generator.state
        words = [int(w) for w in st["state"]["counter"]]
        counter = sum(w << (64 * i) for i, w in enumerate(words))
        # Philox buffers up to four outputs per block; skip the partly used block
        # so the next draw never reuses buffered values.
        if st["buffer_pos"] < 4:
            counter += 1
        self.counter = counter

    def standard_normal(self, shape) -> np.ndarray:
        gen = self.generator()
        out = gen.standard_normal(shape)
        self.advance_from(gen)
        return out

    def permutation(self, n: int) -> np.ndarray:
        gen = self.generator()
        out = gen.permutation(n)
        self.advance_from(gen)
        return out

    def choice(self, n: int, size: int) -> np.ndarray:
        gen = self.generator()
        out = gen.choice(n, size=size, replace=False)
        self.advance_from(gen)
        return out

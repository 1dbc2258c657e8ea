"""Counter-based random streams.

Every source of randomness in the library flows through an explicit
:class:`RngStream`. A stream is fully determined by ``(seed, stream_id)``:
each draw call builds a Philox generator keyed by the pair and positioned
at the stream's current counter, so sequences are reproducible across
hosts and insensitive to how many values earlier calls consumed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

_MASK64 = (1 << 64) - 1
# Each draw call gets its own 2^128-block segment of the Philox counter
# space, so calls can never overlap no matter how much they consume.
_COUNTER_STRIDE_WORD = 2


def _label_to_id(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & _MASK64
    digest = hashlib.blake2b(str(label).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass
class RngStream:
    """A reproducible stream of random draws identified by (seed, stream_id)."""

    seed: int
    stream_id: int = 0
    counter: int = field(default=0, compare=False)

    def _generator(self) -> np.random.Generator:
        words = [0, 0, 0, 0]
        words[_COUNTER_STRIDE_WORD] = self.counter & _MASK64
        words[_COUNTER_STRIDE_WORD + 1] = (self.counter >> 64) & _MASK64
        bitgen = np.random.Philox(
            counter=words, key=[self.seed & _MASK64, self.stream_id & _MASK64]
        )
        self.counter += 1
        return np.random.Generator(bitgen)

    def child(self, label) -> "RngStream":
        """Derive an independent stream; `label` may be an int or a string."""
        mixed = hashlib.blake2b(
            self.stream_id.to_bytes(8, "little")
            + _label_to_id(label).to_bytes(8, "little"),
            digest_size=8,
        ).digest()
        return RngStream(self.seed, int.from_bytes(mixed, "little"))

    def normal(self, shape=(), loc: float = 0.0, scale: float = 1.0) -> np.ndarray:
        return self._generator().normal(loc, scale, size=shape)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._generator().uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._generator().integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator().permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._generator().choice(n, size=size, replace=replace)

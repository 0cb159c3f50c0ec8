"""Token, distribution and randomness primitives shared by every module.

Entropies are measured in nats throughout.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import xlogy

from errors import InvalidArgument

DIGITS = tuple(range(10))
PLUS = 10
EQUALS = 11
EOS = 12
START = -1  # context sentinel for the first generated position

GLYPHS = {
    **{d: str(d) for d in DIGITS},
    PLUS: "+",
    EQUALS: "=",
    EOS: "<eos>",
}

_U64 = (1 << 64) - 1
_PROB_TOLERANCE = 1e-9


@dataclass(frozen=True)
class Vocabulary:
    """Dense integer vocabulary: ten digits plus the three markers."""

    glyphs: dict[int, str] = field(default_factory=lambda: dict(GLYPHS))
    plus: int = PLUS
    equals: int = EQUALS
    eos: int = EOS

    def __post_init__(self) -> None:
        ids = sorted(self.glyphs)
        if ids != list(range(len(ids))):
            raise InvalidArgument("token ids must be dense integers 0..V-1")
        if len(ids) < 13:
            raise InvalidArgument("vocabulary needs ten digits and three markers")
        markers = {self.plus, self.equals, self.eos}
        if len(markers) != 3 or markers & set(DIGITS):
            raise InvalidArgument("PLUS, EQUALS and EOS must be distinct non-digit tokens")

    @property
    def size(self) -> int:
        return len(self.glyphs)

    @property
    def digits(self) -> tuple[int, ...]:
        return DIGITS

    def is_digit(self, token: int) -> bool:
        return 0 <= token <= 9

    def render(self, tokens: Iterable[int]) -> str:
        return " ".join(self.glyphs.get(t, f"<{t}>") for t in tokens)


VOCAB = Vocabulary()


@dataclass(frozen=True, eq=False)
class ProbDist:
    probs: np.ndarray

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size == 0:
            raise InvalidArgument("a distribution must be a non-empty vector")
        if not np.all(np.isfinite(probs)) or np.any(probs < 0.0):
            raise InvalidArgument("probabilities must be finite and non-negative")
        if abs(float(probs.sum()) - 1.0) > _PROB_TOLERANCE:
            raise InvalidArgument(f"probabilities sum to {probs.sum()!r}, not 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def size(self) -> int:
        return int(self.probs.size)


@dataclass(frozen=True)
class Response:
    """One generated token sequence with its behaviour-policy statistics."""

    tokens: tuple[int, ...]
    log_probs: tuple[float, ...]
    entropies: tuple[float, ...]
    reused_prefix_len: int = 0
    terminated_by_eos: bool = False

    def __post_init__(self) -> None:
        n = len(self.tokens)
        if n < 1:
            raise InvalidArgument("a response holds at least one token")
        if len(self.log_probs) != n or len(self.entropies) != n:
            raise InvalidArgument("tokens, log_probs and entropies must have equal length")
        if not 0 <= self.reused_prefix_len <= n:
            raise InvalidArgument("reused_prefix_len out of range")
        if any(lp > 0.0 or not math.isfinite(lp) for lp in self.log_probs):
            raise InvalidArgument("log-probabilities must be finite and <= 0")
        if any(h < 0.0 or not math.isfinite(h) for h in self.entropies):
            raise InvalidArgument("entropies must be finite and >= 0")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def generated_len(self) -> int:
        return len(self.tokens) - self.reused_prefix_len


def _hash_to_u64(text: str) -> int:
    digest = hashlib.sha256(text.encode("ascii")).digest()
    return int.from_bytes(digest[:8], "big", signed=False)


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream.

    A stream is an immutable value: drawing returns the value together with
    the successor stream. ``split`` derives an independent named substream,
    so results never depend on the order in which substreams are consumed.
    """

    seed: int
    stream_id: int = 0
    cursor: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "seed", int(self.seed) & _U64)
        object.__setattr__(self, "stream_id", int(self.stream_id) & _U64)

    def split(self, *tags: object) -> RngStream:
        if not tags:
            raise InvalidArgument("substream tag path must be non-empty")
        path = ":".join(str(t) for t in tags)
        return RngStream(self.seed, _hash_to_u64(f"{self.seed}:{self.stream_id}:{path}"))

    def uniform(self) -> tuple[float, RngStream]:
        """Return a float in [0, 1) and the advanced stream."""
        block = struct.pack("<QQQ", self.seed, self.stream_id, self.cursor)
        word = int.from_bytes(hashlib.blake2b(block, digest_size=8).digest(), "little")
        value = (word >> 11) * (1.0 / 9007199254740992.0)
        return value, RngStream(self.seed, self.stream_id, self.cursor + 1)

    def generator(self) -> np.random.Generator:
        """numpy Generator for bulk draws, keyed by this exact stream state."""
        return np.random.default_rng(np.random.SeedSequence([self.seed, self.stream_id, self.cursor]))


def softmax_with_temperature(logits: Sequence[float] | np.ndarray, temperature: float) -> ProbDist:
    z = np.asarray(logits, dtype=np.float64)
    if not math.isfinite(temperature) or temperature <= 0.0:
        raise InvalidArgument(f"temperature must be a positive real, got {temperature!r}")
    if z.ndim != 1 or z.size == 0 or not np.all(np.isfinite(z)):
        raise InvalidArgument("logits must be a non-empty finite vector")
    with np.errstate(over="ignore"):
        # shift first: z / T alone overflows for tiny T or huge logits
        z = (z - z.max()) / temperature
    e = np.exp(z)
    return ProbDist(e / e.sum())


def shannon_entropy(dist: ProbDist) -> float:
    if not isinstance(dist, ProbDist):
        dist = ProbDist(np.asarray(dist, dtype=np.float64))
    h = -float(np.sum(xlogy(dist.probs, dist.probs)))
    # clamp float jitter at the two equality cases
    return min(max(h, 0.0), math.log(dist.size))


def sample_categorical(dist: ProbDist, rng: RngStream) -> tuple[int, RngStream]:
    """Inverse-CDF draw; returns the token and the advanced stream."""
    if not isinstance(dist, ProbDist):
        dist = ProbDist(np.asarray(dist, dtype=np.float64))
    u, rng = rng.uniform()
    cdf = np.cumsum(dist.probs)
    token = int(np.searchsorted(cdf, u, side="right"))
    if token >= dist.size:
        # u landed above a cdf that rounds to slightly below 1
        token = int(np.flatnonzero(dist.probs)[-1])
    return token, rng

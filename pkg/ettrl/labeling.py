"""Answer extraction, majority-vote pseudo-labels and reward estimators."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):
        """Backport of ``enum.StrEnum`` for Python 3.10."""

        __str__ = str.__str__
        __format__ = str.__format__
from typing import Iterable, Sequence

import numpy as np

from core import EOS, VOCAB, Response, Vocabulary
from errors import InvalidArgument

logger = logging.getLogger(__name__)

ABSENT = None  # answer value of a response holding no digit


class RewardMode(StrEnum):
    GROUND_TRUTH = "ground_truth"
    TTRL_VOTE = "ttrl_vote"
    MIN_ENTROPY = "min_entropy"

    @property
    def is_binary(self) -> bool:
        return self is not RewardMode.MIN_ENTROPY


@dataclass(frozen=True)
class VoteResult:
    label: str | None
    counts: dict[str, int] = field(default_factory=dict)
    majority_ratio: float = 0.0
    extractable_count: int = 0
    total: int = 0

    @property
    def distinct_answers(self) -> int:
        return len(self.counts)


@dataclass(frozen=True)
class RewardVector:
    values: tuple[float, ...]
    mode: RewardMode

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        object.__setattr__(self, "mode", RewardMode(self.mode))
        if self.mode.is_binary and any(v not in (0.0, 1.0) for v in self.values):
            raise InvalidArgument(f"{self.mode} rewards must be 0 or 1")
        if self.mode is RewardMode.MIN_ENTROPY and any(v > 0.0 for v in self.values):
            raise InvalidArgument("min-entropy rewards are never positive")

    def __len__(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)

    def subset(self, indices: Sequence[int]) -> RewardVector:
        return RewardVector(tuple(self.values[i] for i in indices), self.mode)


def _tokens(response: Response | Sequence[int]) -> Sequence[int]:
    return response.tokens if isinstance(response, Response) else response


def extract_answer(response: Response | Sequence[int], vocab: Vocabulary = VOCAB) -> str | None:
    """Last digit token of the response as text, or ``ABSENT``."""
    for token in reversed(_tokens(response)):
        if token != EOS and vocab.is_digit(token):
            return vocab.glyphs[token]
    return ABSENT


def extract_answers(responses: Iterable[Response], vocab: Vocabulary = VOCAB) -> list[str | None]:
    return [extract_answer(r, vocab) for r in responses]


def majority_vote(answers: Sequence[str | None]) -> VoteResult:
    if not answers:
        raise InvalidArgument("cannot vote over an empty group")
    counts = Counter(a for a in answers if a is not ABSENT)
    if not counts:
        return VoteResult(ABSENT, {}, 0.0, 0, len(answers))
    label, top = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return VoteResult(
        label=label,
        counts=dict(sorted(counts.items())),
        majority_ratio=top / len(answers),
        extractable_count=sum(counts.values()),
        total=len(answers),
    )


def _answers_of(responses: Sequence[Response] | Sequence[str | None]) -> list[str | None]:
    return [r if r is None or isinstance(r, str) else extract_answer(r) for r in responses]


def _match_rewards(answers: Sequence[str | None], target: str | None, mode: RewardMode) -> RewardVector:
    if target is ABSENT:
        return RewardVector(tuple(0.0 for _ in answers), mode)
    return RewardVector(tuple(1.0 if a == target else 0.0 for a in answers), mode)


def rewards_ttrl(responses: Sequence[Response] | Sequence[str | None], label: str | None) -> RewardVector:
    """Binary agreement with the vote label; an absent label rewards nobody."""
    return _match_rewards(_answers_of(responses), label, RewardMode.TTRL_VOTE)


def rewards_ground_truth(responses: Sequence[Response] | Sequence[str | None], truth: str) -> RewardVector:
    return _match_rewards(_answers_of(responses), truth, RewardMode.GROUND_TRUTH)


def rewards_min_entropy(responses: Sequence[Response], beta: float) -> RewardVector:
    """Negative mean token entropy scaled by ``beta``."""
    if not beta > 0.0:
        raise InvalidArgument("min-entropy beta must be positive")
    values = []
    for r in responses:
        h = float(np.mean(r.entropies))
        values.append(-beta * h if h > 0.0 else 0.0)
    return RewardVector(tuple(values), RewardMode.MIN_ENTROPY)


def reward_accuracy(estimated: RewardVector, truth_rewards: RewardVector) -> float:
    if len(estimated) != len(truth_rewards):
        raise InvalidArgument("reward vectors differ in length")
    if not (estimated.mode.is_binary and truth_rewards.mode.is_binary):
        raise InvalidArgument("reward accuracy compares binary reward vectors only")
    if not len(estimated):
        raise InvalidArgument("reward vectors are empty")
    hits = sum(e == t for e, t in zip(estimated.values, truth_rewards.values))
    return hits / len(estimated)


def lucky_hits(answers: Sequence[str | None], label: str | None, truth: str) -> list[int]:
    """Indices whose wrong answer earns the correct zero reward under a wrong label."""
    if label == truth:
        return []
    return [i for i, a in enumerate(answers) if a != label and a != truth]


__all__ = [
    "ABSENT",
    "RewardMode",
    "RewardVector",
    "VoteResult",
    "extract_answer",
    "extract_answers",
    "lucky_hits",
    "majority_vote",
    "reward_accuracy",
    "rewards_ground_truth",
    "rewards_min_entropy",
    "rewards_ttrl",
]

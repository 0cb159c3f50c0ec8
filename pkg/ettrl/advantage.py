"""Group-relative advantages, Adv-Clip / Adv-Res shaping and the GRPO surrogate."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):
        """Backport of ``enum.StrEnum`` for Python 3.10."""

        __str__ = str.__str__
        __format__ = str.__format__
from typing import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from core import Response
from errors import InvalidArgument
from labeling import RewardVector
from policy import PolicyGradient, PolicyParams, iter_context_keys, log_prob_gradient_row, next_token_distribution

logger = logging.getLogger(__name__)

DEGENERATE_STD = 1e-12


class ShapingMode(StrEnum):
    NONE = "none"
    CLIP = "clip"
    RES = "res"


class ShapingConfig(BaseModel):
    """Exactly one shaping mechanism (or none) applied after normalisation."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    mode: ShapingMode = ShapingMode.NONE
    clip_bound: float = Field(2.0, gt=0.0)
    res_deviation_clip: float = Field(0.2, gt=0.0)


class GrpoConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    clip_eps: float = Field(0.2, gt=0.0, lt=1.0)


@dataclass(frozen=True)
class AdvantageVector:
    per_response: tuple[float, ...]
    shaped_by: ShapingMode = ShapingMode.NONE
    degenerate: bool = False  # sigma == 0, no learning signal
    res_identity: bool = False  # Adv-Res fell back to Y = 1

    def __post_init__(self) -> None:
        values = tuple(float(v) for v in self.per_response)
        if not all(math.isfinite(v) for v in values):
            raise InvalidArgument("advantages must be finite")
        object.__setattr__(self, "per_response", values)

    def __len__(self) -> int:
        return len(self.per_response)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.per_response, dtype=np.float64)

    def mean_positive(self) -> float:
        positive = [a for a in self.per_response if a > 0.0]
        return float(np.mean(positive)) if positive else 0.0


def response_entropy(response: Response) -> float:
    """Mean per-token entropy of one response."""
    if not len(response.entropies):
        raise InvalidArgument("response entropy of an empty response")
    return float(np.mean(response.entropies))


def group_advantages(rewards: RewardVector | Sequence[float]) -> AdvantageVector:
    values = rewards.as_array() if isinstance(rewards, RewardVector) else np.asarray(rewards, dtype=np.float64)
    if values.size < 2:
        raise InvalidArgument("group-relative advantages need at least two responses")
    sigma = float(values.std())  # population std
    if sigma < DEGENERATE_STD:
        return AdvantageVector(tuple(0.0 for _ in values), degenerate=True)
    return AdvantageVector(tuple((values - values.mean()) / sigma))


def positive_advantage_closed_form(p: float) -> float:
    """Advantage of every rewarded response in a binary group with positive fraction ``p``."""
    if not 0.0 < p < 1.0:
        raise InvalidArgument("positive fraction must lie strictly inside (0, 1)")
    return math.sqrt((1.0 - p) / p)


def shape_clip(adv: AdvantageVector, bound: float) -> AdvantageVector:
    if not bound > 0.0:
        raise InvalidArgument("clip bound must be positive")
    clipped = np.clip(adv.as_array(), -bound, bound)
    return AdvantageVector(tuple(clipped), ShapingMode.CLIP, adv.degenerate)


def shape_res(adv: AdvantageVector, entropies: Sequence[float], deviation_clip: float) -> AdvantageVector:
    """Scale each advantage by 1 + clip(relative entropy deviation below the group mean)."""
    if not deviation_clip > 0.0:
        raise InvalidArgument("deviation clip must be positive")
    h = np.asarray(entropies, dtype=np.float64)
    if h.shape != (len(adv),):
        raise InvalidArgument("one entropy per response required")
    if np.any(h < 0.0) or not np.all(np.isfinite(h)):
        raise InvalidArgument("entropies must be finite and non-negative")
    mean_h = float(h.mean())
    if mean_h <= 0.0:
        logger.debug("Adv-Res on a zero-entropy group, leaving advantages unscaled")
        return AdvantageVector(adv.per_response, ShapingMode.RES, adv.degenerate, res_identity=True)
    factors = 1.0 + np.clip((mean_h - h) / mean_h, -deviation_clip, deviation_clip)
    return AdvantageVector(tuple(factors * adv.as_array()), ShapingMode.RES, adv.degenerate)


def apply_shaping(adv: AdvantageVector, responses: Sequence[Response], config: ShapingConfig) -> AdvantageVector:
    if config.mode is ShapingMode.CLIP:
        return shape_clip(adv, config.clip_bound)
    if config.mode is ShapingMode.RES:
        return shape_res(adv, [response_entropy(r) for r in responses], config.res_deviation_clip)
    return adv


def _check_batch(
    old_log_probs: Sequence[Sequence[float]],
    responses: Sequence[Response],
    advantages: AdvantageVector | Sequence[float],
) -> list[float]:
    adv = list(advantages.per_response if isinstance(advantages, AdvantageVector) else advantages)
    if not responses:
        raise InvalidArgument("GRPO needs a non-empty batch")
    if len(adv) != len(responses) or len(old_log_probs) != len(responses):
        raise InvalidArgument("responses, advantages and old log-probs differ in length")
    for old, response in zip(old_log_probs, responses):
        if len(old) != len(response):
            raise InvalidArgument("old log-probs must cover every token of their response")
    return adv


def _token_terms(params: PolicyParams, prompt: tuple[int, ...], response: Response, temperature: float):
    for ctx, token in zip(iter_context_keys(params, prompt, response.tokens), response.tokens):
        dist = next_token_distribution(params, ctx, temperature)
        yield ctx, token, dist.probs


def grpo_loss(
    params: PolicyParams,
    prompt: Sequence[int],
    old_log_probs: Sequence[Sequence[float]],
    responses: Sequence[Response],
    advantages: AdvantageVector | Sequence[float],
    clip_eps: float = 0.2,
    *,
    temperature: float,
) -> float:
    """Clipped surrogate, token-mean per response then mean over the group, negated."""
    adv = _check_batch(old_log_probs, responses, advantages)
    prompt = tuple(prompt)
    total = 0.0
    for response, old, a in zip(responses, old_log_probs, adv):
        acc = 0.0
        for (_, token, probs), old_lp in zip(_token_terms(params, prompt, response, temperature), old):
            ratio = math.exp(math.log(probs[token]) - old_lp)
            clipped = min(max(ratio, 1.0 - clip_eps), 1.0 + clip_eps)
            acc += min(ratio * a, clipped * a)
        total += acc / len(response)
    return -total / len(responses)


def grpo_gradient(
    params: PolicyParams,
    prompt: Sequence[int],
    old_log_probs: Sequence[Sequence[float]],
    responses: Sequence[Response],
    advantages: AdvantageVector | Sequence[float],
    clip_eps: float = 0.2,
    *,
    temperature: float,
) -> PolicyGradient:
    """Exact gradient of ``grpo_loss`` with respect to the touched logit rows.

    A token contributes only while the unclipped term is the active side of
    the min; past the trust region in the advantage's direction it is zero.
    """
    adv = _check_batch(old_log_probs, responses, advantages)
    prompt = tuple(prompt)
    grad = PolicyGradient(params.vocab_size)
    g = len(responses)
    for response, old, a in zip(responses, old_log_probs, adv):
        if a == 0.0:
            continue
        scale = -a / (g * len(response))
        for (ctx, token, probs), old_lp in zip(_token_terms(params, prompt, response, temperature), old):
            ratio = math.exp(math.log(probs[token]) - old_lp)
            if (a > 0.0 and ratio > 1.0 + clip_eps) or (a < 0.0 and ratio < 1.0 - clip_eps):
                continue
            grad.add(ctx, log_prob_gradient_row(probs, token, temperature), scale * ratio)
    return grad


__all__ = [
    "AdvantageVector",
    "GrpoConfig",
    "ShapingConfig",
    "ShapingMode",
    "apply_shaping",
    "group_advantages",
    "grpo_gradient",
    "grpo_loss",
    "positive_advantage_closed_form",
    "response_entropy",
    "shape_clip",
    "shape_res",
]

"""Digit-sum environment: prompt sets, ground truth and greedy evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from core import EQUALS, PLUS, VOCAB, RngStream
from errors import InvalidArgument, SizeExceeded
from labeling import extract_answer, extract_answers, majority_vote
from policy import GREEDY, PolicyParams, init_with_prior, sample_response
from rollout import parallel_rollout

logger = logging.getLogger(__name__)


class TaskSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["digit_sum"] = "digit_sum"
    num_terms: int = Field(3, ge=1, le=18)
    modulus: int = Field(10, ge=2, le=10)
    num_prompts: int = Field(50, ge=1)
    prior_strength: float = Field(0.3, ge=0.0, le=1.0)
    prior_noise: float = Field(1.5, ge=0.0)
    response_len_budget: int = Field(6, ge=2)
    rival_gap: float | None = Field(None, ge=0.0)
    hesitation: bool = False


DEFAULT_TASK = TaskSpec()
# low-majority regime: a near-tied rival digit and unsure closes after wrong answers
HARD_MODE = TaskSpec(prior_strength=0.15, prior_noise=0.5, rival_gap=0.05, hesitation=True)


@dataclass(frozen=True)
class PromptSet:
    prompts: tuple[tuple[int, ...], ...]
    truths: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.prompts) != len(self.truths):
            raise InvalidArgument("one truth per prompt required")
        if not self.prompts:
            raise InvalidArgument("a prompt set is never empty")

    def __len__(self) -> int:
        return len(self.prompts)

    def answer_ids(self) -> list[int]:
        return [int(t) for t in self.truths]

    def with_truths(self, truths: Sequence[str]) -> PromptSet:
        return PromptSet(self.prompts, tuple(truths))


def encode_prompt(terms: Sequence[int]) -> tuple[int, ...]:
    tokens: list[int] = []
    for i, digit in enumerate(terms):
        if i:
            tokens.append(PLUS)
        tokens.append(int(digit))
    tokens.append(EQUALS)
    return tuple(tokens)


def _terms(prompt: Sequence[int], spec: TaskSpec) -> list[int]:
    prompt = list(prompt)
    if len(prompt) != 2 * spec.num_terms or prompt[-1] != EQUALS:
        raise InvalidArgument(f"malformed prompt {VOCAB.render(prompt)!r}")
    terms = prompt[0:-1:2]
    separators = prompt[1:-1:2]
    if any(not VOCAB.is_digit(t) for t in terms) or any(s != PLUS for s in separators):
        raise InvalidArgument(f"malformed prompt {VOCAB.render(prompt)!r}")
    return terms


def true_answer(prompt: Sequence[int], spec: TaskSpec = DEFAULT_TASK) -> str:
    return str(sum(_terms(prompt, spec)) % spec.modulus)


def build_prompt_set(spec: TaskSpec, rng: RngStream) -> PromptSet:
    """Distinct prompts drawn without replacement, in ascending term order."""
    space = 10**spec.num_terms
    if spec.num_prompts > space:
        raise SizeExceeded(f"{spec.num_prompts} distinct prompts requested, only {space} exist")
    if spec.num_prompts == space:
        indices = np.arange(space)
    else:
        indices = np.sort(rng.generator().choice(space, size=spec.num_prompts, replace=False))
    prompts = []
    for index in indices:
        digits = [int(c) for c in str(int(index)).zfill(spec.num_terms)]
        prompts.append(encode_prompt(digits))
    truths = tuple(true_answer(p, spec) for p in prompts)
    logger.debug("built %d digit-sum prompts with %d terms", len(prompts), spec.num_terms)
    return PromptSet(tuple(prompts), truths)


def initial_policy(spec: TaskSpec, prompt_set: PromptSet, rng: RngStream) -> PolicyParams:
    return init_with_prior(
        prompt_set.prompts,
        prompt_set.answer_ids(),
        spec.prior_strength,
        spec.prior_noise,
        rng,
        response_len=spec.response_len_budget,
        rival_gap=spec.rival_gap,
        hesitation=spec.hesitation,
    )


def greedy_answers(params: PolicyParams, prompt_set: PromptSet, max_len: int) -> list[str | None]:
    rng = RngStream(0)  # unused by greedy decoding
    return [extract_answer(sample_response(params, p, max_len, GREEDY, rng)) for p in prompt_set.prompts]


def pass_at_1(params: PolicyParams, prompt_set: PromptSet, max_len: int) -> float:
    """Fraction of prompts whose greedy answer equals the truth."""
    answers = greedy_answers(params, prompt_set, max_len)
    return sum(a == t for a, t in zip(answers, prompt_set.truths)) / len(prompt_set)


def maj_at_k(
    params: PolicyParams,
    prompt_set: PromptSet,
    k: int,
    max_len: int,
    temperature: float,
    rng: RngStream,
) -> float:
    """Accuracy of the majority label over ``k`` sampled responses per prompt."""
    hits = 0
    for i, (prompt, truth) in enumerate(zip(prompt_set.prompts, prompt_set.truths)):
        group = parallel_rollout(params, prompt, k, max_len, temperature, rng.split("maj", i))
        hits += majority_vote(extract_answers(group.responses)).label == truth
    return hits / len(prompt_set)


__all__ = [
    "DEFAULT_TASK",
    "HARD_MODE",
    "PromptSet",
    "TaskSpec",
    "build_prompt_set",
    "encode_prompt",
    "greedy_answers",
    "initial_policy",
    "maj_at_k",
    "pass_at_1",
    "true_answer",
]

"""Parallel and entropy-fork tree rollouts with token-budget accounting."""
from __future__ import annotations

import logging
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

from core import EOS, Response, RngStream
from errors import InvalidArgument
from policy import PolicyParams, continue_response, sample_response

logger = logging.getLogger(__name__)


class RolloutSource(StrEnum):
    PARALLEL = "parallel"
    ETMR = "etmr"


class ForkScore(StrEnum):
    ENTROPY = "entropy"  # Shannon entropy of the step distribution
    SURPRISAL = "surprisal"  # -log pi(sampled token)
    RANDOM = "random"  # uniform positions, ignores the policy


@dataclass(frozen=True)
class BudgetStats:
    leaves: int
    tokens_generated: int
    tokens_parallel_equiv: int

    @classmethod
    def from_responses(cls, responses: Sequence[Response]) -> BudgetStats:
        return cls(
            leaves=len(responses),
            tokens_generated=sum(r.generated_len for r in responses),
            tokens_parallel_equiv=sum(len(r) for r in responses),
        )

    @property
    def measured_ratio(self) -> float:
        return self.tokens_generated / self.tokens_parallel_equiv


@dataclass(frozen=True)
class RolloutTree:
    trunk: Response
    fork_points: tuple[tuple[int, float], ...]
    branches: tuple[tuple[int, Response], ...]
    params_used: tuple[int, int, int]  # (tree index, N, B)

    def __post_init__(self) -> None:
        positions = [p for p, _ in self.fork_points]
        if len(set(positions)) != len(positions):
            raise InvalidArgument("fork positions must be distinct")
        if any(not 0 <= p < len(self.trunk) for p in positions):
            raise InvalidArgument("fork position outside the trunk")
        _, n, b = self.params_used
        if len(positions) > n or len(self.branches) != b * len(positions):
            raise InvalidArgument("branch count does not match forks x B")
        for position, branch in self.branches:
            if branch.tokens[:position] != self.trunk.tokens[:position]:
                raise InvalidArgument("branch disagrees with its trunk prefix")

    @property
    def leaves(self) -> tuple[Response, ...]:
        return (self.trunk, *(branch for _, branch in self.branches))


@dataclass(frozen=True)
class RolloutGroup:
    prompt: tuple[int, ...]
    responses: tuple[Response, ...]
    source: RolloutSource
    budget: BudgetStats
    trees: tuple[RolloutTree, ...] = ()

    def __post_init__(self) -> None:
        if not self.responses:
            raise InvalidArgument("a rollout group is never empty")

    def __len__(self) -> int:
        return len(self.responses)

    def subset(self, indices: Sequence[int]) -> RolloutGroup:
        picked = tuple(self.responses[i] for i in indices)
        return RolloutGroup(self.prompt, picked, self.source, BudgetStats.from_responses(picked))


def parallel_rollout(
    params: PolicyParams,
    prompt: Sequence[int],
    group_size: int,
    max_len: int,
    temperature: float,
    rng: RngStream,
) -> RolloutGroup:
    if group_size < 1:
        raise InvalidArgument("group size must be >= 1")
    responses = tuple(
        sample_response(params, prompt, max_len, temperature, rng.split("sample", i))
        for i in range(group_size)
    )
    budget = BudgetStats.from_responses(responses)
    return RolloutGroup(tuple(prompt), responses, RolloutSource.PARALLEL, budget)


def _eligible_positions(trunk: Response) -> list[int]:
    last = len(trunk) - 1 if trunk.tokens[-1] == EOS else len(trunk)
    return list(range(last))


def fork_scores(trunk: Response, score: ForkScore = ForkScore.ENTROPY) -> list[float]:
    if score is ForkScore.SURPRISAL:
        return [-lp for lp in trunk.log_probs]
    return list(trunk.entropies)


def select_fork_points(
    trunk: Response,
    n_forks: int,
    *,
    score: ForkScore = ForkScore.ENTROPY,
    rng: RngStream | None = None,
) -> list[int]:
    """Top-N fork positions in ascending order; ties go to the earlier position."""
    if n_forks < 0:
        raise InvalidArgument("number of fork points must be >= 0")
    eligible = _eligible_positions(trunk)
    if n_forks == 0 or not eligible:
        return []
    if score is ForkScore.RANDOM:
        if rng is None:
            raise InvalidArgument("random fork selection needs an rng stream")
        picked = rng.generator().permutation(eligible)[:n_forks]
        return sorted(int(p) for p in picked)
    values = fork_scores(trunk, score)
    ranked = sorted(eligible, key=lambda p: (-values[p], p))
    return sorted(ranked[:n_forks])


def etmr_rollout(
    params: PolicyParams,
    prompt: Sequence[int],
    trees: int,
    n_forks: int,
    branches: int,
    max_len: int,
    temperature: float,
    rng: RngStream,
    *,
    fork_score: ForkScore = ForkScore.ENTROPY,
) -> RolloutGroup:
    """Entropy-fork tree majority rollout.

    Each tree samples a trunk, picks up to ``n_forks`` fork positions on the
    trunk only, and re-samples ``branches`` continuations from the trunk
    prefix that ends just before each fork token.
    """
    if trees < 1 or n_forks < 0 or branches < 1:
        raise InvalidArgument(f"invalid ETMR shape M={trees}, N={n_forks}, B={branches}")
    prompt = tuple(prompt)
    built: list[RolloutTree] = []
    for i in range(trees):
        tree_rng = rng.split("tree", i)
        trunk = sample_response(params, prompt, max_len, temperature, tree_rng.split("trunk"))
        positions = select_fork_points(trunk, n_forks, score=fork_score, rng=tree_rng.split("forks"))
        values = fork_scores(trunk, fork_score)
        spawned = tuple(
            (pos, continue_response(params, prompt, trunk, pos, max_len, temperature, tree_rng.split("branch", pos, b)))
            for pos in positions
            for b in range(branches)
        )
        built.append(
            RolloutTree(
                trunk=trunk,
                fork_points=tuple((pos, values[pos]) for pos in positions),
                branches=spawned,
                params_used=(i, n_forks, branches),
            )
        )
    leaves = tuple(leaf for tree in built for leaf in tree.leaves)
    budget = BudgetStats.from_responses(leaves)
    logger.debug("ETMR built %d trees, %d leaves, token ratio %.3f", trees, len(leaves), budget.measured_ratio)
    return RolloutGroup(prompt, leaves, RolloutSource.ETMR, budget, tuple(built))


def leaf_count(trees: int, n_forks: int, branches: int) -> int:
    if trees < 1 or n_forks < 0 or branches < 1:
        raise InvalidArgument(f"invalid ETMR shape M={trees}, N={n_forks}, B={branches}")
    return trees * (1 + branches * n_forks)


def expected_tree_tokens(mean_len: float, n_forks: int, branches: int) -> float:
    """Tokens one tree consumes when forks sit uniformly along the trunk."""
    if not mean_len > 0:
        raise InvalidArgument("mean length must be positive")
    if n_forks < 0 or branches < 1:
        raise InvalidArgument("N >= 0 and B >= 1 required")
    # sum_{k=1..N} k / (N + 1) == N / 2
    return mean_len * (1.0 + branches * n_forks / 2.0)


def expected_token_ratio(n_forks: int, branches: int) -> float:
    if n_forks < 0 or branches < 1:
        raise InvalidArgument("N >= 0 and B >= 1 required")
    return (1.0 + 0.5 * branches * n_forks) / (1.0 + branches * n_forks)


def measured_token_ratio(group: RolloutGroup) -> float:
    return group.budget.measured_ratio


def distinct_answer_count(answers: Sequence[str | None]) -> int:
    return len({a for a in answers if a is not None})


def budget_table(trees: int, n_forks: int, branches: int, mean_len: float = 100.0) -> dict[str, float]:
    """Closed-form budget figures for one ETMR configuration."""
    leaves = leaf_count(trees, n_forks, branches)
    per_tree = expected_tree_tokens(mean_len, n_forks, branches)
    return {
        "M": trees,
        "N": n_forks,
        "B": branches,
        "len": mean_len,
        "leaf_count": leaves,
        "expected_tree_tokens": per_tree,
        "expected_total_tokens": trees * per_tree,
        "parallel_equiv_tokens": leaves * mean_len,
        "expected_token_ratio": expected_token_ratio(n_forks, branches),
    }


__all__ = [
    "BudgetStats",
    "ForkScore",
    "RolloutGroup",
    "RolloutSource",
    "RolloutTree",
    "budget_table",
    "distinct_answer_count",
    "etmr_rollout",
    "expected_token_ratio",
    "expected_tree_tokens",
    "leaf_count",
    "measured_token_ratio",
    "parallel_rollout",
    "select_fork_points",
]

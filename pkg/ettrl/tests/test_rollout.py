"""Tests for parallel and ETMR rollouts and the token-budget laws."""
from __future__ import annotations

import math
import pathlib
import sys
import unittest

import numpy as np


MODULE_DIR = pathlib.Path(__file__).resolve().parents[1]
if str(MODULE_DIR) not in sys.path:
    sys.path.insert(0, str(MODULE_DIR))

from core import EOS, EQUALS, START, Response, RngStream  # noqa: E402  pylint: disable=wrong-import-position
from errors import InvalidArgument  # noqa: E402  pylint: disable=wrong-import-position
from labeling import extract_answers  # noqa: E402  pylint: disable=wrong-import-position
from policy import MASK_LOGIT, ContextKey, PolicyParams, continue_response, prompt_fingerprint, sample_response  # noqa: E402  pylint: disable=wrong-import-position
from rollout import (  # noqa: E402  pylint: disable=wrong-import-position
    BudgetStats,
    ForkScore,
    RolloutGroup,
    RolloutSource,
    budget_table,
    distinct_answer_count,
    etmr_rollout,
    expected_token_ratio,
    expected_tree_tokens,
    leaf_count,
    measured_token_ratio,
    parallel_rollout,
    select_fork_points,
)
from tasks import DEFAULT_TASK, build_prompt_set, initial_policy  # noqa: E402  pylint: disable=wrong-import-position

PROMPT = (5, EQUALS)
NO_EOS = PolicyParams(vocab_size=2)  # uniform and never terminates


def trunk_with(entropies, tokens=None) -> Response:
    tokens = tokens or tuple(1 for _ in entropies)
    return Response(tuple(tokens), tuple(-0.5 for _ in tokens), tuple(entropies))


def forked_answer_policy() -> PolicyParams:
    """First token 0 (p=0.7) leads to a fixed answer, token 1 (p=0.3) to a uniform one."""
    fp = prompt_fingerprint(PROMPT)
    first = np.full(13, -MASK_LOGIT)
    first[0], first[1] = math.log(7 / 3), 0.0
    fixed = np.full(13, -MASK_LOGIT)
    fixed[5] = MASK_LOGIT
    spread = np.full(13, -MASK_LOGIT)
    spread[:10] = 0.0
    stop = np.full(13, -MASK_LOGIT)
    stop[EOS] = MASK_LOGIT
    table = {
        ContextKey(fp, START, 0): first,
        ContextKey(fp, 0, 1): fixed,
        ContextKey(fp, 1, 1): spread,
        **{ContextKey(fp, d, 2): stop for d in range(10)},
    }
    return PolicyParams(table, bucket_count=4)


class ForkSelectionTests(unittest.TestCase):
    def test_top_entropy_positions_ascending(self):
        self.assertEqual(select_fork_points(trunk_with([0.1, 0.9, 0.3, 0.7]), 2), [1, 3])

    def test_saturation_excludes_final_eos(self):
        trunk = trunk_with([0.4, 0.2, 0.0], tokens=(3, 4, EOS))
        self.assertEqual(select_fork_points(trunk, 10), [0, 1])

    def test_ties_prefer_earlier_position(self):
        self.assertEqual(select_fork_points(trunk_with([0.5, 0.5]), 1), [0])

    def test_zero_forks(self):
        self.assertEqual(select_fork_points(trunk_with([0.5, 0.7]), 0), [])
        with self.assertRaises(InvalidArgument):
            select_fork_points(trunk_with([0.5]), -1)

    def test_surprisal_score(self):
        trunk = Response((1, 1, 1), (-0.1, -2.0, -0.5), (0.9, 0.1, 0.2))
        self.assertEqual(select_fork_points(trunk, 1, score=ForkScore.SURPRISAL), [1])
        self.assertEqual(select_fork_points(trunk, 1, score=ForkScore.ENTROPY), [0])

    def test_random_score_needs_stream(self):
        trunk = trunk_with([0.1] * 10)
        picked = select_fork_points(trunk, 3, score=ForkScore.RANDOM, rng=RngStream(1))
        self.assertEqual(len(picked), 3)
        self.assertEqual(picked, sorted(set(picked)))
        self.assertEqual(picked, select_fork_points(trunk, 3, score=ForkScore.RANDOM, rng=RngStream(1)))
        with self.assertRaises(InvalidArgument):
            select_fork_points(trunk, 3, score=ForkScore.RANDOM)


class BudgetFormulaTests(unittest.TestCase):
    def test_leaf_count(self):
        self.assertEqual(leaf_count(12, 2, 2), 60)
        self.assertEqual(leaf_count(1, 3, 2), 7)
        self.assertEqual(leaf_count(5, 0, 3), 5)
        with self.assertRaises(InvalidArgument):
            leaf_count(0, 1, 1)

    def test_expected_tree_tokens(self):
        self.assertAlmostEqual(expected_tree_tokens(100, 2, 2), 300.0)
        self.assertAlmostEqual(expected_tree_tokens(100, 0, 3), 100.0)
        self.assertAlmostEqual(expected_tree_tokens(50, 3, 2), 200.0)
        with self.assertRaises(InvalidArgument):
            expected_tree_tokens(0, 1, 1)

    def test_expected_token_ratio(self):
        self.assertAlmostEqual(expected_token_ratio(2, 2), 0.6)
        self.assertAlmostEqual(expected_token_ratio(0, 4), 1.0)
        self.assertAlmostEqual(expected_token_ratio(3, 2), 4 / 7)

    def test_budget_table(self):
        row = budget_table(12, 2, 2, 100.0)
        self.assertEqual(row["leaf_count"], 60)
        self.assertAlmostEqual(row["expected_total_tokens"], 3600.0)
        self.assertAlmostEqual(row["parallel_equiv_tokens"], 6000.0)
        self.assertAlmostEqual(row["expected_token_ratio"], 0.6)


class ParallelRolloutTests(unittest.TestCase):
    def test_group_shape_and_budget(self):
        group = parallel_rollout(NO_EOS, PROMPT, 64, 5, 1.0, RngStream(0))
        self.assertEqual(len(group), 64)
        self.assertIs(group.source, RolloutSource.PARALLEL)
        self.assertEqual(group.budget.tokens_generated, 64 * 5)
        self.assertEqual(measured_token_ratio(group), 1.0)

    def test_single_response(self):
        group = parallel_rollout(NO_EOS, PROMPT, 1, 4, 1.0, RngStream(0))
        self.assertEqual(group.budget.tokens_generated, len(group.responses[0]))

    def test_deterministic_policy_gives_identical_responses(self):
        group = parallel_rollout(forked_answer_policy(), PROMPT, 8, 3, 0.0, RngStream(0))
        self.assertEqual(len({r.tokens for r in group.responses}), 1)

    def test_rejects_empty_group(self):
        with self.assertRaises(InvalidArgument):
            parallel_rollout(NO_EOS, PROMPT, 0, 4, 1.0, RngStream(0))


class EtmrRolloutTests(unittest.TestCase):
    def test_leaf_law_grid(self):
        for m in range(1, 5):
            for n in range(0, 5):
                for b in range(1, 4):
                    with self.subTest(M=m, N=n, B=b):
                        group = etmr_rollout(NO_EOS, PROMPT, m, n, b, 8, 1.0, RngStream(m * 100 + n * 10 + b))
                        self.assertEqual(len(group), leaf_count(m, n, b))
                        self.assertEqual(len(group.trees), m)

    def test_default_shape_yields_sixty_leaves(self):
        group = etmr_rollout(NO_EOS, PROMPT, 12, 2, 2, 10, 1.0, RngStream(3))
        self.assertEqual(len(group), 60)
        self.assertIs(group.source, RolloutSource.ETMR)
        self.assertLess(measured_token_ratio(group), 1.0)

    def test_no_forks_is_parallel_budget(self):
        group = etmr_rollout(NO_EOS, PROMPT, 5, 0, 2, 6, 1.0, RngStream(3))
        self.assertEqual(len(group), 5)
        self.assertEqual(measured_token_ratio(group), 1.0)

    def test_short_trunks_fork_at_every_eligible_position(self):
        # trunk is [first, answer, EOS]: two eligible positions whatever N is
        params = forked_answer_policy()
        group = etmr_rollout(params, PROMPT, 2, 4, 2, 3, 1.0, RngStream(9))
        for tree in group.trees:
            self.assertEqual(len(tree.fork_points), len(tree.trunk) - 1)
            self.assertEqual(len(tree.branches), 2 * len(tree.fork_points))

    def test_prefix_integrity(self):
        group = etmr_rollout(NO_EOS, PROMPT, 6, 3, 2, 12, 0.8, RngStream(21))
        for tree in group.trees:
            for position, branch in tree.branches:
                self.assertEqual(branch.reused_prefix_len, position)
                self.assertEqual(branch.tokens[:position], tree.trunk.tokens[:position])
                self.assertEqual(branch.log_probs[:position], tree.trunk.log_probs[:position])
                self.assertEqual(branch.entropies[:position], tree.trunk.entropies[:position])

    def test_determinism(self):
        a = etmr_rollout(NO_EOS, PROMPT, 3, 2, 2, 8, 1.0, RngStream(4))
        b = etmr_rollout(NO_EOS, PROMPT, 3, 2, 2, 8, 1.0, RngStream(4))
        self.assertEqual(a.responses, b.responses)

    def test_invalid_shape(self):
        for m, n, b in ((0, 1, 1), (1, -1, 1), (1, 1, 0)):
            with self.subTest(M=m, N=n, B=b):
                with self.assertRaises(InvalidArgument):
                    etmr_rollout(NO_EOS, PROMPT, m, n, b, 8, 1.0, RngStream(0))


class TokenRatioTests(unittest.TestCase):
    def test_midpoint_fork_arithmetic(self):
        length = 10
        trunk = sample_response(NO_EOS, PROMPT, length, 1.0, RngStream(1))
        branch = continue_response(NO_EOS, PROMPT, trunk, length // 2, length, 1.0, RngStream(2))
        budget = BudgetStats.from_responses([trunk, branch])
        group = RolloutGroup(PROMPT, (trunk, branch), RolloutSource.ETMR, budget)
        self.assertAlmostEqual(measured_token_ratio(group), 0.75)

    def test_ratio_law_matches_closed_form(self):
        for n, b in ((2, 2), (3, 2)):
            with self.subTest(N=n, B=b):
                group = etmr_rollout(NO_EOS, PROMPT, 1000, n, b, 40, 1.0, RngStream(n), fork_score=ForkScore.RANDOM)
                self.assertAlmostEqual(measured_token_ratio(group), expected_token_ratio(n, b), delta=0.03)


class DiversityTests(unittest.TestCase):
    def test_etmr_finds_more_distinct_answers_at_equal_budget(self):
        params = forked_answer_policy()
        etmr, parallel = [], []
        for i in range(300):
            tree = etmr_rollout(params, PROMPT, 1, 1, 7, 3, 1.0, RngStream(i, 1))
            flat = parallel_rollout(params, PROMPT, 8, 3, 1.0, RngStream(i, 2))
            self.assertEqual(len(tree), len(flat))
            etmr.append(distinct_answer_count(extract_answers(tree.responses)))
            parallel.append(distinct_answer_count(extract_answers(flat.responses)))
        self.assertGreater(np.mean(etmr), np.mean(parallel))


class ScaffoldRolloutTests(unittest.TestCase):
    def test_default_prior_forks_at_pivot_and_answer(self):
        prompts = build_prompt_set(DEFAULT_TASK, RngStream(0))
        params = initial_policy(DEFAULT_TASK, prompts, RngStream(1))
        for i, prompt in enumerate(prompts.prompts[:10]):
            with self.subTest(prompt=i):
                trunk = sample_response(params, prompt, 8, 0.6, RngStream(2, i))
                self.assertEqual(select_fork_points(trunk, 2), [2, 4])
                group = etmr_rollout(params, prompt, 12, 2, 2, 8, 0.6, RngStream(3, i))
                self.assertEqual(len(group), 60)
                self.assertAlmostEqual(measured_token_ratio(group), 0.6, places=12)


if __name__ == "__main__":
    unittest.main()

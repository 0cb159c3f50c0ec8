"""Tests for group advantages, shaping and the GRPO surrogate."""
from __future__ import annotations

import math
import pathlib
import sys
import unittest

import numpy as np
from pydantic import ValidationError


MODULE_DIR = pathlib.Path(__file__).resolve().parents[1]
if str(MODULE_DIR) not in sys.path:
    sys.path.insert(0, str(MODULE_DIR))

from advantage import (  # noqa: E402  pylint: disable=wrong-import-position
    AdvantageVector,
    GrpoConfig,
    ShapingConfig,
    ShapingMode,
    apply_shaping,
    group_advantages,
    grpo_gradient,
    grpo_loss,
    positive_advantage_closed_form,
    response_entropy,
    shape_clip,
    shape_res,
)
from core import EQUALS, PLUS, START, Response, RngStream  # noqa: E402  pylint: disable=wrong-import-position
from errors import InvalidArgument  # noqa: E402  pylint: disable=wrong-import-position
from labeling import RewardMode, RewardVector  # noqa: E402  pylint: disable=wrong-import-position
from policy import ContextKey, PolicyParams, grad_log_prob, iter_context_keys, prompt_fingerprint, sample_response  # noqa: E402  pylint: disable=wrong-import-position

PROMPT = (2, PLUS, 6, EQUALS)


def entropy_response(entropies) -> Response:
    return Response(tuple(1 for _ in entropies), tuple(-0.1 for _ in entropies), tuple(entropies))


def random_policy(gen: np.random.Generator, buckets: int = 4) -> PolicyParams:
    fp = prompt_fingerprint(PROMPT)
    table = {ContextKey(fp, START, 0): gen.normal(0, 1.5, size=13)}
    for position in range(1, buckets):
        for last in range(13):
            table[ContextKey(fp, last, position)] = gen.normal(0, 1.5, size=13)
    return PolicyParams(table, bucket_count=buckets)


class ResponseEntropyTests(unittest.TestCase):
    def test_examples(self):
        self.assertAlmostEqual(response_entropy(entropy_response([1.0, 2.0, 3.0])), 2.0)
        self.assertEqual(response_entropy(entropy_response([0.0, 0.0])), 0.0)
        self.assertAlmostEqual(response_entropy(entropy_response([math.log(2)] * 2)), math.log(2))


class GroupAdvantageTests(unittest.TestCase):
    def test_examples(self):
        adv = group_advantages(RewardVector((1, 0, 0, 0), RewardMode.TTRL_VOTE))
        np.testing.assert_allclose(adv.per_response, [math.sqrt(3)] + [-1 / math.sqrt(3)] * 3, atol=1e-12)
        np.testing.assert_allclose(group_advantages([1, 1, 0, 0]).per_response, [1, 1, -1, -1], atol=1e-12)

    def test_degenerate_group_is_zero(self):
        adv = group_advantages([1, 1, 1, 1])
        self.assertEqual(adv.per_response, (0.0, 0.0, 0.0, 0.0))
        self.assertTrue(adv.degenerate)
        self.assertEqual(adv.mean_positive(), 0.0)

    def test_needs_two_responses(self):
        with self.assertRaises(InvalidArgument):
            group_advantages([1.0])

    def test_normalisation(self):
        gen = np.random.default_rng(5)
        for _ in range(100):
            rewards = gen.integers(0, 2, size=int(gen.integers(2, 40)))
            if rewards.min() == rewards.max():
                continue
            values = group_advantages(rewards.astype(float)).as_array()
            self.assertAlmostEqual(values.mean(), 0.0, delta=1e-9)
            self.assertAlmostEqual(values.std(), 1.0, delta=1e-9)

    def test_positive_advantage_closed_form(self):
        previous = math.inf
        for p, expected in ((0.1, 3.0), (0.25, 1.7320508075688772), (0.5, 1.0), (0.7, 0.6546536707079771)):
            with self.subTest(p=p):
                positives = round(20 * p)
                adv = group_advantages([1.0] * positives + [0.0] * (20 - positives))
                for a in adv.per_response[:positives]:
                    self.assertAlmostEqual(a, expected, delta=1e-9)
                for a in adv.per_response[positives:]:
                    self.assertAlmostEqual(a, -math.sqrt(p / (1 - p)), delta=1e-9)
                self.assertAlmostEqual(positive_advantage_closed_form(p), expected, delta=1e-12)
                self.assertLess(expected, previous)
                previous = expected


class ShapingTests(unittest.TestCase):
    def test_clip_examples(self):
        shaped = shape_clip(AdvantageVector((3.5, -3.0, 1.5)), 2.0)
        self.assertEqual(shaped.per_response, (2.0, -2.0, 1.5))
        self.assertIs(shaped.shaped_by, ShapingMode.CLIP)

    def test_clip_bound_and_idempotence(self):
        gen = np.random.default_rng(1)
        for _ in range(50):
            adv = AdvantageVector(tuple(gen.normal(0, 3, size=16)))
            once = shape_clip(adv, 2.0)
            self.assertLessEqual(np.abs(once.as_array()).max(), 2.0)
            self.assertEqual(shape_clip(once, 2.0).per_response, once.per_response)

    def test_res_examples(self):
        out = shape_res(AdvantageVector((1.0, 1.0)), [0.5, 1.5], 0.2)
        np.testing.assert_allclose(out.per_response, [1.2, 0.8], atol=1e-12)
        out = shape_res(AdvantageVector((1.0, -1.0)), [0.9, 1.1], 0.2)
        np.testing.assert_allclose(out.per_response, [1.1, -0.9], atol=1e-12)

    def test_res_equal_entropy_is_identity(self):
        adv = AdvantageVector((1.7, -0.3, -1.4))
        np.testing.assert_allclose(shape_res(adv, [0.8, 0.8, 0.8], 0.2).per_response, adv.per_response, atol=1e-15)

    def test_res_zero_entropy_falls_back(self):
        adv = AdvantageVector((1.0, -1.0))
        out = shape_res(adv, [0.0, 0.0], 0.2)
        self.assertEqual(out.per_response, adv.per_response)
        self.assertTrue(out.res_identity)

    def test_res_bounds(self):
        gen = np.random.default_rng(2)
        for _ in range(100):
            adv = gen.normal(0, 1, size=12)
            out = shape_res(AdvantageVector(tuple(adv)), gen.uniform(0, 3, size=12), 0.2).as_array()
            low, high = np.minimum(0.8 * adv, 1.2 * adv), np.maximum(0.8 * adv, 1.2 * adv)
            self.assertTrue(np.all(out >= low - 1e-12) and np.all(out <= high + 1e-12))

    def test_res_rejects_bad_entropies(self):
        with self.assertRaises(InvalidArgument):
            shape_res(AdvantageVector((1.0, 1.0)), [0.5], 0.2)
        with self.assertRaises(InvalidArgument):
            shape_res(AdvantageVector((1.0, 1.0)), [0.5, -0.1], 0.2)

    def test_apply_shaping_dispatch(self):
        adv = AdvantageVector((3.0, -3.0))
        responses = [entropy_response([0.5]), entropy_response([1.5])]
        self.assertEqual(apply_shaping(adv, responses, ShapingConfig()).per_response, adv.per_response)
        self.assertEqual(apply_shaping(adv, responses, ShapingConfig(mode="clip")).per_response, (2.0, -2.0))
        np.testing.assert_allclose(apply_shaping(adv, responses, ShapingConfig(mode="res")).per_response, [3.6, -2.4])

    def test_config_bounds(self):
        with self.assertRaises(ValidationError):
            ShapingConfig(clip_bound=0.0)
        with self.assertRaises(ValidationError):
            ShapingConfig(mode="both")
        with self.assertRaises(ValidationError):
            GrpoConfig(clip_eps=1.0)


class GrpoLossTests(unittest.TestCase):
    @staticmethod
    def single_token(token: int) -> Response:
        # recorded under the uniform 13-token policy
        return Response((token,), (-math.log(13),), (math.log(13),))

    def test_on_policy_loss(self):
        params = PolicyParams(vocab_size=2)  # no EOS, so exactly two tokens
        response = sample_response(params, PROMPT, 2, 1.0, RngStream(0))
        self.assertEqual(len(response), 2)
        loss = grpo_loss(params, PROMPT, [response.log_probs], [response], [1.0], 0.2, temperature=1.0)
        self.assertAlmostEqual(loss, -1.0, places=12)

    def test_upper_clip_branch(self):
        params = PolicyParams()
        response = self.single_token(3)
        old = [[-math.log(13) - math.log(1.5)]]
        self.assertAlmostEqual(grpo_loss(params, PROMPT, old, [response], [1.0], 0.2, temperature=1.0), -1.2, places=12)

    def test_lower_clip_branch(self):
        params = PolicyParams()
        response = self.single_token(3)
        old = [[-math.log(13) - math.log(0.5)]]
        self.assertAlmostEqual(grpo_loss(params, PROMPT, old, [response], [-1.0], 0.2, temperature=1.0), 0.8, places=12)

    def test_length_mismatch(self):
        params = PolicyParams()
        response = self.single_token(3)
        with self.assertRaises(InvalidArgument):
            grpo_loss(params, PROMPT, [[-1.0, -1.0]], [response], [1.0], temperature=1.0)
        with self.assertRaises(InvalidArgument):
            grpo_gradient(params, PROMPT, [[-1.0]], [response], [1.0, 2.0], temperature=1.0)


class GrpoGradientTests(unittest.TestCase):
    def test_zero_advantage_zero_gradient(self):
        params = random_policy(np.random.default_rng(0))
        responses = [sample_response(params, PROMPT, 4, 0.8, RngStream(i)) for i in range(3)]
        grad = grpo_gradient(params, PROMPT, [r.log_probs for r in responses], responses, [0.0] * 3, temperature=0.8)
        self.assertEqual(len(grad), 0)

    def test_on_policy_gradient_is_weighted_score(self):
        gen = np.random.default_rng(1)
        params = random_policy(gen)
        temperature = 0.7
        responses = [sample_response(params, PROMPT, 4, temperature, RngStream(i)) for i in range(4)]
        adv = list(gen.normal(size=4))
        grad = grpo_gradient(params, PROMPT, [r.log_probs for r in responses], responses, adv, temperature=temperature)

        expected: dict = {}
        for response, a in zip(responses, adv):
            for ctx, token in zip(iter_context_keys(params, PROMPT, response.tokens), response.tokens):
                row = grad_log_prob(params, ctx, token, temperature).get(ctx)
                expected[ctx] = expected.get(ctx, 0.0) - a / (len(responses) * len(response)) * row
        self.assertEqual(set(expected), {k for k, _ in grad.items()})
        for ctx, row in expected.items():
            np.testing.assert_allclose(grad.get(ctx), row, atol=1e-12)

    def test_matches_central_differences(self):
        step = 1e-5
        eps = 0.2
        clipped = {"upper": 0, "lower": 0}
        for seed in range(50):
            gen = np.random.default_rng(100 + seed)
            params = random_policy(gen)
            temperature = float(gen.uniform(0.5, 1.5))
            responses = [sample_response(params, PROMPT, 4, temperature, RngStream(seed, i)) for i in range(3)]
            old = [tuple(lp + gen.uniform(-0.4, 0.4) for lp in r.log_probs) for r in responses]
            adv = list(gen.normal(0, 1.5, size=3))

            for r, o, a in zip(responses, old, adv):
                for lp, old_lp in zip(r.log_probs, o):
                    ratio = math.exp(lp - old_lp)
                    clipped["upper"] += a > 0 and ratio > 1 + eps
                    clipped["lower"] += a < 0 and ratio < 1 - eps

            grad = grpo_gradient(params, PROMPT, old, responses, adv, eps, temperature=temperature)
            keys = sorted({ctx for r in responses for ctx in iter_context_keys(params, PROMPT, r.tokens)})
            analytic = np.concatenate([grad.get(k) for k in keys])
            numeric = []
            for key in keys:
                base = params.row(key)
                for j in range(params.vocab_size):
                    bump = np.zeros(params.vocab_size)
                    bump[j] = step
                    plus = grpo_loss(params.with_row(key, base + bump), PROMPT, old, responses, adv, eps, temperature=temperature)
                    minus = grpo_loss(params.with_row(key, base - bump), PROMPT, old, responses, adv, eps, temperature=temperature)
                    numeric.append((plus - minus) / (2 * step))
            numeric = np.asarray(numeric)
            scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-6)
            with self.subTest(seed=seed):
                self.assertLess(np.linalg.norm(analytic - numeric) / scale, 1e-4)
                magnitude = np.maximum(np.abs(analytic), np.abs(numeric))
                significant = magnitude > 1e-3 * magnitude.max()
                if significant.any():
                    worst = np.max(np.abs(analytic - numeric)[significant] / magnitude[significant])
                    self.assertLess(worst, 1e-4)
        self.assertGreater(clipped["upper"], 0)
        self.assertGreater(clipped["lower"], 0)


if __name__ == "__main__":
    unittest.main()

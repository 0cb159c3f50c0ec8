"""Tabular autoregressive softmax policy with exact log-probability gradients.

A context is (prompt fingerprint, last token, position bucket); every context
owns a logit vector over the vocabulary. Unseen contexts read as zeros, i.e.
the uniform policy.
"""
from __future__ import annotations

import functools
import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, NamedTuple, Sequence

import numpy as np

from core import EOS, EQUALS, PLUS, START, VOCAB, ProbDist, Response, RngStream, sample_categorical
from core import shannon_entropy, softmax_with_temperature
from errors import InvalidArgument, NumericFault

logger = logging.getLogger(__name__)

GREEDY = 0.0  # temperature value that selects argmax decoding
MASK_LOGIT = 30.0


class ContextKey(NamedTuple):
    prompt_fingerprint: int
    last_token: int
    position_bucket: int


@functools.lru_cache(maxsize=4096)
def prompt_fingerprint(prompt: tuple[int, ...]) -> int:
    """64-bit digest of a prompt token sequence."""
    packed = struct.pack(f"<{len(prompt)}q", *prompt)
    return int.from_bytes(hashlib.blake2b(packed, digest_size=8).digest(), "little")


@dataclass(frozen=True, eq=False)
class PolicyParams:
    logits: Mapping[ContextKey, np.ndarray] = field(default_factory=dict)
    vocab_size: int = VOCAB.size
    bucket_count: int = 8

    def __post_init__(self) -> None:
        if self.vocab_size < 2 or self.bucket_count < 1:
            raise InvalidArgument("vocab_size >= 2 and bucket_count >= 1 required")
        frozen: dict[ContextKey, np.ndarray] = {}
        for key, row in self.logits.items():
            # read-only rows were validated when an earlier table froze them
            if not isinstance(row, np.ndarray) or row.flags.writeable:
                row = np.array(row, dtype=np.float64)
                if row.shape != (self.vocab_size,) or not np.all(np.isfinite(row)):
                    raise InvalidArgument(f"logits for {key} must be {self.vocab_size} finite values")
                row.setflags(write=False)
            frozen[key if isinstance(key, ContextKey) else ContextKey(*key)] = row
        object.__setattr__(self, "logits", frozen)

    def row(self, key: ContextKey) -> np.ndarray:
        found = self.logits.get(key)
        if found is None:
            return np.zeros(self.vocab_size)
        return found

    def with_row(self, key: ContextKey, row: Sequence[float] | np.ndarray) -> PolicyParams:
        table = dict(self.logits)
        table[ContextKey(*key)] = np.array(row, dtype=np.float64)
        return PolicyParams(table, self.vocab_size, self.bucket_count)

    def sorted_items(self) -> list[tuple[ContextKey, np.ndarray]]:
        return sorted(self.logits.items())

    def __len__(self) -> int:
        return len(self.logits)


class PolicyGradient:
    """Sparse gradient accumulator keyed like ``PolicyParams``."""

    def __init__(self, vocab_size: int = VOCAB.size) -> None:
        self.vocab_size = vocab_size
        self.entries: dict[ContextKey, np.ndarray] = {}

    def add(self, key: ContextKey, vec: np.ndarray, scale: float = 1.0) -> None:
        current = self.entries.get(key)
        if current is None:
            self.entries[key] = scale * np.asarray(vec, dtype=np.float64)
        else:
            current += scale * vec

    def merge(self, other: PolicyGradient, scale: float = 1.0) -> None:
        for key, vec in other.entries.items():
            self.add(key, vec, scale)

    def get(self, key: ContextKey) -> np.ndarray:
        found = self.entries.get(key)
        return np.zeros(self.vocab_size) if found is None else found

    def items(self) -> Iterator[tuple[ContextKey, np.ndarray]]:
        return iter(self.entries.items())

    def __len__(self) -> int:
        return len(self.entries)


def context_key(params: PolicyParams, prompt_fp: int, prefix: Sequence[int]) -> ContextKey:
    last = prefix[-1] if prefix else START
    return ContextKey(prompt_fp, last, min(len(prefix), params.bucket_count - 1))


def iter_context_keys(params: PolicyParams, prompt: tuple[int, ...], tokens: Sequence[int]) -> Iterator[ContextKey]:
    """Context of every position of ``tokens`` generated after ``prompt``."""
    fp = prompt_fingerprint(tuple(prompt))
    for t in range(len(tokens)):
        yield context_key(params, fp, tokens[:t])


def next_token_distribution(params: PolicyParams, ctx: ContextKey, temperature: float) -> ProbDist:
    return softmax_with_temperature(params.row(ctx), temperature)


def _check_temperature(temperature: float) -> None:
    if not math.isfinite(temperature) or temperature < 0.0:
        raise InvalidArgument(f"temperature must be >= 0 (0 = greedy), got {temperature!r}")


def _generate(
    params: PolicyParams,
    prompt: tuple[int, ...],
    prefix: Response | None,
    prefix_len: int,
    max_len: int,
    temperature: float,
    rng: RngStream,
) -> Response:
    fp = prompt_fingerprint(prompt)
    tokens: list[int] = []
    log_probs: list[float] = []
    entropies: list[float] = []
    if prefix is not None:
        tokens.extend(prefix.tokens[:prefix_len])
        log_probs.extend(prefix.log_probs[:prefix_len])
        entropies.extend(prefix.entropies[:prefix_len])

    terminated = False
    while len(tokens) < max_len:
        ctx = context_key(params, fp, tokens)
        if temperature == GREEDY:
            token = int(np.argmax(params.row(ctx)))
            log_prob, entropy = 0.0, 0.0
        else:
            dist = next_token_distribution(params, ctx, temperature)
            token, rng = sample_categorical(dist, rng)
            log_prob = math.log(dist.probs[token])
            entropy = shannon_entropy(dist)
        tokens.append(token)
        log_probs.append(log_prob)
        entropies.append(entropy)
        if token == EOS:
            terminated = True
            break

    return Response(
        tokens=tuple(tokens),
        log_probs=tuple(log_probs),
        entropies=tuple(entropies),
        reused_prefix_len=prefix_len,
        terminated_by_eos=terminated,
    )


def sample_response(
    params: PolicyParams,
    prompt: Sequence[int],
    max_len: int,
    temperature: float,
    rng: RngStream,
) -> Response:
    """Sample until EOS or ``max_len``; ``temperature=0`` decodes greedily."""
    if not prompt:
        raise InvalidArgument("prompt must be non-empty")
    if max_len < 1:
        raise InvalidArgument("max_len must be >= 1")
    _check_temperature(temperature)
    return _generate(params, tuple(prompt), None, 0, max_len, temperature, rng)


def continue_response(
    params: PolicyParams,
    prompt: Sequence[int],
    trunk: Response,
    prefix_len: int,
    max_len: int,
    temperature: float,
    rng: RngStream,
) -> Response:
    """Branch off ``trunk`` after its first ``prefix_len`` tokens.

    Reused positions keep the trunk's recorded log-probs and entropies.
    """
    if not prompt:
        raise InvalidArgument("prompt must be non-empty")
    if prefix_len >= max_len:
        raise InvalidArgument(f"prefix length {prefix_len} leaves no room under max_len {max_len}")
    if not 0 <= prefix_len < len(trunk):
        raise InvalidArgument("prefix must be a proper prefix of the trunk")
    _check_temperature(temperature)
    return _generate(params, tuple(prompt), trunk, prefix_len, max_len, temperature, rng)


def log_prob_gradient_row(probs: np.ndarray, token: int, temperature: float) -> np.ndarray:
    """d log pi(token) / d logits for a tempered softmax."""
    row = -probs.copy()
    row[token] += 1.0
    return row / temperature


def grad_log_prob(params: PolicyParams, ctx: ContextKey, token: int, temperature: float) -> PolicyGradient:
    if not 0 <= token < params.vocab_size:
        raise InvalidArgument(f"token {token} outside vocabulary")
    dist = next_token_distribution(params, ctx, temperature)
    grad = PolicyGradient(params.vocab_size)
    grad.add(ctx, log_prob_gradient_row(dist.probs, token, temperature))
    return grad


def apply_gradient(params: PolicyParams, grad: PolicyGradient, lr: float) -> PolicyParams:
    """Plain SGD step on the touched rows; returns new params."""
    if not math.isfinite(lr) or lr <= 0.0:
        raise InvalidArgument(f"learning rate must be positive, got {lr!r}")
    table = dict(params.logits)
    for key, g in grad.items():
        if not np.all(np.isfinite(g)):
            raise NumericFault(f"non-finite gradient entry at {key}")
        table[key] = params.row(key) - lr * g
    return PolicyParams(table, params.vocab_size, params.bucket_count)


def _calibrated_logit(prior_strength: float, support: int) -> float:
    """Logit giving one token probability ``prior_strength`` against ``support - 1`` zero-logit rivals."""
    if prior_strength >= 1.0:
        return MASK_LOGIT
    if prior_strength <= 0.0:
        return 0.0
    return math.log(prior_strength * (support - 1) / (1.0 - prior_strength))


def position_role(position: int, response_len: int) -> str:
    """Scaffold role of a generation step: scratch, pivot, relay, answer or stop."""
    if position >= response_len - 1:
        return "stop"
    if position == response_len - 2:
        return "answer"
    pivot = max(response_len - 4, 0)
    if position == pivot:
        return "pivot"
    if position > pivot:
        return "relay"
    return "scratch"


def rival_digit(prompt: Sequence[int], answer: int) -> int:
    """Wrong digit that competes with ``answer`` when a rival gap is configured."""
    return (answer + 1 + prompt[0] % 9) % 10


def _answer_row(prompt: tuple[int, ...], answer: int, prior_strength: float, rival_gap: float | None, vocab_size: int, masked: bool) -> np.ndarray:
    support = len(VOCAB.digits) if masked else vocab_size
    row = np.zeros(vocab_size)
    if masked:
        row[:] = -MASK_LOGIT
        row[list(VOCAB.digits)] = 0.0
    row[answer] = _calibrated_logit(prior_strength, support)
    if rival_gap is not None:
        row[rival_digit(prompt, answer)] = row[answer] - rival_gap
    return row


def _scaffold_row(
    role: str,
    position: int,
    last: int,
    prompt: tuple[int, ...],
    answer: int,
    prior_strength: float,
    rival_gap: float | None,
    hesitation: bool,
    vocab_size: int,
) -> np.ndarray:
    if role == "answer":
        return _answer_row(prompt, answer, prior_strength, rival_gap, vocab_size, masked=True)
    row = np.zeros(vocab_size)
    if role == "stop":
        if hesitation and VOCAB.is_digit(last) and last != answer:
            # a wrong answer is followed by an undecided close
            row[:] = -MASK_LOGIT
            row[[EOS, PLUS, EQUALS]] = 0.0
        else:
            row[EOS] = MASK_LOGIT
        return row
    row[EOS] = -MASK_LOGIT
    if role == "scratch":
        terms = [t for t in prompt if VOCAB.is_digit(t)]
        row[terms[position % len(terms)]] = MASK_LOGIT
    elif role == "relay":
        row[last] = MASK_LOGIT
    return row


def init_with_prior(
    prompts: Sequence[Sequence[int]],
    answers: Sequence[int],
    prior_strength: float,
    noise_scale: float,
    rng: RngStream,
    *,
    response_len: int,
    vocab_size: int = VOCAB.size,
    scaffold: bool = True,
    rival_gap: float | None = None,
    hesitation: bool = False,
) -> PolicyParams:
    """Initial policy whose answer step emits the true digit with probability ~p0 at T=1.

    With ``scaffold`` the table also encodes the response layout: scratch that
    echoes the prompt terms, a uniform pivot, a relay step repeating the pivot
    token, the answer step and a forced EOS. Every pivot token therefore owns
    its own answer row, and only answer rows receive the N(0, noise) jitter, so
    the other steps stay deterministic apart from the pivot. Without
    ``scaffold`` only the answer rows are written (over the full vocabulary)
    and ``prior_strength=0`` leaves the table empty.

    ``rival_gap`` places one wrong digit that many logits below the truth.
    ``hesitation`` makes the stop step after a wrong digit undecided between
    EOS, ``+`` and ``=``.
    """
    if not 0.0 <= prior_strength <= 1.0:
        raise InvalidArgument("prior_strength must lie in [0, 1]")
    if noise_scale < 0.0:
        raise InvalidArgument("noise_scale must be >= 0")
    if rival_gap is not None and rival_gap < 0.0:
        raise InvalidArgument("rival_gap must be >= 0")
    if response_len < 2:
        raise InvalidArgument("response_len must leave room for an answer and EOS")
    if len(prompts) != len(answers):
        raise InvalidArgument("one answer per prompt required")

    table: dict[ContextKey, np.ndarray] = {}
    answer_keys: list[ContextKey] = []
    last_tokens = [t for t in range(vocab_size) if t != EOS]
    for prompt, answer in zip(prompts, answers):
        prompt = tuple(prompt)
        fp = prompt_fingerprint(prompt)
        for position in range(response_len):
            role = position_role(position, response_len)
            if not scaffold and (role != "answer" or prior_strength == 0.0):
                continue
            for last in ([START] if position == 0 else last_tokens):
                key = ContextKey(fp, last, position)
                if scaffold:
                    args = (role, position, last, prompt, answer, prior_strength, rival_gap, hesitation, vocab_size)
                    table[key] = _scaffold_row(*args)
                else:
                    table[key] = _answer_row(prompt, answer, prior_strength, rival_gap, vocab_size, masked=False)
                if role == "answer":
                    answer_keys.append(key)

    if noise_scale > 0.0:
        gen = rng.generator()
        for key in sorted(answer_keys):
            table[key] = table[key] + gen.normal(0.0, noise_scale, size=vocab_size)

    logger.debug("initialised %d context rows (p0=%.3f, noise=%.3f)", len(table), prior_strength, noise_scale)
    return PolicyParams(table, vocab_size, bucket_count=response_len)


def response_log_probs(
    params: PolicyParams, prompt: Sequence[int], tokens: Sequence[int], temperature: float
) -> Iterable[float]:
    """Re-evaluate per-token log-probs of ``tokens`` under ``params``."""
    for ctx, token in zip(iter_context_keys(params, tuple(prompt), tokens), tokens):
        dist = next_token_distribution(params, ctx, temperature)
        yield math.log(dist.probs[token])

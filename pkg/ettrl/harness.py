"""Test-time RL training loop, experiment config, metrics and persistence."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, replace
try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):
        """Backport of ``enum.StrEnum`` for Python 3.10."""

        __str__ = str.__str__
        __format__ = str.__format__
from pathlib import Path
from typing import IO, Iterable, Sequence

import jsonlines
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from tqdm.auto import tqdm

from advantage import GrpoConfig, ShapingConfig, apply_shaping, group_advantages, grpo_gradient, response_entropy
from checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from core import RngStream
from errors import InvalidArgument, InvalidConfig, WriteFailure
from labeling import (
    RewardMode,
    RewardVector,
    extract_answers,
    majority_vote,
    reward_accuracy,
    rewards_ground_truth,
    rewards_min_entropy,
    rewards_ttrl,
)
from policy import PolicyParams, apply_gradient
from rollout import ForkScore, RolloutGroup, RolloutSource, etmr_rollout, leaf_count, parallel_rollout
from tasks import DEFAULT_TASK, PromptSet, TaskSpec, build_prompt_set, initial_policy, pass_at_1

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
SUMMARY_FILE = "summary.json"
CHECKPOINT_FILE = "final.ckpt"


class DownsampleMode(StrEnum):
    UNIFORM = "uniform"
    STRATIFIED = "stratified"


class LrSchedule(StrEnum):
    CONSTANT = "constant"
    COSINE = "cosine"


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    task: TaskSpec = DEFAULT_TASK
    rollout_mode: RolloutSource = RolloutSource.PARALLEL
    G_vote: int = Field(64, ge=1)
    G_train: int = Field(32, ge=2)
    M: int = Field(12, ge=1)
    N: int = Field(2, ge=0)
    B: int = Field(2, ge=1)
    temperature: float = Field(0.6, gt=0.0)
    episodes: int = Field(40, ge=0)
    max_len: int = Field(8, ge=1)
    lr: float = Field(0.5, gt=0.0)
    reward_mode: RewardMode = RewardMode.TTRL_VOTE
    min_entropy_beta: float = Field(1.0, gt=0.0)
    shaping: ShapingConfig = ShapingConfig()
    grpo: GrpoConfig = GrpoConfig()
    seed: int = Field(0, ge=0)
    fork_score: ForkScore = ForkScore.ENTROPY
    downsample: DownsampleMode = DownsampleMode.UNIFORM
    lr_schedule: LrSchedule = LrSchedule.CONSTANT

    @model_validator(mode="after")
    def _check_budget(self) -> ExperimentConfig:
        if self.rollout_mode is RolloutSource.ETMR and leaf_count(self.M, self.N, self.B) < self.G_train:
            raise ValueError(f"ETMR yields {leaf_count(self.M, self.N, self.B)} leaves, fewer than G_train={self.G_train}")
        if self.rollout_mode is RolloutSource.PARALLEL and self.G_vote < self.G_train:
            raise ValueError(f"G_vote={self.G_vote} is smaller than G_train={self.G_train}")
        if self.max_len < self.task.response_len_budget:
            raise ValueError(f"max_len={self.max_len} is below the task response budget {self.task.response_len_budget}")
        return self

    @property
    def rollout_size(self) -> int:
        if self.rollout_mode is RolloutSource.ETMR:
            return leaf_count(self.M, self.N, self.B)
        return self.G_vote


class EpisodeMetrics(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    episode: int = Field(ge=0)
    majority_ratio_mean: float = Field(ge=0.0, le=1.0)
    label_accuracy: float = Field(ge=0.0, le=1.0)
    reward_accuracy_mean: float = Field(ge=0.0, le=1.0)
    pass_at_1: float = Field(ge=0.0, le=1.0)
    mean_response_entropy: float = Field(ge=0.0)
    tokens_generated: int = Field(ge=0)
    measured_token_ratio: float = Field(gt=0.0, le=1.0)
    mean_positive_advantage: float = Field(ge=0.0)
    degenerate_groups: int = Field(ge=0)
    res_identity_groups: int = Field(ge=0)
    distinct_answers_mean: float = Field(ge=0.0)
    lr: float = Field(gt=0.0)


METRIC_FIELDS = tuple(EpisodeMetrics.model_fields)


class RunSummary(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    seed: int
    episodes: int
    rollout_mode: RolloutSource
    initial_pass_at_1: float
    final_pass_at_1: float
    total_tokens_generated: int
    mean_token_ratio: float | None = None
    final_majority_ratio: float | None = None


@dataclass(frozen=True)
class TrainState:
    params: PolicyParams
    prompt_set: PromptSet
    episode: int
    rng: RngStream

    def with_truths(self, truths: Sequence[str]) -> TrainState:
        return replace(self, prompt_set=self.prompt_set.with_truths(truths))


def parse_config(data: dict | str) -> ExperimentConfig:
    try:
        if isinstance(data, str):
            return ExperimentConfig.model_validate_json(data)
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise InvalidConfig(str(exc)) from exc


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InvalidConfig(f"could not read config {path}: {exc}") from exc
    return parse_config(text)


def init_state(config: ExperimentConfig) -> TrainState:
    root = RngStream(config.seed)
    prompt_set = build_prompt_set(config.task, root.split("prompts"))
    params = initial_policy(config.task, prompt_set, root.split("prior"))
    return TrainState(params, prompt_set, 0, root)


def learning_rate(config: ExperimentConfig, step: int, total_steps: int) -> float:
    if config.lr_schedule is LrSchedule.COSINE and total_steps > 0:
        return config.lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
    return config.lr


def collect_rollouts(config: ExperimentConfig, params: PolicyParams, prompt: Sequence[int], rng: RngStream) -> RolloutGroup:
    if config.rollout_mode is RolloutSource.ETMR:
        return etmr_rollout(
            params, prompt, config.M, config.N, config.B, config.max_len, config.temperature, rng,
            fork_score=config.fork_score,
        )
    return parallel_rollout(params, prompt, config.G_vote, config.max_len, config.temperature, rng)


def _stratified_indices(rewards: Sequence[float], size: int, gen: np.random.Generator) -> list[int]:
    strata: dict[float, list[int]] = {}
    for i, value in enumerate(rewards):
        strata.setdefault(value, []).append(i)
    keys = sorted(strata)
    quotas = [size * len(strata[k]) / len(rewards) for k in keys]
    counts = [int(math.floor(q)) for q in quotas]
    # largest remainder, random order among tied remainders
    tiebreak = gen.permutation(len(keys))
    order = sorted(range(len(keys)), key=lambda j: (-(quotas[j] - counts[j]), tiebreak[j]))
    for j in order[: size - sum(counts)]:
        counts[j] += 1
    picked: list[int] = []
    for k, count in zip(keys, counts):
        members = strata[k]
        picked.extend(int(members[i]) for i in gen.choice(len(members), size=count, replace=False))
    return sorted(picked)


def downsample_indices(
    group_size: int,
    target: int,
    rng: RngStream,
    *,
    mode: DownsampleMode = DownsampleMode.UNIFORM,
    rewards: RewardVector | None = None,
) -> list[int]:
    if target < 1:
        raise InvalidArgument("downsample target must be >= 1")
    if group_size <= target:
        return list(range(group_size))
    gen = rng.generator()
    if mode is DownsampleMode.STRATIFIED:
        if rewards is None or len(rewards) != group_size:
            raise InvalidArgument("stratified downsampling needs one reward per response")
        return _stratified_indices(rewards.values, target, gen)
    return sorted(int(i) for i in gen.choice(group_size, size=target, replace=False))


def downsample_group(
    group: RolloutGroup,
    target: int,
    rng: RngStream,
    *,
    mode: DownsampleMode = DownsampleMode.UNIFORM,
    rewards: RewardVector | None = None,
) -> RolloutGroup:
    """Uniform subset without replacement; groups already small enough pass through."""
    indices = downsample_indices(len(group), target, rng, mode=mode, rewards=rewards)
    return group if len(indices) == len(group) else group.subset(indices)


def _learner_rewards(config: ExperimentConfig, group: RolloutGroup, vote_rewards: RewardVector, truth_rewards: RewardVector) -> RewardVector:
    if config.reward_mode is RewardMode.GROUND_TRUTH:
        return truth_rewards
    if config.reward_mode is RewardMode.MIN_ENTROPY:
        return rewards_min_entropy(group.responses, config.min_entropy_beta)
    return vote_rewards


def run_episode(config: ExperimentConfig, state: TrainState) -> tuple[TrainState, EpisodeMetrics]:
    """One pass over the prompt set with one GRPO step per prompt, in prompt order."""
    if not isinstance(config, ExperimentConfig):
        raise InvalidConfig("run_episode expects a validated ExperimentConfig")
    params = state.params
    prompts = state.prompt_set
    e = state.episode
    total_steps = config.episodes * len(prompts)

    ratios, label_hits, reward_accs, entropies, distinct, positives = [], [], [], [], [], []
    generated = parallel_equiv = degenerate = res_identity = 0
    lr_first = learning_rate(config, e * len(prompts), total_steps)

    for p, (prompt, truth) in enumerate(zip(prompts.prompts, prompts.truths)):
        stream = state.rng.split("episode", e, "prompt", p)
        group = collect_rollouts(config, params, prompt, stream.split("rollout"))
        answers = extract_answers(group.responses)
        vote = majority_vote(answers)

        # truth only feeds diagnostics unless the learner is supervised
        vote_rewards = rewards_ttrl(answers, vote.label)
        truth_rewards = rewards_ground_truth(answers, truth)
        rewards = _learner_rewards(config, group, vote_rewards, truth_rewards)

        indices = downsample_indices(len(group), config.G_train, stream.split("downsample"), mode=config.downsample, rewards=rewards)
        batch = group.subset(indices)
        adv = group_advantages(rewards.subset(indices))
        positives.extend(a for a in adv.per_response if a > 0.0)
        degenerate += adv.degenerate
        adv = apply_shaping(adv, batch.responses, config.shaping)
        res_identity += adv.res_identity

        if not adv.degenerate:
            grad = grpo_gradient(
                params, prompt, [r.log_probs for r in batch.responses], batch.responses, adv,
                config.grpo.clip_eps, temperature=config.temperature,
            )
            if len(grad):
                params = apply_gradient(params, grad, learning_rate(config, e * len(prompts) + p, total_steps))

        ratios.append(vote.majority_ratio)
        label_hits.append(vote.label == truth)
        reward_accs.append(reward_accuracy(vote_rewards, truth_rewards))
        entropies.extend(response_entropy(r) for r in group.responses)
        distinct.append(vote.distinct_answers)
        generated += group.budget.tokens_generated
        parallel_equiv += group.budget.tokens_parallel_equiv

    metrics = EpisodeMetrics(
        episode=e,
        majority_ratio_mean=float(np.mean(ratios)),
        label_accuracy=float(np.mean(label_hits)),
        reward_accuracy_mean=float(np.mean(reward_accs)),
        pass_at_1=pass_at_1(params, prompts, config.max_len),
        mean_response_entropy=float(np.mean(entropies)),
        tokens_generated=generated,
        measured_token_ratio=generated / parallel_equiv,
        mean_positive_advantage=float(np.mean(positives)) if positives else 0.0,
        degenerate_groups=degenerate,
        res_identity_groups=res_identity,
        distinct_answers_mean=float(np.mean(distinct)),
        lr=lr_first,
    )
    return replace(state, params=params, episode=e + 1), metrics


def emit_metrics(metrics: EpisodeMetrics, sink: jsonlines.Writer) -> None:
    try:
        sink.write(metrics.model_dump(mode="json"))
    except (OSError, ValueError, RuntimeError) as exc:
        raise WriteFailure(f"could not write metrics record: {exc}") from exc


def validate_metrics_record(record: dict) -> EpisodeMetrics:
    """Schema check for one parsed metrics line: exact key set and order, typed values."""
    if tuple(record) != METRIC_FIELDS:
        missing = [k for k in METRIC_FIELDS if k not in record]
        raise InvalidArgument(f"metrics record keys do not match the schema (missing: {missing})")
    try:
        return EpisodeMetrics.model_validate(record)
    except ValidationError as exc:
        raise InvalidArgument(str(exc)) from exc


def read_metrics(path: str | os.PathLike) -> list[EpisodeMetrics]:
    with jsonlines.open(path) as reader:
        return [validate_metrics_record(record) for record in reader]


def to_checkpoint(config: ExperimentConfig, state: TrainState) -> Checkpoint:
    return Checkpoint(config.model_dump_json(), state.params, state.rng, state.episode)


def save_state(config: ExperimentConfig, state: TrainState, path: str | os.PathLike) -> Path:
    return save_checkpoint(to_checkpoint(config, state), path)


def load_state(path: str | os.PathLike, config: ExperimentConfig | None = None) -> tuple[ExperimentConfig, TrainState]:
    """Restore a state; the prompt set is always rebuilt from the echoed config.

    A given ``config`` only supplies evaluation settings. Its task must match
    the echo, and the seed always comes from the echo.
    """
    ckpt = load_checkpoint(path)
    echoed = parse_config(ckpt.config_json)
    if config is None:
        config = echoed
    elif config.task != echoed.task:
        raise InvalidConfig(f"config task {config.task!r} does not match the checkpoint task {echoed.task!r}")
    else:
        config = config.model_copy(update={"seed": echoed.seed})
    prompt_set = build_prompt_set(echoed.task, RngStream(echoed.seed).split("prompts"))
    return config, TrainState(ckpt.params, prompt_set, ckpt.episode, ckpt.rng)


def _open_sink(out_dir: Path | None, *, append: bool = False) -> tuple[IO[str] | None, jsonlines.Writer | None]:
    if out_dir is None:
        return None, None
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        handle = open(out_dir / METRICS_FILE, "a" if append else "w", encoding="utf-8", newline="\n")
    except OSError as exc:
        raise WriteFailure(f"could not open metrics file in {out_dir}: {exc}") from exc
    return handle, jsonlines.Writer(handle, compact=True, flush=True)


def summarise(
    config: ExperimentConfig, initial: float, final: float, stream: Iterable[EpisodeMetrics]
) -> RunSummary:
    stream = list(stream)
    return RunSummary(
        seed=config.seed,
        episodes=len(stream),
        rollout_mode=config.rollout_mode,
        initial_pass_at_1=initial,
        final_pass_at_1=final,
        total_tokens_generated=sum(m.tokens_generated for m in stream),
        mean_token_ratio=float(np.mean([m.measured_token_ratio for m in stream])) if stream else None,
        final_majority_ratio=stream[-1].majority_ratio_mean if stream else None,
    )


def train(
    config: ExperimentConfig,
    out_dir: str | os.PathLike | None = None,
    *,
    state: TrainState | None = None,
    progress: bool = False,
) -> tuple[TrainState, RunSummary, list[EpisodeMetrics]]:
    """Run the remaining episodes, streaming one metrics record per episode.

    With ``out_dir`` the run writes ``metrics.jsonl``, ``summary.json`` and
    ``final.ckpt`` there; a resumed state appends to the existing metrics.
    Records already written stay on disk if an episode raises.
    """
    state = state or init_state(config)
    out = Path(out_dir) if out_dir is not None else None
    initial = pass_at_1(state.params, state.prompt_set, config.max_len)
    logger.info("seed=%d mode=%s initial pass@1=%.3f", config.seed, config.rollout_mode, initial)

    stream: list[EpisodeMetrics] = []
    handle, writer = _open_sink(out, append=state.episode > 0)
    try:
        for _ in tqdm(range(state.episode, config.episodes), desc="episodes", disable=not progress):
            state, metrics = run_episode(config, state)
            stream.append(metrics)
            if writer is not None:
                emit_metrics(metrics, writer)
            logger.info(
                "episode %d pass@1=%.3f majority=%.3f label_acc=%.3f token_ratio=%.3f",
                metrics.episode, metrics.pass_at_1, metrics.majority_ratio_mean,
                metrics.label_accuracy, metrics.measured_token_ratio,
            )
    except Exception:
        logger.exception("episode %d failed, %d records kept", state.episode, len(stream))
        raise
    finally:
        if writer is not None:
            writer.close()
            handle.close()

    final = stream[-1].pass_at_1 if stream else initial
    summary = summarise(config, initial, final, stream)
    if out is not None:
        save_state(config, state, out / CHECKPOINT_FILE)
        try:
            (out / SUMMARY_FILE).write_text(json.dumps(summary.model_dump(mode="json"), indent=2) + "\n", encoding="utf-8")
        except OSError as exc:
            raise WriteFailure(f"could not write summary: {exc}") from exc
    return state, summary, stream


__all__ = [
    "DownsampleMode",
    "EpisodeMetrics",
    "ExperimentConfig",
    "LrSchedule",
    "METRIC_FIELDS",
    "RunSummary",
    "TrainState",
    "collect_rollouts",
    "downsample_group",
    "downsample_indices",
    "emit_metrics",
    "init_state",
    "learning_rate",
    "load_config",
    "load_state",
    "parse_config",
    "read_metrics",
    "run_episode",
    "save_state",
    "summarise",
    "train",
    "validate_metrics_record",
]

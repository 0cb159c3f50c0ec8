"""Multi-seed comparisons of the method variants."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Iterable

import pandas as pd

from errors import InvalidArgument
from harness import ExperimentConfig, parse_config, train

logger = logging.getLogger(__name__)

# overrides applied on top of a base config
VARIANTS: dict[str, dict] = {
    "ttrl": {"rollout_mode": "parallel", "shaping": {"mode": "none"}},
    "etmr": {"rollout_mode": "etmr", "shaping": {"mode": "none"}},
    "adv-clip": {"rollout_mode": "parallel", "shaping": {"mode": "clip"}},
    "adv-res": {"rollout_mode": "parallel", "shaping": {"mode": "res"}},
    "ettrl": {"rollout_mode": "etmr", "shaping": {"mode": "res"}},
    "ground-truth": {"rollout_mode": "parallel", "reward_mode": "ground_truth", "shaping": {"mode": "none"}},
}

SUMMARY_COLUMNS = ["initial_pass_at_1", "final_pass_at_1", "mean_token_ratio", "final_majority_ratio"]


def _merge(base: dict, overrides: dict) -> dict:
    merged = dict(base)
    for key, value in overrides.items():
        merged[key] = _merge(merged.get(key, {}), value) if isinstance(value, dict) else value
    return merged


def variant_config(base: ExperimentConfig, variant: str, seed: int) -> ExperimentConfig:
    if variant not in VARIANTS:
        raise InvalidArgument(f"unknown variant {variant!r}, expected one of {sorted(VARIANTS)}")
    data = _merge(base.model_dump(mode="json"), VARIANTS[variant])
    data["seed"] = seed
    return parse_config(data)


def run_comparison(
    base: ExperimentConfig,
    variants: Iterable[str],
    seeds: Iterable[int],
    out_dir: str | Path | None = None,
) -> pd.DataFrame:
    seeds = list(seeds)
    records = []
    for variant in variants:
        for seed in seeds:
            config = variant_config(base, variant, seed)
            run_dir = Path(out_dir) / variant / f"seed{seed}" if out_dir is not None else None
            _, summary, _ = train(config, run_dir)
            logger.info("%s seed=%d final pass@1=%.3f", variant, seed, summary.final_pass_at_1)
            records.append({"variant": variant, "seed": seed, **summary.model_dump(include=set(SUMMARY_COLUMNS))})
    frame = pd.DataFrame.from_records(records)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        frame.to_csv(Path(out_dir) / "comparison.csv", index=False)
    return frame


def summarise_comparison(frame: pd.DataFrame) -> pd.DataFrame:
    """Per-variant medians, in first-seen variant order."""
    order = list(dict.fromkeys(frame["variant"]))
    medians = frame.groupby("variant")[SUMMARY_COLUMNS].median()
    return medians.reindex(order)

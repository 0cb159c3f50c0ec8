"""Command-line entry point: ``python ettrl/main.py <command>``."""
from __future__ import annotations

import logging
import pathlib
import sys
from typing import Optional

import typer
from rich.console import Console
from rich.logging import RichHandler
from rich.markup import escape
from rich.table import Table

MODULE_DIR = pathlib.Path(__file__).resolve().parent
if str(MODULE_DIR) not in sys.path:
    sys.path.insert(0, str(MODULE_DIR))

from errors import EttrlError  # noqa: E402
from harness import ExperimentConfig, load_config, load_state, parse_config, train  # noqa: E402
from rollout import budget_table  # noqa: E402
from tasks import maj_at_k, pass_at_1  # noqa: E402

app = typer.Typer(add_completion=False, help="Entropy-fork tree test-time RL lab.")
console = Console()
logger = logging.getLogger("ettrl")


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), rich_tracebacks=True, show_path=False)],
        force=True,
    )


def _with_seed(config: ExperimentConfig, seed: Optional[int]) -> ExperimentConfig:
    if seed is None:
        return config
    return parse_config({**config.model_dump(mode="json"), "seed": seed})


def _fail(exc: EttrlError) -> None:
    console.print(f"[bold red]error:[/] {escape(str(exc))}")
    raise typer.Exit(code=2)


@app.command()
def run(
    config: pathlib.Path = typer.Option(..., "--config", exists=True, dir_okay=False, help="JSON experiment config."),
    seed: Optional[int] = typer.Option(None, "--seed", help="Override the config seed."),
    out: pathlib.Path = typer.Option(pathlib.Path("runs/latest"), "--out", help="Output directory."),
    verbose: bool = typer.Option(False, "--verbose", "-v"),
) -> None:
    """Train and write metrics.jsonl, summary.json and final.ckpt."""
    _setup_logging(verbose)
    try:
        cfg = _with_seed(load_config(config), seed)
        _, summary, _ = train(cfg, out, progress=True)
    except EttrlError as exc:
        _fail(exc)
    console.print_json(summary.model_dump_json())


@app.command("eval")
def evaluate(
    checkpoint: pathlib.Path = typer.Option(..., "--checkpoint", exists=True, dir_okay=False),
    config: Optional[pathlib.Path] = typer.Option(None, "--config", help="Defaults to the config stored in the checkpoint."),
    verbose: bool = typer.Option(False, "--verbose", "-v"),
) -> None:
    """Greedy pass@1 and maj@G_vote of a saved policy."""
    _setup_logging(verbose)
    try:
        cfg = load_config(config) if config is not None else None
        cfg, state = load_state(checkpoint, cfg)
        greedy = pass_at_1(state.params, state.prompt_set, cfg.max_len)
        vote = maj_at_k(state.params, state.prompt_set, cfg.G_vote, cfg.max_len, cfg.temperature, state.rng.split("eval"))
    except EttrlError as exc:
        _fail(exc)
    table = Table(title=f"{checkpoint.name} (episode {state.episode})")
    table.add_column("metric")
    table.add_column("value", justify="right")
    table.add_row("pass@1 (greedy)", f"{greedy:.4f}")
    table.add_row(f"maj@{cfg.G_vote}", f"{vote:.4f}")
    console.print(table)


@app.command()
def budget(
    m: int = typer.Option(12, "--M", help="Trees."),
    n: int = typer.Option(2, "--N", help="Fork points per tree."),
    b: int = typer.Option(2, "--B", help="Branches per fork."),
    length: float = typer.Option(100.0, "--len", help="Mean response length."),
) -> None:
    """Closed-form ETMR leaf count and token budget."""
    try:
        row = budget_table(m, n, b, length)
    except EttrlError as exc:
        _fail(exc)
    table = Table(title=f"ETMR M={m} N={n} B={b}")
    table.add_column("quantity")
    table.add_column("value", justify="right")
    for key in ("leaf_count", "expected_tree_tokens", "expected_total_tokens", "parallel_equiv_tokens", "expected_token_ratio"):
        value = row[key]
        table.add_row(key, f"{value:.4f}" if isinstance(value, float) else str(value))
    console.print(table)


@app.command()
def report(
    run_dir: pathlib.Path = typer.Option(..., "--run", exists=True, file_okay=False, help="Directory holding metrics.jsonl."),
    out: Optional[pathlib.Path] = typer.Option(None, "--out", help="Figure directory, defaults to the run directory."),
) -> None:
    """Render per-episode diagnostics figures for a finished run."""
    from report import render_run

    _setup_logging(False)
    try:
        written = render_run(run_dir, out or run_dir)
    except EttrlError as exc:
        _fail(exc)
    for path in written:
        console.print(f"wrote {path}")


@app.command()
def compare(
    config: pathlib.Path = typer.Option(..., "--config", exists=True, dir_okay=False, help="Base JSON config."),
    seeds: int = typer.Option(5, "--seeds", min=1),
    variant: list[str] = typer.Option(["ttrl", "etmr", "adv-clip", "adv-res", "ettrl"], "--variant"),
    out: pathlib.Path = typer.Option(pathlib.Path("runs/compare"), "--out"),
    verbose: bool = typer.Option(False, "--verbose", "-v"),
) -> None:
    """Multi-seed comparison of the method variants."""
    from experiments import run_comparison, summarise_comparison

    _setup_logging(verbose)
    try:
        frame = run_comparison(load_config(config), variant, range(seeds), out)
    except EttrlError as exc:
        _fail(exc)
    medians = summarise_comparison(frame)
    table = Table(title=f"median over {seeds} seeds")
    for column in ["variant", *medians.columns]:
        table.add_column(column)
    for name, row in medians.iterrows():
        table.add_row(name, *(f"{v:.4f}" for v in row))
    console.print(table)


if __name__ == "__main__":
    app()

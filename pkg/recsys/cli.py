"""
recsys/cli.py

Command line entry points (python -m recsys <command>):

  synth      write a seeded synthetic marketplace
  refresh    run the staged training pipeline and publish a snapshot
  eval       HR@n of a snapshot on a pair file
  serve      HTTP service over a snapshot
  recommend  offline top-k query against a snapshot
"""
from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Optional, Tuple

import click

from .errors import RecsysError

logger = logging.getLogger(__name__)


def _int_list(ctx, param, value: str) -> Tuple[int, ...]:
    try:
        out = tuple(int(x) for x in value.split(",") if x.strip())
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {value!r}") from None
    if not out or any(n < 1 for n in out):
        raise click.BadParameter("every n must be >= 1")
    return out


class _RecsysGroup(click.Group):
    """Turns package errors into click errors (message, exit status 1)."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except RecsysError as e:
            raise click.ClickException(str(e)) from e
        except FileNotFoundError as e:
            raise click.ClickException(str(e)) from e


@click.group(cls=_RecsysGroup)
@click.option("--log-level", default="INFO", show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
def cli(log_level: str) -> None:
    """Similar-ads recommender: synthetic data, staged training, evaluation and serving."""
    logging.basicConfig(level=getattr(logging, log_level.upper()),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="key=value synth config file")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None, help="overrides the config seed")
def synth(config_path: Optional[str], out_dir: str, seed: Optional[int]) -> None:
    """Generate ads, events, image features and signal weights into OUT."""
    from .synthgen import SynthConfig, generate

    overrides = {} if seed is None else {"seed": seed}
    cfg = SynthConfig.load(config_path, **overrides) if config_path else SynthConfig(**overrides)
    data = generate(cfg)
    data.write(out_dir)
    click.echo(f"wrote {len(data.ads)} ads, {len(data.events)} events "
               f"({len(data.cold_items)} cold items) to {out_dir}")


@cli.command()
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--reuse", is_flag=True, help="skip stage-1 steps whose inputs are unchanged")
@click.option("--seed", type=int, default=None, help="overrides the config seed")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="key=value refresh config (dotted keys, e.g. als.rank=32)")
def refresh(data_dir: str, out_dir: str, reuse: bool, seed: Optional[int],
            config_path: Optional[str]) -> None:
    """Train all stages on DATA and publish a new snapshot under OUT."""
    from .config import RefreshConfig
    from .pipeline import refresh as run_refresh

    overrides = {} if seed is None else {"seed": seed}
    cfg = RefreshConfig.load(config_path, **overrides)
    snapshot_dir = run_refresh(data_dir, out_dir, cfg, reuse=reuse)
    click.echo(str(snapshot_dir))


@cli.command("eval")
@click.option("--model", "model_dir", required=True, type=click.Path(exists=True, file_okay=False),
              help="snapshot directory or refresh output directory")
@click.option("--pairs", "pairs_path", default=None, type=click.Path(dir_okay=False),
              help="pair file (default: the snapshot's held-out test pairs)")
@click.option("--n", "ns", default="1,5,10", show_default=True, callback=_int_list)
@click.option("--distractors", default=100, show_default=True, type=click.IntRange(min=1))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--report", "report_dir", default=None, type=click.Path(file_okay=False),
              help="also write eval_report.txt / eval_report.kv here")
def eval_command(model_dir: str, pairs_path: Optional[str], ns: Tuple[int, ...], distractors: int,
                 seed: int, report_dir: Optional[str]) -> None:
    """HR@n of a snapshot over held-out conversion pairs."""
    from .evaluation import evaluate_snapshot
    from .pipeline import TEST_PAIRS_FILE
    from .serve import resolve_snapshot_dir

    if pairs_path is None:
        pairs_path = str(resolve_snapshot_dir(model_dir) / TEST_PAIRS_FILE)
    report = evaluate_snapshot(model_dir, pairs_path, ns=ns, n_distractors=distractors, seed=seed)
    click.echo(report.to_text(), nl=False)
    if report_dir:
        text_path, kv_path = report.write(report_dir)
        click.echo(f"report written to {text_path} and {kv_path}")


@cli.command()
@click.option("--snapshot", "snapshot_dir", default=lambda: os.environ.get("RECSYS_SNAPSHOT_DIR"),
              type=click.Path(file_okay=False), help="defaults to $RECSYS_SNAPSHOT_DIR")
@click.option("--port", default=lambda: int(os.environ.get("PORT", 5000)), type=int)
@click.option("--host", default=lambda: os.environ.get("HOST", "0.0.0.0"))
def serve(snapshot_dir: Optional[str], port: int, host: str) -> None:
    """Serve /recommendations and /healthz over HTTP."""
    from .serve import serve_http

    if not snapshot_dir:
        raise click.UsageError("--snapshot or RECSYS_SNAPSHOT_DIR is required")
    try:
        serve_http(snapshot_dir, port, host=host)
    except (RuntimeError, OSError) as e:
        # port in use, bind not permitted
        raise click.ClickException(f"cannot serve on {host}:{port}: {e}") from e


@cli.command()
@click.option("--snapshot", "snapshot_dir", default=lambda: os.environ.get("RECSYS_SNAPSHOT_DIR"),
              type=click.Path(file_okay=False))
@click.option("--count", "-k", default=6, show_default=True, type=click.IntRange(min=1))
@click.argument("item_id")
def recommend(snapshot_dir: Optional[str], count: int, item_id: str) -> None:
    """Print the top COUNT similar items for ITEM_ID."""
    from .serve import load_snapshot, recommend as top_k, resolve_snapshot_dir

    if not snapshot_dir:
        raise click.UsageError("--snapshot or RECSYS_SNAPSHOT_DIR is required")
    snapshot = load_snapshot(resolve_snapshot_dir(Path(snapshot_dir)))
    for other, score in top_k(snapshot, item_id, count):
        click.echo(f"{other}\t{score:.6f}")


def main() -> None:
    cli(prog_name="recsys")


if __name__ == "__main__":
    main()

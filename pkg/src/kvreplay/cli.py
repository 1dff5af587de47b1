"""Command-line interface: generate, replay, compare, density-report.

Exit codes: 0 success, 2 configuration error, 3 trace parse error.
"""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import click

from .config import POLICIES, CachePolicyConfig
from .errors import ConfigError, ContractViolation, TraceFormatError
from .figures import save_compare_figure, save_density_figure, save_replay_figures
from .replay import COMPARE_COLUMNS, DENSITY_COLUMNS, compare_policies, density_rows, run_replay
from .trace import generate_synthetic, read_trace, write_trace

EXIT_CONFIG = 2
EXIT_TRACE = 3


def _parse_ratio(text: str) -> tuple[int, int]:
    try:
        n, m = text.split(":")
        return int(n), int(m)
    except ValueError as exc:
        raise ConfigError(f"ratio must look like 3:1, got {text!r}") from exc


def _config_options(fn):
    opts = [
        click.option("--budget-fraction", "-r", type=float, default=0.2, show_default=True,
                     help="Cache budget as a fraction of the prompt length."),
        click.option("--ratio", default="3:1", show_default=True,
                     help="top:recent split of the non-sink budget, e.g. 3:1."),
        click.option("--sink-tokens", "-T", type=int, default=4, show_default=True,
                     help="Leading tokens that are never evicted."),
        click.option("--gate", "-g", type=float, default=100.0, show_default=True,
                     help="Density variance threshold separating dense and sparse layers."),
        click.option("--alpha", type=float, default=2.0, show_default=True,
                     help="Budget multiplier for dense (low-variance) layers."),
        click.option("--beta", type=float, default=0.7, show_default=True,
                     help="EMA smoothing constant for the merge threshold."),
        click.option("--merge/--no-merge", "merge_enabled", default=True, show_default=True,
                     help="Enable threshold-gated merging of evicted tokens."),
        click.option("--seed", type=int, default=0, show_default=True),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _build_config(policy: str, budget_fraction: float, ratio: str, sink_tokens: int,
                  gate: float, alpha: float, beta: float, merge_enabled: bool,
                  seed: int) -> CachePolicyConfig:
    return CachePolicyConfig(
        policy=policy,
        budget_fraction=budget_fraction,
        ratio=_parse_ratio(ratio),
        sink_tokens=sink_tokens,
        gate=gate,
        alpha=alpha,
        beta=beta,
        merge_enabled=merge_enabled,
        seed=seed,
    ).validate()


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


@click.group()
def cli():
    """Replay attention traces under selectable KV-cache policies."""


@cli.command()
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--layers", type=int, default=4, show_default=True)
@click.option("--heads", type=int, default=4, show_default=True)
@click.option("--head-dim", type=int, default=32, show_default=True)
@click.option("--prompt-len", type=int, default=256, show_default=True)
@click.option("--gen-len", type=int, default=64, show_default=True)
@click.option("--sink-strength", type=float, default=12.0, show_default=True,
              help="How strongly deeper layers favor the first token.")
@click.option("--out", type=click.Path(path_type=Path), required=True)
def generate(seed, layers, heads, head_dim, prompt_len, gen_len, sink_strength, out):
    """Write a synthetic attention trace."""
    trace = generate_synthetic(seed, layers, heads, head_dim, prompt_len, gen_len,
                               sink_strength=sink_strength)
    write_trace(trace, out)
    click.echo(f"wrote {out} ({trace.num_layers} layers, {trace.num_heads} heads, "
               f"{trace.prompt_len}+{trace.gen_len} tokens)")


@cli.command()
@click.argument("trace_path", type=click.Path(exists=True, path_type=Path))
@click.option("--policy", type=click.Choice(POLICIES), default="d2o", show_default=True)
@_config_options
@click.option("--out", type=click.Path(path_type=Path), default=None,
              help="Write the full JSON report here (stdout summary otherwise).")
@click.option("--log-merges", type=click.Path(path_type=Path), default=None,
              help="Write merge/discard events as JSON lines.")
@click.option("--log-decisions", type=click.Path(path_type=Path), default=None,
              help="Write the eviction decision log as plain text.")
@click.option("--figures/--no-figures", default=True, show_default=True,
              help="Render drift/occupancy figures next to --out.")
def replay(trace_path, policy, budget_fraction, ratio, sink_tokens, gate, alpha, beta,
           merge_enabled, seed, out, log_merges, log_decisions, figures):
    """Replay one trace under one policy and report the outcome."""
    config = _build_config(policy, budget_fraction, ratio, sink_tokens, gate, alpha,
                           beta, merge_enabled, seed)
    report = run_replay(trace_path, config)
    if out is not None:
        out.write_text(report.to_json(include_timing=True))
        click.echo(f"report: {out}")
        if figures:
            for path in save_replay_figures(report, out.with_suffix("")):
                click.echo(f"figure: {path}")
    else:
        summary = report.to_dict(include_timing=True, include_logs=False)
        click.echo(json.dumps(summary, indent=2))
    if log_merges is not None:
        with open(log_merges, "w") as fh:
            for event in report.merge_log:
                fh.write(json.dumps(event) + "\n")
        click.echo(f"merge log: {log_merges}")
    if log_decisions is not None:
        log_decisions.write_text("\n".join(report.decision_log) + "\n")
        click.echo(f"decision log: {log_decisions}")


@cli.command()
@click.argument("trace_path", type=click.Path(exists=True, path_type=Path))
@click.option("--policies", "policy_list", default="full,local_window,streaming,h2o,roco,d2o",
              show_default=True, help="Comma-separated policies to compare.")
@_config_options
@click.option("--out", type=click.Path(path_type=Path), required=True,
              help="Comparison CSV path.")
@click.option("--figures/--no-figures", default=True, show_default=True)
def compare(trace_path, policy_list, budget_fraction, ratio, sink_tokens, gate, alpha,
            beta, merge_enabled, seed, out, figures):
    """Replay one trace under several policies and tabulate the metrics."""
    names = [p.strip() for p in policy_list.split(",") if p.strip()]
    if not names:
        raise ConfigError("compare requires at least one policy")
    configs = [
        _build_config(name, budget_fraction, ratio, sink_tokens, gate, alpha, beta,
                      merge_enabled, seed)
        for name in names
    ]
    rows = compare_policies(trace_path, configs)
    _write_csv(out, COMPARE_COLUMNS, rows)
    click.echo(f"comparison: {out}")
    if figures:
        path = save_compare_figure(rows, out.with_suffix(".png"))
        click.echo(f"figure: {path}")
    failed = [r for r in rows if r["status"] != "ok"]
    for row in failed:
        click.echo(f"policy {row['policy']} failed: {row['error']}", err=True)


@cli.command("density-report")
@click.argument("trace_path", type=click.Path(exists=True, path_type=Path))
@click.option("--gate", "-g", type=float, default=100.0, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), required=True,
              help="Per-layer density CSV path.")
@click.option("--figures/--no-figures", default=True, show_default=True)
def density(trace_path, gate, out, figures):
    """Dump per-layer attention-density variances as CSV."""
    rows = density_rows(trace_path, gate)
    _write_csv(out, DENSITY_COLUMNS, rows)
    click.echo(f"density report: {out}")
    if figures:
        path = save_density_figure(rows, gate, out.with_suffix(".png"))
        click.echo(f"figure: {path}")


@cli.command()
@click.argument("trace_path", type=click.Path(exists=True, path_type=Path))
def info(trace_path):
    """Print a trace file's header."""
    trace = read_trace(trace_path)
    click.echo(json.dumps({
        "model_name": trace.model_name,
        "num_layers": trace.num_layers,
        "num_heads": trace.num_heads,
        "head_dim": trace.head_dim,
        "prompt_len": trace.prompt_len,
        "total_len": trace.total_len,
        "flags": trace.flags,
    }, indent=2))


def main() -> int:
    try:
        cli.main(standalone_mode=False)
    except (ConfigError, ContractViolation) as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_CONFIG
    except TraceFormatError as exc:
        click.echo(f"trace error: {exc}", err=True)
        return EXIT_TRACE
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.exceptions.Abort:
        return 130
    return 0


if __name__ == "__main__":
    sys.exit(main())

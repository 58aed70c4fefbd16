"""Command line interface: ``hpsim train | verify-equivalence | cost-report | scale-hparams``."""

from __future__ import annotations

import functools
import json
import logging
import sys

import click

from hpsim import scaling
from hpsim.config import RunConfig, load_config
from hpsim.exceptions import ConfigurationError, DomainError, HPSimError
from hpsim.runner import EQUIVALENCE_THRESHOLD, cost_timeline, train, verify_equivalence

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_EQUIVALENCE = 0, 1, 2, 3

config_option = click.option(
    "--config", "config_path", type=click.Path(dir_okay=False), default=None,
    help="JSON run configuration (defaults to the built-in toy run).",
)
seed_option = click.option("--seed", type=int, default=None, help="Override model and data seeds.")
precision_option = click.option("--precision", type=click.Choice(["single", "double"]), default=None)
json_option = click.option("--json", "as_json", is_flag=True, help="Emit machine-readable JSON.")


def _load(config_path, seed=None, precision=None) -> RunConfig:
    config = load_config(config_path) if config_path else RunConfig()
    return config.with_overrides(seed=seed, precision=precision)


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guard(fn):
    """Map package errors onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigurationError, DomainError) as exc:
            _fail(EXIT_VALIDATION, str(exc))
        except (HPSimError, OSError) as exc:
            _fail(EXIT_RUNTIME, str(exc))

    return wrapper


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    """Hybrid data/model-parallel SGD simulator."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@main.command("train")
@config_option
@seed_option
@precision_option
@json_option
@click.option("--steps", type=int, default=None, help="Override the configured number of steps.")
@_guard
def train_cmd(config_path, seed, precision, as_json, steps):
    """Train on synthetic data; writes metrics.csv and checkpoint/."""
    config = _load(config_path, seed, precision)
    if steps is not None:
        config = RunConfig.from_dict({**config.to_dict(), "steps": steps})
    out = config.resolved_output_dir()
    rows = train(config, out)
    summary = {
        "output_dir": str(out),
        "steps": len(rows),
        "initial_loss": rows[0].loss if rows else None,
        "final_loss": rows[-1].loss if rows else None,
    }
    if as_json:
        click.echo(json.dumps(summary))
    else:
        click.echo(f"wrote {out / 'metrics.csv'} ({len(rows)} steps)")
        if rows:
            click.echo(f"loss {rows[0].loss:.6f} -> {rows[-1].loss:.6f}")


@main.command("verify-equivalence")
@config_option
@seed_option
@json_option
@click.option("--steps", type=int, default=5, show_default=True)
@click.option("--fault", type=click.Choice(["skip-broadcast"]), default=None, hidden=True)
@_guard
def verify_cmd(config_path, seed, as_json, steps, fault):
    """Compare schemes A/B/C against single-worker SGD at the combined batch size."""
    config = _load(config_path, seed)
    report = verify_equivalence(config, steps, fault=fault and fault.replace("-", "_"))
    failed = [s for s, v in report.items() if v is not None and not v < EQUIVALENCE_THRESHOLD]
    if as_json:
        click.echo(json.dumps({"threshold": EQUIVALENCE_THRESHOLD, "divergence": report, "failed": failed}))
    else:
        click.echo(f"K={config.cluster.n_workers} b={config.cluster.per_worker_batch} steps={steps}")
        for scheme, value in report.items():
            if value is None:
                click.echo(f"scheme {scheme}: skipped (configuration cannot run it)")
            else:
                verdict = "ok" if scheme not in failed else "DIVERGED"
                click.echo(f"scheme {scheme}: max relative divergence {value:.3e} {verdict}")
    if failed:
        _fail(EXIT_EQUIVALENCE, f"schemes {', '.join(failed)} exceed {EQUIVALENCE_THRESHOLD:g}")


@main.command("cost-report")
@config_option
@json_option
@click.option("--workers", type=int, default=None, help="Override the worker count.")
@click.option("--scheme", type=click.Choice(["A", "B", "C"]), default=None)
@click.option("--timeline", "timeline_path", type=click.Path(dir_okay=False), default=None,
              help="Timeline CSV path (default: <output_dir>/timeline.csv).")
@_guard
def cost_report_cmd(config_path, as_json, workers, scheme, timeline_path):
    """Predicted step timeline, communication hiding and speedup."""
    config = _load(config_path)
    overrides = {}
    if workers is not None:
        overrides["n_workers"] = workers
    if scheme is not None:
        overrides["scheme"] = scheme
    if overrides:
        raw = config.to_dict()
        raw["cluster"].update(overrides)
        if workers is not None:
            raw["cost"]["subsets"] = None
            per_step = workers * config.cluster.per_worker_batch
            raw["data"]["num_examples"] = max(raw["data"]["num_examples"], per_step)
        config = RunConfig.from_dict(raw)
    tl = cost_timeline(config)
    if timeline_path is None:
        out = config.resolved_output_dir()
        out.mkdir(parents=True, exist_ok=True)
        timeline_path = out / "timeline.csv"
    with open(timeline_path, "w") as fh:
        fh.write(tl.to_csv())
    summary = tl.summary()
    summary["timeline_csv"] = str(timeline_path)
    if as_json:
        click.echo(json.dumps(summary))
        return
    click.echo(f"scheme {tl.scheme}, K={tl.n_workers}, b={config.cluster.per_worker_batch}")
    click.echo(f"{'phase':<20}{'seconds':>14}")
    for phase, seconds in summary["phase_totals_s"].items():
        click.echo(f"{phase:<20}{seconds:>14.6e}")
    hidden = summary["hidden_comm_fraction"]
    click.echo(f"step time            {tl.step_time:.6e} s")
    click.echo(f"single-worker step   {tl.single_worker_step_time:.6e} s")
    click.echo(f"hidden comm fraction {'n/a' if hidden is None else f'{hidden:.6f}'}")
    click.echo(f"exchange bottleneck  {tl.exchange_bottleneck_bytes} bytes")
    click.echo(f"speedup              {tl.speedup:.4f}x")
    click.echo(f"timeline             {timeline_path}")


@main.command("scale-hparams")
@click.option("--lr", type=float, required=True, help="Learning rate at the original batch size.")
@click.option("--weight-decay", type=float, required=True)
@click.option("--k", type=float, required=True, help="Batch size multiplier.")
@click.option("--rule", type=click.Choice(scaling.RULES), default="theory_sqrt", show_default=True)
@json_option
@_guard
def scale_hparams_cmd(lr, weight_decay, k, rule, as_json):
    """Learning-rate and weight-decay values for a k-times larger batch."""
    plan = scaling.plan(lr, weight_decay, k, rule)
    if as_json:
        click.echo(json.dumps(plan.to_dict()))
        return
    rows = [
        ("k", plan.k),
        ("lr", plan.lr),
        ("weight_decay", plan.weight_decay),
        (f"lr' ({rule})", plan.lr_scaled),
        ("wd' exact", plan.weight_decay_exact),
        ("wd' approx", plan.weight_decay_approx),
        ("wd' to use", plan.weight_decay_practical),
    ]
    for name, value in rows:
        click.echo(f"{name:<24}{value:.10g}")


if __name__ == "__main__":
    main()

"""Command-line entry point.

Exit codes: 0 success, 2 usage, 3 data or validation failure, 4 numeric
failure. Every command prints a one-line JSON summary on success so runs
are scriptable; figures are written beside the delimited files.
"""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import __version__
from .config import load_config
from .encoding import compute_entries, load_cache, precompute_cache
from .errors import DataError, NumericError, ValidationError
from .graphs import file_sha256, load_jsonl, validate_jsonl
from .layers import AttentionTopology, GrassLayer, deepnorm_alpha
from .model import GrassModel, load_checkpoint, model_config_from_echo
from .reports import rewire_figures, training_curves
from .rewiring import (
    RewireConfig,
    diameter,
    is_simple,
    sample_permutation_pseudograph,
    simplify,
    spectral_gap,
)
from .seeds import ROLE_REWIRE, derive_rng, derive_torch_generator
from .synthetic import write_synthetic
from .training import apply_determinism, evaluate, grad_check, train_loop


@click.group()
@click.version_option(__version__, prog_name="grass")
def cli() -> None:
    """Graph attention with random regular rewiring."""


@cli.command()
@click.option("--data", "data_path", required=True, help="Dataset JSONL file.")
@click.option("--cache", "cache_path", required=True, help="Cache file to write.")
@click.option("--k", required=True, type=int, help="Random walk length.")
@click.option("--jobs", default=1, show_default=True, type=int,
              help="Worker processes for encoding computation.")
def preprocess(data_path: str, cache_path: str, k: int, jobs: int) -> None:
    """Precompute walk encodings and degree tables into a binary cache."""
    summary = precompute_cache(data_path, k, cache_path, jobs=jobs)
    click.echo(json.dumps(summary, sort_keys=True))


@cli.command()
@click.option("--config", "config_path", required=True, help="Run config YAML.")
@click.option("--data", "data_path", required=True, help="Dataset JSONL file.")
@click.option("--cache", "cache_path", required=True, help="Preprocessed cache.")
@click.option("--seed", required=True, type=int, help="Root seed for the run.")
@click.option("--out", "out_dir", default="grass-run", show_default=True,
              help="Directory for checkpoint, metric log, curves, manifest.")
def train(config_path, data_path, cache_path, seed, out_dir) -> None:
    """Train a model; artifacts land in --out."""
    rc = load_config(config_path)
    if not Path(cache_path).exists():
        raise DataError(
            f"cache {cache_path} not found; run `grass preprocess "
            f"--data {data_path} --cache {cache_path} --k {rc.encode_k}` first"
        )
    dataset = load_jsonl(data_path)
    dataset_hash = file_sha256(data_path)
    entries = load_cache(cache_path, expect_hash=dataset_hash, expect_k=rc.encode_k)
    result = train_loop(
        rc, dataset, entries, out_dir, seed,
        dataset_hash=dataset_hash, cache_hash=file_sha256(cache_path),
    )
    curves = None
    if result["history"]:
        curves = str(training_curves(result["metrics_path"], Path(out_dir) / "curves.png"))
    click.echo(
        json.dumps(
            {
                "best_epoch": result["best_epoch"],
                "best_metric": result["best_metric"],
                "selection_split": result["selection_split"],
                "parameters": result["manifest"]["parameters"],
                "metrics": str(result["metrics_path"]),
                "checkpoint": str(result["checkpoint_path"]),
                "curves": curves,
            },
            sort_keys=True,
        )
    )


@cli.command("eval")
@click.option("--checkpoint", "checkpoint_path", required=True)
@click.option("--data", "data_path", required=True, help="Dataset JSONL file.")
@click.option("--cache", "cache_path", default=None,
              help="Optional cache; encodings are computed in-process without it.")
@click.option("--fixed-eval-seed", default=None, type=int,
              help="Pin the rewiring seed; omitted means a fresh draw.")
@click.option("--batch-size", default=None, type=int,
              help="Override the batch size stored in the checkpoint config.")
def eval_command(checkpoint_path, data_path, cache_path, fixed_eval_seed, batch_size):
    """Evaluate a checkpoint under freshly sampled rewiring."""
    apply_determinism()
    echo, state = load_checkpoint(checkpoint_path)
    model = GrassModel(model_config_from_echo(echo["model_config"]))
    model.load_state_dict(state)
    run = echo["run"]
    dataset = load_jsonl(data_path)
    k = run["encode"]["k"]
    if cache_path is not None:
        entries = load_cache(cache_path, expect_hash=file_sha256(data_path), expect_k=k)
    else:
        entries = compute_entries(dataset.graphs, k)
    if fixed_eval_seed is not None:
        seed = fixed_eval_seed
    else:
        seed = int(np.random.SeedSequence().generate_state(1)[0] >> 1)
    stats = evaluate(
        model,
        list(dataset.graphs),
        entries,
        list(dataset.targets),
        RewireConfig(
            r=run["rewire"]["r"],
            retry_until_simple=run["rewire"]["retry_until_simple"],
        ),
        batch_size or run["train"]["batch_size"],
        derive_rng(seed, ROLE_REWIRE),
        echo["model_config"]["task"],
        run["train"]["label_smoothing"],
    )
    click.echo(
        json.dumps(
            {
                "loss": stats["loss"],
                "metric": stats["metric"],
                "num_graphs": len(dataset.graphs),
                "eval_seed": seed,
            },
            sort_keys=True,
        )
    )


@cli.command("rewire-stats")
@click.option("--num-nodes", required=True, type=int)
@click.option("--r", required=True, type=int, help="Target regularity (even).")
@click.option("--trials", default=100, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_csv", required=True, help="Stats CSV; figures beside it.")
def rewire_stats(num_nodes, r, trials, seed, out_csv) -> None:
    """Sample rewiring graphs; log simplicity, diameter, and spectral gap."""
    if trials < 1:
        raise ValidationError("trials must be >= 1")
    rows = []
    for trial in range(trials):
        rng = derive_rng(seed, ROLE_REWIRE, trial)
        pg = sample_permutation_pseudograph(num_nodes, r, rng)
        pairs = simplify(pg)
        rows.append(
            {
                "trial": trial,
                "simple": int(is_simple(pg)),
                "diameter": diameter(pairs, num_nodes),
                "spectral_gap": spectral_gap(pairs, num_nodes),
            }
        )
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["trial", "simple", "diameter", "spectral_gap"])
        for row in rows:
            writer.writerow(
                [row["trial"], row["simple"],
                 repr(row["diameter"]), repr(row["spectral_gap"])]
            )
    figures = rewire_figures(rows, out_csv)
    finite = [row["diameter"] for row in rows if np.isfinite(row["diameter"])]
    click.echo(
        json.dumps(
            {
                "trials": trials,
                "simple_rate": sum(r_["simple"] for r_ in rows) / trials,
                "mean_spectral_gap": float(np.mean([r_["spectral_gap"] for r_ in rows])),
                "median_diameter": float(np.median(finite)) if finite else None,
                "connected_rate": len(finite) / trials,
                "csv": str(out_csv),
                "figures": [str(p) for p in figures],
            },
            sort_keys=True,
        )
    )


@cli.command()
@click.option("--config", "config_path", required=True, help="Run config YAML.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--nodes", default=5, show_default=True, type=int)
@click.option("--tolerance", default=1e-4, show_default=True, type=float)
def gradcheck(config_path, seed, nodes, tolerance) -> None:
    """Check one layer's gradients against central finite differences."""
    rc = load_config(config_path)
    if nodes < 2:
        raise ValidationError("nodes must be >= 2")
    torch.manual_seed(seed)
    layer = GrassLayer(
        width=rc.width,
        index=1,
        dropkey_rate=0.0,
        activation=rc.activation,
        log_length_scaling=rc.log_length_scaling,
        norm_kind=rc.norm_kind,
    ).double()
    layer.train()
    pairs = [(i, i + 1) for i in range(nodes - 1)] + [(0, nodes - 1)]
    directed = np.array(
        [row for a, b in pairs for row in ((a, b), (b, a))], dtype=np.int64
    )
    topo = AttentionTopology.build(directed, nodes)
    generator = derive_torch_generator(seed, ROLE_REWIRE)
    shape_x, shape_e = (nodes, rc.width), (directed.shape[0], rc.width)
    x = torch.randn(*shape_x, dtype=torch.float64, generator=generator)
    e = torch.randn(*shape_e, dtype=torch.float64, generator=generator)
    cx = torch.randn(*shape_x, dtype=torch.float64, generator=generator)
    ce = torch.randn(*shape_e, dtype=torch.float64, generator=generator)
    alpha = deepnorm_alpha(rc.num_layers)

    def loss_fn():
        out_x, out_e = layer(x, e, topo, alpha=alpha)
        return (out_x * cx).sum() + (out_e * ce).sum()

    report = grad_check(loss_fn, dict(layer.named_parameters()), tolerance)
    for name in sorted(report["blocks"]):
        click.echo(f"{name}: {report['blocks'][name]:.3e}")
    click.echo(
        json.dumps(
            {
                "max_rel_error": report["max_rel_error"],
                "tolerance": tolerance,
                "passed": report["passed"],
            },
            sort_keys=True,
        )
    )
    if not report["passed"]:
        raise NumericError(
            f"gradient check failed: max relative error "
            f"{report['max_rel_error']:.3e} exceeds {tolerance:.1e}"
        )


@cli.command("validate-data")
@click.option("--data", "data_path", required=True, help="Dataset JSONL file.")
@click.pass_context
def validate_data(ctx, data_path) -> None:
    """Schema-check a dataset and report summary statistics."""
    report = validate_jsonl(data_path)
    click.echo(json.dumps(report, sort_keys=True))
    if report["errors"]:
        ctx.exit(3)


@cli.command("make-synthetic")
@click.option("--out", "out_path", required=True, help="Dataset JSONL to write.")
@click.option("--num-graphs", required=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--min-nodes", default=10, show_default=True, type=int)
@click.option("--max-nodes", default=37, show_default=True, type=int)
def make_synthetic(out_path, num_graphs, seed, min_nodes, max_nodes) -> None:
    """Generate a seeded molecule-style regression dataset."""
    summary = write_synthetic(
        out_path, num_graphs, seed, min_nodes=min_nodes, max_nodes=max_nodes
    )
    click.echo(json.dumps(summary, sort_keys=True))


def main(argv=None) -> None:
    """Dispatch with the documented exit-code contract."""
    try:
        # click returns (rather than raises) ctx.exit codes in this mode
        result = cli.main(args=argv, standalone_mode=False)
        if isinstance(result, int) and result:
            sys.exit(result)
    except click.exceptions.Exit as exc:
        sys.exit(exc.exit_code)
    except click.UsageError as exc:
        if exc.ctx is not None:
            click.echo(exc.ctx.get_usage(), err=True)
        click.echo(f"error: {exc.format_message()}", err=True)
        sys.exit(2)
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)
    except (DataError, ValidationError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(3)
    except NumericError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(4)
    sys.exit(0)

"""Losses, metrics, evaluation, gradient checking, and the training loop.

The loop is replayable from (config, seed, dataset): every stochastic
choice draws from a seed stream keyed by role and position, and
GRASS_DETERMINISTIC=1 pins torch to one thread so metric logs match
bit for bit across runs.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import RunConfig, build_model_config, config_echo
from .encoding import dataset_degree_extremes
from .errors import ValidationError
from .graphs import GraphDataset
from .model import (
    GrassModel,
    count_parameters,
    init_params,
    prepare_batch,
    save_checkpoint,
)
from .optim import Lion, ScheduleConfig, build_param_groups, lr_at
from .rewiring import RewireConfig
from .seeds import (
    ROLE_DROPKEY,
    ROLE_INIT,
    ROLE_REWIRE,
    ROLE_SHUFFLE,
    derive_rng,
    derive_torch_generator,
)

METRIC_COLUMNS = ("epoch", "split", "loss", "metric", "lr", "wallclock_s")

# Sub-keys under ROLE_REWIRE so training batches and per-epoch evaluation
# passes draw from disjoint streams.
_REWIRE_TRAIN = 0
_REWIRE_EVAL = 1


def apply_determinism() -> None:
    if os.environ.get("GRASS_DETERMINISTIC") == "1":
        torch.set_num_threads(1)


def compute_loss(
    predictions: torch.Tensor,
    targets: torch.Tensor,
    task: str,
    smoothing: float = 0.0,
) -> torch.Tensor:
    """L1 for regression; label-smoothed cross-entropy for classification."""
    if task == "graph-regression":
        target = targets.to(predictions.dtype)
        if predictions.shape != target.shape:
            raise ValidationError(
                f"prediction shape {tuple(predictions.shape)} does not match "
                f"target shape {tuple(target.shape)}"
            )
        return (predictions - target).abs().mean()
    if predictions.ndim != 2:
        raise ValidationError("classification predictions must be (rows, classes)")
    num_classes = predictions.shape[1]
    labels = targets.to(torch.int64)
    if labels.ndim != 1 or labels.shape[0] != predictions.shape[0]:
        raise ValidationError("classification targets must be one label per row")
    if labels.numel() and (
        int(labels.min()) < 0 or int(labels.max()) >= num_classes
    ):
        raise ValidationError(
            f"class index out of range for {num_classes} classes"
        )
    log_probs = torch.log_softmax(predictions, dim=1)
    target_dist = torch.full_like(log_probs, smoothing / num_classes)
    target_dist.scatter_(
        1, labels.unsqueeze(1), 1.0 - smoothing + smoothing / num_classes
    )
    return -(target_dist * log_probs).sum(dim=1).mean()


def compute_metric(
    predictions: torch.Tensor, targets: torch.Tensor, task: str
) -> float:
    """MAE for regression, accuracy for classification."""
    if task == "graph-regression":
        return float((predictions - targets.to(predictions.dtype)).abs().mean())
    labels = targets.to(torch.int64)
    return float((predictions.argmax(dim=1) == labels).double().mean())


def metric_improves(task: str, candidate: float, incumbent: float | None) -> bool:
    if incumbent is None:
        return True
    if task == "graph-regression":
        return candidate < incumbent
    return candidate > incumbent


def mean_baseline_mae(train_targets, eval_targets) -> float:
    """MAE of always predicting the training-target mean."""
    train = np.stack([np.asarray(t, dtype=np.float64).ravel() for t in train_targets])
    eval_ = np.stack([np.asarray(t, dtype=np.float64).ravel() for t in eval_targets])
    return float(np.abs(eval_ - train.mean(axis=0)).mean())


def evaluate(
    model: GrassModel,
    graphs,
    entries,
    targets,
    rewire_cfg: RewireConfig,
    batch_size: int,
    rng: np.random.Generator,
    task: str,
    smoothing: float = 0.0,
) -> dict:
    """Eval-mode forward over the whole split with fresh rewiring from rng."""
    if len(graphs) == 0:
        raise ValidationError("cannot evaluate an empty split")
    model.eval()
    prediction_blocks, target_blocks = [], []
    with torch.no_grad():
        for start in range(0, len(graphs), batch_size):
            stop = start + batch_size
            batch = prepare_batch(
                graphs[start:stop],
                entries[start:stop],
                targets[start:stop],
                rewire_cfg,
                rng,
                task=task,
            )
            out = model(batch)
            prediction_blocks.append(out.predictions)
            target_blocks.append(batch.targets)
    predictions = torch.cat(prediction_blocks, dim=0)
    target_tensor = torch.cat(target_blocks, dim=0)
    return {
        "loss": float(compute_loss(predictions, target_tensor, task, smoothing)),
        "metric": compute_metric(predictions, target_tensor, task),
        "predictions": predictions.detach().cpu().numpy(),
        "targets": target_tensor.detach().cpu().numpy(),
    }


def analytic_gradients(loss_fn, params: dict) -> dict:
    """Reverse-mode gradients of loss_fn() with respect to each block."""
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    out = {}
    for name, p in params.items():
        if p.grad is None:
            out[name] = np.zeros(tuple(p.shape), dtype=np.float64)
        else:
            out[name] = p.grad.detach().cpu().numpy().astype(np.float64).copy()
        p.grad = None
    return out


def finite_difference_gradients(loss_fn, params: dict, eps: float = 1e-5) -> dict:
    """Independent oracle: elementwise central differences of loss_fn().

    Mutates each parameter in place by +/-eps, re-evaluates, and restores
    the original value exactly. loss_fn must be a deterministic function
    of the parameter values.
    """
    out = {}
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            grad = np.zeros(flat.numel(), dtype=np.float64)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + eps
                up = float(loss_fn())
                flat[i] = original - eps
                down = float(loss_fn())
                flat[i] = original
                grad[i] = (up - down) / (2.0 * eps)
            out[name] = grad.reshape(tuple(p.shape))
    return out


# Relative-error denominator floor. Gradients below this scale are compared
# near-absolutely: central differences on a double-precision loss carry
# roundoff around |loss| * 1e-16 / (2 eps), so demanding a 1e-4 relative match
# on a 1e-6-sized gradient would fail on oracle noise, not on analytic bugs.
GRAD_SCALE_FLOOR = 1e-3


def gradient_report(analytic: dict, numeric: dict) -> dict:
    """Max relative error per block: |a - f| / max(|a|, |f|, floor)."""
    if set(analytic) != set(numeric):
        raise ValidationError("gradient reports cover different parameter blocks")
    report = {}
    for name in analytic:
        a = np.asarray(analytic[name], dtype=np.float64)
        f = np.asarray(numeric[name], dtype=np.float64)
        if a.size == 0:
            report[name] = 0.0
            continue
        scale = np.maximum(np.maximum(np.abs(a), np.abs(f)), GRAD_SCALE_FLOOR)
        report[name] = float((np.abs(a - f) / scale).max())
    return report


def grad_check(
    loss_fn, params: dict, tolerance: float = 1e-4, eps: float = 1e-6
) -> dict:
    """Compare autograd against the finite-difference oracle."""
    blocks = gradient_report(
        analytic_gradients(loss_fn, params),
        finite_difference_gradients(loss_fn, params, eps),
    )
    max_rel = max(blocks.values()) if blocks else 0.0
    return {
        "blocks": blocks,
        "max_rel_error": max_rel,
        "passed": max_rel < tolerance,
    }


def _write_row(writer, handle, epoch, split, loss, metric, lr, wallclock) -> None:
    writer.writerow(
        [epoch, split, repr(float(loss)), repr(float(metric)), repr(float(lr)),
         f"{wallclock:.3f}"]
    )
    handle.flush()


def train_loop(
    rc: RunConfig,
    dataset: GraphDataset,
    entries,
    out_dir,
    seed: int,
    dataset_hash: str = "",
    cache_hash: str = "",
) -> dict:
    """Run the full optimization loop and emit artifacts under out_dir.

    Artifacts: metrics.csv (per-epoch rows for train and, when held out,
    val), checkpoint.grss (best by validation metric, falling back to the
    train metric when no split is held out), and one appended line in
    manifests.jsonl.
    """
    apply_determinism()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started_at = datetime.now(timezone.utc).isoformat()
    clock_start = time.perf_counter()

    graphs = list(dataset.graphs)
    targets = list(dataset.targets)
    entries = list(entries)
    if not graphs:
        raise ValidationError("training dataset is empty")
    if len(entries) != len(graphs):
        raise ValidationError("cache entries do not align with the dataset")

    t = rc.train
    max_out, max_in = dataset_degree_extremes(entries)
    mc = build_model_config(
        rc,
        node_in_dim=graphs[0].node_features.shape[1],
        edge_in_dim=graphs[0].edge_features.shape[1],
        max_out=max_out,
        max_in=max_in,
    )
    model = GrassModel(mc)
    init_params(model, derive_torch_generator(seed, ROLE_INIT))

    order = derive_rng(seed, ROLE_SHUFFLE).permutation(len(graphs))
    num_val = min(int(round(t.val_fraction * len(graphs))), len(graphs) - 1)
    val_idx = order[:num_val]
    train_idx = order[num_val:]
    selection_split = "val" if num_val else "train"

    steps_per_epoch = math.ceil(len(train_idx) / t.batch_size)
    total_steps = t.epochs * steps_per_epoch
    schedule = (
        ScheduleConfig(total_steps, t.warmup_ratio, t.lr_init, t.lr_peak, t.lr_final)
        if total_steps
        else None
    )
    optimizer = Lion(
        build_param_groups(model, t.weight_decay),
        lr=t.lr_init,
        betas=(t.beta1, t.beta2),
    )
    rewire_cfg = RewireConfig(r=rc.rewire_r, retry_until_simple=rc.retry_until_simple)

    checkpoint_echo = {
        "run": config_echo(rc),
        "model_config": dataclasses.asdict(mc),
        "seed": seed,
        "code_version": __version__,
    }
    checkpoint_path = out_dir / "checkpoint.grss"
    metrics_path = out_dir / "metrics.csv"
    save_checkpoint(checkpoint_path, checkpoint_echo, model)

    def split_eval(indices, rng):
        return evaluate(
            model,
            [graphs[i] for i in indices],
            [entries[i] for i in indices],
            [targets[i] for i in indices],
            rewire_cfg,
            t.batch_size,
            rng,
            rc.task,
            t.label_smoothing,
        )

    best_metric: float | None = None
    best_epoch = 0
    global_step = 0
    last_lr = t.lr_init
    history = []
    with open(metrics_path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(METRIC_COLUMNS)
        handle.flush()
        for epoch in range(1, t.epochs + 1):
            epoch_order = train_idx[
                derive_rng(seed, ROLE_SHUFFLE, epoch).permutation(len(train_idx))
            ]
            model.train()
            for b, start in enumerate(range(0, len(epoch_order), t.batch_size)):
                idx = epoch_order[start : start + t.batch_size]
                batch = prepare_batch(
                    [graphs[i] for i in idx],
                    [entries[i] for i in idx],
                    [targets[i] for i in idx],
                    rewire_cfg,
                    derive_rng(seed, ROLE_REWIRE, _REWIRE_TRAIN, epoch, b),
                    task=rc.task,
                )
                generator = derive_torch_generator(seed, ROLE_DROPKEY, epoch, b)
                out = model(batch, generator=generator)
                loss = compute_loss(
                    out.predictions, batch.targets, rc.task, t.label_smoothing
                )
                optimizer.zero_grad()
                loss.backward()
                last_lr = lr_at(global_step, schedule)
                for group in optimizer.param_groups:
                    group["lr"] = last_lr
                optimizer.step()
                global_step += 1

            wallclock = time.perf_counter() - clock_start
            train_stats = split_eval(
                train_idx, derive_rng(seed, ROLE_REWIRE, _REWIRE_EVAL, epoch, 0)
            )
            _write_row(
                writer, handle, epoch, "train",
                train_stats["loss"], train_stats["metric"], last_lr, wallclock,
            )
            epoch_record = {"epoch": epoch, "train": train_stats}
            if num_val:
                val_stats = split_eval(
                    val_idx, derive_rng(seed, ROLE_REWIRE, _REWIRE_EVAL, epoch, 1)
                )
                _write_row(
                    writer, handle, epoch, "val",
                    val_stats["loss"], val_stats["metric"], last_lr, wallclock,
                )
                epoch_record["val"] = val_stats
            history.append(epoch_record)

            selected = epoch_record[selection_split]["metric"]
            if metric_improves(rc.task, selected, best_metric):
                best_metric = selected
                best_epoch = epoch
                save_checkpoint(checkpoint_path, checkpoint_echo, model)

    finished_at = datetime.now(timezone.utc).isoformat()
    manifest = {
        "command": "train",
        "config": config_echo(rc),
        "dataset_hash": dataset_hash,
        "cache_hash": cache_hash,
        "seed": seed,
        "code_version": __version__,
        "started_at": started_at,
        "finished_at": finished_at,
        "num_graphs": len(graphs),
        "num_train": len(train_idx),
        "num_val": num_val,
        "parameters": count_parameters(model),
        "best_epoch": best_epoch,
        "best_metric": best_metric,
        "selection_split": selection_split,
    }
    with open(out_dir / "manifests.jsonl", "a", encoding="utf-8") as handle:
        handle.write(json.dumps(manifest, sort_keys=True) + "\n")

    return {
        "model": model,
        "model_config": mc,
        "best_epoch": best_epoch,
        "best_metric": best_metric,
        "selection_split": selection_split,
        "history": history,
        "train_indices": train_idx,
        "val_indices": val_idx,
        "metrics_path": metrics_path,
        "checkpoint_path": checkpoint_path,
        "manifest": manifest,
    }

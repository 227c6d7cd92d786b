"""Optimization loop, checkpoints, evaluation and ablation runs."""

import io
import os
import json
import pickle
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple
import numpy as np
import torch
from torch.utils.data import Dataset
from .data import ScenePair, pad_to, resample_to
from .io import (
    ConfigBundle,
    DataError,
    Logger,
    ModelConfig,
    NumericalError,
    with_overrides,
)
from .losses import LossTerms, compute_losses
from .metrics import MetricReport, compute_metrics, merge_reports
from .network import FlowNet
from .utils import atomic_path, get_dtype, seed_everything, to_numpy

METRICS_LOG = "metrics.jsonl"
BEST_CHECKPOINT = "best.pt"
LAST_CHECKPOINT = "last.pt"

VARIANTS = {
    "full": {},
    "gf_off": {"model.use_gf": False},
    "str_off": {"model.use_str_spatial": False, "model.use_str_temporal": False},
    "da_off": {"loss.use_lfc": False, "loss.use_cfs": False},
    "maxpool": {"model.w_aggregation": "maxpool"},
}


@dataclass
class Checkpoint:
    """Parameters, optimizer state and bookkeeping of a training run."""

    params: Dict[str, torch.Tensor]
    config: dict
    fingerprint: str
    epoch: int = 0
    optimizer: Optional[dict] = None
    scheduler: Optional[dict] = None
    history: List[dict] = field(default_factory=list)

    @property
    def bundle(self) -> ConfigBundle:
        return ConfigBundle.from_dict(self.config)

    def save(self, path: str) -> None:
        """Write the checkpoint as a single archive, atomically.

        The archive is serialized in memory first, so its bytes do not depend
        on the temporary file name.
        """
        record = {
            "params": self.params,
            "config": self.config,
            "fingerprint": self.fingerprint,
            "epoch": self.epoch,
            "optimizer": self.optimizer,
            "scheduler": self.scheduler,
            "history": self.history,
        }
        buffer = io.BytesIO()
        torch.save(record, buffer)
        with atomic_path(path) as tmp:
            with open(tmp, "wb") as f:
                f.write(buffer.getvalue())

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        """Read a checkpoint written by :meth:`save`.

        Raises:
            FileNotFoundError: If the file does not exist.
            DataError: If the file is not a checkpoint.
        """
        if not os.path.exists(path):
            raise FileNotFoundError(f"Checkpoint {path} does not exist")
        try:
            record = torch.load(path, map_location="cpu", weights_only=True)
            return cls(**record)
        except (
            RuntimeError,
            TypeError,
            KeyError,
            EOFError,
            pickle.UnpicklingError,
        ) as err:
            raise DataError(f"{path} is not a valid checkpoint: {err}") from err


@dataclass
class Evaluation:
    """Pooled report, per-scene reports and the zero-flow baseline."""

    report: MetricReport
    scenes: List[Tuple[str, MetricReport]]
    baseline: MetricReport


def build_model(config: ModelConfig, precision: str = "single") -> FlowNet:
    """Create the network in the requested precision."""
    return FlowNet(config).to(get_dtype(precision))


def load_model(checkpoint: Checkpoint) -> Tuple[FlowNet, ConfigBundle]:
    """Rebuild the network of a checkpoint and load its parameters.

    Raises:
        DataError: If the stored parameters do not fit the stored configuration.
    """
    bundle = checkpoint.bundle
    model = build_model(bundle.model, bundle.train.precision)
    try:
        model.load_state_dict(checkpoint.params)
    except RuntimeError as err:
        raise DataError(
            f"checkpoint parameters do not match its configuration: {err}"
        ) from err
    model.eval()
    return model, bundle


def sample_seed(*keys: int) -> int:
    """Derive an independent 32-bit seed from a tuple of integers."""
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


def prepare_pair(pair: ScenePair, n_points: int, seed: int) -> ScenePair:
    """Resample both frames to ``n_points`` (with replacement if too small)."""
    with_replacement = min(pair.n_source, pair.n_target) < n_points
    return resample_to(pair, n_points, seed, replace=with_replacement)


def pair_losses(
    model: FlowNet, pair: ScenePair, bundle: ConfigBundle, dtype: torch.dtype
) -> LossTerms:
    """Forward one (already resampled) pair and evaluate the losses."""
    pos1, pos2, flow, mask = pair.to_tensors(dtype)
    output = model(pos1, pos2)
    if pair.mask is None:
        mask = None
    return compute_losses(output, flow, bundle.loss, mask)


@torch.no_grad()
def predict_flow(model: FlowNet, pair: ScenePair) -> np.ndarray:
    """Full resolution flow prediction for a pair, as float32 [N, 3]."""
    dtype = next(model.parameters()).dtype
    pos1, pos2, _, _ = pair.to_tensors(dtype)
    model.eval()
    return to_numpy(model(pos1, pos2).flow).astype(np.float32)


def infer_flow(
    model: FlowNet, pair: ScenePair, n_points: int, seed: int = 0
) -> np.ndarray:
    """Flow of every source point of a pair of arbitrary frame sizes.

    Frames with fewer than ``n_points`` points (e.g. an occluded target)
    are padded with duplicates before the forward pass; the prediction of
    the padding rows is dropped.

    Args:
        model (FlowNet): The network.
        pair (ScenePair): The scene pair, at its original resolution.
        n_points (int): Finest pyramid size of the network.
        seed (int): Seed of the padding draw.

    Returns:
        np.ndarray: Flow [pair.n_source, 3] as float32.
    """
    padded = pad_to(pair, n_points, seed)
    return predict_flow(model, padded)[: pair.n_source]


def evaluate_flows(
    pairs: Sequence[ScenePair], flows: Sequence[np.ndarray], names: Sequence[str]
) -> Evaluation:
    """Metrics of given flow predictions, with the zero-flow baseline."""
    scenes, baselines = [], []
    for name, pair, pred in zip(names, pairs, flows):
        scenes.append(
            (
                name,
                compute_metrics(
                    pred, pair.flow, pair.mask, pair.intrinsics, positions=pair.pos1
                ),
            )
        )
        baselines.append(
            compute_metrics(
                np.zeros_like(pair.flow),
                pair.flow,
                pair.mask,
                pair.intrinsics,
                positions=pair.pos1,
            )
        )
    return Evaluation(
        report=merge_reports([r for _, r in scenes]),
        scenes=scenes,
        baseline=merge_reports(baselines),
    )


def evaluate_model(
    model: FlowNet, dataset: Dataset, n_points: int, seed: int = 0
) -> Evaluation:
    """Deterministic evaluation of a model on every scene of a dataset.

    Each scene is resampled to ``n_points`` with a seed derived from ``seed``
    and the scene index, so repeated evaluations see the same points.
    """
    pairs, flows, names = [], [], []
    for index in range(len(dataset)):
        pair = prepare_pair(dataset[index], n_points, sample_seed(seed, index))
        pairs.append(pair)
        flows.append(predict_flow(model, pair))
        if hasattr(dataset, "name"):
            names.append(dataset.name(index))
        else:
            names.append(f"scene_{index:06d}")
    return evaluate_flows(pairs, flows, names)


def evaluate(checkpoint: Checkpoint, dataset: Dataset, seed: int = 0) -> Evaluation:
    """Evaluate a checkpoint on a dataset.

    Args:
        checkpoint (Checkpoint): The trained model.
        dataset (Dataset): Scene pairs.
        seed (int): Resampling seed.

    Returns:
        Evaluation: Pooled and per-scene reports plus the zero-flow baseline.
    """
    model, bundle = load_model(checkpoint)
    return evaluate_model(model, dataset, bundle.model.level_sizes[0], seed)


def _dump_nonfinite(
    out_dir: str, epoch: int, batch: int, scenes: List[int], terms: dict
) -> str:
    path = os.path.join(out_dir, "nonfinite_batch.json")
    with atomic_path(path) as tmp:
        with open(tmp, "w") as f:
            record = {"epoch": epoch, "batch": batch, "scenes": scenes, "terms": terms}
            json.dump(record, f)
    return path


def _append_record(path: str, record: dict) -> None:
    with open(path, "a") as f:
        f.write(json.dumps(record) + "\n")


def train(
    bundle: ConfigBundle,
    train_set: Dataset,
    val_set: Dataset,
    out_dir: str,
    resume: Optional[str] = None,
) -> Checkpoint:
    """Train a model and keep the checkpoint with the best validation EPE3D.

    Every epoch appends one JSON line to ``metrics.jsonl`` in ``out_dir`` and
    rewrites ``last.pt``; ``best.pt`` holds the best validation epoch.

    Args:
        bundle (ConfigBundle): Model, loss and training configuration.
        train_set (Dataset): Training scene pairs.
        val_set (Dataset): Validation scene pairs.
        out_dir (str): Output directory.
        resume (str, optional): Checkpoint to continue from.

    Raises:
        DataError: If the resumed checkpoint has another configuration.
        NumericalError: If a batch loss is not finite.

    Returns:
        Checkpoint: The best checkpoint (the initialization for zero epochs).
    """
    opts = bundle.train
    os.makedirs(out_dir, exist_ok=True)
    seed_everything(opts.seed)
    if opts.n_workers > 0:
        torch.set_num_threads(opts.n_workers)
    dtype = get_dtype(opts.precision)
    n_points = bundle.model.level_sizes[0]

    model = build_model(bundle.model, opts.precision)
    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=opts.learning_rate,
        betas=(opts.beta1, opts.beta2),
        weight_decay=opts.weight_decay,
    )
    scheduler = torch.optim.lr_scheduler.StepLR(
        optimizer, step_size=opts.decay_every, gamma=opts.decay_factor
    )

    start_epoch, history = 0, []
    if resume:
        previous = Checkpoint.load(resume)
        if previous.fingerprint != bundle.fingerprint():
            raise DataError(
                f"{resume} was trained with configuration {previous.fingerprint}, "
                f"not {bundle.fingerprint()}"
            )
        model.load_state_dict(previous.params)
        if previous.optimizer:
            optimizer.load_state_dict(previous.optimizer)
        if previous.scheduler:
            scheduler.load_state_dict(previous.scheduler)
        start_epoch, history = previous.epoch, list(previous.history)
        Logger.logger.info(f"Resuming from {resume} at epoch {start_epoch}")

    def snapshot(epoch: int) -> Checkpoint:
        return Checkpoint(
            params={k: v.detach().clone() for k, v in model.state_dict().items()},
            config=bundle.as_dict(),
            fingerprint=bundle.fingerprint(),
            epoch=epoch,
            optimizer=optimizer.state_dict(),
            scheduler=scheduler.state_dict(),
            history=list(history),
        )

    scored = [h for h in history if h.get("val_epe3d") is not None]
    best_epe = min((h["val_epe3d"] for h in scored), default=np.inf)
    best_epoch = start_epoch
    if scored:
        best_epoch = min(scored, key=lambda h: h["val_epe3d"])["epoch"]
    best = snapshot(start_epoch)
    if resume:
        stored = os.path.join(os.path.dirname(os.path.abspath(resume)), BEST_CHECKPOINT)
        if os.path.exists(stored):
            previous_best = Checkpoint.load(stored)
            if previous_best.fingerprint == bundle.fingerprint():
                best = previous_best
                best_epoch = previous_best.epoch
        best.save(os.path.join(out_dir, BEST_CHECKPOINT))
    if start_epoch >= opts.epochs:
        Logger.logger.info("No epochs to run, writing the initial checkpoint")
        best.save(os.path.join(out_dir, BEST_CHECKPOINT))
        best.save(os.path.join(out_dir, LAST_CHECKPOINT))
        return best

    log_path = os.path.join(out_dir, METRICS_LOG)
    for epoch in range(start_epoch + 1, opts.epochs + 1):
        t0 = time.monotonic()
        model.train()
        generator = torch.Generator().manual_seed(sample_seed(opts.seed, epoch))
        order = torch.randperm(len(train_set), generator=generator).tolist()
        epoch_terms = []

        for batch, start in enumerate(range(0, len(order), opts.batch_size)):
            indices = order[start : start + opts.batch_size]
            optimizer.zero_grad()
            terms = [
                pair_losses(
                    model,
                    prepare_pair(
                        train_set[i], n_points, sample_seed(opts.seed, epoch, i)
                    ),
                    bundle,
                    dtype,
                )
                for i in indices
            ]
            loss = torch.stack([t.total for t in terms]).mean()
            if not torch.isfinite(loss):
                dump = _dump_nonfinite(
                    out_dir, epoch, batch, indices, [t.as_dict() for t in terms]
                )
                raise NumericalError(
                    f"Non-finite loss in epoch {epoch}, batch {batch} (details in {dump})"
                )
            loss.backward()
            if opts.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), opts.grad_clip)
            optimizer.step()
            epoch_terms.extend(t.as_dict() for t in terms)

        lr = optimizer.param_groups[0]["lr"]
        scheduler.step()
        evaluation = None
        if len(val_set):
            evaluation = evaluate_model(model, val_set, n_points, opts.seed)

        record = {"epoch": epoch, "lr": lr}
        for key in ("loss", "supervised", "lfc", "cfs"):
            record[f"train_{key}"] = float(np.mean([t[key] for t in epoch_terms]))
        record["val_epe3d"] = evaluation.report.epe3d if evaluation else None
        history.append(record)
        _append_record(log_path, record)
        Logger.logger.info(
            f"Epoch {epoch}: loss {record['train_loss']:.6f}, val EPE3D {record['val_epe3d']}"
        )
        Logger.logger.debug(f"Epoch {epoch} took {time.monotonic() - t0:.3f} s")

        current = snapshot(epoch)
        current.save(os.path.join(out_dir, LAST_CHECKPOINT))
        if evaluation is None or evaluation.report.epe3d < best_epe:
            best_epe = evaluation.report.epe3d if evaluation else best_epe
            best_epoch, best = epoch, current
            best.save(os.path.join(out_dir, BEST_CHECKPOINT))
        elif epoch - best_epoch >= opts.patience:
            Logger.logger.info(
                f"No validation improvement for {opts.patience} epochs, stopping at epoch {epoch}"
            )
            break

    best.history = list(history)
    return best


def fit_scene(
    pair: ScenePair, bundle: ConfigBundle, steps: int = 1000, seed: int = 0
) -> Tuple[FlowNet, List[float]]:
    """Fit a fresh network to a single scene pair.

    Only the supervised loss is optimized, with the per-level weights
    reversed so the finest level carries the largest one. The learning
    rate starts at ``bundle.train.learning_rate`` and halves every
    ``steps // 8`` steps; gradients are clipped as in :func:`train`.

    Args:
        pair (ScenePair): The scene; both frames need at least N_1 points.
        bundle (ConfigBundle): Model and optimizer settings.
        steps (int): Optimizer steps.
        seed (int): Initialization seed.

    Raises:
        NumericalError: If a step produces a non-finite loss.

    Returns:
        Tuple[FlowNet, List[float]]: The fitted network (in evaluation mode)
        and the loss before each step.
    """
    opts = bundle.train
    loss = replace(
        bundle.loss,
        deltas=tuple(reversed(bundle.loss.deltas)),
        lambdas=(1.0, 0.0, 0.0),
    )
    fitted = replace(bundle, loss=loss)
    dtype = get_dtype(opts.precision)

    seed_everything(seed)
    model = build_model(bundle.model, opts.precision)
    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=opts.learning_rate,
        betas=(opts.beta1, opts.beta2),
        weight_decay=0.0,
    )
    scheduler = torch.optim.lr_scheduler.StepLR(
        optimizer, step_size=max(steps // 8, 1), gamma=0.5
    )

    model.train()
    losses = []
    for step in range(steps):
        optimizer.zero_grad()
        terms = pair_losses(model, pair, fitted, dtype)
        if not torch.isfinite(terms.total):
            raise NumericalError(f"Non-finite loss at step {step}: {terms.as_dict()}")
        terms.total.backward()
        if opts.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), opts.grad_clip)
        optimizer.step()
        scheduler.step()
        losses.append(float(terms.total.detach()))
    model.eval()
    return model, losses


def parse_variant(name: str) -> Tuple[str, Dict[str, object]]:
    """Turn a variant name into its configuration overrides.

    ``name`` is either one of :data:`VARIANTS` or ``key=value`` pairs joined
    by ``+`` (e.g. ``threshold=0.9`` or ``loss.k=16+loss.radius=0.005``).

    Raises:
        DataError: If the name is unknown or an override does not apply.

    Returns:
        Tuple[str, Dict[str, object]]: The label and the overrides.
    """
    if name in VARIANTS:
        return name, dict(VARIANTS[name])
    if "=" not in name:
        raise DataError(
            f"Unknown variant '{name}', expected one of {sorted(VARIANTS)} or key=value"
        )

    overrides = {}
    for item in name.split("+"):
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise DataError(f"Invalid override '{item}' in variant '{name}'")
        overrides[key.strip()] = value.strip()
    try:
        with_overrides(ConfigBundle(), overrides)
    except ValueError as err:
        raise DataError(f"Variant '{name}' does not apply: {err}") from err
    return name, overrides


def ablate(
    bundle: ConfigBundle,
    variants: Sequence[str],
    seeds: Sequence[int],
    train_set: Dataset,
    val_set: Dataset,
    out_dir: str,
) -> Tuple[List[dict], List[dict]]:
    """Train and evaluate every variant under every seed.

    Args:
        bundle (ConfigBundle): The base configuration.
        variants (Sequence[str]): Variant names (see :func:`parse_variant`).
        seeds (Sequence[int]): Training seeds shared by all variants.
        train_set (Dataset): Training scene pairs.
        val_set (Dataset): Held-out scene pairs.
        out_dir (str): Output directory; one sub-directory per run.

    Returns:
        Tuple[List[dict], List[dict]]: One row per run and one summary row
        per variant with the median metrics over the seeds.
    """
    rows = []
    for name in variants:
        label, overrides = parse_variant(name)
        for seed in seeds:
            overrides_seeded = dict(overrides, **{"train.seed": seed})
            config = with_overrides(bundle, overrides_seeded)
            label_dir = label.replace("=", "-").replace("+", "_")
            run_dir = os.path.join(out_dir, label_dir, f"seed_{seed}")
            Logger.logger.info(f"Training variant {label} with seed {seed}")
            checkpoint = train(config, train_set, val_set, run_dir)
            evaluation = evaluate(checkpoint, val_set, seed=0)
            row = {"variant": label, "seed": seed}
            row.update(evaluation.report.as_dict())
            row["baseline_epe3d"] = evaluation.baseline.epe3d
            rows.append(row)

    summary = []
    for name in variants:
        label = parse_variant(name)[0]
        runs = [r for r in rows if r["variant"] == label]
        entry = {"variant": label, "runs": len(runs)}
        for key in ("epe3d", "as3d", "ar3d", "out3d", "baseline_epe3d"):
            entry[key] = float(np.median([r[key] for r in runs]))
        summary.append(entry)
    return rows, summary


def format_table(summary: Sequence[dict]) -> str:
    """Plain text comparison table of the ablation summary."""
    header = (
        f"{'variant':<24}{'EPE3D':>10}{'AS3D':>10}{'AR3D':>10}"
        f"{'Out3D':>10}{'zero EPE3D':>12}"
    )
    lines = [header, "-" * len(header)]
    for entry in summary:
        lines.append(
            f"{entry['variant']:<24}{entry['epe3d']:>10.4f}{entry['as3d']:>10.4f}"
            f"{entry['ar3d']:>10.4f}{entry['out3d']:>10.4f}{entry['baseline_epe3d']:>12.4f}"
        )
    return "\n".join(lines)

"""Main entry point for pyrflow.

Can be called from command line or from an external library given a list
of arguments.
"""

import os
import sys
import json
import time
import logging
from typing import List
from .io import (
    DataError,
    Logger,
    NumericalError,
    RunOptions,
    configure_runtime,
    write_config,
)
from .data import (
    MANIFEST,
    SceneDataset,
    ScenePair,
    generate_scenes,
    load_scene_pair,
    save_scene_pair,
    split_dataset,
)
from .metrics import search_grid
from .plot import plot_history, plot_scene_flow, plot_search_grid, read_history
from .train import (
    Checkpoint,
    ablate,
    evaluate,
    format_table,
    infer_flow,
    load_model,
    train,
)
from .utils import atomic_path

EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _write_text(path: str, text: str) -> None:
    with atomic_path(path) as tmp:
        with open(tmp, "w") as f:
            f.write(text)


def run_synth(opts: RunOptions) -> str:
    if os.path.exists(os.path.join(opts.out, MANIFEST)) and not opts.overwrite:
        raise FileExistsError(
            f"{opts.out} already holds generated scenes, use another --out or the -f option."
        )
    manifest = generate_scenes(
        opts.out, opts.scenes, opts.seed, opts.config.synth, opts.n_workers
    )
    return f"Generated {len(manifest['scenes'])} scenes in {opts.out}\n"


def run_train(opts: RunOptions) -> str:
    dataset = SceneDataset(opts.data_dir)
    if opts.val_dir:
        train_set, val_set = dataset, SceneDataset(opts.val_dir)
    else:
        train_set, val_set = split_dataset(
            dataset, opts.val_fraction, opts.config.train.seed
        )
    Logger.logger.info(
        f"Training on {len(train_set)} scenes, validating on {len(val_set)} scenes\n"
    )
    best = train(opts.config, train_set, val_set, opts.out, resume=opts.resume)
    epe = [h["val_epe3d"] for h in best.history if h["epoch"] == best.epoch]
    out_str = f"Best checkpoint at epoch {best.epoch}"
    if epe and epe[0] is not None:
        out_str += f" with validation EPE3D {epe[0]:.6f}"
    out_str += f"\nCheckpoints and metrics log written to {opts.out}\n"
    _write_text(os.path.join(opts.out, "summary.log"), str(opts) + out_str)
    return out_str


def run_eval(opts: RunOptions) -> str:
    checkpoint = Checkpoint.load(opts.ckpt)
    dataset = SceneDataset(opts.data_dir)
    evaluation = evaluate(checkpoint, dataset)

    if opts.out_format == "structured":
        lines = [evaluation.report.to_record(scope="pooled")]
        lines.append(evaluation.baseline.to_record(scope="zero_flow"))
        if opts.per_scene:
            lines += [
                r.to_record(scope="scene", scene=name) for name, r in evaluation.scenes
            ]
    else:
        lines = ["Pooled over all points:", evaluation.report.to_text(), ""]
        lines += ["Zero-flow baseline:", evaluation.baseline.to_text(), ""]
        if opts.per_scene:
            for name, report in evaluation.scenes:
                lines += [f"{name}:", report.to_text(), ""]
    text = "\n".join(lines) + "\n"

    print(text, end="")
    if opts.out:
        if os.path.exists(opts.out) and not opts.overwrite:
            raise FileExistsError(
                f"File {opts.out} already exists, specify a new filename with --out or use the -f option."
            )
        _write_text(opts.out, text)
    return f"Evaluated {len(dataset)} scenes, EPE3D {evaluation.report.epe3d:.6f}\n"


def run_infer(opts: RunOptions) -> str:
    model, bundle = load_model(Checkpoint.load(opts.ckpt))
    pair = load_scene_pair(opts.pair)
    try:
        pred = infer_flow(model, pair, bundle.model.level_sizes[0])
    except ValueError as err:
        raise DataError(f"{opts.pair}: {err}") from err
    extras = dict(pair.extras)
    extras["flow_gt"] = pair.flow
    result = ScenePair(
        pos1=pair.pos1,
        pos2=pair.pos2,
        flow=pred,
        mask=pair.mask,
        intrinsics=pair.intrinsics,
        extras=extras,
    )
    save_scene_pair(result, opts.out)
    return f"Predicted flow of {pair.n_source} points written to {opts.out}\n"


def run_ablate(opts: RunOptions) -> str:
    train_set, val_set = SceneDataset(opts.data_dir), SceneDataset(opts.val_dir)
    rows, summary = ablate(
        opts.config, opts.variants, opts.seeds, train_set, val_set, opts.out
    )
    _write_text(
        os.path.join(opts.out, "ablation.jsonl"),
        "".join(json.dumps(row) + "\n" for row in rows + summary),
    )
    table = format_table(summary)
    _write_text(os.path.join(opts.out, "ablation.txt"), table + "\n")
    return table + "\n"


def run_plot(opts: RunOptions) -> str:
    if opts.history:
        plot_history(read_history(opts.history), opts.out)
        return f"Training history plotted to {opts.out}\n"

    pair = load_scene_pair(opts.pair)
    pred = None
    if opts.pred:
        pred = load_scene_pair(opts.pred).flow
    red = plot_scene_flow(pair, opts.out, pred=pred, threshold=opts.threshold)
    return (
        f"Scene plotted to {opts.out} ({red} points with EPE3D > {opts.threshold:g})\n"
    )


def run_search(opts: RunOptions) -> str:
    dataset = SceneDataset(opts.data_dir)
    scenes = []
    for pair in dataset.pairs:
        valid = pair.valid_mask()
        scenes.append((pair.pos1[valid], pair.flow[valid]))
    grid = search_grid(scenes, opts.ks, opts.radii)

    for path in (opts.out + ".jsonl", opts.out + ".png"):
        if os.path.exists(path) and not opts.overwrite:
            raise FileExistsError(
                f"File {path} already exists, use another --out or the -f option."
            )
    _write_text(
        opts.out + ".jsonl", "".join(json.dumps(r.as_dict()) + "\n" for r in grid)
    )
    plot_search_grid(grid, opts.out + ".png")

    out_str = (
        f"{'K':>4}{'radius':>10}{'KNN diff':>12}{'radius diff':>13}"
        f"{'retained':>10}{'isolated':>10}\n"
    )
    for r in grid:
        out_str += (
            f"{r.k:>4}{r.radius:>10.4f}{r.knn_difference:>12.6f}{r.radius_difference:>13.6f}"
            f"{r.retained_fraction:>10.4f}{r.isolated_fraction:>10.4f}\n"
        )
    return out_str


def run_config(opts: RunOptions) -> str:
    write_config(opts.config, opts.out)
    return f"Configuration written to {opts.out}\n"


COMMANDS = {
    "synth": run_synth,
    "train": run_train,
    "eval": run_eval,
    "infer": run_infer,
    "ablate": run_ablate,
    "plot": run_plot,
    "search": run_search,
    "config": run_config,
}


def main(args: List[str] = None) -> int:
    """Main function that parses the arguments and runs one command.

    Args:
        args (List): List of command-line arguments. Defaults to None.

    Returns:
        int: The exit code: 0 on success, 3 for data and validation errors,
        4 for numerical failures. Usage errors exit with 2 from argparse.
    """
    global_start_time = time.monotonic()

    # parse command-line arguments
    if args is None:
        args = sys.argv[1:]

    try:
        opts = configure_runtime(args)
        if opts.verbose:
            Logger.logger.setLevel(logging.DEBUG)
        Logger.logger.info(str(opts))

        start_time = time.monotonic()
        out_str = COMMANDS[opts.command](opts)
        end_time = time.monotonic()
        if opts.verbose:
            Logger.logger.info(
                f"Time spent running {opts.command}: {end_time - start_time:.6f} s\n"
            )
    except NumericalError as err:
        Logger.logger.error(str(err))
        return EXIT_NUMERICAL
    except (DataError, FileNotFoundError, FileExistsError, ValueError) as err:
        Logger.logger.error(str(err))
        return EXIT_DATA

    Logger.logger.info(out_str)
    global_end_time = time.monotonic()
    Logger.logger.info(f"Total wall time: {global_end_time - global_start_time:.6f} s\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())

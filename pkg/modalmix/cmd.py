import argparse
import logging
import sys
from dataclasses import replace
from functools import partial
from multiprocessing.pool import ThreadPool
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pid import PidFile, PidFileError

from .checkpoints import LoadedModel, load, read_checkpoint, save
from .config import RunConfig, differing_keys, load_run_config, parse_config_text
from .core import ModalityPipeline, encode_video, lowres
from .images import save_grids
from .metrics import (
    MetricReport,
    RunLog,
    aggregate,
    composite_score,
    evaluate_sample,
    format_table,
    psnr,
    seg_miou,
)
from .model import init_parameters, parameter_budget
from .roles import Task, TaskKind, assign_roles, parse_task
from .sampling import ModelDenoiser
from .scenes import MultiModalVideo, render, sample_scene, tokenize, verify_video
from .stores import DatasetStore, read_sample, write_sample
from .training import Trainer

_APP_NAME = "modalmix"
_APP_ARGV0 = __package__
_TRAIN_PID_NAME = "modalmix-train.pid"

EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

# (label, overrides) of the ablation variants, full model first.
ABLATIONS: Tuple[Tuple[str, Dict[str, bool]], ...] = (
    ("full", {}),
    ("no_embedding", {"use_modality_embedding": False}),
    ("no_amcs", {"use_amcs": False}),
    ("no_msph", {"use_msph": False}),
)

logger = logging.getLogger(__name__)


def _generate(seed: int, config: RunConfig) -> MultiModalVideo:
    spec = sample_scene(seed, config.dataset_config())
    video = render(spec)
    problems = verify_video(video, spec)
    if problems:
        raise RuntimeError(f"scene {seed} failed the consistency re-check: {problems[:3]}")
    return video.quantized()


def generate_dataset(config: RunConfig, root: Path, n: int, seed: int) -> DatasetStore:
    seeds = list(range(seed, seed + n))
    # map() keeps seed order, so the written bytes do not depend on the worker count.
    with ThreadPool(config.workers) as pool:
        videos = pool.map(partial(_generate, config=config), seeds)
    store = DatasetStore(root)
    store.write(videos, seeds)
    return store


def cmd_gen_data(args: argparse.Namespace, config: RunConfig):
    if args.out:
        generate_dataset(config, Path(args.out), args.n or config.n_train, config.seed)
        return
    generate_dataset(config, config.path("dataset"), args.n or config.n_train, config.seed)
    generate_dataset(config, config.path("eval_dataset"), config.n_eval, config.eval_seed)


def _open_dataset(config: RunConfig, split: str) -> List[MultiModalVideo]:
    store = DatasetStore(config.path("dataset" if split == "train" else "eval_dataset"))
    videos = list(store)
    if not videos:
        raise ValueError(f"dataset split '{split}' at {store.root} is empty")
    dims = config.dataset_config()
    expected = (dims.frames, dims.height, dims.width)
    if videos[0].dims != expected:
        raise ValueError(f"dataset dims {videos[0].dims} differ from configured {expected}")
    return videos


def train_model(
    config: RunConfig,
    videos: Sequence[MultiModalVideo],
    checkpoint: Path,
    resume: bool = False,
    steps: Optional[int] = None,
    progress: bool = True,
) -> LoadedModel:
    """Trains (or resumes) a model, logging to train.log and checkpointing as it goes."""
    codec = config.codec_config()
    examples = [encode_video(v, codec, config.edges_slot, config.sr_factor) for v in videos]
    if resume:
        loaded = load(checkpoint, requested=config.model_config())
        model, start = loaded.model, loaded.step
        logger.info(f"Resuming from {checkpoint} at step {start}")
    else:
        model, start = init_parameters(config.model_config(), config.seed), 0

    total = config.steps if steps is None else steps
    train_config = config.train_config(steps=total)
    trainer = Trainer(model, train_config, start_step=start)
    log = RunLog(Path(config.workdir) / "train.log")

    def on_step(result):
        log.append(result.log_line())
        if result.step % train_config.checkpoint_every == 0:
            save(model, checkpoint, config, result.step)

    trainer.fit(examples, max(0, total - start), on_step=on_step, progress=progress)
    save(model, checkpoint, config, trainer.step)
    return LoadedModel(model, config, trainer.step)


def cmd_train(args: argparse.Namespace, config: RunConfig):
    workdir = Path(config.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    with PidFile(piddir=workdir, pidname=_TRAIN_PID_NAME):
        videos = _open_dataset(config, "train")
        train_model(config, videos, config.path("checkpoint"), resume=args.resume)


def _pipeline(loaded: LoadedModel, config: RunConfig) -> ModalityPipeline:
    stored = loaded.config
    return ModalityPipeline(
        ModelDenoiser(loaded.model),
        stored.codec_config(),
        config.sampler_config(),
        edges_slot=stored.edges_slot,
        sr_factor=stored.sr_factor,
    )


def _load_source(
    config: RunConfig, source: Optional[str], split: str
) -> Optional[MultiModalVideo]:
    if source is None:
        return None
    if source.isdigit():
        return _open_dataset(config, split)[int(source)]
    return read_sample(source)


def _write_outputs(video: MultiModalVideo, directory: Path, stem: str) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{stem}.ommv"
    write_sample(video, path)
    save_grids(video, directory, stem)
    logger.info(f"Wrote {path} and PNG grids")
    return path


def _dims(config: RunConfig) -> Tuple[int, int, int]:
    return config.frames, config.height, config.width


def cmd_sample(args: argparse.Namespace, config: RunConfig):
    task = parse_task(args.task)
    roles = assign_roles(task)
    source = _load_source(config, args.source, args.split)
    if roles.conditioning and source is None:
        raise ValueError(f"task {task.value} needs --source")
    caption = tokenize(args.caption) if args.caption is not None else None
    if not roles.conditioning:
        if caption is None and source is not None:
            caption = source.caption_tokens
        source = None

    loaded = load(config.path("checkpoint"))
    rng = np.random.default_rng(config.seed)
    video = _pipeline(loaded, config).run(task, caption, source, rng, _dims(config))
    _write_outputs(video, config.path("output"), args.name or task.value.replace("+", "_"))


def evaluate(
    loaded: LoadedModel, config: RunConfig, task: Task, videos: Sequence[MultiModalVideo]
) -> MetricReport:
    """Samples `task` for every video in parallel and scores it against the video itself."""
    pipeline = _pipeline(loaded, config)
    roles = assign_roles(task)

    def one(index: int) -> Dict[str, float]:
        gt = videos[index]
        source = gt if roles.conditioning else None
        rng = np.random.default_rng([config.seed, index])
        pred = pipeline.run(task, gt.caption_tokens, source, rng, _dims(config))
        return evaluate_sample(pred, gt, roles.generation)

    with ThreadPool(config.workers) as pool:
        scores = pool.map(one, range(len(videos)))
    return aggregate(scores)


def cmd_eval(args: argparse.Namespace, config: RunConfig):
    task = parse_task(args.task)
    videos = _open_dataset(config, args.split)
    loaded = load(config.path("checkpoint"))
    report = evaluate(loaded, config, task, videos)
    for problem in report.check():
        logger.warning(f"Metric out of range: {problem}")
    RunLog(Path(config.workdir) / "metrics.log").append(
        report.to_record(task=task.value, split=args.split, checkpoint=config.checkpoint)
    )
    print(format_table({task.value: report}))


def cmd_ablate(args: argparse.Namespace, config: RunConfig):
    videos = _open_dataset(config, "train")
    held_out = _open_dataset(config, args.split)
    rows: Dict[str, MetricReport] = {}
    for label, overrides in ABLATIONS:
        variant = config.with_overrides(**overrides)
        checkpoint = Path(config.workdir) / f"ablate_{label}.ovdf"
        logger.info(f"Training variant {label}")
        loaded = train_model(variant, videos, checkpoint, progress=not args.quiet)

        stored = parse_config_text(read_checkpoint(checkpoint).config_text)
        unexpected = set(differing_keys(stored, config)) - set(overrides)
        if unexpected or any(getattr(stored, k) != v for k, v in overrides.items()):
            raise RuntimeError(f"checkpoint {checkpoint} does not record variant {label}")

        understanding = evaluate(loaded, variant, TaskKind.COND_RGB, held_out)
        generation = evaluate(loaded, variant, TaskKind.COND_DEPTH, held_out)
        rows[label] = replace(understanding, psnr=generation.psnr)
        logger.info(f"Variant {label}: composite {composite_score(rows[label]):.4f}")

    log = RunLog(Path(config.workdir) / "metrics.log")
    for label, report in rows.items():
        log.append(report.to_record(variant=label, split=args.split))
    print(format_table(rows))


def cmd_v2v_style(args: argparse.Namespace, config: RunConfig):
    source = _load_source(config, args.source, args.split)
    if source is None:
        raise ValueError("v2v-style needs --source")
    caption = tokenize(args.caption)
    loaded = load(config.path("checkpoint"))
    pipeline = _pipeline(loaded, config)
    output = config.path("output")

    rng = np.random.default_rng(config.seed)
    understood = pipeline.run(TaskKind.COND_RGB, source.caption_tokens, source, rng, _dims(config))
    _write_outputs(understood, output, "v2v_understanding")

    depth = understood.depth if args.depth_source == "predicted" else source.depth
    guide = replace(source, depth=depth)
    styled = pipeline.run(TaskKind.COND_DEPTH, caption, guide, rng, _dims(config))
    _write_outputs(styled, output, "v2v_styled")
    logger.info(
        f"Silhouette IoU vs source: {seg_miou(styled.seg, source.seg):.4f}, "
        f"rgb PSNR vs source: {psnr(styled.rgb, source.rgb):.2f} dB"
    )


def cmd_adapt_sr(args: argparse.Namespace, config: RunConfig):
    base_path = config.path("checkpoint")
    out_path = Path(args.out) if args.out else base_path.with_name(base_path.stem + "_sr.ovdf")
    if out_path.resolve() == base_path.resolve():
        raise ValueError("adapt-sr must not overwrite its base checkpoint")

    base = load(base_path)
    sr_config = replace(
        base.config, edges_slot="lowres_rgb", sr_factor=config.sr_factor, workdir=config.workdir
    )
    videos = _open_dataset(config, "train")
    codec = sr_config.codec_config()
    examples = [encode_video(v, codec, "lowres_rgb", sr_config.sr_factor) for v in videos]
    trainer = Trainer(base.model, sr_config.train_config(steps=config.adapt_steps))
    trainer.fit(examples, config.adapt_steps, progress=not args.quiet)
    save(base.model, out_path, sr_config, trainer.step)

    held_out = _open_dataset(config, args.split)
    adapted = LoadedModel(base.model, sr_config, trainer.step)
    report = evaluate(adapted, config, TaskKind.COND_EDGES, held_out)
    baseline = float(
        np.mean([psnr(lowres(v.rgb, sr_config.sr_factor), v.rgb) for v in held_out])
    )
    logger.info(f"Super-resolution PSNR {report.psnr:.2f} dB vs bicubic {baseline:.2f} dB")
    print(f"sr_psnr={report.psnr:.4f} bicubic_psnr={baseline:.4f}")


def cmd_debug_info(args: argparse.Namespace, config: RunConfig):
    print(f"Work directory: {config.workdir}")
    for key in ("dataset", "eval_dataset", "checkpoint", "output"):
        print(f"{key}: {config.path(key)}")
    print()
    print("Effective config:")
    print(config.to_text())
    budget = parameter_budget(config.model_config())
    print("Parameter budget:")
    for name, count in budget.items():
        print(f"  {name}: {count}")
    overhead = budget["heads"] + budget["role_embeddings"]
    print(f"  added over a single-modality model: {overhead} (heads + role embeddings)")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        _APP_ARGV0, formatter_class=argparse.ArgumentDefaultsHelpFormatter
    )
    parser.add_argument("--debug", help="enable debug logging", action="store_true")
    parser.add_argument("--config", help="path of a key = value config file")
    parser.add_argument(
        "--set",
        dest="overrides",
        metavar="KEY=VALUE",
        action="append",
        default=[],
        help="override one config key (repeatable, later wins)",
    )

    subparsers = parser.add_subparsers(
        title="subcommands",
        metavar="{gen-data,train,sample,eval,ablate,v2v-style,adapt-sr,debug-info}",
    )
    subparsers.required = True

    parser_gen = subparsers.add_parser("gen-data", help="render the train and eval datasets")
    parser_gen.set_defaults(func=cmd_gen_data)
    parser_gen.add_argument("--n", type=int, help="number of samples (default: n_train)")
    parser_gen.add_argument("--out", help="write a single dataset to this directory")

    parser_train = subparsers.add_parser("train", help="train the model on the train split")
    parser_train.set_defaults(func=cmd_train)
    parser_train.add_argument(
        "--resume", action="store_true", help="continue from the configured checkpoint"
    )

    task_help = "t2v, rgb, depth, seg, edges, or '+'-joined conditioning modalities"
    parser_sample = subparsers.add_parser("sample", help="sample one task and write outputs")
    parser_sample.set_defaults(func=cmd_sample)
    parser_sample.add_argument("--task", required=True, help=task_help)
    parser_sample.add_argument("--source", help="dataset sample index or OMMV file")
    parser_sample.add_argument("--caption", help="caption text from the closed vocabulary")
    parser_sample.add_argument("--name", help="output file stem (default: the task)")

    parser_eval = subparsers.add_parser("eval", help="score one task against ground truth")
    parser_eval.set_defaults(func=cmd_eval)
    parser_eval.add_argument("--task", required=True, help=task_help)

    parser_ablate = subparsers.add_parser("ablate", help="train and compare ablated variants")
    parser_ablate.set_defaults(func=cmd_ablate)
    parser_ablate.add_argument("--quiet", action="store_true", help="hide progress bars")

    parser_v2v = subparsers.add_parser("v2v-style", help="restyle a video through its depth")
    parser_v2v.set_defaults(func=cmd_v2v_style)
    parser_v2v.add_argument("--source", required=True, help="dataset sample index or OMMV file")
    parser_v2v.add_argument("--caption", required=True, help="caption of the new style")
    parser_v2v.add_argument(
        "--depth-source",
        choices=("predicted", "gt"),
        default="predicted",
        help="depth used to guide the restyled video",
    )

    parser_sr = subparsers.add_parser("adapt-sr", help="repurpose the edges slot for SR")
    parser_sr.set_defaults(func=cmd_adapt_sr)
    parser_sr.add_argument("--out", help="adapted checkpoint path (default: <base>_sr.ovdf)")
    parser_sr.add_argument("--quiet", action="store_true", help="hide progress bars")

    for sub in (parser_sample, parser_eval, parser_ablate, parser_v2v, parser_sr):
        sub.add_argument("--split", choices=("train", "eval"), default="eval")

    parser_debug_info = subparsers.add_parser("debug-info")
    parser_debug_info.set_defaults(func=cmd_debug_info)

    return parser


def _configure_logging(debug: bool):
    if debug:
        log_level = logging.DEBUG
        log_format = (
            "%(asctime)s - %(threadName)s - %(name)s - %(funcName)s - %(levelname)s - %(message)s"
        )
        log_datefmt = None  # Use the default.
    else:
        log_level = logging.INFO
        log_format = "%(asctime)s - %(levelname)s - %(message)s"
        log_datefmt = "%Y-%m-%d %H:%M:%S"  # No milliseconds.

        # Disable logging from third-party packages.
        logger_name: str
        logger_inst: logging.Logger
        for logger_name, logger_inst in logging.root.manager.loggerDict.items():  # type: ignore
            if isinstance(logger_inst, logging.PlaceHolder):
                continue
            if not logger_name.startswith(__package__):
                logger_inst.addHandler(logging.NullHandler())
                logger_inst.propagate = False

    logging.basicConfig(level=log_level, format=log_format, datefmt=log_datefmt)


def _main(argv: Optional[Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    _configure_logging(args.debug)

    try:
        config = load_run_config(args.config, args.overrides)
        args.func(args, config)
    except PidFileError:
        logger.error(
            f"Another {_APP_NAME} trainer is already using this work directory.\n"
            f"Please wait for it to finish or pick another workdir."
        )
        return EXIT_RUNTIME
    except ValueError as e:
        logger.error(f"{e}")
        return EXIT_VALIDATION
    except (RuntimeError, OSError) as e:
        logger.error(f"{e}")
        return EXIT_RUNTIME
    return 0


def main():
    try:
        sys.exit(_main())
    except KeyboardInterrupt:
        logger.info("Bye")
        sys.exit(0)

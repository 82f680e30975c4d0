"""
Command-line pipeline: generate demonstrations, train a teacher, distill it into a one-step
generator, sample, evaluate, benchmark and run the initialization ablation.

Every command resolves a :class:`RunConfig` (defaults, ``--config`` file, then dotted
``--section.field value`` overrides) before any compute and snapshots it into the run
directory.
"""

import argparse
import dataclasses
import json
import logging
import os
import pathlib
import sys
import typing

import numpy as np
import pandas as pd

from . import sdm_errors as errors
from .config import RunConfig, parse_config
from .diffusion import NoiseSchedule, ddpm_sample, load_denoiser, save_denoiser, stack_demonstrations, train_teacher
from .evaluation import (
    MetricsReport,
    bench_latency,
    episode_outcomes,
    evaluate_generator,
    generator_policy,
    summarize_success,
    teacher_policy,
    top_k_mean,
)
from .files import atomic_write_text
from .ndnum import Rng
from .sdm import GENERATOR_ROLE, distill, generator_sample, load_generator, save_generator, write_training_log
from .tasks import TASKS, PointMassEnv, dataset_load, dataset_save, make_demos

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class ArgumentParser(argparse.ArgumentParser):
    """Argument parser that reports usage errors as :class:`ConfigError` instead of exiting"""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise errors.ConfigError(message)


def _seed_list(text: str) -> typing.List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="sdm-policy",
        description="Distill a diffusion policy into a one-step generator.",
        epilog="Any config field can be overridden with --section.field VALUE, e.g. --distill.c 3",
    )
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--out-dir", help="run directory (config snapshot, logs, default outputs)")
    parser.add_argument("--log-level", help="logging level, defaults to $SDM_LOG_LEVEL or INFO")
    commands = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    gen = commands.add_parser("gen-data", help="write expert demonstrations as JSON Lines")
    gen.add_argument("--task", choices=TASKS)
    gen.add_argument("--episodes", type=int, help="point-mass expert episodes")
    gen.add_argument("--samples", type=int, help="mixture draws for the gmm task")
    gen.add_argument("--seed", type=int)
    gen.add_argument("--out")

    teach = commands.add_parser("train-teacher", help="train the epsilon-prediction teacher")
    teach.add_argument("--data", required=True)
    teach.add_argument("--out")

    dist = commands.add_parser("distill", help="distill a teacher into a one-step generator")
    dist.add_argument("--teacher", required=True)
    dist.add_argument("--data", required=True)
    dist.add_argument("--out")
    dist.add_argument("--log", help="training log CSV")
    dist.add_argument("--task", choices=TASKS)

    sample = commands.add_parser("sample", help="write generator or teacher samples as CSV")
    sample.add_argument("--checkpoint", required=True)
    sample.add_argument("--n", type=int, default=1000)
    sample.add_argument("--nfe", type=int, help="teacher denoising steps, defaults to eval.nfe")
    sample.add_argument("--obs", help="comma-separated observation, defaults to the task's start observation")
    sample.add_argument("--seed", type=int)
    sample.add_argument("--out")

    ev = commands.add_parser("eval", help="evaluate a generator against its teacher")
    ev.add_argument("--gen", required=True)
    ev.add_argument("--teacher", required=True)
    ev.add_argument("--task", choices=TASKS)
    ev.add_argument("--data", help="dataset supplying the observation set")
    ev.add_argument("--seeds", type=_seed_list)
    ev.add_argument("--out")

    bench = commands.add_parser("bench", help="single-thread inference rate of generator and teacher")
    bench.add_argument("--gen", required=True)
    bench.add_argument("--teacher", required=True)
    bench.add_argument("--task", choices=TASKS)
    bench.add_argument("--seeds", type=_seed_list)
    bench.add_argument("--out")

    ablate = commands.add_parser("ablate", help="teacher- vs scratch-initialized generator")
    ablate.add_argument("--teacher", required=True)
    ablate.add_argument("--data", required=True)
    ablate.add_argument("--task", choices=TASKS)
    ablate.add_argument("--seeds", type=_seed_list)
    ablate.add_argument("--out")
    return parser


def split_overrides(extra: typing.Sequence[str]) -> typing.List[typing.Tuple[str, str]]:
    """Pair leftover ``--section.field value`` (or ``--section.field=value``) tokens

    Raises:
        ConfigError: on a token that isn't a dotted override or lacks a value
    """
    overrides = []
    tokens = list(extra)
    while tokens:
        token = tokens.pop(0)
        if not token.startswith("--") or "." not in token.split("=", 1)[0]:
            raise errors.ConfigError(f"Unrecognized argument {token!r}")
        if "=" in token:
            key, value = token[2:].split("=", 1)
        elif tokens:
            key, value = token[2:], tokens.pop(0)
        else:
            raise errors.ConfigError(f"Override {token} needs a value")
        overrides.append((key, value))
    return overrides


def _command_overrides(args: argparse.Namespace) -> typing.List[typing.Tuple[str, typing.Any]]:
    """Config fields set through command options"""
    mapping = {
        "out_dir": "out_dir",
        "task": "task",
        "episodes": "data.episodes",
        "samples": "data.gmm_samples",
        "seeds": "eval.seeds",
    }
    overrides = [(key, getattr(args, name)) for name, key in mapping.items() if getattr(args, name, None) is not None]
    if args.command == "gen-data" and args.seed is not None:
        overrides.append(("data.seed", args.seed))
    return overrides


def _prepare_run(config: RunConfig, command: str) -> pathlib.Path:
    run_dir = pathlib.Path(config.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(run_dir / f"config.{command}.json", json.dumps(config.to_dict(), indent=2, sort_keys=True))
    return run_dir


def _output(path: typing.Optional[str], run_dir: pathlib.Path, default: str) -> pathlib.Path:
    return pathlib.Path(path) if path else run_dir / default


def _write_report(report: MetricsReport, path: pathlib.Path):
    report.write_csv(path)
    report.write_json(path.with_suffix(".json"))
    logger.info("wrote %d metric rows to %s", len(report.entries), path)


def _obs_set(config: RunConfig, data_path: typing.Optional[str]) -> np.ndarray:
    if data_path:
        demos = dataset_load(data_path)
    else:
        demos = make_demos(config.task, config.data.count(config.task), config.data.seed)
    obs, _ = stack_demonstrations(demos)
    if config.task == "gmm":
        return obs[: config.eval.samples]
    return np.unique(obs, axis=0)


def cmd_gen_data(config: RunConfig, args: argparse.Namespace, run_dir: pathlib.Path) -> int:
    demos = make_demos(config.task, config.data.count(config.task), config.data.seed)
    out = _output(args.out, run_dir, "demos.jsonl")
    dataset_save(out, demos)
    logger.info("wrote %d %s demonstrations to %s", len(demos), config.task, out)
    return 0


def cmd_train_teacher(config: RunConfig, args: argparse.Namespace, run_dir: pathlib.Path) -> int:
    schedule = config.schedule.build()
    net, history = train_teacher(dataset_load(args.data), schedule, config.teacher, Rng(config.seed), config.net)
    out = _output(args.out, run_dir, "teacher.json")
    save_denoiser(out, net, schedule, role="teacher")
    atomic_write_text(run_dir / "teacher_history.csv", history.to_csv(index=False))
    logger.info("teacher saved to %s (final loss %.5f)", out, history["loss"].iloc[-1])
    return 0


def _segment_callback(config: RunConfig, horizon: int, threads: int):
    """Success rate of the current generator on fresh point-mass episodes"""
    env = PointMassEnv(horizon=horizon)

    def evaluate(iteration, generator):
        episodes = episode_outcomes(
            generator_policy(generator), env, [config.seed], config.eval.segment_episodes, threads
        )
        rate = summarize_success(episodes).mean
        logger.info("segment at iteration %d: success rate %.3f", iteration, rate)
        return rate

    return evaluate


def cmd_distill(config: RunConfig, args: argparse.Namespace, run_dir: pathlib.Path) -> int:
    teacher, schedule, _ = load_denoiser(args.teacher)
    callback = None
    if config.task == "pointmass" and config.distill.eval_every:
        callback = _segment_callback(config, teacher.horizon, config.eval.thread_count())
    result = distill(teacher, dataset_load(args.data), config.distill, Rng(config.seed), schedule, callback)

    out = _output(args.out, run_dir, "generator.json")
    save_generator(out, result.generator)
    write_training_log(_output(args.log, run_dir, "distill_log.csv"), result.history)
    save_denoiser(run_dir / "dynamic_teacher.json", result.dynamic, schedule, role="dynamic_teacher")
    if result.segments:
        segments = pd.DataFrame(result.segments)
        atomic_write_text(run_dir / "segments.csv", segments.to_csv(index=False))
        report = MetricsReport()
        report.add(
            "success_rate_top_k",
            top_k_mean(segments["value"].tolist(), config.eval.top_k),
            config.seed,
            k=config.eval.top_k,
            segments=len(segments),
        )
        _write_report(report, run_dir / "segments_report.csv")
    logger.info("generator saved to %s after %d generator updates", out, result.generator_updates)
    return 0


def _parse_obs(text: typing.Optional[str], config: RunConfig, obs_dim: int) -> np.ndarray:
    if text:
        try:
            obs = np.array([float(part) for part in text.split(",") if part.strip()])
        except ValueError:
            raise errors.ConfigError(f"--obs needs comma-separated numbers, got {text!r}")
    elif config.task == "pointmass" and obs_dim:
        obs = PointMassEnv().observation()
    else:
        obs = np.zeros(obs_dim)
    if obs.shape != (obs_dim,):
        raise errors.ConfigError(f"--obs needs {obs_dim} values, got {obs.shape[0]}")
    return obs


def cmd_sample(config: RunConfig, args: argparse.Namespace, run_dir: pathlib.Path) -> int:
    if args.n < 1:
        raise errors.ConfigError(f"--n must be >= 1, got {args.n}")
    net, schedule, meta = load_denoiser(args.checkpoint)
    obs = np.tile(_parse_obs(args.obs, config, net.obs_dim), (args.n, 1))
    rng = Rng(config.seed if args.seed is None else args.seed)
    if meta.get("role") == GENERATOR_ROLE:
        actions = generator_sample(load_generator(args.checkpoint), obs, rng.gaussian(args.n, net.chunk_dim))
    else:
        actions = ddpm_sample(net, schedule, obs, args.nfe or config.eval.nfe, rng)
    raw = net.normalizer.denormalize(actions.reshape(args.n, net.horizon, net.action_dim))
    columns = [f"h{h}_a{a}" for h in range(net.horizon) for a in range(net.action_dim)]
    out = _output(args.out, run_dir, "samples.csv")
    atomic_write_text(out, pd.DataFrame(raw.reshape(args.n, -1), columns=columns).to_csv(index=False))
    logger.info("wrote %d samples to %s", args.n, out)
    return 0


def _check_nfe(config: RunConfig, schedule: NoiseSchedule):
    """Teacher NFE must fit the checkpoint's own schedule, which may differ from ``config.schedule``"""
    if config.eval.nfe > schedule.T:
        raise errors.ConfigError(f"eval.nfe {config.eval.nfe} exceeds the teacher schedule's T {schedule.T}")


def cmd_eval(config: RunConfig, args: argparse.Namespace, run_dir: pathlib.Path) -> int:
    G = load_generator(args.gen)
    teacher, schedule, _ = load_denoiser(args.teacher)
    _check_nfe(config, schedule)
    report = evaluate_generator(
        G, teacher, schedule, config.task, _obs_set(config, args.data), config.eval, config.eval.thread_count()
    )
    _write_report(report, _output(args.out, run_dir, "report.csv"))
    return 0


def cmd_bench(config: RunConfig, args: argparse.Namespace, run_dir: pathlib.Path) -> int:
    G = load_generator(args.gen)
    teacher, schedule, _ = load_denoiser(args.teacher)
    _check_nfe(config, schedule)
    obs = _parse_obs(None, config, teacher.obs_dim)
    policies = {
        "generator": (generator_policy(G), 1),
        "teacher": (teacher_policy(teacher, schedule, config.eval.nfe), config.eval.nfe),
    }
    report = MetricsReport()
    for seed in config.eval.seeds:
        rates = {}
        for name, (policy, nfe) in policies.items():
            rates[name] = bench_latency(policy, obs, config.eval.reps, config.eval.warmup, Rng(seed))
            report.add("hz", rates[name], seed, policy=name, nfe=nfe)
        logger.info(
            "seed %d: generator %.1f Hz, teacher %.1f Hz (%.1fx)",
            seed,
            rates["generator"],
            rates["teacher"],
            rates["generator"] / rates["teacher"],
        )
    _write_report(report, _output(args.out, run_dir, "bench.csv"))
    return 0


def cmd_ablate(config: RunConfig, args: argparse.Namespace, run_dir: pathlib.Path) -> int:
    teacher, schedule, _ = load_denoiser(args.teacher)
    _check_nfe(config, schedule)
    data = dataset_load(args.data)
    obs_set = _obs_set(config, args.data)
    threads = config.eval.thread_count()
    report = MetricsReport()
    for init, scratch in (("teacher", False), ("scratch", True)):
        distill_cfg = dataclasses.replace(config.distill, ablate_scratch_init=scratch)
        result = distill(teacher, data, distill_cfg, Rng(config.seed), schedule)
        save_generator(run_dir / f"generator_{init}.json", result.generator)
        write_training_log(run_dir / f"distill_log_{init}.csv", result.history)
        report.extend(
            evaluate_generator(
                result.generator,
                teacher,
                schedule,
                config.task,
                obs_set,
                config.eval,
                threads,
                include_latency=False,
                init=init,
            )
        )
    _write_report(report, _output(args.out, run_dir, "ablation.csv"))
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
}


def configure_logging(level: typing.Optional[str]):
    level = (level or os.getenv("SDM_LOG_LEVEL") or "INFO").upper()
    if not isinstance(logging.getLevelName(level), int):
        raise errors.ConfigError(f"Unknown log level {level!r}")
    logging.basicConfig(level=level, format=LOG_FORMAT)


def cmd_dispatch(argv: typing.Optional[typing.Sequence[str]] = None) -> int:
    """Run one pipeline command

    Returns:
        int: 0 on success, 1 on a configuration or usage error, 2 on any other library error
    """
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        configure_logging(args.log_level)
        overrides = _command_overrides(args) + split_overrides(extra)
        config = parse_config(args.config, overrides)
        run_dir = _prepare_run(config, args.command)
        return HANDLERS[args.command](config, args, run_dir)
    except errors.ConfigError as e:
        logger.error("configuration error: %s", e)
        return 1
    except errors.SdmError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return 2
    except FileNotFoundError as e:
        logger.error("missing input: %s", e)
        return 1


def main():
    sys.exit(cmd_dispatch(sys.argv[1:]))

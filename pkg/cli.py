#!/usr/bin/env python3
"""
Reaction planner command line.

    python cli.py gen-data --scenario mirror --clips 8 --seed 1
    python cli.py train --iters 20000
    python cli.py sample --data data --records 2
    python cli.py evaluate --generated runs/sample --reference data
    python cli.py stream --tcp 0.0.0.0:7000
    python cli.py inspect runs/train/model.pt
    python cli.py bench --steps 2,8,100

Option values come from flags, then the YAML file given with --config, then the
built-in defaults. Exit status: 0 success, 1 runtime failure, 2 usage or validation error.
"""

import argparse
import logging
import sys
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import torch
import yaml

import config
from data_io import (
    MANIFEST_NAME, SCENARIOS, InteractionRecord, load_dataset, load_manifest, read_clip, read_clip_header,
    save_dataset, synth_dataset, write_clip,
)
from denoiser import DenoiserConfig, ReactionDenoiser, load_checkpoint
from diffusion_core import GuidanceConfig, build_schedule
from errors import InvalidInputError, ReactionError, ValidationError
from metrics import MetricReport, evaluate
from motion_core import SMPL22
from online_planner import FrameWriter, ListSink, PlannerConfig, ReactionPlanner, TcpStream, benchmark_latency, clip_source, read_stream
from training import LossWeights, TrainPlan, train

logger = logging.getLogger(__name__)

EFFECTIVE_CONFIG = 'effective_config.yaml'


@dataclass
class Option:
    name: str
    type: Any
    default: Any
    help: str
    unit: str = ''
    choices: Optional[Sequence] = None

    @property
    def flag(self):
        return '--' + self.name.replace('_', '-')

    @property
    def is_switch(self):
        return self.type is bool


GLOBAL_OPTIONS = [
    Option('seed', int, 0, 'random seed for data, training and sampling'),
    Option('deterministic', bool, False, 'single-context execution: no background loading or emission threads'),
    Option('verbose', bool, False, 'debug logging'),
]

_PLANNER_OPTIONS = [
    Option('checkpoint', str, str(Path(config.RUNS_DIR) / 'train' / 'model.pt'), 'trained model checkpoint'),
    Option('guidance', float, config.GUIDANCE_WEIGHT, 'classifier-free guidance scale w'),
    Option('init', str, config.WARMUP_INIT, 'warm-up reactor prefix', choices=('sample', 'rest')),
    Option('warmup', int, config.WARMUP_FRAMES, 'warm-up length', 'frames at 30 fps'),
    Option('text', str, None, 'text label for the reaction (defaults to the record label when replaying)'),
    Option('track', bool, False, 'attach the kinematic tracker and log actor-aware rewards'),
    Option('blend_rate', float, config.TRACKER_BLEND_RATE, 'tracker step toward the planned goal', 'fraction per frame'),
]

COMMAND_OPTIONS: Dict[str, List[Option]] = {
    'gen-data': [
        Option('scenario', str, 'mirror', 'synthetic interaction rule', choices=SCENARIOS + ('all',)),
        Option('clips', int, 8, 'number of records'),
        Option('frames', int, 200, 'record length', 'frames at 30 fps'),
        Option('out', str, config.DATA_DIR, 'dataset directory'),
    ],
    'train': [
        Option('data', str, config.DATA_DIR, 'dataset directory'),
        Option('out', str, str(Path(config.RUNS_DIR) / 'train'), 'run directory for losses.csv and checkpoints'),
        Option('iters', int, 3000, 'training iterations', 'window steps'),
        Option('batch_size', int, 8, 'crops per batch'),
        Option('profile', str, 'tiny', 'denoiser size', choices=tuple(config.DENOISER_PROFILES)),
        Option('history', int, config.HISTORY_FRAMES, 'history length h', 'frames'),
        Option('window', int, config.WINDOW_FRAMES, 'prediction window k', 'frames'),
        Option('steps', int, config.DIFFUSION_STEPS, 'diffusion steps T'),
        Option('mask_rate', float, config.TEXT_MASK_RATE, 'text condition drop rate', 'probability'),
        Option('foot_weight', float, config.LOSS_WEIGHTS['foot'], 'foot contact loss weight'),
        Option('inter_weight', float, config.LOSS_WEIGHTS['inter'], 'interaction field loss weight'),
        Option('prefix_weight', float, config.LOSS_WEIGHTS['prefix'], 'window boundary loss weight'),
        Option('consecutive', int, config.CONSECUTIVE_WINDOWS, 'consecutive windows per crop N'),
        Option('lr', float, config.LEARNING_RATE, 'Adam learning rate'),
        Option('checkpoint_every', int, 0, 'intermediate checkpoint period (0 = final only)', 'iterations'),
        Option('log_every', int, 100, 'loss log period (0 = silent)', 'iterations'),
    ],
    'sample': _PLANNER_OPTIONS + [
        Option('actor', str, None, 'recorded actor clip (.mclip) to replay'),
        Option('data', str, None, 'dataset directory whose actor clips are replayed'),
        Option('records', int, 0, 'number of dataset records to replay (0 = all)'),
        Option('use_prefix', bool, False, 'start from the recorded reactor warm-up instead of --init'),
        Option('out', str, str(Path(config.RUNS_DIR) / 'sample'), 'output directory'),
    ],
    'stream': _PLANNER_OPTIONS + [
        Option('tcp', str, None, 'serve one actor connection on HOST:PORT instead of stdin/stdout'),
        Option('batch', bool, False, 'emit as fast as possible instead of 30 fps pacing'),
        Option('out', str, None, 'directory for rewards.csv and the effective config'),
    ],
    'evaluate': [
        Option('generated', str, str(Path(config.RUNS_DIR) / 'sample'), 'dataset directory of generated records'),
        Option('reference', str, config.DATA_DIR, 'dataset directory of reference records'),
        Option('window', int, config.WINDOW_FRAMES, 'evaluation window', 'frames'),
        Option('subset', int, config.DIVERSITY_SUBSET, 'diversity subset size S_d'),
        Option('out', str, str(Path(config.RUNS_DIR) / 'evaluate'), 'output directory for metrics.txt'),
    ],
    'inspect': [],
    'bench': [
        Option('checkpoint', str, None, 'checkpoint to time (default: untrained tiny profile)'),
        Option('steps', str, '2,8,100', 'comma-separated diffusion step counts T'),
        Option('repeats', int, 5, 'timed samples per T'),
        Option('out', str, None, 'CSV path for the latency table'),
    ],
}

COMMAND_HELP = {
    'gen-data': 'write a synthetic interaction dataset',
    'train': 'train the denoiser with scheduled rollouts',
    'sample': 'replay recorded actor motion through the planner',
    'stream': 'plan reactions for a live actor stream',
    'evaluate': 'compare generated and reference records',
    'inspect': 'summarize a dataset, checkpoint, clip or metric report',
    'bench': 'time window sampling against the diffusion step count',
}


@dataclass
class RunConfig:
    command: str
    options: Dict[str, Any] = field(default_factory=dict)
    config_path: Optional[str] = None

    def __getitem__(self, name):
        return self.options[name]

    @property
    def seed(self) -> int:
        return int(self.options['seed'])

    @property
    def deterministic(self) -> bool:
        return bool(self.options['deterministic'])

    def echo(self, directory) -> Path:
        """Write the effective option values next to a command's outputs."""
        path = Path(directory) / EFFECTIVE_CONFIG
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as handle:
            yaml.safe_dump({'command': self.command, **self.options}, handle, sort_keys=True)
        return path


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _add_option(parser, option: Option):
    described = option.help + (f" [{option.unit}]" if option.unit else '')
    if option.is_switch:
        parser.add_argument(option.flag, dest=option.name, action='store_true', default=argparse.SUPPRESS,
                            help=f"{described} (default: {option.default})")
        return
    parser.add_argument(option.flag, dest=option.name, type=option.type, choices=option.choices,
                        default=argparse.SUPPRESS, help=f"{described} (default: {option.default})")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', dest='config_path', default=argparse.SUPPRESS,
                        help='YAML file of option values (default: none)')
    for option in GLOBAL_OPTIONS:
        _add_option(common, option)

    parser = argparse.ArgumentParser(prog='cli.py', description='Auto-regressive reaction planner')
    commands = parser.add_subparsers(dest='command', metavar='command', required=True)
    for name, options in COMMAND_OPTIONS.items():
        sub = commands.add_parser(name, parents=[common], help=COMMAND_HELP[name], description=COMMAND_HELP[name])
        if name == 'inspect':
            sub.add_argument('path', help='dataset directory, checkpoint (.pt), clip (.mclip) or metric report')
        for option in options:
            _add_option(sub, option)
    return parser


def _load_config_file(path) -> Dict:
    try:
        with open(path, encoding='utf-8') as handle:
            values = yaml.safe_load(handle) or {}
    except OSError as e:
        raise ValidationError(f"cannot read config file {path}: {e}")
    except yaml.YAMLError as e:
        raise ValidationError(f"config file {path} is not valid YAML: {e}")
    if not isinstance(values, dict):
        raise ValidationError(f"config file {path} must hold a mapping")
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file (top level and the command's own section), then flags."""
    command = args.command
    known = {option.name: option for option in GLOBAL_OPTIONS + COMMAND_OPTIONS[command]}
    options = {name: option.default for name, option in known.items()}

    config_path = getattr(args, 'config_path', None)
    if config_path:
        values = _load_config_file(config_path)
        section = values.get(command, {})
        if not isinstance(section, dict):
            raise ValidationError(f"config section '{command}' must be a mapping")
        for key, value in values.items():
            name = str(key).replace('-', '_')
            if name in known:
                options[name] = value
        for key, value in section.items():
            name = str(key).replace('-', '_')
            if name not in known:
                raise ValidationError(f"unknown option '{key}' for {command}")
            options[name] = value

    for name in known:
        if hasattr(args, name):
            options[name] = getattr(args, name)
    if command == 'inspect':
        options['path'] = args.path

    for name, option in known.items():
        value = options[name]
        if value is None:
            continue
        try:
            options[name] = option.type(value)
        except (TypeError, ValueError):
            raise ValidationError(f"option {name} must be {option.type.__name__}, got {value!r}")
        if option.choices and options[name] not in option.choices:
            raise ValidationError(f"option {name} must be one of {tuple(option.choices)}, got {value!r}")
    run_config = RunConfig(command, options, config_path)
    _validate(run_config)
    return run_config


def _validate(run_config: RunConfig):
    """Build every module config once so invalid values fail before any work starts."""
    try:
        command = run_config.command
        if command == 'gen-data' and (run_config['clips'] < 1 or run_config['frames'] < 1):
            raise InvalidInputError("clips and frames must be positive")
        if command == 'train':
            _train_plan(run_config)
            _loss_weights(run_config)
            GuidanceConfig(mask_rate=run_config['mask_rate'])
            DenoiserConfig.from_profile(run_config['profile'], history_frames=run_config['history'],
                                        window_frames=run_config['window'])
            build_schedule(run_config['steps'])
        if command in ('sample', 'stream'):
            _planner_config(run_config)
            GuidanceConfig(run_config['guidance'])
        if command == 'sample' and not (run_config['actor'] or run_config['data']):
            raise InvalidInputError("sample needs --actor or --data")
        if command == 'sample' and run_config['actor'] and run_config['use_prefix']:
            raise InvalidInputError("--use-prefix needs dataset records with a recorded reactor")
        if command == 'stream' and run_config['tcp']:
            _tcp_address(run_config['tcp'])
        if command == 'evaluate' and (run_config['window'] < 1 or run_config['subset'] < 1):
            raise InvalidInputError("window and subset must be positive")
        if command == 'bench':
            _step_list(run_config['steps'])
            if run_config['repeats'] < 1:
                raise InvalidInputError("repeats must be >= 1")
    except InvalidInputError as e:
        raise ValidationError(str(e))


def _train_plan(run_config: RunConfig) -> TrainPlan:
    return TrainPlan(max_iters=run_config['iters'], consecutive_windows=run_config['consecutive'],
                     batch_size=run_config['batch_size'], seed=run_config.seed, learning_rate=run_config['lr'],
                     checkpoint_every=run_config['checkpoint_every'], log_every=run_config['log_every'],
                     deterministic=run_config.deterministic)


def _loss_weights(run_config: RunConfig) -> LossWeights:
    return LossWeights(run_config['foot_weight'], run_config['inter_weight'], run_config['prefix_weight'])


def _planner_config(run_config: RunConfig, seed: Optional[int] = None, paced: bool = False) -> PlannerConfig:
    return PlannerConfig(warmup_frames=run_config['warmup'], init_mode=run_config['init'],
                         paced=paced, deterministic=run_config.deterministic,
                         seed=run_config.seed if seed is None else seed,
                         track=run_config['track'], blend_rate=run_config['blend_rate'])


def _tcp_address(value: str):
    host, _, port = value.rpartition(':')
    if not host or not port.isdigit():
        raise InvalidInputError(f"--tcp expects HOST:PORT, got {value!r}")
    return host, int(port)


def _step_list(value: str) -> List[int]:
    try:
        steps = [int(part) for part in value.split(',') if part.strip()]
    except ValueError:
        raise InvalidInputError(f"--steps expects comma-separated integers, got {value!r}")
    if not steps or min(steps) < 1:
        raise InvalidInputError("diffusion step counts must be >= 1")
    return steps


def _load_planner(run_config: RunConfig, seed: Optional[int] = None, paced: bool = False) -> ReactionPlanner:
    checkpoint = load_checkpoint(run_config['checkpoint'])
    sched = build_schedule(checkpoint.schedule['T'], checkpoint.schedule['kind'])
    return ReactionPlanner(checkpoint.model, checkpoint.stats, sched, GuidanceConfig(run_config['guidance']),
                           _planner_config(run_config, seed, paced))


def _banner(title: str, out=None):
    out = out or sys.stdout
    print("\n" + "=" * 60, file=out)
    print(title, file=out)
    print("=" * 60, file=out)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(run_config: RunConfig) -> int:
    records = synth_dataset(run_config['scenario'], run_config['clips'], run_config['frames'], run_config.seed)
    manifest = save_dataset(records, run_config['out'])
    run_config.echo(run_config['out'])
    _banner("📦 SYNTHETIC DATASET")
    print(f"📁 Directory: {run_config['out']}")
    print(f"📊 Records: {len(manifest.records)} x {run_config['frames']} frames ({run_config['scenario']})")
    return 0


def cmd_train(run_config: RunConfig) -> int:
    records, manifest = load_dataset(run_config['data'])
    torch.manual_seed(run_config.seed)
    model = ReactionDenoiser(DenoiserConfig.from_profile(run_config['profile'], history_frames=run_config['history'],
                                                         window_frames=run_config['window']))
    out = Path(run_config['out'])
    run_config.echo(out)
    result = train(records, model, build_schedule(run_config['steps']), _train_plan(run_config),
                   _loss_weights(run_config), GuidanceConfig(mask_rate=run_config['mask_rate']),
                   stats=manifest.stats, output_dir=out)

    final = result.losses.iloc[-1]
    _banner("🧠 TRAINING SUMMARY")
    print(f"📊 Iterations: {len(result.losses)}  (rollout sampling calls: {result.rollout_calls})")
    print(f"📉 Final loss: total {final['total']:.5f} | simple {final['simple']:.5f} | foot {final['foot']:.5f} "
          f"| inter {final['inter']:.5f} | prefix {final['prefix']:.5f}")
    print(f"💾 Checkpoint: {result.checkpoint}")
    return 0


def _replay(planner: ReactionPlanner, record: InteractionRecord, run_config: RunConfig, rewards=None):
    report = planner.run_stream(clip_source(record.actor, run_config['text'] or record.label), ListSink(),
                                reactor_prefix=record.reactor if run_config['use_prefix'] else None,
                                reward_path=rewards)
    if report.aborted:
        raise ReactionError(report.error)
    state = report.state
    generated = InteractionRecord(state.actor.clip(), state.reactor.clip(), record.label, record.scenario, record.seed)
    return generated, report


def cmd_sample(run_config: RunConfig) -> int:
    out = Path(run_config['out'])
    run_config.echo(out)
    reports = []
    if run_config['actor']:
        actor = read_clip(run_config['actor'])
        record = InteractionRecord(actor, actor, run_config['text'] or '', 'replay')
        generated, report = _replay(_load_planner(run_config), record, run_config,
                                    out / 'rewards.csv' if run_config['track'] else None)
        write_clip(out / 'reactor.mclip', generated.reactor)
        reports.append(report)
    else:
        records, _ = load_dataset(run_config['data'])
        if run_config['records']:
            records = records[:run_config['records']]
        generated = []
        for i, record in enumerate(records):
            planner = _load_planner(run_config, seed=run_config.seed + i)
            rewards = out / f"rewards_{i:04d}.csv" if run_config['track'] else None
            result, report = _replay(planner, record, run_config, rewards)
            generated.append(result)
            reports.append(report)
        save_dataset(generated, out)

    latencies = [value for report in reports for value in report.latencies_ms]
    _banner("🎬 SAMPLING SUMMARY")
    print(f"📊 Replayed clips: {len(reports)}, windows: {sum(r.windows for r in reports)}")
    if latencies:
        print(f"⏱️  Window latency: mean {sum(latencies) / len(latencies):.1f} ms, max {max(latencies):.1f} ms")
    print(f"📁 Output: {out}")
    return 0


def cmd_stream(run_config: RunConfig) -> int:
    if run_config['out']:
        run_config.echo(run_config['out'])
    rewards = Path(run_config['out']) / 'rewards.csv' if run_config['out'] and run_config['track'] else None
    planner = _load_planner(run_config, paced=not run_config['batch'])
    sent = []

    def initial_text():
        if sent:
            return None
        sent.append(True)
        return run_config['text']

    if run_config['tcp']:
        host, port = _tcp_address(run_config['tcp'])
        with TcpStream(host, port) as connection:
            report = planner.run_stream(read_stream(connection.reader, run_config['tcp']), FrameWriter(connection.writer),
                                        initial_text, reward_path=rewards)
    else:
        report = planner.run_stream(read_stream(sys.stdin, '<stdin>'), FrameWriter(sys.stdout), initial_text,
                                    reward_path=rewards)

    _banner("📡 STREAM SUMMARY", sys.stderr)
    for key, value in report.summary().items():
        print(f"   {key}: {value}", file=sys.stderr)
    return 1 if report.aborted else 0


def _check_skeleton(directory):
    manifest = load_manifest(directory)
    expected = list(SMPL22.joint_names)
    for entry in manifest.records:
        for role in ('actor', 'reactor'):
            path = Path(directory) / entry[role]
            names = read_clip_header(path)['joint_names']
            if list(names) != expected:
                raise ValidationError(f"skeleton mismatch in {path}: {len(names)} joints "
                                      f"{names[:3]}... do not match the {len(expected)}-joint body model")


def cmd_evaluate(run_config: RunConfig) -> int:
    _check_skeleton(run_config['generated'])
    _check_skeleton(run_config['reference'])
    generated, _ = load_dataset(run_config['generated'])
    reference, _ = load_dataset(run_config['reference'])
    report, table = evaluate(generated, reference, run_config['window'], run_config['subset'], run_config.seed)

    out = Path(run_config['out'])
    run_config.echo(out)
    report.save(out / 'metrics.txt')
    table.to_csv(out / 'per_window.csv', index=False)
    _banner("📏 EVALUATION REPORT")
    print(report.to_text())
    print(f"📁 Output: {out}")
    return 0


def cmd_inspect(run_config: RunConfig) -> int:
    path = Path(run_config['path'])
    if path.is_dir() and (path / MANIFEST_NAME).exists():
        records, manifest = load_dataset(path)
        _banner("📦 DATASET")
        print(f"📁 {path}  (manifest version {manifest.version})")
        print(f"📊 Records: {len(records)}, frames: {sum(len(r) for r in records)}")
        for scenario, count in sorted(Counter(r.scenario for r in records).items()):
            print(f"   {scenario}: {count}")
        print(f"🏷️  Vocabulary: {', '.join(manifest.vocabulary)}")
    elif path.suffix == '.pt':
        checkpoint = load_checkpoint(path)
        parameters = sum(p.numel() for p in checkpoint.model.parameters())
        _banner("🧠 CHECKPOINT")
        print(f"📁 {path}")
        print(f"📊 Iteration {checkpoint.iteration}, {parameters:,} parameters, schedule {checkpoint.schedule}")
        for key, value in vars(checkpoint.model.cfg).items():
            print(f"   {key}: {value}")
    elif path.suffix == '.mclip':
        header = read_clip_header(path)
        _banner("🎞️  CLIP")
        print(f"📁 {path}")
        print(f"📊 {header['frames']} frames at {header['fps']} fps, {header['joint_count']} joints, "
              f"agent {header['agent_id']}")
    elif path.is_file():
        report = MetricReport.from_text(path.read_text(encoding='utf-8'))
        _banner("📏 METRIC REPORT")
        print(report.to_text())
    else:
        raise ValidationError(f"nothing to inspect at {path}")
    return 0


def cmd_bench(run_config: RunConfig) -> int:
    if run_config['checkpoint']:
        model = load_checkpoint(run_config['checkpoint']).model
    else:
        torch.manual_seed(run_config.seed)
        model = ReactionDenoiser(DenoiserConfig.from_profile('tiny'))
    table = benchmark_latency(model, _step_list(run_config['steps']), run_config['repeats'], run_config.seed)
    _banner("⏱️  SAMPLING LATENCY")
    print(table.to_string(index=False))
    if run_config['out']:
        out = Path(run_config['out'])
        run_config.echo(out.parent)
        out.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(out, index=False)
        print(f"📁 Output: {out}")
    return 0


COMMANDS = {
    'gen-data': cmd_gen_data,
    'train': cmd_train,
    'sample': cmd_sample,
    'stream': cmd_stream,
    'evaluate': cmd_evaluate,
    'inspect': cmd_inspect,
    'bench': cmd_bench,
}


def setup_logging(verbose: bool):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format='%(message)s',
                        stream=sys.stderr, force=True)


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2

    setup_logging(getattr(args, 'verbose', False))
    previous = torch.are_deterministic_algorithms_enabled()
    try:
        run_config = resolve_config(args)
        logger.debug(f"🔧 Effective options for {run_config.command}: {run_config.options}")
        if run_config.deterministic:
            torch.use_deterministic_algorithms(True)
        return COMMANDS[run_config.command](run_config)
    except ValidationError as e:
        print(f"❌ Validation failed: {e}", file=sys.stderr)
        return 2
    except (ReactionError, OSError) as e:
        print(f"❌ {args.command} failed: {e}", file=sys.stderr)
        return 1
    finally:
        torch.use_deterministic_algorithms(previous)


if __name__ == "__main__":
    sys.exit(run())

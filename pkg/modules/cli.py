"""Command-line surface: gen-data, train, eval, ablate, sweep, gradcheck, export-embeddings.

Exit codes: 0 success, 1 validation error (bad flags or configuration),
2 any other failure. Every command writes manifest.json into its output
directory with the config echo, library versions, seed and the sha256 of
every artifact it produced.
"""

import argparse
import csv
import hashlib
import json
import logging
import multiprocessing as mp
import os
import platform
import sys
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from modules import __version__
from modules import checkpoint as ckpt
from modules import data as datasets
from modules.banner import print_banner
from modules.config_loader import ConfigLoader
from modules.detector import DEFAULT_MANIFEST, FLAG_NAMES, load_ablation_manifest
from modules.errors import ConfigError, GradientCheckError
from modules.training import (
    EXPORT_STAGES,
    MetricsReport,
    RunConfig,
    Trainer,
    export_embeddings,
    gradcheck_suite,
    sweep,
    write_grid,
)

logger = logging.getLogger('cromekit')

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

LOG_FORMAT = '%(asctime)s [%(levelname)s] [%(name)s] %(message)s'
LOG_DATEFMT = '%Y-%m-%d %H:%M:%S'


class CliArgumentParser(argparse.ArgumentParser):
    """argparse that reports usage errors as ConfigError instead of exiting."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _float_list(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(',') if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'") from None


def build_parser() -> CliArgumentParser:
    common = CliArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="YAML config file (default: config/cromekit_config.yaml)")
    common.add_argument("--seed", type=int, default=None, help="Run seed (training.seed, and generator.seed for gen-data)")
    common.add_argument("--out", default=None, help="Output directory (default: $CROMEKIT_OUT/<command> or runs/<command>)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="Override any config key, e.g. --set metric.alpha=8 (repeatable)")
    common.add_argument("--verbose", action="store_true", help="Log at DEBUG level")
    common.add_argument("--no-banner", action="store_true", help="Do not print the banner")

    parser = CliArgumentParser(prog="cromekit", description="cromekit - multimodal fake-news detection toolkit")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=CliArgumentParser)

    gen = commands.add_parser("gen-data", parents=[common], help="Generate a synthetic dataset file")
    gen.add_argument("--preset", choices=sorted(datasets.PRESETS), default=None,
                     help="Mimic the size and class balance of a public corpus")
    gen.add_argument("--scale", type=float, default=1.0, help="Size multiplier for --preset")
    gen.add_argument("--n-samples", type=int, default=None)
    gen.add_argument("--fake-fraction", type=float, default=None)
    gen.add_argument("--noise-sigma", type=float, default=None)
    gen.add_argument("--archetype-mix", type=_float_list, default=None, help="Four fractions a,b,c,d")
    gen.add_argument("--n-topics", type=int, default=None)

    ablation_flags = CliArgumentParser(add_help=False)
    for flag in FLAG_NAMES:
        ablation_flags.add_argument(f"--{flag.replace('_', '-')}", action="store_true", dest=flag,
                                    help=f"Ablation: {flag}")

    train = commands.add_parser("train", parents=[common, ablation_flags], help="Train one model")
    train.add_argument("--dataset", default=None, help="Dataset file (default: generate from config)")
    train.add_argument("--epochs", type=int, default=None)

    ev = commands.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", default=None, help="Dataset file (default: the checkpoint run's test split)")

    ab = commands.add_parser("ablate", parents=[common], help="Run the ablation suite")
    ab.add_argument("--all", action="store_true", help="Run every row of the ablation manifest (default)")
    ab.add_argument("--variants", default=None, help="Comma-separated subset of variant names")
    ab.add_argument("--seeds", type=int, default=None, help="Runs per variant")
    ab.add_argument("--include-extended", action="store_true", help="Also run the extended manifest rows")
    ab.add_argument("--epochs", type=int, default=None)
    ab.add_argument("--workers", type=int, default=None)
    ab.add_argument("--dataset", default=None)

    sw = commands.add_parser("sweep", parents=[common], help="Alpha x delta accuracy grid")
    sw.add_argument("--alphas", type=_float_list, default=None)
    sw.add_argument("--deltas", type=_float_list, default=None)
    sw.add_argument("--epochs", type=int, default=None)
    sw.add_argument("--workers", type=int, default=None)
    sw.add_argument("--dataset", default=None)

    gc = commands.add_parser("gradcheck", parents=[common], help="Finite-difference gradient check")
    gc.add_argument("--configs", type=int, default=20, help="Random tiny configurations")
    gc.add_argument("--samples", type=int, default=20, help="Parameter entries checked per configuration")
    gc.add_argument("--step", type=float, default=1e-6)
    gc.add_argument("--threshold", type=float, default=1e-5)
    gc.add_argument("--atol", type=float, default=1e-8,
                    help="Round-off floor: entries with |a - n| at or below it are not judged (0 disables)")

    ex = commands.add_parser("export-embeddings", parents=[common], help="Export per-sample features")
    ex.add_argument("--checkpoint", required=True)
    ex.add_argument("--dataset", default=None)
    ex.add_argument("--stage", choices=EXPORT_STAGES, required=True)

    return parser


def collect_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """--set assignments first, then dedicated flags (which win)."""
    overrides = ConfigLoader.parse_assignments(args.set)
    if args.seed is not None:
        overrides['training.seed'] = args.seed
        if args.command == 'gen-data':
            overrides['generator.seed'] = args.seed
    dedicated = {
        'dataset': 'data.dataset',
        'n_samples': 'generator.n_samples',
        'fake_fraction': 'generator.fake_fraction',
        'noise_sigma': 'generator.noise_sigma',
        'archetype_mix': 'generator.archetype_mix',
        'n_topics': 'generator.n_topics',
        'seeds': 'ablation_suite.seeds',
    }
    for attr, key in dedicated.items():
        if getattr(args, attr, None) is not None:
            overrides[key] = getattr(args, attr)
    epochs = getattr(args, 'epochs', None)
    if epochs is not None:
        section = {'sweep': 'sweep', 'ablate': 'ablation_suite'}.get(args.command, 'training')
        overrides[f"{section}.epochs"] = epochs
    workers = getattr(args, 'workers', None)
    if workers is not None:
        overrides[f"{'sweep' if args.command == 'sweep' else 'ablation_suite'}.workers"] = workers
    if getattr(args, 'alphas', None) is not None:
        overrides['sweep.alphas'] = args.alphas
    if getattr(args, 'deltas', None) is not None:
        overrides['sweep.deltas'] = args.deltas
    if getattr(args, 'include_extended', False):
        overrides['ablation_suite.include_extended'] = True
    for flag in FLAG_NAMES:
        if getattr(args, flag, False):
            overrides[f"ablate.{flag}"] = True
    return overrides


def setup_logging(level: str = 'INFO', log_file: str = '', verbose: bool = False) -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=logging.DEBUG if verbose else getattr(logging, level.upper(), logging.INFO),
        format=LOG_FORMAT,
        datefmt=LOG_DATEFMT,
        handlers=handlers,
        force=True,
    )


def resolve_out_dir(args: argparse.Namespace) -> str:
    out = args.out or os.path.join(os.environ.get('CROMEKIT_OUT') or 'runs', args.command)
    os.makedirs(out, exist_ok=True)
    return out


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: str, command: str, config: RunConfig, artifacts: Sequence[str],
                   extra: Optional[Dict[str, Any]] = None) -> str:
    """manifest.json: command, config echo, versions, seed and artifact checksums (no timestamps)."""
    manifest = {
        'command': command,
        'config': config.to_dict(),
        'seed': config.training.seed,
        'versions': {
            'cromekit': __version__,
            'numpy': np.__version__,
            'pyyaml': yaml.__version__,
            'python': platform.python_version(),
        },
        'artifacts': {os.path.relpath(p, out_dir): sha256_file(p) for p in sorted(artifacts)},
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(out_dir, 'manifest.json')
    with open(path, 'w') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write('\n')
    logger.info(f"[Main] manifest written to {path} ({len(artifacts)} artifact(s))")
    return path


def load_datasets(config: RunConfig) -> Tuple[datasets.Dataset, Optional[datasets.Dataset]]:
    """Train/test pair from the data section, generating a dataset when no file is configured."""
    if config.data.dataset:
        full = datasets.load(config.data.dataset)
    else:
        logger.info("[Main] No dataset configured; generating one from the generator section")
        full = datasets.generate(config.generator)
    if config.data.test_dataset:
        return full, datasets.load(config.data.test_dataset)
    return datasets.split(full, config.data.train_fraction, config.training.seed)


def _write_json(path: str, payload: Any) -> str:
    with open(path, 'w') as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write('\n')
    return path


# ---------------------------------------------------------------------------
# Ablation suite
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ('accuracy', 'fake_precision', 'fake_recall', 'fake_f1', 'real_precision', 'real_recall', 'real_f1')


def _report_row(report: MetricsReport) -> Dict[str, float]:
    return {
        'accuracy': report.accuracy,
        'fake_precision': report.fake.precision, 'fake_recall': report.fake.recall, 'fake_f1': report.fake.f1,
        'real_precision': report.real.precision, 'real_recall': report.real.recall, 'real_f1': report.real.f1,
    }


@dataclass
class VariantResult:
    name: str
    label: str
    baseline: bool
    seeds: List[int]
    reports: List[Optional[MetricsReport]] = field(default_factory=list)
    errors: Dict[int, str] = field(default_factory=dict)

    @property
    def succeeded(self) -> List[MetricsReport]:
        return [r for r in self.reports if r is not None]

    def means(self) -> Optional[Dict[str, float]]:
        if not self.succeeded:
            return None
        rows = [_report_row(r) for r in self.succeeded]
        return {col: float(np.mean([row[col] for row in rows])) for col in REPORT_COLUMNS}

    def kind_means(self) -> Dict[str, float]:
        kinds = sorted({k for r in self.succeeded for k in r.per_kind})
        return {k: float(np.mean([r.per_kind[k] for r in self.succeeded if k in r.per_kind])) for k in kinds}


@dataclass
class AblationReport:
    variants: List[VariantResult]

    def table(self) -> List[Dict[str, Any]]:
        rows = []
        for v in self.variants:
            means = v.means()
            row = {'variant': v.name, 'label': v.label, 'baseline': v.baseline,
                   'runs': len(v.succeeded), 'failed': len(v.errors)}
            for col in REPORT_COLUMNS:
                row[col] = None if means is None else means[col]
            rows.append(row)
        return rows

    def write_csv(self, path: str) -> str:
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(['variant', 'label', 'baseline', 'runs', 'failed'] + list(REPORT_COLUMNS))
            for row in self.table():
                writer.writerow([row['variant'], row['label'], 'yes' if row['baseline'] else '', row['runs'],
                                 row['failed']] + [('NA' if row[c] is None else f"{row[c]:.4f}") for c in REPORT_COLUMNS])
        return path

    def to_dict(self) -> Dict[str, Any]:
        return {
            'table': self.table(),
            'per_seed': {
                v.name: [{'seed': s, **({'error': v.errors[s]} if r is None else _report_row(r))}
                         for s, r in zip(v.seeds, v.reports)]
                for v in self.variants
            },
            'per_kind_accuracy': {v.name: v.kind_means() for v in self.variants},
        }


def _ablation_run(job: Tuple[RunConfig, datasets.Dataset, Optional[datasets.Dataset], Optional[str]]):
    config, train, test, out_dir = job
    try:
        trainer = Trainer(config, out_dir)
        report = trainer.fit(train, test).report or trainer.evaluate(train)
        return report, None
    except Exception as e:
        return None, f"{type(e).__name__}: {e}"


def ablate_suite(config: RunConfig, train: datasets.Dataset, test: Optional[datasets.Dataset],
                 variants: Optional[Sequence[str]] = None, out_dir: Optional[str] = None,
                 manifest_path: str = DEFAULT_MANIFEST) -> AblationReport:
    """Run every manifest row over N seeds and average; failed runs are marked, not fatal."""
    suite = config.ablation_suite
    rows = load_ablation_manifest(manifest_path, include_extended=suite.include_extended)
    if variants:
        known = {r.name for r in rows}
        unknown = sorted(set(variants) - known)
        if unknown:
            raise ConfigError(f"unknown variant(s) {unknown}, manifest offers {sorted(known)}")
        rows = [r for r in rows if r.name in variants]
    seeds = [config.training.seed + i + 1 for i in range(suite.seeds)]
    epochs = suite.epochs or config.training.epochs

    jobs, slots = [], []
    for row in rows:
        for seed in seeds:
            run_config = config.for_variant(row.name).with_overrides({'training.seed': seed, 'training.epochs': epochs})
            run_dir = os.path.join(out_dir, row.name, f"seed_{seed}") if out_dir else None
            jobs.append((run_config, train, test, run_dir))
            slots.append((row.name, seed))

    logger.info(f"[AblationSuite] {len(rows)} variant(s) x {len(seeds)} seed(s), {epochs} epochs each")
    if suite.workers > 1:
        with mp.Pool(suite.workers) as pool:
            outcomes = pool.map(_ablation_run, jobs)
    else:
        outcomes = [_ablation_run(job) for job in jobs]

    results = {r.name: VariantResult(r.name, r.label, r.baseline, seeds) for r in rows}
    for (name, seed), (report, error) in zip(slots, outcomes):
        results[name].reports.append(report)
        if error is not None:
            results[name].errors[seed] = error
            logger.error(f"[AblationSuite] {name} seed {seed} failed: {error}")
        else:
            logger.info(f"[AblationSuite] {name} seed {seed}: accuracy {report.accuracy:.4f}")
    return AblationReport([results[r.name] for r in rows])


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, config: RunConfig, out_dir: str) -> int:
    if args.preset:
        base = {k: v for k, v in config.generator.to_dict().items() if k not in ('n_samples', 'fake_fraction')}
        for key in ('n_samples', 'fake_fraction'):
            if getattr(args, key) is not None:
                base[key] = getattr(args, key)
        spec = datasets.preset_spec(args.preset, args.scale, **base)
    else:
        spec = config.generator
    path = os.path.join(out_dir, 'dataset.jsonl')
    sha = datasets.save(datasets.generate(spec), path)
    logger.info(f"[Main] dataset sha256 {sha}")
    write_manifest(out_dir, args.command, config, [path], {'generator': spec.to_dict()})
    return EXIT_OK


def cmd_train(args, config: RunConfig, out_dir: str) -> int:
    train, test = load_datasets(config)
    result = Trainer(config, out_dir).fit(train, test)
    if result.report is not None:
        logger.info(f"[Main] final test accuracy {result.report.accuracy:.4f}")
    artifacts = [os.path.join(out_dir, name) for name in ('checkpoint.ckpt', 'metrics.jsonl', 'summary.json')]
    write_manifest(out_dir, args.command, config, [p for p in artifacts if os.path.exists(p)])
    return EXIT_OK


def cmd_eval(args, config: RunConfig, out_dir: str) -> int:
    checkpoint = ckpt.load(args.checkpoint)
    trainer = Trainer.from_checkpoint(checkpoint)
    if args.dataset:
        dataset = datasets.load(args.dataset)
    else:
        dataset = load_datasets(trainer.config)[1]
    report = trainer.evaluate(dataset)
    logger.info(f"[Main] accuracy {report.accuracy:.4f}, F1 fake {report.fake.f1:.4f}, F1 real {report.real.f1:.4f}")
    path = _write_json(os.path.join(out_dir, 'report.json'), report.to_dict())
    write_manifest(out_dir, args.command, trainer.config, [path], {'checkpoint_sha256': sha256_file(args.checkpoint)})
    return EXIT_OK


def cmd_ablate(args, config: RunConfig, out_dir: str) -> int:
    variants = [v.strip() for v in args.variants.split(',') if v.strip()] if args.variants else None
    train, test = load_datasets(config)
    report = ablate_suite(config, train, test, variants, out_dir)
    paths = [report.write_csv(os.path.join(out_dir, 'ablation_report.csv')),
             _write_json(os.path.join(out_dir, 'ablation_report.json'), report.to_dict())]
    for row in report.table():
        accuracy = 'NA' if row['accuracy'] is None else f"{row['accuracy']:.4f}"
        logger.info(f"[AblationSuite] {row['variant']:<14} accuracy {accuracy} ({row['runs']} run(s), {row['failed']} failed)")
    write_manifest(out_dir, args.command, config, paths)
    return EXIT_OK


def cmd_sweep(args, config: RunConfig, out_dir: str) -> int:
    train, test = load_datasets(config)
    grid = sweep(config, train, test, out_dir=out_dir)
    path = os.path.join(out_dir, 'sweep_grid.csv')
    write_grid(grid, path)
    if not grid.complete:
        logger.warning(f"[Sweep] {len(grid.errors)} cell(s) failed and are marked NA")
    write_manifest(out_dir, args.command, config, [path], {'failed_cells': grid.errors})
    return EXIT_OK


def cmd_gradcheck(args, config: RunConfig, out_dir: str) -> int:
    cases = gradcheck_suite(args.configs, args.samples, args.step, config.training.seed, atol=args.atol)
    worst = max(case.report.max_relative_error for case in cases)
    verdict = max(case.max_error for case in cases)
    path = _write_json(os.path.join(out_dir, 'gradcheck.json'),
                       {'threshold': args.threshold, 'atol': args.atol, 'max_relative_error': worst,
                        'max_error_above_atol': verdict, 'cases': [case.summary() for case in cases]})
    write_manifest(out_dir, args.command, config, [path])
    print(f"max relative error: {worst:.3e}; above atol {args.atol:g}: {verdict:.3e} "
          f"(threshold {args.threshold:g})")
    if verdict > args.threshold:
        raise GradientCheckError(f"max relative error {verdict:.3e} exceeds threshold {args.threshold:g}")
    return EXIT_OK


def cmd_export_embeddings(args, config: RunConfig, out_dir: str) -> int:
    checkpoint = ckpt.load(args.checkpoint)
    run_config = RunConfig.from_dict(checkpoint.config)
    dataset = datasets.load(args.dataset) if args.dataset else load_datasets(run_config)[1]
    path = os.path.join(out_dir, f"embeddings_{args.stage}.csv")
    export_embeddings(checkpoint, dataset, args.stage, path)
    write_manifest(out_dir, args.command, run_config, [path], {'checkpoint_sha256': sha256_file(args.checkpoint)})
    return EXIT_OK


COMMANDS: Dict[str, Callable[..., int]] = {
    'gen-data': cmd_gen_data,
    'train': cmd_train,
    'eval': cmd_eval,
    'ablate': cmd_ablate,
    'sweep': cmd_sweep,
    'gradcheck': cmd_gradcheck,
    'export-embeddings': cmd_export_embeddings,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse argv, run one command and return its exit code."""
    setup_logging()
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as e:
        logger.error(f"[Main] {e}")
        return EXIT_CONFIG
    except SystemExit as e:
        return int(e.code or 0)

    if not args.no_banner:
        print_banner()

    try:
        loader = ConfigLoader(args.config, collect_overrides(args))
        config = loader.to_run_config()
        setup_logging(config.logging.level, config.logging.file, args.verbose)
        loader.log_config()
        out_dir = resolve_out_dir(args)
        logger.info(f"[Main] {args.command}: writing artifacts to {out_dir}")
        return COMMANDS[args.command](args, config, out_dir)
    except ConfigError as e:
        logger.error(f"[Main] Invalid configuration: {e}")
        return EXIT_CONFIG
    except Exception as e:
        logger.error(f"[Main] {args.command} failed: {type(e).__name__}: {e}")
        logger.debug("[Main] traceback", exc_info=True)
        return EXIT_RUNTIME

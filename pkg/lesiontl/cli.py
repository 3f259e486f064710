import argparse
import glob
import json
import logging
import os
import sys

import coloredlogs

from . import version
from .config import ABLATION, COMPARE_ARCHITECTURES, COMPARE_EARLY_STOP, COMPARE_FREEZE, COMPARE_OPTIMIZERS, \
    config_from_dict, default_config_dict, iter_option_descriptions, load_config
from .errors import ConfigError, LesionTLError, SuiteError
from .evaluation import aggregate_reports, read_report, render_table_csv, render_table_text
from .experiment import REPORT_FILE, Experiment
from .utils.env import EnvFallbackDict

logger = logging.getLogger('lesiontl.cli')

# Subcommand -> suite it forces. "run" keeps whatever the config says.
SUITE_COMMANDS = {
    'run': None,
    'compare-arch': COMPARE_ARCHITECTURES,
    'compare-opt': COMPARE_OPTIMIZERS,
    'ablate': ABLATION,
    'compare-freeze': COMPARE_FREEZE,
    'compare-es': COMPARE_EARLY_STOP,
}
SUITE_HELP = {
    'run': 'Run the experiment the config describes.',
    'compare-arch': 'Train and evaluate every configured architecture, then tabulate them.',
    'compare-opt': 'Train the same model with Adam and with SGD.',
    'ablate': 'Retrain with each fully connected head layer removed in turn.',
    'compare-freeze': 'Compare partial fine-tuning against a fully frozen backbone.',
    'compare-es': 'Train with and without early stopping.',
}


def setup_logging(level=None, verbose=False):
    if verbose:
        level = logging.DEBUG

    if level is None:
        level = EnvFallbackDict(None, {}).get('log_level', 'INFO')

    coloredlogs.install(level=level)


def build_parser():
    parser = argparse.ArgumentParser(prog='lesiontl', description='Transfer learning for melanoma vs benign '
                                                                  'skin lesion classification.')
    parser.add_argument('--version', action='version', version='%(prog)s ' + version)
    parser.add_argument('-v', '--verbose', action='store_true', help='Debug logging.')
    parser.add_argument('--log-level', default=None, help='Log level (default: $LESIONTL_LOG_LEVEL or INFO).')
    commands = parser.add_subparsers(dest='command', metavar='command')
    commands.required = True

    for name, suite in SUITE_COMMANDS.items():
        command = commands.add_parser(name, help=SUITE_HELP[name])
        command.add_argument('--config', required=True, help='Experiment config (JSON).')
        command.add_argument('--seed', type=int, default=None, help='Override the config seed.')
        command.add_argument('--output-dir', default=None, help='Override the config output_dir.')
        command.add_argument('--dataset-root', default=None, help='Override the config dataset_root.')
        command.add_argument('--jobs', type=int, default=None, help='Parallel worker processes.')
        command.add_argument('--dry-run', action='store_true', help='Print the plan without training.')
        command.set_defaults(handler=cmd_experiment, suite=suite)

    report = commands.add_parser('report', help='Tabulate existing run reports.')
    report.add_argument('paths', nargs='+', help='report.json files or run directories to search.')
    report.add_argument('--output', default=None, help='Also write the table as CSV.')
    report.set_defaults(handler=cmd_report)

    init = commands.add_parser('init', help='Write a starter config with every option at its default.')
    init.add_argument('dataset_root', help='Directory holding melanoma/ and benign/.')
    init.add_argument('--output', default='experiment.json', help='Config file to create.')
    init.add_argument('--force', action='store_true', help='Overwrite an existing file.')
    init.set_defaults(handler=cmd_init)

    check = commands.add_parser('check', help='Validate a config and list where every option comes from.')
    check.add_argument('--config', default=None, help='Experiment config (JSON).')
    check.add_argument('--options', action='store_true', help='Describe every option.')
    check.set_defaults(handler=cmd_check)
    return parser


def _read_document(path):
    if not path:
        return {}

    try:
        with open(path, encoding='utf-8') as f:
            return json.load(f)

    except (OSError, ValueError) as e:
        raise ConfigError('config', 'could not read %s: %s' % (path, e))


def print_config_error(e, data=None):
    print('ERROR: Some options failed to validate:', file=sys.stderr)
    descriptions = dict((path, (opt, env_key)) for path, opt, env_key, _, _ in iter_option_descriptions(data))
    for k, v in sorted(e.error_dict.items()):
        print('\t%s: %s' % (k, ', '.join(v)), file=sys.stderr)
        if k in descriptions:
            opt, env_key = descriptions[k]
            print('\t * description: %s' % opt.description, file=sys.stderr)
            print('\t * environ key: %s' % env_key, file=sys.stderr)


def cmd_experiment(args):
    config = load_config(args.config, seed=args.seed, output_dir=args.output_dir, dataset_root=args.dataset_root,
                         jobs=args.jobs, suite=args.suite)
    experiment = Experiment(config, jobs=args.jobs)
    if args.dry_run:
        for line in experiment.plan():
            print(line)

        return 0

    try:
        artifacts = experiment.run()

    except SuiteError as e:
        if e.artifacts is not None:
            print(e.artifacts.report_path)

        raise

    print(artifacts.report_path)
    return 0


def _find_reports(paths):
    found = []
    for path in paths:
        if os.path.isdir(path):
            found.extend(sorted(glob.glob(os.path.join(path, '**', REPORT_FILE), recursive=True)))
        else:
            found.append(path)

    return found


def cmd_report(args):
    paths = _find_reports(args.paths)
    if not paths:
        raise LesionTLError('No %s found under %s' % (REPORT_FILE, ', '.join(args.paths)))

    table = aggregate_reports([read_report(p) for p in paths])
    print(render_table_text(table))
    if args.output:
        render_table_csv(table, args.output)
        logger.info('Wrote %s', args.output)

    return 0


def cmd_init(args):
    if os.path.exists(args.output) and not args.force:
        raise ConfigError('output', '%s already exists (use --force to overwrite)' % args.output)

    with open(args.output, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(default_config_dict(args.dataset_root), f, indent=2)
        f.write('\n')

    print('Wrote %s' % args.output)
    return 0


def cmd_check(args):
    data = _read_document(args.config)
    if args.options:
        for path, opt, env_key, source, value in iter_option_descriptions(data):
            print('  * %s:' % path)
            print('     - description: %s' % opt.description)
            if opt.has_default:
                print('     - default:     %s' % (opt.default,))

            print('     - environ key: %s' % env_key)
            print('     - value:       %s (%s)' % (value, source))
            print()

    try:
        config = config_from_dict(data)

    except ConfigError as e:
        print_config_error(e, data)
        return e.exit_code

    print('%s OK (run id %s)' % (args.config or 'defaults', config.run_id))
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level, args.verbose)

    try:
        return args.handler(args)

    except ConfigError as e:
        if e.error_dict:
            print_config_error(e, getattr(args, 'config', None) and _safe_document(args.config))
        else:
            logger.error('%s', e)

        return e.exit_code

    except LesionTLError as e:
        logger.error('%s', e)
        return e.exit_code

    except KeyboardInterrupt:
        logger.warning('Got ^C. Stopping!')
        return 130


def _safe_document(path):
    try:
        return _read_document(path)
    except ConfigError:
        return None

"""
    Experiment configuration.

    An experiment is one JSON file. Every option is declared once with an `Opt`; its value comes from the file,
    else from the environment (``LESIONTL_<SECTION>_<KEY>``), else from the declared default. Validation collects
    every problem into a single ConfigError so they can all be reported at once.
"""
import copy
import hashlib
import json
import logging
import math
import os
from collections import OrderedDict, defaultdict
from dataclasses import asdict, dataclass, replace

from .dataset import BACKBONE_IDS, exact_fraction
from .errors import ConfigError
from .model import FreezePolicy, ModelSpec, check_model_spec
from .training import MONITORS, OPTIMIZER_KINDS, EarlyStopSpec, TrainingConfig
from .utils.env import EnvFallbackDict

logger = logging.getLogger('lesiontl.config')
_sentinel = object()

SINGLE = 'single'
COMPARE_ARCHITECTURES = 'compare_architectures'
COMPARE_OPTIMIZERS = 'compare_optimizers'
ABLATION = 'ablation'
COMPARE_FREEZE = 'compare_freeze'
COMPARE_EARLY_STOP = 'compare_early_stop'
SUITES = (SINGLE, COMPARE_ARCHITECTURES, COMPARE_OPTIMIZERS, ABLATION, COMPARE_FREEZE, COMPARE_EARLY_STOP)
KFOLD_SCOPES = ('train', 'all')


def as_bool(value):
    if isinstance(value, bool):
        return value

    lowered = str(value).strip().lower()
    if lowered in ('1', 'true', 'yes', 'on'):
        return True

    if lowered in ('0', 'false', 'no', 'off'):
        return False

    raise ValueError('not a boolean: %r' % (value,))


def as_int(value):
    if isinstance(value, bool):
        raise ValueError('not an integer: %r' % (value,))

    if isinstance(value, float) and not value.is_integer():
        raise ValueError('not an integer: %r' % (value,))

    return int(value)


def as_float(value):
    if isinstance(value, bool):
        raise ValueError('not a number: %r' % (value,))

    value = float(value)
    if not math.isfinite(value):
        raise ValueError('not a finite number: %r' % (value,))

    return value


def as_optional_float(value):
    if value is None or str(value).strip().lower() in ('', 'null', 'none'):
        return None

    return as_float(value)


def as_optional_str(value):
    if value is None or str(value).strip() == '':
        return None

    return str(value)


def _as_list(value):
    if isinstance(value, str):
        return [v.strip() for v in value.split(',') if v.strip()]

    return list(value)


def as_int_list(value):
    return [as_int(v) for v in _as_list(value)]


def as_str_list(value):
    return [str(v) for v in _as_list(value)]


class Opt(object):
    """
        Stores the metadata for a given option.
    """
    __slots__ = ['name', 'description', 'cast', 'default']

    def __init__(self, name, description, cast=None, default=_sentinel):
        self.name = name
        self.description = description
        self.cast = cast
        self.default = default

    @property
    def has_default(self):
        return self.default is not _sentinel


class OptFallbackDict(EnvFallbackDict):
    """
        An EnvFallbackDict that knows its option definitions: it casts through them and falls back to their
        defaults.
    """

    def __init__(self, section_name, data, definitions):
        super(OptFallbackDict, self).__init__(section_name, data)
        self._opt_definitions = OrderedDict((opt.name, opt) for opt in definitions)

    def __getitem__(self, key):
        try:
            return super(OptFallbackDict, self).__getitem__(key)

        except KeyError:
            opt = self._opt_definitions.get(key)
            if opt is not None and opt.has_default:
                return copy.deepcopy(opt.default)

        raise KeyError(key)

    def __contains__(self, item):
        if super(OptFallbackDict, self).__contains__(item):
            return True

        opt = self._opt_definitions.get(item)
        return opt is not None and opt.has_default

    def cast_val(self, key, val):
        opt = self._opt_definitions.get(key)
        if opt is not None and opt.cast:
            return opt.cast(val)

        return val

    def source_of(self, key):
        if key in self._data and self._data[key] is not None:
            return 'file'

        if self.environ_key(key) in os.environ:
            return 'environ'

        return 'default'


# Section path -> option definitions. A section path "model.freeze" reads `config["model"]["freeze"]` and falls
# back to LESIONTL_MODEL_FREEZE_<KEY>.
OPTIONS = OrderedDict([
    ('', [
        Opt('dataset_root', 'Directory holding melanoma/ and benign/ image folders.', str),
        Opt('output_dir', 'Where run directories are created.', str, 'runs'),
        Opt('seed', 'Seed every random choice of the run derives from.', as_int, 0),
        Opt('suite', 'Experiment suite: %s.' % ', '.join(SUITES), str, SINGLE),
        Opt('architectures', 'Backbones compared by compare_architectures.', as_str_list, list(BACKBONE_IDS)),
        Opt('jobs', 'Parallel worker processes for suite members and folds.', as_int, 1),
    ]),
    ('dataset', [
        Opt('balancing_ratio', 'Majority class is downsampled to at most ceil(ratio * minority).', as_float, 1.12),
        Opt('workers', 'Threads used to decode images while building the manifest.', as_int, 1),
    ]),
    ('split', [
        Opt('test_fraction', 'Share of the manifest held out for testing.', as_float, 0.3),
        Opt('stratified', 'Keep class proportions in the train/test split.', as_bool, True),
        Opt('val_fraction', 'Share of the training side carved out for validation.', as_float, 0.15),
    ]),
    ('kfold', [
        Opt('enabled', 'Run K-fold cross-validation as part of the run.', as_bool, False),
        Opt('k', 'Number of folds.', as_int, 10),
        Opt('stratified', 'Keep class proportions in every fold.', as_bool, True),
        Opt('scope', 'Cross-validate the training images only ("train") or the whole manifest ("all").', str,
            'train'),
    ]),
    ('model', [
        Opt('backbone_id', 'Backbone: %s, or a dotted path to a builder.' % ', '.join(BACKBONE_IDS), str, 'vgg19'),
        Opt('pretrained', 'Load ImageNet weights from the weight cache.', as_bool, True),
        Opt('num_classes', 'Output neurons.', as_int, 2),
        Opt('dropout_rate', 'Dropout after every fully connected head layer.', as_float, 0.5),
        Opt('head_widths', 'Widths of the fully connected head layers before the output layer.', as_int_list,
            [4096, 4096]),
        Opt('input_size', 'Square input side the network is summarized at.', as_int, 224),
        Opt('weights_path', 'Pretrained weight file; defaults to $LESIONTL_CACHE/<backbone_id>.pth.',
            as_optional_str, None),
        Opt('ablated_layers', 'Head layers (fc1, fc2...) left out of the network.', as_str_list, []),
    ]),
    ('model.freeze', [
        Opt('freeze_first_n', 'Earliest weight-bearing backbone layers kept frozen.', as_int, 3),
        Opt('freeze_backbone_rest', 'Freeze the rest of the backbone as well.', as_bool, False),
    ]),
    ('training', [
        Opt('optimizer_kind', 'Optimizer: %s.' % ', '.join(OPTIMIZER_KINDS), str, 'adam'),
        Opt('learning_rate', 'Learning rate; null picks 1e-4 for adam and 1e-2 for sgd.', as_optional_float, None),
        Opt('momentum', 'SGD momentum.', as_float, 0.9),
        Opt('max_epochs', 'Epoch budget.', as_int, 100),
        Opt('batch_size', 'Mini-batch size.', as_int, 32),
        Opt('checkpoint_every', 'Write checkpoints/epoch_<E>/ every this many epochs (0: best only).', as_int, 0),
    ]),
    ('training.early_stopping', [
        Opt('enabled', 'Stop when the monitored metric stops improving.', as_bool, True),
        Opt('monitor', 'Monitored metric: %s.' % ', '.join(MONITORS), str, 'val_loss'),
        Opt('patience', 'Epochs without improvement tolerated.', as_int, 10),
        Opt('min_delta', 'Smallest change that counts as an improvement.', as_float, 0.0),
        Opt('restore_best', 'Restore the best epoch weights when training ends.', as_bool, True),
    ]),
])

_validators = defaultdict(list)


def opt_validator(section, *names):
    """
        Registers a validator for options of a section. It is called with the option value and must raise
        ConfigError (with just a message) when the value is unacceptable.
    """

    def register_validator(callback):
        for name in names:
            _validators[(section, name)].append(callback)

        return callback

    return register_validator


def _at_least(minimum):
    def check(value):
        if value < minimum:
            raise ConfigError('must be >= %s' % minimum)

    return check


def _one_of(choices):
    def check(value):
        if value not in choices:
            raise ConfigError('must be one of %s' % ', '.join(choices))

    return check


opt_validator('', 'seed')(_at_least(0))
opt_validator('', 'jobs')(_at_least(1))
opt_validator('', 'suite')(_one_of(SUITES))
opt_validator('dataset', 'workers')(_at_least(1))
opt_validator('kfold', 'k')(_at_least(2))
opt_validator('kfold', 'scope')(_one_of(KFOLD_SCOPES))
opt_validator('model', 'num_classes')(_at_least(2))
opt_validator('model.freeze', 'freeze_first_n')(_at_least(0))
opt_validator('training', 'optimizer_kind')(_one_of(OPTIMIZER_KINDS))
opt_validator('training', 'max_epochs')(_at_least(1))
opt_validator('training', 'batch_size')(_at_least(1))
opt_validator('training', 'checkpoint_every')(_at_least(0))
opt_validator('training.early_stopping', 'monitor')(_one_of(MONITORS))
opt_validator('training.early_stopping', 'patience')(_at_least(0))
opt_validator('training.early_stopping', 'min_delta')(_at_least(0))


@opt_validator('dataset', 'balancing_ratio')
def _validate_ratio(value):
    if exact_fraction(value) < 1:
        raise ConfigError('must be >= 1')


@opt_validator('split', 'test_fraction')
def _validate_test_fraction(value):
    if not 0 <= value <= 1:
        raise ConfigError('must be within [0, 1]')


@opt_validator('split', 'val_fraction')
def _validate_val_fraction(value):
    if not 0 < value < 1:
        raise ConfigError('must be within (0, 1)')


@opt_validator('model', 'backbone_id')
def _validate_backbone(value):
    if value not in BACKBONE_IDS and '.' not in value:
        raise ConfigError('must be one of %s or a dotted path' % ', '.join(BACKBONE_IDS))


@opt_validator('', 'architectures')
def _validate_architectures(value):
    if not value:
        raise ConfigError('at least one architecture is required')

    for backbone_id in value:
        _validate_backbone(backbone_id)


@opt_validator('model', 'dropout_rate')
def _validate_dropout(value):
    if not 0 <= value < 1:
        raise ConfigError('must be within [0, 1)')


@opt_validator('model', 'head_widths')
def _validate_head_widths(value):
    if not value:
        raise ConfigError('at least one fully connected layer is required')

    if any(w < 1 for w in value):
        raise ConfigError('widths must be positive')


@opt_validator('training', 'learning_rate')
def _validate_learning_rate(value):
    if value is not None and not value > 0:
        raise ConfigError('must be positive')


@opt_validator('training', 'momentum')
def _validate_momentum(value):
    if not 0 <= value < 1:
        raise ConfigError('must be within [0, 1)')


@dataclass(frozen=True)
class DatasetSettings:
    balancing_ratio: float = 1.12
    workers: int = 1


@dataclass(frozen=True)
class SplitSettings:
    test_fraction: float = 0.3
    stratified: bool = True
    val_fraction: float = 0.15


@dataclass(frozen=True)
class KFoldSettings:
    enabled: bool = False
    k: int = 10
    stratified: bool = True
    scope: str = 'train'


@dataclass(frozen=True)
class ExperimentConfig:
    dataset_root: str
    output_dir: str
    model: ModelSpec
    training: TrainingConfig
    split: SplitSettings
    kfold: KFoldSettings
    dataset: DatasetSettings
    suite: str = SINGLE
    seed: int = 0
    architectures: tuple = BACKBONE_IDS
    jobs: int = 1

    def as_dict(self):
        """
            Canonical, JSON-compatible form. The config hash and the snapshot are taken from this.
        """
        return {
            'dataset_root': self.dataset_root,
            'output_dir': self.output_dir,
            'seed': self.seed,
            'suite': self.suite,
            'architectures': list(self.architectures),
            'jobs': self.jobs,
            'dataset': asdict(self.dataset),
            'split': asdict(self.split),
            'kfold': asdict(self.kfold),
            'model': self.model.as_dict(),
            'training': _training_dict(self.training),
        }

    def canonical_json(self):
        return json.dumps(self.as_dict(), sort_keys=True, indent=2) + '\n'

    @property
    def config_hash(self):
        # Jobs only changes scheduling, never results.
        data = self.as_dict()
        data.pop('jobs')
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode('utf-8')).hexdigest()

    @property
    def run_id(self):
        return '%s-%d-%s' % (self.suite, self.seed, self.config_hash[:8])


def _training_dict(training):
    data = asdict(training)
    # The seed lives at the top level.
    data.pop('seed')
    return data


def _section_data(data, section, errors):
    node = data
    if not section:
        return node

    for part in section.split('.'):
        node = node.get(part, {}) if isinstance(node, dict) else {}
        if node is None:
            node = {}

        if not isinstance(node, dict):
            errors[section].append('must be an object')
            return {}

    return node


def _nested_keys(section):
    prefix = section + '.' if section else ''
    return set(name[len(prefix):].split('.')[0] for name in OPTIONS if name and name.startswith(prefix))


def resolve_options(data):
    """
        Resolves every declared option. Returns {section: {name: value}} or raises ConfigError listing every
        violated field.
    """
    errors = defaultdict(list)
    resolved = OrderedDict()
    for section, definitions in OPTIONS.items():
        raw = _section_data(data, section, errors)
        opts = OptFallbackDict(section.replace('.', '_'), raw, definitions)
        values = resolved.setdefault(section, OrderedDict())
        prefix = section + '.' if section else ''

        known = set(opt.name for opt in definitions) | _nested_keys(section)
        for key in sorted(set(raw) - known):
            errors[prefix + key].append('Unknown option.')

        for opt in definitions:
            path = prefix + opt.name
            try:
                values[opt.name] = opts[opt.name]

            except KeyError:
                errors[path].append('This option is required.')
                continue

            except (ValueError, TypeError) as e:
                errors[path].append('Could not parse: %s' % e)
                continue

            for validator in _validators.get((section, opt.name), ()):
                try:
                    validator(values[opt.name])

                except ConfigError as e:
                    errors[path].append(e.variable_name if e.error_message is None else e.error_message)

    if errors:
        raise ConfigError(dict(errors))

    return resolved


def config_from_dict(data, **overrides):
    """
        Builds an ExperimentConfig from a parsed JSON document. Top-level `overrides` (seed, output_dir, jobs,
        suite...) that are not None replace the document's values before validation.
    """
    data = copy.deepcopy(data) if data else {}
    for key, value in overrides.items():
        if value is not None:
            data[key] = value

    values = resolve_options(data)
    top = values['']
    model = values['model']
    training = values['training']

    model_spec = ModelSpec(
        backbone_id=model['backbone_id'],
        pretrained=model['pretrained'],
        num_classes=model['num_classes'],
        dropout_rate=model['dropout_rate'],
        head_widths=tuple(model['head_widths']),
        freeze=FreezePolicy(**values['model.freeze']),
        input_size=model['input_size'],
        weights_path=model['weights_path'],
        ablated_layers=tuple(model['ablated_layers']),
    )
    errors = check_model_spec(model_spec)
    if top['suite'] == COMPARE_ARCHITECTURES:
        for backbone_id in top['architectures']:
            for messages in check_model_spec(replace(model_spec, backbone_id=backbone_id)).values():
                errors.setdefault('architectures', []).extend('%s: %s' % (backbone_id, m) for m in messages)

    if errors:
        raise ConfigError(errors)

    training_config = TrainingConfig(
        optimizer_kind=training['optimizer_kind'],
        learning_rate=training['learning_rate'],
        momentum=training['momentum'],
        max_epochs=training['max_epochs'],
        batch_size=training['batch_size'],
        early_stopping=EarlyStopSpec(**values['training.early_stopping']),
        seed=top['seed'],
        checkpoint_every=training['checkpoint_every'],
    )
    return ExperimentConfig(
        dataset_root=top['dataset_root'],
        output_dir=top['output_dir'],
        model=model_spec,
        training=training_config,
        split=SplitSettings(**values['split']),
        kfold=KFoldSettings(**values['kfold']),
        dataset=DatasetSettings(**values['dataset']),
        suite=top['suite'],
        seed=top['seed'],
        architectures=tuple(top['architectures']),
        jobs=top['jobs'],
    )


def load_config(path, **overrides):
    try:
        with open(path, encoding='utf-8') as f:
            data = json.load(f)

    except (OSError, ValueError) as e:
        raise ConfigError('config', 'could not read %s: %s' % (path, e))

    if not isinstance(data, dict):
        raise ConfigError('config', '%s must hold a JSON object' % path)

    logger.debug('Loaded config %s', path)
    return config_from_dict(data, **overrides)


def iter_option_descriptions(data=None):
    """
        Yields (path, opt, environ key, source, value or None) for every declared option.
    """
    data = data or {}
    errors = defaultdict(list)
    for section, definitions in OPTIONS.items():
        opts = OptFallbackDict(section.replace('.', '_'), _section_data(data, section, errors), definitions)
        prefix = section + '.' if section else ''
        for opt in definitions:
            try:
                value = opts[opt.name]
            except (KeyError, ValueError, TypeError):
                value = None

            yield prefix + opt.name, opt, opts.environ_key(opt.name), opts.source_of(opt.name), value


def default_config_dict(dataset_root):
    """
        A complete starter document with every option at its default.
    """
    document = OrderedDict()
    for section, definitions in OPTIONS.items():
        node = document
        for part in filter(None, section.split('.')):
            node = node.setdefault(part, OrderedDict())

        for opt in definitions:
            if opt.has_default:
                node[opt.name] = copy.deepcopy(opt.default)

    document['dataset_root'] = dataset_root
    return document

"""
    Evaluation: confusion-matrix metrics with melanoma as the positive class, K-fold cross-validation and the
    per-architecture comparison table.
"""
import json
import logging
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction

import numpy as np
import pandas as pd
from humanfriendly.tables import format_pretty_table
from sklearn.metrics import confusion_matrix

from .dataset import BENIGN, INDEX_CLASS, LABELS, MELANOMA, DatasetManifest, LesionDataset, carve_validation
from .errors import DivergenceError, LesionTLError, SchemaError, ShapeError, UndefinedMetricError
from .model import build_model
from .training import predict_proba, train, write_history_csv

logger = logging.getLogger('lesiontl.evaluation')

SCHEMA_VERSION = 1
METRICS = ('accuracy', 'sensitivity', 'specificity')
METRIC_DEFINITIONS = {
    'positive_class': MELANOMA,
    'accuracy': '(tp + tn) / (tp + fp + tn + fn)',
    'sensitivity': 'tp / (tp + fn)',
    'specificity': 'tn / (tn + fp)',
    'prediction': 'argmax of softmax, ties to benign',
    'std': 'population (divide by number of successful folds)',
}
TABLE_COLUMNS = ['architecture', 'train_accuracy', 'val_accuracy', 'test_accuracy', 'kfold_accuracy',
                 'test_sensitivity', 'test_specificity']


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricSet:
    accuracy: float
    sensitivity: float
    specificity: float


@dataclass(frozen=True)
class FoldResult:
    fold_index: int
    metrics: MetricSet = None
    confusion: ConfusionMatrix = None
    history_ref: str = None
    failed: bool = False
    error: str = None


@dataclass(frozen=True)
class EvaluationReport:
    architecture: str
    per_fold: tuple = ()
    mean_metrics: MetricSet = None
    std_metrics: MetricSet = None
    test_metrics: MetricSet = None
    test_confusion: ConfusionMatrix = None
    train_accuracy: float = None
    val_accuracy: float = None
    config_digest: str = ''
    failed_folds: int = 0
    details: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION


def confusion_from_predictions(labels, predicted):
    """
        Counts (label, prediction) pairs with melanoma as the positive class.
    """
    labels = list(labels)
    predicted = list(predicted)
    if len(labels) != len(predicted):
        raise ShapeError('%d labels but %d predictions' % (len(labels), len(predicted)))

    if not labels:
        raise ShapeError('Nothing to evaluate')

    unknown = (set(labels) | set(predicted)) - set(LABELS)
    if unknown:
        raise ShapeError('Unknown classes: %s' % ', '.join(sorted(map(str, unknown))))

    tn, fp, fn, tp = confusion_matrix(labels, predicted, labels=[BENIGN, MELANOMA]).ravel()
    return ConfusionMatrix(int(tp), int(fp), int(tn), int(fn))


def metrics_from_confusion(cm):
    """
        Accuracy, sensitivity and specificity, computed as exact fractions and rendered as floats.
    """
    if cm.tp + cm.fn == 0:
        raise UndefinedMetricError('sensitivity', 'no melanoma samples were evaluated')

    if cm.tn + cm.fp == 0:
        raise UndefinedMetricError('specificity', 'no benign samples were evaluated')

    return MetricSet(float(Fraction(cm.tp + cm.tn, cm.total)),
                     float(Fraction(cm.tp, cm.tp + cm.fn)),
                     float(Fraction(cm.tn, cm.tn + cm.fp)))


def predict_labels(probabilities):
    """
        argmax over class probabilities. Benign is class index 0, so ties go to benign.
    """
    return [INDEX_CLASS[int(i)] for i in np.argmax(np.asarray(probabilities), axis=1)]


@dataclass(frozen=True)
class FoldTask:
    fold_index: int
    train_samples: tuple
    eval_samples: tuple
    model_spec: object
    training_config: object
    preprocess_spec: object
    val_fraction: float = 0.15
    output_dir: str = None


@dataclass(frozen=True)
class FoldOutcome:
    predicted: list
    history_ref: str = None


def train_fold(task):
    """
        Default fold trainer: fresh model built from `model_spec`, validation carved from the training side, trained and
        then asked for predictions on the held-out fold.
    """
    seed = task.training_config.seed
    manifest = DatasetManifest(tuple(task.train_samples), seed)
    train_ids, val_ids = carve_validation(manifest, task.val_fraction, seed)
    model, _ = build_model(task.model_spec, seed=seed)
    trained = train(model, LesionDataset(manifest.select(train_ids), task.preprocess_spec),
                    LesionDataset(manifest.select(val_ids), task.preprocess_spec), task.training_config)

    history_ref = None
    if task.output_dir:
        os.makedirs(task.output_dir, exist_ok=True)
        history_ref = write_history_csv(trained.history, os.path.join(task.output_dir, 'history.csv'))

    probabilities = predict_proba(trained.model, LesionDataset(task.eval_samples, task.preprocess_spec),
                                  task.training_config.batch_size)
    return FoldOutcome(predict_labels(probabilities), history_ref)


def _run_tasks(fold_trainer, tasks, jobs):
    """
        Yields (task, outcome or exception) per task, in fold order.
    """
    if jobs > 1:
        context = multiprocessing.get_context('spawn')
        with ProcessPoolExecutor(max_workers=jobs, mp_context=context) as pool:
            futures = [pool.submit(fold_trainer, task) for task in tasks]
            for task, future in zip(tasks, futures):
                try:
                    yield task, future.result()
                except LesionTLError as e:
                    yield task, e

    else:
        for task in tasks:
            try:
                yield task, fold_trainer(task)
            except LesionTLError as e:
                yield task, e


def kfold_cross_validate(manifest, fold_plan, model_spec, training_config, preprocess_spec=None,
                         fold_trainer=train_fold, output_dir=None, val_fraction=0.15, jobs=1, config_digest='',
                         architecture=None):
    """
        For each fold f, trains a fresh model on every id outside f (seed = base seed + f) and evaluates it on f.

        Folds whose training diverges are marked failed and left out of the mean and population standard
        deviation.
    """
    samples_by_id = {s.id: s for s in manifest.samples}
    missing = fold_plan.ids - set(samples_by_id)
    if missing:
        raise ShapeError('Fold plan names %d ids missing from the manifest' % len(missing))

    tasks = []
    for f in range(fold_plan.k):
        eval_ids = fold_plan.fold(f)
        train_ids = fold_plan.outside(f)
        assert not (eval_ids & train_ids), 'fold %d leaks ids into its training side' % f
        tasks.append(FoldTask(
            fold_index=f,
            train_samples=tuple(samples_by_id[i] for i in sorted(train_ids)),
            eval_samples=tuple(samples_by_id[i] for i in sorted(eval_ids)),
            model_spec=model_spec,
            training_config=replace(training_config, seed=training_config.seed + f),
            preprocess_spec=preprocess_spec,
            val_fraction=val_fraction,
            output_dir=os.path.join(output_dir, 'fold_%d' % f) if output_dir else None,
        ))

    results = []
    for task, outcome in _run_tasks(fold_trainer, tasks, jobs):
        if isinstance(outcome, Exception):
            if not isinstance(outcome, DivergenceError):
                raise outcome

            logger.warning('Fold %d failed: %s', task.fold_index, outcome)
            results.append(FoldResult(task.fold_index, failed=True, error=str(outcome)))
            continue

        cm = confusion_from_predictions([s.label for s in task.eval_samples], outcome.predicted)
        metrics = metrics_from_confusion(cm)
        logger.info('Fold %d/%d: accuracy %.4f sensitivity %.4f specificity %.4f', task.fold_index + 1,
                    fold_plan.k, metrics.accuracy, metrics.sensitivity, metrics.specificity)
        results.append(FoldResult(task.fold_index, metrics, cm, outcome.history_ref))

    mean_metrics, std_metrics = aggregate_folds(results)
    failed = sum(1 for r in results if r.failed)
    if failed:
        logger.warning('%d of %d folds failed and are excluded from the aggregate', failed, fold_plan.k)

    return EvaluationReport(
        architecture=architecture or model_spec.backbone_id,
        per_fold=tuple(results),
        mean_metrics=mean_metrics,
        std_metrics=std_metrics,
        config_digest=config_digest,
        failed_folds=failed,
        details={'k': fold_plan.k, 'metric_definitions': METRIC_DEFINITIONS},
    )


def aggregate_folds(results):
    """
        Mean and population standard deviation of every metric over the successful folds.
    """
    succeeded = [r.metrics for r in results if not r.failed]
    if not succeeded:
        return None, None

    values = {m: np.array([getattr(s, m) for s in succeeded], dtype=np.float64) for m in METRICS}
    mean = MetricSet(**{m: float(np.mean(v)) for m, v in values.items()})
    std = MetricSet(**{m: float(np.std(v, ddof=0)) for m, v in values.items()})
    return mean, std


def report_to_dict(report):
    return asdict(report)


def _metric_set(data):
    return MetricSet(**data) if data is not None else None


def _confusion(data):
    return ConfusionMatrix(**data) if data is not None else None


def report_from_dict(data):
    if data.get('schema_version') != SCHEMA_VERSION:
        raise SchemaError('Unsupported report schema_version %r' % data.get('schema_version'))

    try:
        folds = tuple(FoldResult(f['fold_index'], _metric_set(f.get('metrics')), _confusion(f.get('confusion')),
                                 f.get('history_ref'), f.get('failed', False), f.get('error'))
                      for f in data.get('per_fold', ()))
        return EvaluationReport(
            architecture=data['architecture'],
            per_fold=folds,
            mean_metrics=_metric_set(data.get('mean_metrics')),
            std_metrics=_metric_set(data.get('std_metrics')),
            test_metrics=_metric_set(data.get('test_metrics')),
            test_confusion=_confusion(data.get('test_confusion')),
            train_accuracy=data.get('train_accuracy'),
            val_accuracy=data.get('val_accuracy'),
            config_digest=data.get('config_digest', ''),
            failed_folds=data.get('failed_folds', 0),
            details=data.get('details', {}),
            schema_version=data['schema_version'],
        )

    except (KeyError, TypeError) as e:
        raise SchemaError('Malformed report: %s' % e)


def write_report(report, path):
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(report_to_dict(report), f, indent=2, sort_keys=True)
        f.write('\n')

    return path


def read_report(path):
    with open(path, encoding='utf-8') as f:
        return report_from_dict(json.load(f))


def _percent(value):
    if value is None:
        return '-'

    return '%.2f' % (100.0 * value)


def aggregate_reports(reports):
    """
        One row per architecture: train / validation / test / k-fold accuracy, test sensitivity and test
        specificity, as percentages with two decimals.
    """
    reports = [report_from_dict(r) if isinstance(r, dict) else r for r in reports]
    if not reports:
        raise SchemaError('Nothing to aggregate')

    versions = set(r.schema_version for r in reports)
    if versions != {SCHEMA_VERSION}:
        raise SchemaError('Heterogeneous report schemas: %s' % ', '.join(sorted(map(str, versions))))

    rows = []
    for report in reports:
        test = report.test_metrics
        rows.append([
            report.architecture,
            _percent(report.train_accuracy),
            _percent(report.val_accuracy),
            _percent(test.accuracy if test else None),
            _percent(report.mean_metrics.accuracy if report.mean_metrics else None),
            _percent(test.sensitivity if test else None),
            _percent(test.specificity if test else None),
        ])

    return pd.DataFrame(rows, columns=TABLE_COLUMNS)


def render_table_csv(table, path):
    table.to_csv(path, index=False, encoding='utf-8', lineterminator='\n')
    return path


def render_table_text(table):
    return format_pretty_table(table.values.tolist(), column_names=list(table.columns))
